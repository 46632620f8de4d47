#include "lpgan/serialize.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <vector>

#include "lpgan/errors.hpp"

namespace lpgan::nta {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "payload files are little-endian and written by memcpy");

namespace {

// Tensor names become payload filenames; anything outside the safe set maps
// to '_'. Names within one archive stay distinct in practice (dots, letters,
// digits), collisions would fail the round-trip tests.
std::string payload_name(const std::string& name) {
  std::string out = name;
  for (char& c : out) {
    const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') ||
                    (c >= '0' && c <= '9') || c == '.' || c == '_' || c == '-';
    if (!ok) c = '_';
  }
  return out + ".bin";
}

uint32_t crc_of(const void* data, size_t len) {
  uLong c = crc32_z(0L, Z_NULL, 0);
  c = crc32_z(c, static_cast<const Bytef*>(data), len);
  return static_cast<uint32_t>(c);
}

std::vector<char> read_file(const fs::path& p, const std::string& tensor) {
  std::ifstream in(p, std::ios::binary);
  if (!in)
    throw IntegrityError("tensor " + tensor + ": payload file missing (" +
                         p.string() + ")");
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)),
                          std::istreambuf_iterator<char>());
  if (!in.good() && !in.eof())
    throw IntegrityError("tensor " + tensor + ": payload read failed");
  return bytes;
}

}  // namespace

void save_archive(const std::string& dir, const Archive& a) {
  fs::create_directories(dir);
  json entries = json::array();
  for (const auto& [name, t] : a.tensors) {
    const std::string file = payload_name(name);
    const size_t bytes = static_cast<size_t>(t.size()) * sizeof(float);
    std::ofstream out(fs::path(dir) / file, std::ios::binary);
    if (!out) throw DataError("cannot write " + (fs::path(dir) / file).string());
    out.write(reinterpret_cast<const char*>(t.ptr()),
              static_cast<std::streamsize>(bytes));
    if (!out) throw DataError("short write on " + file);
    out.close();

    json e;
    e["name"] = name;
    e["dtype"] = "f32";
    e["shape"] = t.shape;
    e["file"] = file;
    e["byte_length"] = bytes;
    e["crc32"] = crc_of(t.ptr(), bytes);
    entries.push_back(std::move(e));
  }

  json m;
  m["format_version"] = 1;
  m["step"] = a.step;
  m["rng_state"] = a.rng_state;
  if (!a.config.is_null()) m["config"] = a.config;
  m["entries"] = std::move(entries);

  std::ofstream out(fs::path(dir) / "manifest.json", std::ios::binary);
  if (!out) throw DataError("cannot write manifest.json in " + dir);
  out << m.dump(2) << "\n";
}

Archive load_archive(const std::string& dir) {
  std::ifstream in(fs::path(dir) / "manifest.json", std::ios::binary);
  if (!in) throw DataError("no manifest.json in " + dir);
  json m;
  try {
    in >> m;
  } catch (const json::exception& e) {
    throw DataError("manifest.json in " + dir + " is not valid JSON: " +
                    e.what());
  }

  if (!m.contains("format_version") || !m["format_version"].is_number_integer())
    throw DataError("manifest.json: missing format_version");
  if (m["format_version"].get<int>() != 1)
    throw DataError("manifest.json: unsupported format_version " +
                    m["format_version"].dump());

  Archive a;
  a.step = m.value("step", int64_t{0});
  a.rng_state = m.value("rng_state", std::string{});
  if (m.contains("config")) a.config = m["config"];

  if (!m.contains("entries") || !m["entries"].is_array())
    throw DataError("manifest.json: missing entries array");
  for (const json& e : m["entries"]) {
    if (!e.contains("name") || !e["name"].is_string())
      throw DataError("manifest.json: entry without a name");
    const std::string name = e["name"].get<std::string>();
    if (a.tensors.count(name))
      throw DataError("manifest.json: duplicate tensor " + name);
    if (e.value("dtype", std::string{}) != "f32")
      throw DataError("tensor " + name + ": unsupported dtype");

    std::vector<int> shape;
    for (const json& d : e.value("shape", json::array())) {
      if (!d.is_number_integer() || d.get<int64_t>() <= 0)
        throw DataError("tensor " + name + ": bad shape extent");
      shape.push_back(d.get<int>());
    }
    const int64_t want_bytes =
        nn::Tensor::count(shape) * static_cast<int64_t>(sizeof(float));
    const int64_t claimed = e.value("byte_length", int64_t{-1});
    if (claimed != want_bytes)
      throw IntegrityError("tensor " + name + ": byte_length " +
                           std::to_string(claimed) + " does not match shape (" +
                           std::to_string(want_bytes) + " expected)");

    const std::string file = e.value("file", std::string{});
    if (file.empty() || file.find('/') != std::string::npos ||
        file.find("..") != std::string::npos)
      throw DataError("tensor " + name + ": bad payload filename");
    const std::vector<char> bytes = read_file(fs::path(dir) / file, name);
    if (static_cast<int64_t>(bytes.size()) != want_bytes)
      throw IntegrityError("tensor " + name + ": payload is " +
                           std::to_string(bytes.size()) + " bytes, expected " +
                           std::to_string(want_bytes));
    const uint32_t crc = crc_of(bytes.data(), bytes.size());
    if (crc != e.value("crc32", uint64_t{0}))
      throw IntegrityError("tensor " + name + ": crc mismatch");

    nn::Tensor t(shape);
    std::memcpy(t.ptr(), bytes.data(), bytes.size());
    a.tensors.emplace(name, std::move(t));
  }
  return a;
}

}  // namespace lpgan::nta
