#include "lpgan/png_io.hpp"

#include <zlib.h>

#include <cstdlib>
#include <cstring>
#include <fstream>

#include "lpgan/errors.hpp"

namespace lpgan::png {

namespace {

constexpr uint8_t kSig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back(static_cast<uint8_t>(v >> 24));
  out.push_back(static_cast<uint8_t>(v >> 16));
  out.push_back(static_cast<uint8_t>(v >> 8));
  out.push_back(static_cast<uint8_t>(v));
}

uint32_t get_u32(const uint8_t* p) {
  return (uint32_t(p[0]) << 24) | (uint32_t(p[1]) << 16) |
         (uint32_t(p[2]) << 8) | uint32_t(p[3]);
}

void put_chunk(std::vector<uint8_t>& out, const char type[4],
               const std::vector<uint8_t>& data) {
  put_u32(out, static_cast<uint32_t>(data.size()));
  const size_t crc_start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), data.begin(), data.end());
  uLong crc = crc32_z(0L, Z_NULL, 0);
  crc = crc32_z(crc, out.data() + crc_start, out.size() - crc_start);
  put_u32(out, static_cast<uint32_t>(crc));
}

int paeth(int a, int b, int c) {
  const int p = a + b - c;
  const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
  if (pa <= pb && pa <= pc) return a;
  if (pb <= pc) return b;
  return c;
}

}  // namespace

void write_rgb8(const std::string& path, const Image& img) {
  if (img.width <= 0 || img.height <= 0)
    throw ConfigError("png: empty image");
  const size_t want = static_cast<size_t>(img.width) * img.height * 3;
  if (img.rgb.size() != want)
    throw ConfigError("png: pixel buffer size does not match dimensions");

  std::vector<uint8_t> ihdr;
  put_u32(ihdr, static_cast<uint32_t>(img.width));
  put_u32(ihdr, static_cast<uint32_t>(img.height));
  ihdr.push_back(8);  // bit depth
  ihdr.push_back(2);  // truecolor
  ihdr.push_back(0);  // deflate
  ihdr.push_back(0);  // adaptive filtering
  ihdr.push_back(0);  // no interlace

  // Filter type 0 on every scanline; zlib still squeezes flat regions well.
  const size_t stride = static_cast<size_t>(img.width) * 3;
  std::vector<uint8_t> raw((stride + 1) * static_cast<size_t>(img.height));
  for (int y = 0; y < img.height; ++y) {
    raw[(stride + 1) * y] = 0;
    std::memcpy(&raw[(stride + 1) * y + 1], &img.rgb[stride * y], stride);
  }
  uLongf zlen = compressBound(static_cast<uLong>(raw.size()));
  std::vector<uint8_t> z(zlen);
  if (compress2(z.data(), &zlen, raw.data(), static_cast<uLong>(raw.size()),
                6) != Z_OK)
    throw NumericError("png: deflate failed");
  z.resize(zlen);

  std::vector<uint8_t> out(kSig, kSig + 8);
  put_chunk(out, "IHDR", ihdr);
  put_chunk(out, "IDAT", z);
  put_chunk(out, "IEND", {});

  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("png: cannot write " + path);
  f.write(reinterpret_cast<const char*>(out.data()),
          static_cast<std::streamsize>(out.size()));
  if (!f) throw DataError("png: short write on " + path);
}

Image read_rgb8(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("png: cannot open " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                             std::istreambuf_iterator<char>());
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kSig, 8) != 0)
    throw DataError("png: bad signature in " + path);

  Image img;
  std::vector<uint8_t> idat;
  bool saw_ihdr = false, saw_iend = false;
  size_t pos = 8;
  while (pos + 12 <= bytes.size() && !saw_iend) {
    const uint32_t len = get_u32(&bytes[pos]);
    if (pos + 12 + len > bytes.size())
      throw DataError("png: truncated chunk in " + path);
    const char* type = reinterpret_cast<const char*>(&bytes[pos + 4]);
    const uint8_t* data = &bytes[pos + 8];

    uLong crc = crc32_z(0L, Z_NULL, 0);
    crc = crc32_z(crc, &bytes[pos + 4], 4 + len);
    if (static_cast<uint32_t>(crc) != get_u32(&bytes[pos + 8 + len]))
      throw IntegrityError("png: crc mismatch in " +
                           std::string(type, type + 4) + " chunk of " + path);

    if (std::memcmp(type, "IHDR", 4) == 0) {
      if (len != 13) throw DataError("png: bad IHDR length");
      img.width = static_cast<int>(get_u32(data));
      img.height = static_cast<int>(get_u32(data + 4));
      if (img.width <= 0 || img.height <= 0)
        throw DataError("png: bad dimensions");
      if (data[8] != 8 || data[9] != 2)
        throw DataError("png: only 8-bit truecolor is supported");
      if (data[12] != 0) throw DataError("png: interlace is not supported");
      saw_ihdr = true;
    } else if (std::memcmp(type, "IDAT", 4) == 0) {
      if (!saw_ihdr) throw DataError("png: IDAT before IHDR");
      idat.insert(idat.end(), data, data + len);
    } else if (std::memcmp(type, "IEND", 4) == 0) {
      saw_iend = true;
    }
    // Ancillary chunks are skipped.
    pos += 12 + len;
  }
  if (!saw_ihdr || !saw_iend) throw DataError("png: missing IHDR or IEND");

  const size_t stride = static_cast<size_t>(img.width) * 3;
  std::vector<uint8_t> raw((stride + 1) * static_cast<size_t>(img.height));
  uLongf rlen = static_cast<uLongf>(raw.size());
  const int rc = uncompress(raw.data(), &rlen, idat.data(),
                            static_cast<uLong>(idat.size()));
  if (rc != Z_OK || rlen != raw.size())
    throw DataError("png: inflate failed for " + path);

  img.rgb.assign(stride * static_cast<size_t>(img.height), 0);
  std::vector<uint8_t> prev(stride, 0);
  for (int y = 0; y < img.height; ++y) {
    const uint8_t filter = raw[(stride + 1) * y];
    const uint8_t* src = &raw[(stride + 1) * y + 1];
    uint8_t* dst = &img.rgb[stride * y];
    for (size_t i = 0; i < stride; ++i) {
      const int a = i >= 3 ? dst[i - 3] : 0;
      const int b = prev[i];
      const int c = i >= 3 ? prev[i - 3] : 0;
      int v = src[i];
      switch (filter) {
        case 0: break;
        case 1: v += a; break;
        case 2: v += b; break;
        case 3: v += (a + b) / 2; break;
        case 4: v += paeth(a, b, c); break;
        default: throw DataError("png: unknown scanline filter");
      }
      dst[i] = static_cast<uint8_t>(v & 0xff);
    }
    std::memcpy(prev.data(), dst, stride);
  }
  return img;
}

}  // namespace lpgan::png
