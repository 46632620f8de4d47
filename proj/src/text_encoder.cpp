#include "lpgan/text_encoder.hpp"

#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

namespace lpgan::text {

Sentence Sentence::parse(const std::string& text) {
  Sentence s;
  s.text = text;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) {
      s.tokens.push_back(cur);
      cur.clear();
    }
  };
  for (char raw : text) {
    const unsigned char c = static_cast<unsigned char>(raw);
    if (std::isspace(c)) {
      flush();
    } else if (!std::ispunct(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  flush();
  if (s.tokens.empty())
    throw DataError("sentence normalizes to no tokens: \"" + text + "\"");
  return s;
}

std::string Sentence::key() const {
  std::string k;
  for (size_t i = 0; i < tokens.size(); ++i) {
    if (i) k.push_back(' ');
    k += tokens[i];
  }
  return k;
}

HashedProvider::HashedProvider(int d_raw) : d_raw_(d_raw) {
  if (d_raw < 1) throw ConfigError("hashed provider: dimension must be positive");
}

uint64_t HashedProvider::token_hash(const std::string& token) {
  uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : token) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

Tensor HashedProvider::embed(const Sentence& s) const {
  Tensor v(std::vector<int>{d_raw_});
  for (const auto& tok : s.tokens) {
    const uint64_t h = token_hash(tok);
    const int bucket = static_cast<int>(h % static_cast<uint64_t>(d_raw_));
    v[bucket] += (h >> 63) ? -1.0f : 1.0f;
  }
  double n2 = 0.0;
  for (float x : v.data) n2 += static_cast<double>(x) * x;
  // Token signs can cancel; normalize only a nonzero vector.
  if (n2 > 0.0) {
    const float inv = static_cast<float>(1.0 / std::sqrt(n2));
    for (auto& x : v.data) x *= inv;
  }
  return v;
}

TableProvider::TableProvider(const std::string& path, bool hashed_fallback) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open embedding table: " + path);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const size_t tab = line.find('\t');
    if (tab == std::string::npos)
      throw DataError("embedding table " + path + " line " +
                      std::to_string(lineno) + ": no tab separator");
    std::string sent = line.substr(0, tab);
    std::string key;
    try {
      key = Sentence::parse(sent).key();
    } catch (const DataError&) {
      throw DataError("embedding table " + path + " line " +
                      std::to_string(lineno) + ": blank sentence");
    }
    std::vector<float> vals;
    const char* p = line.c_str() + tab + 1;
    while (*p) {
      char* end = nullptr;
      const float f = std::strtof(p, &end);
      if (end == p) {
        // Trailing spaces are fine; anything else is malformed.
        while (*p == ' ') ++p;
        if (*p)
          throw DataError("embedding table " + path + " line " +
                          std::to_string(lineno) + ": bad float near \"" +
                          std::string(p).substr(0, 12) + "\"");
        break;
      }
      vals.push_back(f);
      p = end;
    }
    if (vals.empty())
      throw DataError("embedding table " + path + " line " +
                      std::to_string(lineno) + ": no values");
    if (d_raw_ == 0) d_raw_ = static_cast<int>(vals.size());
    if (static_cast<int>(vals.size()) != d_raw_)
      throw DataError("embedding table " + path + " line " +
                      std::to_string(lineno) + ": expected " +
                      std::to_string(d_raw_) + " values, got " +
                      std::to_string(vals.size()));
    Tensor v = Tensor::from({d_raw_}, std::move(vals));
    if (!all_finite(v))
      throw DataError("embedding table " + path + " line " +
                      std::to_string(lineno) + ": non-finite value");
    auto [it, inserted] = table_.insert_or_assign(std::move(key), std::move(v));
    if (!inserted) {
      ++duplicates_;
      std::fprintf(stderr, "warning: embedding table %s line %d: duplicate sentence \"%s\", keeping the later entry\n",
                   path.c_str(), lineno, sent.c_str());
    }
  }
  if (d_raw_ == 0) d_raw_ = 1024;
  if (hashed_fallback) fallback_ = std::make_unique<HashedProvider>(d_raw_);
}

Tensor TableProvider::embed(const Sentence& s) const {
  auto it = table_.find(s.key());
  if (it != table_.end()) return it->second;
  if (fallback_) return fallback_->embed(s);
  throw DataError("no embedding for sentence: \"" + s.text + "\"");
}

void write_embedding_table(
    const std::string& path,
    const std::vector<std::pair<std::string, Tensor>>& entries) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write embedding table: " + path);
  char buf[48];
  for (const auto& [sent, vec] : entries) {
    if (sent.find('\t') != std::string::npos ||
        sent.find('\n') != std::string::npos)
      throw DataError("embedding table sentence contains tab or newline: \"" +
                      sent + "\"");
    out << sent << '\t';
    for (int64_t i = 0; i < vec.size(); ++i) {
      // %.9g round-trips float exactly through decimal.
      std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(vec[i]));
      if (i) out << ' ';
      out << buf;
    }
    out << '\n';
  }
  if (!out) throw DataError("write failed for embedding table: " + path);
}

TextHead::TextHead(nn::ParameterStore& ps, Rng& rng, int d_raw, int hidden,
                   int out)
    : fc1(ps, "text.fc1", d_raw, hidden, rng),
      fc2(ps, "text.fc2", hidden, out, rng) {}

Var TextHead::forward(const Ctx& ctx, Var raw) const {
  Var h = nn::leaky_relu(bn1.forward(ctx, fc1.forward(ctx, raw)), slope);
  return nn::leaky_relu(bn2.forward(ctx, fc2.forward(ctx, h)), slope);
}

Var encode_batch(const Ctx& ctx, Tape& t, const EmbeddingProvider& provider,
                 const std::vector<Sentence>& batch, const TextHead& head) {
  if (batch.empty()) throw ShapeError("encode_batch: empty sentence batch");
  const int b = static_cast<int>(batch.size());
  const int d = provider.dim();
  Tensor raw(std::vector<int>{b, d});
  for (int r = 0; r < b; ++r) {
    Tensor v = provider.embed(batch[static_cast<size_t>(r)]);
    if (v.size() != d)
      throw ShapeError("encode_batch: provider returned " +
                       std::to_string(v.size()) + " values, expected " +
                       std::to_string(d));
    std::copy(v.data.begin(), v.data.end(),
              raw.data.begin() + static_cast<int64_t>(r) * d);
  }
  return head.forward(ctx, nn::constant(t, std::move(raw)));
}

}  // namespace lpgan::text
