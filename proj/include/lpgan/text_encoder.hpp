#pragma once

#include <memory>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "lpgan/layers.hpp"

namespace lpgan::text {

using nn::Ctx;
using nn::Tape;
using nn::Tensor;
using nn::Var;

// A sentence plus its normalized token list: lowercased, punctuation
// characters removed, split on whitespace. Construction rejects text that
// normalizes to nothing.
struct Sentence {
  std::string text;
  std::vector<std::string> tokens;

  static Sentence parse(const std::string& text);
  // Tokens joined by single spaces; the lookup key for table providers.
  std::string key() const;
};

// Produces the fixed raw vector for a sentence. Implementations are
// read-only after construction.
class EmbeddingProvider {
 public:
  virtual ~EmbeddingProvider() = default;
  virtual int dim() const = 0;
  virtual Tensor embed(const Sentence& s) const = 0;  // [dim()]
};

// Self-contained provider: signed bag of words. Each token is hashed with
// 64-bit FNV-1a over its bytes; the low bits pick a bucket (h mod dim), the
// top bit picks the sign, and the +-1 contributions are summed and
// L2-normalized. Tests reimplement this hash, so the scheme is part of the
// contract.
class HashedProvider : public EmbeddingProvider {
 public:
  explicit HashedProvider(int d_raw = 1024);
  int dim() const override { return d_raw_; }
  Tensor embed(const Sentence& s) const override;

  static uint64_t token_hash(const std::string& token);

 private:
  int d_raw_;
};

// Exact-match lookup of precomputed vectors keyed by normalized sentence.
// File format: one entry per line, `<sentence text>\t<space-separated decimal
// floats>`. Duplicate sentences keep the last entry (counted, warned on
// stderr). Unknown sentences raise unless a hashed fallback was requested.
class TableProvider : public EmbeddingProvider {
 public:
  TableProvider(const std::string& path, bool hashed_fallback);
  int dim() const override { return d_raw_; }
  Tensor embed(const Sentence& s) const override;

  int entry_count() const { return static_cast<int>(table_.size()); }
  int duplicate_count() const { return duplicates_; }

 private:
  int d_raw_ = 0;
  int duplicates_ = 0;
  std::unordered_map<std::string, Tensor> table_;
  std::unique_ptr<HashedProvider> fallback_;
};

void write_embedding_table(
    const std::string& path,
    const std::vector<std::pair<std::string, Tensor>>& entries);

// Trainable projection from raw embeddings to the 256-wide sentence code:
// two dense+norm+leaky-relu blocks. One instance is shared by everything
// that consumes sentence codes.
struct TextHead {
  nn::Dense fc1, fc2;
  nn::BatchNorm bn1, bn2;
  float slope = 0.2f;

  TextHead() = default;
  TextHead(nn::ParameterStore& ps, Rng& rng, int d_raw = 1024,
           int hidden = 512, int out = 256);
  // raw [B, d_raw] -> [B, out]; training mode needs B >= 2.
  Var forward(const Ctx& ctx, Var raw) const;
};

// Stacks provider vectors for a batch of sentences (rows in order) as a
// tape constant, then projects them.
Var encode_batch(const Ctx& ctx, Tape& t, const EmbeddingProvider& provider,
                 const std::vector<Sentence>& batch, const TextHead& head);

}  // namespace lpgan::text
