#pragma once

#include <cstdint>
#include <random>
#include <string>

#include "lpgan/tensor.hpp"

namespace lpgan {

// All stochastic behavior flows through this wrapper so state can be
// checkpointed exactly. std::distributions are avoided on purpose: they carry
// hidden state (cached normal pairs) and implementation-defined draw counts.
struct Rng {
  std::mt19937_64 eng;

  explicit Rng(uint64_t seed) : eng(seed) {}

  // [0,1) with 53 random bits.
  double uniform() { return static_cast<double>(eng() >> 11) * 0x1.0p-53; }

  float uniform_f(float lo, float hi) {
    return lo + static_cast<float>(uniform()) * (hi - lo);
  }

  // Inclusive on both ends. Modulo bias is irrelevant at our range sizes but
  // rejection keeps it exact anyway.
  int uniform_int(int lo, int hi);

  // Box-Muller, two engine draws per value, no cached half.
  float normal_f();

  void fill_normal(nn::Tensor& t) {
    for (auto& v : t.data) v = normal_f();
  }

  std::string state_hex() const;
  void set_state_hex(const std::string& hex);

  // Derive an unrelated child seed (dataset clip streams etc.).
  static uint64_t derive(uint64_t master, uint64_t a, uint64_t b = 0);
};

}  // namespace lpgan
