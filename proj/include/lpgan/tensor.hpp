#pragma once

#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

#include "lpgan/errors.hpp"

namespace lpgan::nn {

// Dense row-major float32 tensor. Rank up to 5 in practice; extents strictly
// positive.
struct Tensor {
  std::vector<int> shape;
  std::vector<float> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s);

  static int64_t count(const std::vector<int>& s);
  static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }
  static Tensor full(std::vector<int> s, float v);
  static Tensor from(std::vector<int> s, std::vector<float> v);

  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape[static_cast<size_t>(i)]; }
  int64_t size() const { return static_cast<int64_t>(data.size()); }
  float* ptr() { return data.data(); }
  const float* ptr() const { return data.data(); }
  bool same_shape(const Tensor& o) const { return shape == o.shape; }
  bool empty() const { return data.empty(); }

  // Flat accessors for tests and glue code; hot loops index manually.
  float& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
  float operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }
};

std::string shape_str(const std::vector<int>& s);
void require_shape(const Tensor& t, const std::vector<int>& want,
                   const char* who);
bool all_finite(const Tensor& t);

}  // namespace lpgan::nn
