#include "lpgan/tensor.hpp"

#include <cmath>
#include <sstream>

namespace lpgan::nn {

int64_t Tensor::count(const std::vector<int>& s) {
  int64_t n = 1;
  for (int e : s) {
    if (e <= 0) throw ShapeError("tensor extent must be positive, got " + shape_str(s));
    n *= e;
  }
  return n;
}

Tensor::Tensor(std::vector<int> s) : shape(std::move(s)) {
  data.assign(static_cast<size_t>(count(shape)), 0.0f);
}

Tensor Tensor::full(std::vector<int> s, float v) {
  Tensor t(std::move(s));
  for (auto& x : t.data) x = v;
  return t;
}

Tensor Tensor::from(std::vector<int> s, std::vector<float> v) {
  Tensor t;
  t.shape = std::move(s);
  if (count(t.shape) != static_cast<int64_t>(v.size()))
    throw ShapeError("tensor literal size does not match shape " + shape_str(t.shape));
  t.data = std::move(v);
  return t;
}

std::string shape_str(const std::vector<int>& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

void require_shape(const Tensor& t, const std::vector<int>& want, const char* who) {
  if (t.shape != want)
    throw ShapeError(std::string(who) + ": expected shape " + shape_str(want) +
                     ", got " + shape_str(t.shape));
}

bool all_finite(const Tensor& t) {
  for (float v : t.data)
    if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace lpgan::nn
