#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <set>

#include "lpgan/rng.hpp"
#include "lpgan/tensor.hpp"

using lpgan::Rng;
using lpgan::nn::Tensor;

TEST_CASE("tensor construction and accessors") {
  Tensor t({2, 3});
  CHECK(t.rank() == 2);
  CHECK(t.dim(0) == 2);
  CHECK(t.dim(1) == 3);
  CHECK(t.size() == 6);
  for (int64_t i = 0; i < 6; ++i) CHECK(t[i] == 0.0f);

  Tensor f = Tensor::full({4}, 2.5f);
  CHECK(f[3] == 2.5f);

  Tensor v = Tensor::from({2, 2}, {1, 2, 3, 4});
  CHECK(v[0] == 1.0f);
  CHECK(v[3] == 4.0f);
  CHECK(v.same_shape(Tensor({2, 2})));
  CHECK_FALSE(v.same_shape(t));
}

TEST_CASE("tensor rejects bad shapes") {
  CHECK_THROWS_AS(Tensor({0}), lpgan::ShapeError);
  CHECK_THROWS_AS(Tensor({2, -1}), lpgan::ShapeError);
  CHECK_THROWS_AS(Tensor::from({3}, {1, 2}), lpgan::ShapeError);
  CHECK_THROWS_AS(
      lpgan::nn::require_shape(Tensor({2, 2}), {2, 3}, "unit"),
      lpgan::ShapeError);
}

TEST_CASE("all_finite flags nan and inf") {
  Tensor t = Tensor::from({3}, {1.0f, 2.0f, 3.0f});
  CHECK(lpgan::nn::all_finite(t));
  t[1] = std::nanf("");
  CHECK_FALSE(lpgan::nn::all_finite(t));
  t[1] = INFINITY;
  CHECK_FALSE(lpgan::nn::all_finite(t));
}

TEST_CASE("uniform lies in [0,1) and looks uniform") {
  Rng r(7);
  double sum = 0.0;
  for (int i = 0; i < 20000; ++i) {
    double u = r.uniform();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
    sum += u;
  }
  CHECK(std::abs(sum / 20000 - 0.5) < 0.01);
}

TEST_CASE("uniform_int inclusive on both ends") {
  Rng r(11);
  std::set<int> seen;
  for (int i = 0; i < 500; ++i) {
    int v = r.uniform_int(5, 9);
    REQUIRE(v >= 5);
    REQUIRE(v <= 9);
    seen.insert(v);
  }
  CHECK(seen.size() == 5);
  CHECK(r.uniform_int(3, 3) == 3);
  CHECK_THROWS_AS(r.uniform_int(4, 3), lpgan::ConfigError);
}

TEST_CASE("normal_f consumes exactly two engine draws per value") {
  Rng a(123);
  for (int i = 0; i < 17; ++i) a.normal_f();
  Rng b(123);
  b.eng.discard(34);
  CHECK(a.eng() == b.eng());
}

TEST_CASE("normal_f moments") {
  Rng r(99);
  const int n = 50000;
  double s = 0.0, s2 = 0.0;
  for (int i = 0; i < n; ++i) {
    double v = r.normal_f();
    s += v;
    s2 += v * v;
  }
  double mean = s / n;
  double var = s2 / n - mean * mean;
  CHECK(std::abs(mean) < 0.02);
  CHECK(std::abs(var - 1.0) < 0.03);
}

TEST_CASE("state round trip reproduces the stream") {
  Rng r(2024);
  for (int i = 0; i < 13; ++i) r.normal_f();
  std::string snap = r.state_hex();
  std::vector<float> ahead;
  for (int i = 0; i < 8; ++i) ahead.push_back(r.normal_f());
  r.set_state_hex(snap);
  for (int i = 0; i < 8; ++i) CHECK(r.normal_f() == ahead[static_cast<size_t>(i)]);
}

TEST_CASE("state restore into a fresh object") {
  Rng a(5);
  a.uniform();
  a.normal_f();
  Rng b(777);
  b.set_state_hex(a.state_hex());
  for (int i = 0; i < 4; ++i) CHECK(a.eng() == b.eng());
}

TEST_CASE("bad state strings rejected") {
  Rng r(1);
  CHECK_THROWS_AS(r.set_state_hex("abc"), lpgan::IntegrityError);
  CHECK_THROWS_AS(r.set_state_hex("zz"), lpgan::IntegrityError);
}

TEST_CASE("derive decorrelates child streams") {
  uint64_t a = Rng::derive(42, 0, 0);
  uint64_t b = Rng::derive(42, 1, 0);
  uint64_t c = Rng::derive(42, 0, 1);
  uint64_t d = Rng::derive(43, 0, 0);
  CHECK(a != b);
  CHECK(a != c);
  CHECK(b != c);
  CHECK(a != d);
  CHECK(a == Rng::derive(42, 0, 0));
}

TEST_CASE("fill_normal is sequential row-major") {
  Rng a(8);
  Tensor t({2, 3});
  a.fill_normal(t);
  Rng b(8);
  for (int64_t i = 0; i < 6; ++i) CHECK(t[i] == b.normal_f());
}
