#include "lpgan/rng.hpp"

#include <cmath>
#include <sstream>

#include "lpgan/errors.hpp"

namespace lpgan {

int Rng::uniform_int(int lo, int hi) {
  if (hi < lo) throw ConfigError("uniform_int: empty range");
  uint64_t span = static_cast<uint64_t>(hi) - static_cast<uint64_t>(lo) + 1;
  uint64_t limit = UINT64_MAX - UINT64_MAX % span;
  uint64_t x;
  do {
    x = eng();
  } while (x >= limit);
  return lo + static_cast<int>(x % span);
}

float Rng::normal_f() {
  constexpr double kTwoPi = 6.283185307179586476925286766559;
  // u1 in (0,1]: avoids log(0).
  double u1 = (static_cast<double>(eng() >> 11) + 1.0) * 0x1.0p-53;
  double u2 = static_cast<double>(eng() >> 11) * 0x1.0p-53;
  double r = std::sqrt(-2.0 * std::log(u1));
  return static_cast<float>(r * std::cos(kTwoPi * u2));
}

std::string Rng::state_hex() const {
  std::ostringstream os;
  os << eng;
  std::string plain = os.str();
  static const char* digits = "0123456789abcdef";
  std::string hex;
  hex.reserve(plain.size() * 2);
  for (unsigned char c : plain) {
    hex.push_back(digits[c >> 4]);
    hex.push_back(digits[c & 15]);
  }
  return hex;
}

void Rng::set_state_hex(const std::string& hex) {
  if (hex.size() % 2 != 0) throw IntegrityError("rng state: odd hex length");
  auto nib = [](char c) -> int {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    throw IntegrityError("rng state: bad hex digit");
  };
  std::string plain;
  plain.reserve(hex.size() / 2);
  for (size_t i = 0; i < hex.size(); i += 2)
    plain.push_back(static_cast<char>(nib(hex[i]) * 16 + nib(hex[i + 1])));
  std::istringstream is(plain);
  is >> eng;
  if (!is) throw IntegrityError("rng state: failed to parse engine state");
}

uint64_t Rng::derive(uint64_t master, uint64_t a, uint64_t b) {
  // splitmix64 over a simple combination; good enough to decorrelate streams.
  uint64_t z = master + 0x9e3779b97f4a7c15ULL * (a + 1) + 0xbf58476d1ce4e5b9ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace lpgan
