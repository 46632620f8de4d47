#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "json.hpp"
#include "lpgan/tensor.hpp"

namespace lpgan::nta {

// Tensor archive: a directory holding manifest.json plus one raw
// little-endian f32 payload file per named tensor. Used for checkpoints and
// for stored clips; `step`, `rng_state` and `config` ride along in the
// manifest and may be left at their defaults when irrelevant.
struct Archive {
  int64_t step = 0;
  std::string rng_state;          // hex digits, empty when absent
  nlohmann::json config;          // free-form echo, null when absent
  std::map<std::string, nn::Tensor> tensors;
};

// Writes the directory, creating it if needed. Deterministic: entries are
// emitted sorted by name, so saving the same archive twice produces
// byte-identical files.
void save_archive(const std::string& dir, const Archive& a);

// Verifies byte lengths and CRCs; failures raise IntegrityError naming the
// offending tensor. A missing or malformed manifest raises DataError.
Archive load_archive(const std::string& dir);

}  // namespace lpgan::nta
