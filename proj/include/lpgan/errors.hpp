#pragma once

#include <stdexcept>
#include <string>

namespace lpgan {

// Error taxonomy mirrors the CLI exit codes: config 2, data 3, numeric 4,
// unreliable evaluator 5. Anything else escaping main is a plain bug (1).
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct ConfigError : Error {
  using Error::Error;
};

struct ShapeError : ConfigError {
  using ConfigError::ConfigError;
};

struct DataError : Error {
  using Error::Error;
};

// Checkpoint / archive corruption. A data error as far as the CLI goes.
struct IntegrityError : DataError {
  using DataError::DataError;
};

struct NumericError : Error {
  using Error::Error;
};

// Eval classifier failed its sanity bar; reports are flagged, not trusted.
struct EvalUnreliableError : Error {
  using Error::Error;
};

}  // namespace lpgan
