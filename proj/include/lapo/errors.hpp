#pragma once

#include <stdexcept>
#include <string>

namespace lapo {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Operand shapes invalid for an op.
struct ShapeError : Error {
  using Error::Error;
};

// NaN/Inf produced, or a numeric contract violated (fail-fast policy).
struct NumericError : Error {
  using Error::Error;
};

// Invalid configuration value or unknown key.
struct ConfigError : Error {
  using Error::Error;
};

// Malformed input file; message carries the byte offset where known.
struct ParseError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

}  // namespace lapo
