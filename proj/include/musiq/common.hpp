#pragma once

#include <stdexcept>
#include <string>

namespace musiq {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Shape or precondition violations (mismatched extents, bad indices).
struct ShapeError : Error {
  using Error::Error;
};

// Invalid model/run configuration.
struct ConfigError : Error {
  using Error::Error;
};

// NaN/Inf where finite values are required.
struct NumericError : Error {
  using Error::Error;
};

// Malformed image payloads or manifests.
struct DecodeError : Error {
  using Error::Error;
};

// Filesystem write/read failures.
struct IoError : Error {
  using Error::Error;
};

}  // namespace musiq
