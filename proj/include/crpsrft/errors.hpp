#pragma once

#include <stdexcept>
#include <string>

namespace crpsrft {

/// Base class for all library errors.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor shapes; message names the op and both shapes.
struct ShapeError : Error {
  using Error::Error;
};

/// Bad configuration (unknown keys, invalid field values, incompatible models).
struct ConfigError : Error {
  using Error::Error;
};

/// NaN/Inf encountered where finite values are required.
struct NumericError : Error {
  using Error::Error;
};

/// File format or filesystem failure.
struct IoError : Error {
  using Error::Error;
};

/// Invalid argument value (non-shape, non-config).
struct ValueError : Error {
  using Error::Error;
};

}  // namespace crpsrft
