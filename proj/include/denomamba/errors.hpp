#pragma once

#include <stdexcept>
#include <string>

namespace denomamba {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand extents do not agree (message names both shapes).
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Invalid model, data or run configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// API misuse, e.g. backward on a value that was never recorded.
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Corrupt or incompatible file (bad magic, version or checksum).
class IntegrityError : public Error {
 public:
  using Error::Error;
};

/// A NaN/Inf showed up where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace denomamba
