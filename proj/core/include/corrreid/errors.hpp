#pragma once

#include <stdexcept>
#include <string>

namespace corrreid {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not conform.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A configuration value is outside its valid range.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A softmax row has no admissible entry, or a vector that must be
/// normalized has zero length.
class DegenerateRowError : public Error {
 public:
  using Error::Error;
};

/// An operation was applied in the wrong lifecycle state (epoch regression,
/// missing checkpoint, held lock).
class StateError : public Error {
 public:
  using Error::Error;
};

/// Input data is malformed or inconsistent.
class DataError : public Error {
 public:
  using Error::Error;
};

/// Filesystem failure; the message carries the offending path.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace corrreid
