#pragma once

#include <stdexcept>
#include <string>

namespace tslab {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Inconsistent shapes, infeasible specs, unknown config keys.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A documented precondition of an operation does not hold.
class PreconditionError : public Error {
 public:
  using Error::Error;
};

/// BatchNorm batch whose standard deviation vanishes for some channel.
class DegenerateBatchError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values or a collapsed weight column.
class NumericError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace tslab
