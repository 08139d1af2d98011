#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace step {

/// Base class for every error raised by this library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not conform for a primitive.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Invalid hyper-parameters or run configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Dataset contents violate a precondition (degenerate channel, short split, ...).
class DataError : public Error {
 public:
  using Error::Error;
};

/// Malformed or truncated file. `offset` is the byte position where parsing failed.
class IoError : public Error {
 public:
  IoError(const std::string& what, std::uint64_t offset = 0)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

/// Cached artifact was produced by a different configuration or checkpoint.
class StaleCacheError : public Error {
 public:
  using Error::Error;
};

/// NaN or infinity encountered during training.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace step
