#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace protopart {

// Base class for all domain errors raised by the library. The CLI maps any
// Error to exit code 1; programming errors (std::logic_error etc.) are not
// wrapped.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Tensor extents incompatible with the requested operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// A scalar argument outside its documented domain.
class ArgumentError : public Error {
 public:
  using Error::Error;
};

// ModelConfig or TrainConfig that fails validation.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Dataset violating an invariant (empty class, mismatched extents, ...).
class DatasetError : public Error {
 public:
  using Error::Error;
};

// Malformed or truncated input file; carries the byte offset of the fault.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t byte_offset)
      : Error(what + " (byte offset " + std::to_string(byte_offset) + ")"),
        byte_offset_(byte_offset) {}

  std::size_t byte_offset() const { return byte_offset_; }

 private:
  std::size_t byte_offset_;
};

// Checkpoint whose trailing checksum does not match its payload.
class CorruptCheckpointError : public Error {
 public:
  using Error::Error;
};

// Checkpoint with an unknown format version.
class UnsupportedVersionError : public Error {
 public:
  using Error::Error;
};

// Training objective became non-finite; names the epoch where it happened.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, int epoch)
      : Error(what + " (epoch " + std::to_string(epoch) + ")"), epoch_(epoch) {}

  int epoch() const { return epoch_; }

 private:
  int epoch_;
};

}  // namespace protopart
