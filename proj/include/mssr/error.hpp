#pragma once

#include <stdexcept>
#include <string>

namespace mssr {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad or unknown configuration keys/values.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed audio, datasets that violate a precondition, short tracks.
class DataError : public Error {
 public:
  using Error::Error;
};

// Incompatible tensor shapes or invalid op arguments.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Non-finite values during training or a forward pass.
class NumericError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public Error {
 public:
  enum class Kind { Io, BadMagic, Version, Truncated, Checksum, Mismatch };

  CheckpointError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

}  // namespace mssr
