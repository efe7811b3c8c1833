#pragma once

#include <stdexcept>
#include <string>

namespace promptseg {

// Base of every error the library throws. The CLI maps subclasses onto exit
// codes: ConfigError -> 2, DataError/FormatError -> 3, NumericError -> 4.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor shapes or ranks do not fit an operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration value (model, training, synthesis, CLI flags).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// A non-finite value appeared. `op()` names the primitive that produced it and
// `iteration()` is set (>= 0) when raised from inside a training loop.
class NumericError : public Error {
 public:
  NumericError(std::string op, const std::string& what, long iteration = -1)
      : Error(what), op_(std::move(op)), iteration_(iteration) {}

  const std::string& op() const noexcept { return op_; }
  long iteration() const noexcept { return iteration_; }

 private:
  std::string op_;
  long iteration_;
};

// Problems with input files: missing, wrong size, out-of-range labels.
class DataError : public Error {
 public:
  enum class Kind { kMissingFile, kSizeMismatch, kClassRange, kClassMismatch, kFormat, kIo };

  DataError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}

  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

// Malformed or truncated weights archive / manifest.
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace promptseg
