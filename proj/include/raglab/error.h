#pragma once

#include <stdexcept>
#include <string>

namespace raglab {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes that do not fit the requested operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Invalid model, template, or run configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A caller broke an operation's precondition (non-scalar loss, missing trace data, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Malformed or truncated file contents.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Index outside of model or sequence bounds.
class RangeError : public Error {
 public:
  using Error::Error;
};

/// An index set required to be nonempty was empty.
class EmptySpanError : public Error {
 public:
  using Error::Error;
};

class TrainingError : public Error {
 public:
  TrainingError(const std::string& what, std::size_t step) : Error(what), step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

}  // namespace raglab
