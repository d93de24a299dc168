#pragma once

#include <stdexcept>
#include <string>

namespace tokendrop {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes or axes that do not fit the requested operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A caller broke an operation's precondition (e.g. backward on a non-scalar).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Malformed corpus or vocabulary input.
class DataError : public Error {
 public:
  using Error::Error;
};

/// Bad configuration key or value.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Checkpoint that cannot be read or does not match the expected layout.
class CheckpointError : public Error {
 public:
  using Error::Error;
};

/// A loss component became NaN or infinite during training.
class DivergenceError : public Error {
 public:
  DivergenceError(std::string component, const std::string& what)
      : Error(what), component_(std::move(component)) {}

  const std::string& component() const noexcept { return component_; }

 private:
  std::string component_;
};

}  // namespace tokendrop
