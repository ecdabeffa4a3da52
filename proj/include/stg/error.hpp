#pragma once

#include <stdexcept>
#include <string>

namespace stg {

/// Base of every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor shapes.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf produced or supplied, or a division by zero.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// A caller violated an operation's precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Malformed or out-of-range user data (files, indices, distributions).
class InputError : public Error {
 public:
  using Error::Error;
};

/// Invalid model or run configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Metric over an empty mask.
class MetricError : public Error {
 public:
  using Error::Error;
};

/// Persisted state does not match what the caller expects (checkpoints, caches).
class StateError : public Error {
 public:
  using Error::Error;
};

}  // namespace stg
