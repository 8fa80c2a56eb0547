#pragma once

#include <stdexcept>
#include <string>

namespace polypseg {

/// Base of every error raised by the toolkit. The CLI maps subclasses onto
/// process exit codes (see `exit_code_for`).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration value or combination (exit code 1).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Tensor/image dimensions that violate an operation's contract.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Missing, orphaned, unreadable or malformed data files (exit code 2).
class DataError : public Error {
 public:
  using Error::Error;
};

/// Pretrained encoder weights requested but not retrievable.
class WeightsUnavailableError : public DataError {
 public:
  using DataError::DataError;
};

/// Checkpoint archive is corrupt or conflicts with the requested config.
class CheckpointError : public DataError {
 public:
  using DataError::DataError;
};

/// Non-finite loss, gradient or activation (exit code 3).
class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace polypseg
