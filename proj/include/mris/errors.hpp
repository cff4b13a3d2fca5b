#pragma once

#include <stdexcept>
#include <string>

namespace mris {

/// Base of every error raised by the engine. `exit_code()` is the process
/// status the command-line front end reports for it.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
  virtual int exit_code() const noexcept { return 1; }
};

/// Invalid or inconsistent run configuration.
class ConfigError : public Error {
public:
  using Error::Error;
  int exit_code() const noexcept override { return 2; }
};

/// Missing, malformed, or inconsistent input data (files, ids, shapes).
class DataError : public Error {
public:
  using Error::Error;
  int exit_code() const noexcept override { return 3; }
};

class DimensionError : public DataError {
public:
  using DataError::DataError;
};

/// A structural precondition of the loss or the evaluation protocol was
/// violated (duplicate subject in a batch, query without a stored match, ...).
class ConstraintError : public DataError {
public:
  using DataError::DataError;
};

/// Non-finite values or degenerate numeric input.
class NumericError : public Error {
public:
  using Error::Error;
  int exit_code() const noexcept override { return 4; }
};

class DegenerateInputError : public NumericError {
public:
  using NumericError::NumericError;
};

} // namespace mris
