#pragma once

#include <stdexcept>
#include <string>

namespace mtabl {

/// Process exit codes used by the CLI; each error family maps to one.
enum class ExitCode : int {
  ok = 0,
  internal = 1,
  usage = 2,
  data = 3,
  numeric = 4,
  format = 5,
};

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual ExitCode exit_code() const noexcept { return ExitCode::internal; }
};

/// Operand shapes do not conform.
class DimensionError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const noexcept override { return ExitCode::usage; }
};

/// Invalid network, optimizer or run configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const noexcept override { return ExitCode::usage; }
};

/// A parameter left its admissible domain (e.g. lambda outside [0,1]).
class ConstraintError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const noexcept override { return ExitCode::numeric; }
};

/// Bad values in input data (unknown labels, empty inputs).
class DataError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const noexcept override { return ExitCode::data; }
};

/// Malformed files: text grids, dataset caches, checkpoints.
class FormatError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const noexcept override { return ExitCode::format; }
};

/// Non-finite values or broken numerical invariants (divergence).
class NumericError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const noexcept override { return ExitCode::numeric; }
};

/// A cache or state object does not belong to the call it was passed to.
class InternalError : public Error {
 public:
  using Error::Error;
};

}  // namespace mtabl
