#pragma once

#include <stdexcept>
#include <string>

namespace tbgdiff {

// Invalid or inconsistent configuration (bad sizes, unknown keys, unknown enum values).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Dataset ingestion or file I/O failure. Messages name the offending file.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A checkpoint whose bytes do not verify (truncated, corrupted).
class IntegrityError : public DataError {
 public:
  using DataError::DataError;
};

// A checkpoint written by an incompatible format version.
class VersionError : public DataError {
 public:
  VersionError(int found, int expected);
  int found() const { return found_; }
  int expected() const { return expected_; }

 private:
  int found_;
  int expected_;
};

// Non-finite loss or state during training.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A sequential guidance mode was asked for a mask that has not been predicted yet.
class SequencingError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Process exit codes used by the command-line tool.
enum class ExitCode : int {
  kSuccess = 0,
  kFailure = 1,
  kConfig = 2,
  kData = 3,
  kNumerical = 4,
};

}  // namespace tbgdiff
