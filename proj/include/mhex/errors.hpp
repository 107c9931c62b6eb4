#pragma once

#include <stdexcept>
#include <string>

namespace mhex {

// Every failure raised by the library derives from Error so callers can catch
// one type at the CLI boundary and still discriminate in tests.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class ContractError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

class DomainError : public Error {
 public:
  using Error::Error;
};

class UnsupportedError : public Error {
 public:
  using Error::Error;
};

class TrainingDiverged : public Error {
 public:
  TrainingDiverged(int epoch, const std::string& what)
      : Error(what), epoch_(epoch) {}
  int epoch() const noexcept { return epoch_; }

 private:
  int epoch_;
};

class UndefinedCorrelation : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Checkpoint and dataset loading.
class FormatError : public IoError {
 public:
  using IoError::IoError;
};

class VersionError : public IoError {
 public:
  using IoError::IoError;
};

class TruncatedError : public IoError {
 public:
  using IoError::IoError;
};

class ShapeMismatchError : public IoError {
 public:
  using IoError::IoError;
};

}  // namespace mhex
