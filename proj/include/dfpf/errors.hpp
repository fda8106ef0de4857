#pragma once

#include <stdexcept>
#include <string>

namespace dfpf {

// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor shapes do not conform.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// A documented precondition of an operation was violated.
class PreconditionError : public Error {
 public:
  using Error::Error;
};

// Invalid or inconsistent configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Input values are unusable (non-finite numbers, non-binary labels).
class InputError : public Error {
 public:
  using Error::Error;
};

// A dataset on disk is malformed.
class IngestionError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public Error {
 public:
  using Error::Error;
};

// Training produced a non-finite or runaway loss.
class DivergenceError : public Error {
 public:
  DivergenceError(int epoch, double lr, const std::string& what)
      : Error(what), epoch_(epoch), lr_(lr) {}
  int epoch() const { return epoch_; }
  double lr() const { return lr_; }

 private:
  int epoch_;
  double lr_;
};

}  // namespace dfpf
