#pragma once

#include <stdexcept>
#include <string>

namespace hicd {

// Base of every error raised by the library. The category drives the CLI
// exit code (see tools/hicd.cpp).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class UsageError : public Error {
 public:
  using Error::Error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

class RangeError : public Error {
 public:
  using Error::Error;
};

// A sequence longer than the model's context window.
class LengthError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

// Malformed or incompatible input data (dataset files, checkpoints, specs).
class DataError : public Error {
 public:
  using Error::Error;
};

class TrainingError : public NumericError {
 public:
  TrainingError(const std::string& what, std::size_t iteration)
      : NumericError(what), iteration_(iteration) {}
  std::size_t iteration() const { return iteration_; }

 private:
  std::size_t iteration_;
};

}  // namespace hicd
