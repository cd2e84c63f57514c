#pragma once

#include <stdexcept>
#include <string>

namespace kdlab {

// Base for every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible tensor extents.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Hyperparameter outside its admissible range (t <= 0, alpha outside [0,1], ...).
class ParameterError : public Error {
 public:
  using Error::Error;
};

// Caller violated a precondition that is not purely about shapes.
class ContractError : public Error {
 public:
  using Error::Error;
};

// Batch statistics cannot be formed (batchnorm over a single element).
class DegenerateBatchError : public ContractError {
 public:
  using ContractError::ContractError;
};

// Inconsistent model/dataset/run configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed on-disk data (IDX, checkpoint, images).
class FormatError : public Error {
 public:
  using Error::Error;
};

// Malformed config-file line. Carries the 1-based line number.
class ParseError : public Error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

}  // namespace kdlab
