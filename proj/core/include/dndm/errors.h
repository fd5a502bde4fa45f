#ifndef DNDM_ERRORS_H_
#define DNDM_ERRORS_H_

#include <stdexcept>
#include <string>

namespace dndm {

// Root of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor shapes that do not conform for an operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// An argument violates an operation contract (non one-hot labels, bad tau...).
class ValidationError : public Error {
 public:
  using Error::Error;
};

// Invalid or inconsistent experiment / training configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Anything wrong with input data: unreadable files, bad magic, truncation.
class DataError : public Error {
 public:
  using Error::Error;
};

class FormatError : public DataError {
 public:
  using DataError::DataError;
};

class LengthError : public DataError {
 public:
  using DataError::DataError;
};

// Numerical failure during training (non-finite loss, missing gradient).
class TrainingError : public Error {
 public:
  using Error::Error;
};

}  // namespace dndm

#endif  // DNDM_ERRORS_H_
