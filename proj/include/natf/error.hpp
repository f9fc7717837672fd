#pragma once

#include <stdexcept>
#include <string>

namespace natf {

// Base of every error the library raises. The CLI maps the concrete
// subclasses onto process exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed arguments or API misuse (exit code 1).
class UsageError : public Error {
 public:
  using Error::Error;
};

// Bad or missing input data: corpora, checkpoints, vocabularies (exit code 2).
class DataError : public Error {
 public:
  using Error::Error;
};

// Non-finite values or other arithmetic failures (exit code 3).
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace natf
