#pragma once

#include <stdexcept>
#include <string>

namespace sparsepool {

// Base for every error the library throws. The CLI maps ConfigError and
// IoError to exit code 2 and everything else to exit code 1.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// Raised when a value that must stay finite (input, loss, gradient) is not.
class NumericError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace sparsepool
