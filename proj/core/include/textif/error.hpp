#pragma once

#include <stdexcept>
#include <string>

namespace textif {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Caller passed data that violates an operation's precondition.
class InvalidInput : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf appeared in a loss or gradient.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Checkpoint, catalog or image file could not be read or did not validate.
class LoadError : public Error {
 public:
  using Error::Error;
};

}  // namespace textif
