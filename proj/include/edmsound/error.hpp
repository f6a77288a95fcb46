#pragma once

#include <stdexcept>
#include <string>

namespace edmsound {

/// Base class of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Caller passed arguments that violate a documented precondition.
class InvalidInput : public Error {
 public:
  using Error::Error;
};

/// A function was evaluated outside of its mathematical domain (e.g. ln of sigma <= 0).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// NaN or Inf appeared in a computation that must stay finite.
class NumericError : public Error {
 public:
  using Error::Error;
};

class CalibrationError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace edmsound
