#pragma once

#include <stdexcept>
#include <string>

namespace archforge {

// Base of every error the library throws. The CLI maps subclasses onto exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Caller broke a documented precondition (shape mismatch, stale cache, bad label).
class ContractViolation : public Error {
 public:
  using Error::Error;
};

// Unknown enumeration value, invalid option combination.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Non-finite value where a finite one is required.
class NumericalError : public Error {
 public:
  using Error::Error;
};

// A runtime invariant (freezing, fan-in wiring) was found broken.
class InvariantViolation : public Error {
 public:
  using Error::Error;
};

// Dataset files: missing, malformed, inconsistent.
class DataError : public Error {
 public:
  using Error::Error;
};

class BadMagicError : public DataError {
 public:
  using DataError::DataError;
};

class TruncatedError : public DataError {
 public:
  using DataError::DataError;
};

class CountMismatchError : public DataError {
 public:
  using DataError::DataError;
};

inline void require(bool condition, const std::string& message) {
  if (!condition) throw ContractViolation(message);
}

}  // namespace archforge
