#pragma once

#include <stdexcept>
#include <string>

namespace mmpid {

// Base of every error thrown by the library. The CLI maps subclasses to exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Precondition on argument values violated (bad simplex, overlapping axes, ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

// Malformed input file or record.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, long line = -1)
      : Error(line >= 0 ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}
  long line() const noexcept { return line_; }

 private:
  long line_;
};

// Non-finite values, divergence, failed convergence.
class NumericError : public Error {
 public:
  using Error::Error;
};

// An identity that must hold by construction does not.
class ConsistencyError : public Error {
 public:
  using Error::Error;
};

// Requested operation exceeds what the implementation supports.
class CapabilityError : public Error {
 public:
  using Error::Error;
};

// Input is well formed but carries no information to decompose.
class DegenerateError : public Error {
 public:
  using Error::Error;
};

// Marginal targets cannot be met by the given kernel.
class InfeasibleError : public Error {
 public:
  using Error::Error;
};

}  // namespace mmpid
