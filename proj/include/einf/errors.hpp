#pragma once

#include <stdexcept>
#include <string>

namespace einf {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand dimensions do not fit the operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// NaN or infinity where a finite value is required.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// A caller-side precondition was violated.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Index or position outside the allowed range.
class RangeError : public Error {
 public:
  using Error::Error;
};

/// Memory was read before any segment had been compressed into it.
class EmptyMemoryError : public Error {
 public:
  using Error::Error;
};

// Weight container errors. Each failure mode has its own type so callers
// (and tests) can tell them apart.
class FormatError : public Error {
 public:
  using Error::Error;
};
class BadMagicError : public FormatError {
 public:
  using FormatError::FormatError;
};
class VersionError : public FormatError {
 public:
  using FormatError::FormatError;
};
class ShapeMismatchError : public FormatError {
 public:
  using FormatError::FormatError;
};
class TruncatedError : public FormatError {
 public:
  using FormatError::FormatError;
};

}  // namespace einf
