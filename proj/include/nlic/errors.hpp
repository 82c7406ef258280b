#pragma once

#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>

namespace nlic {

// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A caller broke a documented precondition (shape, range, call order).
class ContractViolation : public Error {
 public:
  using Error::Error;
};

// A configuration value is outside what the implementation supports.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// A symbol alphabet cannot be represented at the fixed-point precision.
class PrecisionError : public Error {
 public:
  using Error::Error;
};

// An input exceeds what the configured symbol grids can represent.
class CapacityError : public Error {
 public:
  using Error::Error;
};

// NaN or Inf where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Unreadable or invalid input data (images, datasets, config files).
class DataError : public Error {
 public:
  using Error::Error;
};

// Bitstream/weight-file integrity failures. Each cause has its own type so
// callers can tell them apart.
class IntegrityError : public Error {
 public:
  using Error::Error;
};

class BadMagicError : public IntegrityError {
 public:
  using IntegrityError::IntegrityError;
};

class VersionMismatchError : public IntegrityError {
 public:
  using IntegrityError::IntegrityError;
};

class ConfigHashMismatchError : public IntegrityError {
 public:
  using IntegrityError::IntegrityError;
};

class WeightsHashMismatchError : public IntegrityError {
 public:
  using IntegrityError::IntegrityError;
};

class CrcMismatchError : public IntegrityError {
 public:
  using IntegrityError::IntegrityError;
};

class TruncationError : public IntegrityError {
 public:
  using IntegrityError::IntegrityError;
};

namespace detail {

template <typename... Args>
std::string concat(Args&&... args) {
  std::ostringstream oss;
  (oss << ... << std::forward<Args>(args));
  return oss.str();
}

}  // namespace detail

#define NLIC_REQUIRE(cond, ErrorType, ...)                          \
  do {                                                              \
    if (!(cond)) throw ErrorType(::nlic::detail::concat(__VA_ARGS__)); \
  } while (0)

}  // namespace nlic
