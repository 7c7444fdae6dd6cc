#pragma once

#include <stdexcept>
#include <string>

namespace mvswin {

/// Base of every error the library throws. The CLI maps the concrete type to
/// its exit code (see tools/mvswin_main.cpp).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shapes or extents that do not fit an operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Architectural or run configuration rejected by validation.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Input values outside their domain (labels, counts, thresholds).
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Caller broke an API precondition (non-scalar loss, mismatched views).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// NaN or Inf produced or consumed.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// File system and serialization failures.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace mvswin
