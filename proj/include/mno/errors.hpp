#pragma once

#include <stdexcept>
#include <string>

namespace mno {

// Argument errors use std::invalid_argument. The two classes below cover
// failures that depend on data values rather than call shape.

/// Raised when a computation produces or consumes NaN/Inf, or hits a
/// degenerate value such as a zero-norm reference field.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

/// Raised for malformed or inconsistent input data (files, datasets, stats).
class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace mno
