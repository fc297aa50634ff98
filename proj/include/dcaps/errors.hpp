#ifndef DCAPS_ERRORS_HPP_
#define DCAPS_ERRORS_HPP_

#include <stdexcept>
#include <string>

namespace dcaps {

// Base class for all library errors.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape / broadcast / layer-chaining mismatches.
class DimensionError : public Error {
 public:
  explicit DimensionError(const std::string& msg) : Error(msg) {}
};

// Invalid configuration values (bad routing count, inconsistent layers, ...).
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// Manifest / image / checkpoint ingestion problems.
class DataError : public Error {
 public:
  explicit DataError(const std::string& msg) : Error(msg) {}
};

// Non-finite losses or gradients, failed numerical checks.
class NumericError : public Error {
 public:
  explicit NumericError(const std::string& msg) : Error(msg) {}
};

}  // namespace dcaps

#endif  // DCAPS_ERRORS_HPP_
