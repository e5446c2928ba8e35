#pragma once

#include <stdexcept>
#include <string>

namespace stc {

// Exit codes used by the CLI. Library code throws; the CLI maps to codes.
enum class ExitCode : int {
  ok = 0,
  failure = 1,
  config = 2,
  data = 3,
  numeric = 4,
};

// Bad shapes or dimension mismatches in tensor operations.
class ShapeError : public std::runtime_error {
 public:
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Arguments outside a function's mathematical domain (mu <= 0, theta <= 0, ...).
class DomainError : public std::runtime_error {
 public:
  explicit DomainError(const std::string& msg) : std::runtime_error(msg) {}
};

// API misuse: backward on a consumed tape, non-scalar loss, single-batch LOUO, ...
class UsageError : public std::runtime_error {
 public:
  explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid configuration: unknown keys, out-of-range values, missing classes.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed or inconsistent data files.
class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite values where finite ones are required.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// A training code path touched data it must not see (guarded labels).
class ProtocolError : public std::runtime_error {
 public:
  explicit ProtocolError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace stc
