#pragma once

#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>

namespace qmrs {

// Base for every error surfaced by the library. Each category maps to one
// failure class so callers (and the CLI exit-code table) can dispatch on type.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape/extent mismatch between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// A documented precondition was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

// NaN or Inf appeared in a value or gradient.
class NumericalError : public Error {
 public:
  using Error::Error;
};

// Bad user input (image extents, boxes, ...).
class InputError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Dataset on disk is missing or malformed.
class DataError : public Error {
 public:
  using Error::Error;
};

// Checkpoint failures, kept distinct so corruption is diagnosable.
class FormatError : public Error {
 public:
  using Error::Error;
};

class VersionError : public Error {
 public:
  using Error::Error;
};

class TruncationError : public Error {
 public:
  using Error::Error;
};

namespace detail {

template <class... Args>
std::string concat(Args&&... args) {
  std::ostringstream os;
  (os << ... << std::forward<Args>(args));
  return os.str();
}

}  // namespace detail

template <class E, class... Args>
[[noreturn]] void raise(Args&&... args) {
  throw E(detail::concat(std::forward<Args>(args)...));
}

}  // namespace qmrs
