#pragma once

#include <stdexcept>
#include <string>

namespace itercomp {

// Error categories. The CLI maps each one onto a process exit code.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public DataError {
 public:
  using DataError::DataError;
};

class RangeError : public DataError {
 public:
  using DataError::DataError;
};

class NumericError : public DataError {
 public:
  using DataError::DataError;
};

class GenerationError : public DataError {
 public:
  using DataError::DataError;
};

inline void check_shape(bool ok, const char* what) {
  if (!ok) throw ShapeError(std::string("shape mismatch: ") + what);
}
inline void check_shape(bool ok, const std::string& what) {
  if (!ok) throw ShapeError("shape mismatch: " + what);
}

}  // namespace itercomp
