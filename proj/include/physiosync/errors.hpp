#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace physiosync {

/// Broad failure families. The CLI maps each to a distinct exit code.
enum class ErrorCategory { config, dataset, numeric, shape, io };

inline const char* category_name(ErrorCategory c) {
  switch (c) {
    case ErrorCategory::config: return "config";
    case ErrorCategory::dataset: return "dataset";
    case ErrorCategory::numeric: return "numeric";
    case ErrorCategory::shape: return "shape";
    case ErrorCategory::io: return "io";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& what)
      : std::runtime_error(what), category_(category) {}
  ErrorCategory category() const noexcept { return category_; }

 private:
  ErrorCategory category_;
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what) : Error(ErrorCategory::shape, what) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(ErrorCategory::config, what) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error(ErrorCategory::numeric, what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(ErrorCategory::io, what) {}
};

// Dataset failures are split so callers (and tests) can tell them apart.
class DatasetError : public Error {
 public:
  explicit DatasetError(const std::string& what) : Error(ErrorCategory::dataset, what) {}
};

class MissingFileError : public DatasetError {
 public:
  explicit MissingFileError(const std::string& path)
      : DatasetError("missing file: " + path), path_(path) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

class SchemaError : public DatasetError {
 public:
  explicit SchemaError(const std::string& what) : DatasetError("schema violation: " + what) {}
};

class ByteLengthError : public DatasetError {
 public:
  ByteLengthError(const std::string& path, std::uintmax_t expected, std::uintmax_t actual)
      : DatasetError("byte length mismatch in " + path + ": expected " + std::to_string(expected) +
                     ", found " + std::to_string(actual)),
        expected_(expected),
        actual_(actual) {}
  std::uintmax_t expected() const noexcept { return expected_; }
  std::uintmax_t actual() const noexcept { return actual_; }

 private:
  std::uintmax_t expected_;
  std::uintmax_t actual_;
};

class InsufficientDataError : public DatasetError {
 public:
  explicit InsufficientDataError(const std::string& what) : DatasetError(what) {}
};

}  // namespace physiosync
