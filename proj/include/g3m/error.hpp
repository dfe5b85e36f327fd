#pragma once

#include <stdexcept>
#include <string>

namespace g3m {

// Bad input data, labels, shapes, or configuration. CLI exit code 1.
class ValidationError : public std::runtime_error {
public:
  explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

// Filesystem and serialization failures. CLI exit code 2.
class IoError : public std::runtime_error {
public:
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace g3m
