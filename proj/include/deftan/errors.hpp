#pragma once

#include <stdexcept>
#include <string>

namespace deftan {

// Shape/axis mismatches between tensors.
struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid hyperparameter or argument value (bad dilation, dropout rate, ...).
struct ParamError : std::runtime_error {
  explicit ParamError(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid model/run configuration (mic count mismatch, unknown config key, ...).
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// File system and encoding failures.
struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace deftan
