#pragma once

#include <stdexcept>
#include <string>

namespace refsr {

/// Tensor shapes or image dimensions violate an operation's contract.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// A scalar argument is outside its documented domain.
struct ParameterError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Two components were built with incompatible configurations.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Raised by the trainer when the loss stops being finite.
struct TrainingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

template <class E>
void require(bool cond, const std::string& msg) {
  if (!cond) throw E(msg);
}

}  // namespace detail

}  // namespace refsr
