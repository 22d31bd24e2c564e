#pragma once

#include <stdexcept>
#include <string>

namespace hte {

/// Invalid input: bad dimensions, malformed config, data that violates a
/// documented precondition. The CLI maps this to exit code 2.
class ArgumentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Numerical failure: singular matrices, IRLS divergence, non-finite scores.
/// The CLI maps this to exit code 3.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr const char* kVersion = "0.1.0";

}  // namespace hte
