#pragma once

#include <stdexcept>
#include <string>

namespace hta {

/// Operand shapes do not line up.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Invalid configuration value (bad divisibility, out-of-range count, ...).
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// A numeric routine met a non-finite value or an unsupported request.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Jacobi SVD did not reach the off-diagonal tolerance within the sweep budget.
/// `residual` is the largest remaining relative off-diagonal column correlation.
struct SvdConvergenceError : std::runtime_error {
  double residual;
  SvdConvergenceError(double residual_, const std::string& msg)
      : std::runtime_error(msg), residual(residual_) {}
};

}  // namespace hta
