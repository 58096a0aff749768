#pragma once

#include <cmath>

namespace hta {

// Exact-erf GELU. The forward and derivative here are the single source used
// by both the eval path and the autodiff primitive, so the two never drift.
inline double gelu(double x) {
  return 0.5 * x * (1.0 + std::erf(x * 0.7071067811865475244));
}

inline double gelu_grad(double x) {
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  constexpr double inv_sqrt2pi = 0.3989422804014326779;
  return 0.5 * (1.0 + std::erf(x * inv_sqrt2)) + x * inv_sqrt2pi * std::exp(-0.5 * x * x);
}

inline double relu(double x) { return x > 0.0 ? x : 0.0; }

inline double relu_grad(double x) { return x > 0.0 ? 1.0 : 0.0; }

}  // namespace hta
