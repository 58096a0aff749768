#pragma once

#include <span>

#include "hta/linalg.hpp"

namespace hta {

/// Shared row-wise kernels. The untaped eval path and the tape primitives
/// both call these, so the two paths produce identical arithmetic.

struct LayerNormRows {
  DenseMatrix y;        // normalized rows
  DenseMatrix inv_std;  // B x 1, saved for the backward pass
};
LayerNormRows layernorm_rows(const DenseMatrix& x);

DenseMatrix softmax_rows(const DenseMatrix& x);

struct CrossEntropyRows {
  DenseMatrix losses;  // B x 1
  DenseMatrix probs;   // B x C softmax, saved for the backward pass
};
CrossEntropyRows cross_entropy_rows(const DenseMatrix& logits,
                                    std::span<const std::size_t> labels);

}  // namespace hta
