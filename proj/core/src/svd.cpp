#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <string>
#include <vector>

#include "hta/linalg.hpp"

namespace hta {

DenseMatrix SvdResult::reconstruct() const {
  DenseMatrix us = u;
  for (std::size_t i = 0; i < us.rows(); ++i) {
    double* r = us.row(i);
    for (std::size_t j = 0; j < us.cols(); ++j) r[j] *= sigma[j];
  }
  return matmul_nt(us, v);
}

namespace {

// One-sided (Hestenes) Jacobi on the columns of W, here stored transposed so
// each logical column is a contiguous row: wt is n x m, vt is n x n.
// Returns the worst relative off-diagonal correlation seen in the last sweep.
double jacobi_sweeps(DenseMatrix& wt, DenseMatrix& vt, const JacobiOptions& opts,
                     bool& converged) {
  const std::size_t n = wt.rows();
  const std::size_t m = wt.cols();
  double residual = 0.0;
  converged = false;
  for (std::size_t sweep = 0; sweep < opts.max_sweeps; ++sweep) {
    residual = 0.0;
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        double* wp = wt.row(p);
        double* wq = wt.row(q);
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t k = 0; k < m; ++k) {
          alpha += wp[k] * wp[k];
          beta += wq[k] * wq[k];
          gamma += wp[k] * wq[k];
        }
        if (alpha == 0.0 || beta == 0.0) continue;  // zero column: nothing to rotate
        const double rel = std::abs(gamma) / std::sqrt(alpha * beta);
        residual = std::max(residual, rel);
        if (rel <= opts.rel_tol) continue;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = (zeta >= 0.0 ? 1.0 : -1.0) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t k = 0; k < m; ++k) {
          const double a = wp[k], b = wq[k];
          wp[k] = c * a - s * b;
          wq[k] = s * a + c * b;
        }
        double* vp = vt.row(p);
        double* vq = vt.row(q);
        for (std::size_t k = 0; k < n; ++k) {
          const double a = vp[k], b = vq[k];
          vp[k] = c * a - s * b;
          vq[k] = s * a + c * b;
        }
        rotated = true;
      }
    }
    if (!rotated) {
      converged = true;
      return residual;
    }
  }
  // One final read-only pass: the last sweep may have cleaned up after itself.
  residual = 0.0;
  const std::size_t mm = wt.cols();
  for (std::size_t p = 0; p + 1 < n; ++p) {
    for (std::size_t q = p + 1; q < n; ++q) {
      const double* wp = wt.row(p);
      const double* wq = wt.row(q);
      double alpha = 0.0, beta = 0.0, gamma = 0.0;
      for (std::size_t k = 0; k < mm; ++k) {
        alpha += wp[k] * wp[k];
        beta += wq[k] * wq[k];
        gamma += wp[k] * wq[k];
      }
      if (alpha == 0.0 || beta == 0.0) continue;
      residual = std::max(residual, std::abs(gamma) / std::sqrt(alpha * beta));
    }
  }
  converged = residual <= opts.rel_tol;
  return residual;
}

// Replace any zero columns of u (flagged by sigma[j] == 0) with unit vectors
// orthogonal to every other column, so u always has orthonormal columns.
void complete_orthonormal_basis(DenseMatrix& u, const Vector& sigma) {
  const std::size_t m = u.rows();
  const std::size_t k = u.cols();
  for (std::size_t j = 0; j < k; ++j) {
    if (sigma[j] != 0.0) continue;
    // Best canonical basis vector: the one keeping the most norm after
    // projecting out all nonzero columns built so far.
    Vector best(m);
    double best_norm = -1.0;
    for (std::size_t cand = 0; cand < m; ++cand) {
      Vector e(m);
      e[cand] = 1.0;
      for (std::size_t c = 0; c < k; ++c) {
        if (c == j) continue;
        if (sigma[c] == 0.0 && c > j) continue;  // not yet filled in
        double dot = 0.0;
        for (std::size_t i = 0; i < m; ++i) dot += u(i, c) * e[i];
        for (std::size_t i = 0; i < m; ++i) e[i] -= dot * u(i, c);
      }
      const double nrm = e.norm();
      if (nrm > best_norm) {
        best_norm = nrm;
        best = e;
      }
      if (best_norm > 0.9) break;  // good enough; stay deterministic and cheap
    }
    if (best_norm <= 0.0) throw NumericError("jacobi_svd: basis completion failed");
    for (std::size_t i = 0; i < m; ++i) u(i, j) = best[i] / best_norm;
  }
}

}  // namespace

SvdResult jacobi_svd(const DenseMatrix& a, const JacobiOptions& opts) {
  if (a.rows() == 0 || a.cols() == 0) throw ShapeError("jacobi_svd: empty matrix");
  if (!a.all_finite()) throw NumericError("jacobi_svd: input has non-finite entries");
  if (a.rows() < a.cols()) {
    // Work on the transpose and swap the factors back: A = (U' S V'^T)^T.
    SvdResult t = jacobi_svd(a.transposed(), opts);
    return SvdResult{std::move(t.v), std::move(t.sigma), std::move(t.u)};
  }

  const std::size_t m = a.rows();
  const std::size_t n = a.cols();
  DenseMatrix wt = a.transposed();              // n x m: row j is column j of W
  DenseMatrix vt = DenseMatrix::identity(n);    // row j is column j of V

  bool converged = false;
  const double residual = jacobi_sweeps(wt, vt, opts, converged);
  if (!converged) {
    throw SvdConvergenceError(residual, "jacobi_svd: not converged after " +
                                            std::to_string(opts.max_sweeps) +
                                            " sweeps (residual " +
                                            std::to_string(residual) + ")");
  }

  Vector sigma(n);
  DenseMatrix u(m, n);
  for (std::size_t j = 0; j < n; ++j) {
    const double* wcol = wt.row(j);
    double s = 0.0;
    for (std::size_t i = 0; i < m; ++i) s += wcol[i] * wcol[i];
    s = std::sqrt(s);
    sigma[j] = s;
    if (s > 0.0) {
      for (std::size_t i = 0; i < m; ++i) u(i, j) = wcol[i] / s;
    }
  }

  // Sort nonincreasing by singular value, stably so ties keep sweep order.
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::stable_sort(perm.begin(), perm.end(),
                   [&](std::size_t x, std::size_t y) { return sigma[x] > sigma[y]; });

  SvdResult out;
  out.sigma = Vector(n);
  out.u = DenseMatrix(m, n);
  out.v = DenseMatrix(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    const std::size_t src = perm[j];
    out.sigma[j] = sigma[src];
    for (std::size_t i = 0; i < m; ++i) out.u(i, j) = u(i, src);
    const double* vcol = vt.row(src);
    for (std::size_t i = 0; i < n; ++i) out.v(i, j) = vcol[i];
  }
  complete_orthonormal_basis(out.u, out.sigma);
  return out;
}

std::size_t numerical_rank(const Vector& sigma, double rel_tol) {
  if (sigma.dim() == 0 || sigma[0] == 0.0) return 0;
  const double cutoff = rel_tol * sigma[0];
  std::size_t r = 0;
  for (std::size_t i = 0; i < sigma.dim(); ++i) {
    if (sigma[i] > cutoff) ++r;
  }
  return r;
}

}  // namespace hta
