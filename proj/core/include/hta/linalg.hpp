#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <vector>

#include "hta/errors.hpp"

namespace hta {

/// Dense column vector, double precision.
class Vector {
 public:
  Vector() = default;
  explicit Vector(std::size_t dim, double fill = 0.0) : data_(dim, fill) {}
  static Vector of(std::initializer_list<double> xs) {
    Vector v;
    v.data_.assign(xs);
    return v;
  }

  std::size_t dim() const { return data_.size(); }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }

  double norm_sq() const;
  double norm() const;
  bool all_finite() const;

  friend bool operator==(const Vector&, const Vector&) = default;

 private:
  std::vector<double> data_;
};

/// Dense row-major matrix, double precision.
class DenseMatrix {
 public:
  DenseMatrix() = default;
  DenseMatrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  static DenseMatrix identity(std::size_t n);
  static DenseMatrix from_rows(std::initializer_list<std::initializer_list<double>> rows);
  /// dim x 1 column view of a vector (copies).
  static DenseMatrix column(const Vector& v);
  /// 1 x dim row view of a vector (copies).
  static DenseMatrix row_vector(const Vector& v);
  static DenseMatrix diagonal(const Vector& d);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }
  double* row(std::size_t i) { return data_.data() + i * cols_; }
  const double* row(std::size_t i) const { return data_.data() + i * cols_; }
  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }

  DenseMatrix transposed() const;
  Vector col_as_vector(std::size_t j) const;
  Vector row_as_vector(std::size_t i) const;

  double frobenius_norm() const;
  double max_abs() const;
  bool all_finite() const;
  bool is_zero() const;

  void add_in_place(const DenseMatrix& other);
  void scale_in_place(double s);

  friend bool operator==(const DenseMatrix&, const DenseMatrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// ---- elementwise / affine helpers -----------------------------------------

DenseMatrix add(const DenseMatrix& a, const DenseMatrix& b);
DenseMatrix sub(const DenseMatrix& a, const DenseMatrix& b);
DenseMatrix scale(const DenseMatrix& a, double s);
/// a + row-broadcast of v (v.dim == a.cols).
DenseMatrix add_rowvec(const DenseMatrix& a, const Vector& v);
DenseMatrix outer(const Vector& a, const Vector& b);
double max_abs_diff(const DenseMatrix& a, const DenseMatrix& b);

// ---- products --------------------------------------------------------------

DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b);     // a * b
DenseMatrix matmul_nt(const DenseMatrix& a, const DenseMatrix& b);  // a * b^T
DenseMatrix matmul_tn(const DenseMatrix& a, const DenseMatrix& b);  // a^T * b
Vector matvec(const DenseMatrix& a, const Vector& x);               // a * x
Vector matvec_t(const DenseMatrix& a, const Vector& x);             // a^T * x

// ---- Householder -----------------------------------------------------------

/// H = I - v v^T, materialized. The conventional factor 2 is deliberately
/// absent; H is orthogonal exactly when ||v||^2 is 0 or 2.
DenseMatrix householder_matrix(const Vector& v);

/// (I - v v^T) * X without materializing H; v.dim must equal x.rows.
DenseMatrix apply_householder_left(const Vector& v, const DenseMatrix& x);

/// X * (I - v v^T) without materializing H; v.dim must equal x.cols.
DenseMatrix apply_householder_right(const DenseMatrix& x, const Vector& v);

// ---- SVD -------------------------------------------------------------------

/// Thin SVD a = u * diag(sigma) * v^T with k = min(rows, cols).
/// sigma is nonincreasing and nonnegative; u, v have orthonormal columns.
struct SvdResult {
  DenseMatrix u;  // m x k
  Vector sigma;   // k
  DenseMatrix v;  // n x k

  DenseMatrix reconstruct() const;
};

struct JacobiOptions {
  double rel_tol = 1e-14;      // off-diagonal column correlation, relative
  std::size_t max_sweeps = 60;
};

/// One-sided cyclic Jacobi SVD. Throws SvdConvergenceError if the tolerance
/// is not met within max_sweeps.
SvdResult jacobi_svd(const DenseMatrix& a, const JacobiOptions& opts = {});

/// Count of singular values above rel_tol * sigma[0]; 0 when sigma is empty
/// or sigma[0] == 0. sigma must already be sorted nonincreasing.
std::size_t numerical_rank(const Vector& sigma, double rel_tol);

// ---- finite differences ----------------------------------------------------

/// Central-difference gradient (f(x + h e_i) - f(x - h e_i)) / (2h).
/// Throws NumericError naming the coordinate if f returns a non-finite value.
Vector finite_diff_grad(const std::function<double(const Vector&)>& f,
                        const Vector& at, double h);

}  // namespace hta
