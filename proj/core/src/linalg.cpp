#include "hta/linalg.hpp"

#include <cmath>
#include <cstring>
#include <string>

namespace hta {

namespace {

void require_same_shape(const DenseMatrix& a, const DenseMatrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                     std::to_string(b.cols()) + ")");
  }
}

}  // namespace

// ---- Vector ----------------------------------------------------------------

double Vector::norm_sq() const {
  double s = 0.0;
  for (double x : data_) s += x * x;
  return s;
}

double Vector::norm() const { return std::sqrt(norm_sq()); }

bool Vector::all_finite() const {
  for (double x : data_) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

// ---- DenseMatrix -----------------------------------------------------------

DenseMatrix DenseMatrix::identity(std::size_t n) {
  DenseMatrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

DenseMatrix DenseMatrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  DenseMatrix m(r, c);
  std::size_t i = 0;
  for (const auto& row : rows) {
    if (row.size() != c) throw ShapeError("from_rows: ragged row lengths");
    std::size_t j = 0;
    for (double x : row) m(i, j++) = x;
    ++i;
  }
  return m;
}

DenseMatrix DenseMatrix::column(const Vector& v) {
  DenseMatrix m(v.dim(), 1);
  std::memcpy(m.data(), v.data(), v.dim() * sizeof(double));
  return m;
}

DenseMatrix DenseMatrix::row_vector(const Vector& v) {
  DenseMatrix m(1, v.dim());
  std::memcpy(m.data(), v.data(), v.dim() * sizeof(double));
  return m;
}

DenseMatrix DenseMatrix::diagonal(const Vector& d) {
  DenseMatrix m(d.dim(), d.dim());
  for (std::size_t i = 0; i < d.dim(); ++i) m(i, i) = d[i];
  return m;
}

DenseMatrix DenseMatrix::transposed() const {
  DenseMatrix t(cols_, rows_);
  for (std::size_t i = 0; i < rows_; ++i)
    for (std::size_t j = 0; j < cols_; ++j) t(j, i) = (*this)(i, j);
  return t;
}

Vector DenseMatrix::col_as_vector(std::size_t j) const {
  if (j >= cols_) throw ShapeError("col_as_vector: column index out of range");
  Vector v(rows_);
  for (std::size_t i = 0; i < rows_; ++i) v[i] = (*this)(i, j);
  return v;
}

Vector DenseMatrix::row_as_vector(std::size_t i) const {
  if (i >= rows_) throw ShapeError("row_as_vector: row index out of range");
  Vector v(cols_);
  std::memcpy(v.data(), row(i), cols_ * sizeof(double));
  return v;
}

double DenseMatrix::frobenius_norm() const {
  double s = 0.0;
  for (double x : data_) s += x * x;
  return std::sqrt(s);
}

double DenseMatrix::max_abs() const {
  double m = 0.0;
  for (double x : data_) m = std::max(m, std::abs(x));
  return m;
}

bool DenseMatrix::all_finite() const {
  for (double x : data_) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

bool DenseMatrix::is_zero() const {
  for (double x : data_) {
    if (x != 0.0) return false;
  }
  return true;
}

void DenseMatrix::add_in_place(const DenseMatrix& other) {
  require_same_shape(*this, other, "add_in_place");
  for (std::size_t k = 0; k < data_.size(); ++k) data_[k] += other.data_[k];
}

void DenseMatrix::scale_in_place(double s) {
  for (double& x : data_) x *= s;
}

// ---- elementwise / affine helpers -----------------------------------------

DenseMatrix add(const DenseMatrix& a, const DenseMatrix& b) {
  require_same_shape(a, b, "add");
  DenseMatrix out = a;
  out.add_in_place(b);
  return out;
}

DenseMatrix sub(const DenseMatrix& a, const DenseMatrix& b) {
  require_same_shape(a, b, "sub");
  DenseMatrix out(a.rows(), a.cols());
  for (std::size_t k = 0; k < out.size(); ++k) out.data()[k] = a.data()[k] - b.data()[k];
  return out;
}

DenseMatrix scale(const DenseMatrix& a, double s) {
  DenseMatrix out = a;
  out.scale_in_place(s);
  return out;
}

DenseMatrix add_rowvec(const DenseMatrix& a, const Vector& v) {
  if (v.dim() != a.cols()) throw ShapeError("add_rowvec: bias length must match cols");
  DenseMatrix out = a;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    double* r = out.row(i);
    for (std::size_t j = 0; j < out.cols(); ++j) r[j] += v[j];
  }
  return out;
}

DenseMatrix outer(const Vector& a, const Vector& b) {
  DenseMatrix out(a.dim(), b.dim());
  for (std::size_t i = 0; i < a.dim(); ++i) {
    double* r = out.row(i);
    const double ai = a[i];
    for (std::size_t j = 0; j < b.dim(); ++j) r[j] = ai * b[j];
  }
  return out;
}

double max_abs_diff(const DenseMatrix& a, const DenseMatrix& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) m = std::max(m, std::abs(a.data()[k] - b.data()[k]));
  return m;
}

// ---- products --------------------------------------------------------------

DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions disagree (" + std::to_string(a.cols()) + " vs " +
                     std::to_string(b.rows()) + ")");
  }
  DenseMatrix out(a.rows(), b.cols());
  // ikj order: the inner loop walks both b and out row-contiguously.
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const double* arow = a.row(i);
    double* orow = out.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = arow[k];
      if (aik == 0.0) continue;
      const double* brow = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) orow[j] += aik * brow[j];
    }
  }
  return out;
}

DenseMatrix matmul_nt(const DenseMatrix& a, const DenseMatrix& b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt: inner dimensions disagree (" + std::to_string(a.cols()) +
                     " vs " + std::to_string(b.cols()) + ")");
  }
  DenseMatrix out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const double* arow = a.row(i);
    double* orow = out.row(i);
    for (std::size_t j = 0; j < b.rows(); ++j) {
      const double* brow = b.row(j);
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += arow[k] * brow[k];
      orow[j] = s;
    }
  }
  return out;
}

DenseMatrix matmul_tn(const DenseMatrix& a, const DenseMatrix& b) {
  if (a.rows() != b.rows()) {
    throw ShapeError("matmul_tn: inner dimensions disagree (" + std::to_string(a.rows()) +
                     " vs " + std::to_string(b.rows()) + ")");
  }
  DenseMatrix out(a.cols(), b.cols());
  for (std::size_t k = 0; k < a.rows(); ++k) {
    const double* arow = a.row(k);
    const double* brow = b.row(k);
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double aki = arow[i];
      if (aki == 0.0) continue;
      double* orow = out.row(i);
      for (std::size_t j = 0; j < b.cols(); ++j) orow[j] += aki * brow[j];
    }
  }
  return out;
}

Vector matvec(const DenseMatrix& a, const Vector& x) {
  if (a.cols() != x.dim()) throw ShapeError("matvec: dimension mismatch");
  Vector y(a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const double* arow = a.row(i);
    double s = 0.0;
    for (std::size_t j = 0; j < a.cols(); ++j) s += arow[j] * x[j];
    y[i] = s;
  }
  return y;
}

Vector matvec_t(const DenseMatrix& a, const Vector& x) {
  if (a.rows() != x.dim()) throw ShapeError("matvec_t: dimension mismatch");
  Vector y(a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const double* arow = a.row(i);
    const double xi = x[i];
    if (xi == 0.0) continue;
    for (std::size_t j = 0; j < a.cols(); ++j) y[j] += xi * arow[j];
  }
  return y;
}

// ---- Householder -----------------------------------------------------------

DenseMatrix householder_matrix(const Vector& v) {
  DenseMatrix h = DenseMatrix::identity(v.dim());
  for (std::size_t i = 0; i < v.dim(); ++i) {
    double* r = h.row(i);
    const double vi = v[i];
    for (std::size_t j = 0; j < v.dim(); ++j) r[j] -= vi * v[j];
  }
  return h;
}

DenseMatrix apply_householder_left(const Vector& v, const DenseMatrix& x) {
  if (v.dim() != x.rows()) throw ShapeError("apply_householder_left: v.dim must equal x.rows");
  // X - v (v^T X): one D-vector of row combinations, then a rank-1 update.
  Vector vtx(x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const double vi = v[i];
    if (vi == 0.0) continue;
    const double* xrow = x.row(i);
    for (std::size_t j = 0; j < x.cols(); ++j) vtx[j] += vi * xrow[j];
  }
  DenseMatrix out = x;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    const double vi = v[i];
    if (vi == 0.0) continue;
    double* orow = out.row(i);
    for (std::size_t j = 0; j < out.cols(); ++j) orow[j] -= vi * vtx[j];
  }
  return out;
}

DenseMatrix apply_householder_right(const DenseMatrix& x, const Vector& v) {
  if (v.dim() != x.cols()) throw ShapeError("apply_householder_right: v.dim must equal x.cols");
  // X - (X v) v^T: per-row dot with v, then a rank-1 update.
  DenseMatrix out = x;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const double* xrow = x.row(i);
    double dot = 0.0;
    for (std::size_t j = 0; j < x.cols(); ++j) dot += xrow[j] * v[j];
    if (dot == 0.0) continue;
    double* orow = out.row(i);
    for (std::size_t j = 0; j < x.cols(); ++j) orow[j] -= dot * v[j];
  }
  return out;
}

// ---- finite differences ----------------------------------------------------

Vector finite_diff_grad(const std::function<double(const Vector&)>& f, const Vector& at,
                        double h) {
  if (h <= 0.0) throw ConfigError("finite_diff_grad: step size must be positive");
  Vector g(at.dim());
  Vector x = at;
  for (std::size_t i = 0; i < at.dim(); ++i) {
    const double xi = at[i];
    x[i] = xi + h;
    const double fp = f(x);
    x[i] = xi - h;
    const double fm = f(x);
    x[i] = xi;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NumericError("finite_diff_grad: non-finite objective at coordinate " +
                         std::to_string(i));
    }
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

}  // namespace hta
