#include "hta/autodiff.hpp"

#include <cmath>
#include <cstring>
#include <string>

#include "hta/nn_kernels.hpp"
#include "hta/scalar_ops.hpp"

namespace hta {

// ---- shared row kernels ------------------------------------------------------

LayerNormRows layernorm_rows(const DenseMatrix& x) {
  LayerNormRows out{DenseMatrix(x.rows(), x.cols()), DenseMatrix(x.rows(), 1)};
  const std::size_t d = x.cols();
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const double* row = x.row(i);
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = row[j] - mu;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    out.inv_std(i, 0) = inv;
    double* yrow = out.y.row(i);
    for (std::size_t j = 0; j < d; ++j) yrow[j] = (row[j] - mu) * inv;
  }
  return out;
}

DenseMatrix softmax_rows(const DenseMatrix& x) {
  DenseMatrix y(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const double* row = x.row(i);
    double m = row[0];
    for (std::size_t j = 1; j < x.cols(); ++j) m = std::max(m, row[j]);
    double s = 0.0;
    double* yrow = y.row(i);
    for (std::size_t j = 0; j < x.cols(); ++j) {
      yrow[j] = std::exp(row[j] - m);
      s += yrow[j];
    }
    const double inv = 1.0 / s;
    for (std::size_t j = 0; j < x.cols(); ++j) yrow[j] *= inv;
  }
  return y;
}

CrossEntropyRows cross_entropy_rows(const DenseMatrix& logits,
                                    std::span<const std::size_t> labels) {
  if (labels.size() != logits.rows()) {
    throw ShapeError("cross_entropy: one label per row required");
  }
  CrossEntropyRows out{DenseMatrix(logits.rows(), 1), DenseMatrix(logits.rows(), logits.cols())};
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    if (labels[i] >= logits.cols()) {
      throw ShapeError("cross_entropy: label " + std::to_string(labels[i]) +
                       " out of range for " + std::to_string(logits.cols()) + " classes");
    }
    const double* row = logits.row(i);
    double m = row[0];
    for (std::size_t j = 1; j < logits.cols(); ++j) m = std::max(m, row[j]);
    double s = 0.0;
    double* prow = out.probs.row(i);
    for (std::size_t j = 0; j < logits.cols(); ++j) {
      prow[j] = std::exp(row[j] - m);
      s += prow[j];
    }
    const double inv = 1.0 / s;
    for (std::size_t j = 0; j < logits.cols(); ++j) prow[j] *= inv;
    out.losses(i, 0) = std::log(s) + m - row[labels[i]];
  }
  return out;
}

// ---- Grad ---------------------------------------------------------------------

const DenseMatrix& Grad::at(NodeId leaf) const {
  const auto it = by_leaf_.find(leaf);
  if (it == by_leaf_.end()) {
    throw ConfigError("Grad: no gradient recorded for node " + std::to_string(leaf));
  }
  return it->second;
}

// ---- Tape: recording ------------------------------------------------------------

NodeId Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return nodes_.size() - 1;
}

const Tape::Node& Tape::node(NodeId id) const {
  if (id >= nodes_.size()) throw ConfigError("Tape: bad node id");
  return nodes_[id];
}

const DenseMatrix& Tape::value(NodeId id) const { return node(id).value; }

bool Tape::requires_grad(NodeId id) const { return node(id).needs_grad; }

NodeId Tape::leaf(DenseMatrix value, bool trainable) {
  Node n;
  n.op = Op::leaf;
  n.value = std::move(value);
  n.needs_grad = trainable;
  n.trainable = trainable;
  return push(std::move(n));
}

NodeId Tape::constant(DenseMatrix value) { return leaf(std::move(value), false); }

NodeId Tape::matmul(NodeId a, NodeId b) {
  Node n;
  n.op = Op::matmul;
  n.a = a;
  n.b = b;
  n.value = hta::matmul(node(a).value, node(b).value);
  n.needs_grad = flows(a) || flows(b);
  return push(std::move(n));
}

NodeId Tape::matmul_nt(NodeId a, NodeId b) {
  Node n;
  n.op = Op::matmul_nt;
  n.a = a;
  n.b = b;
  n.value = hta::matmul_nt(node(a).value, node(b).value);
  n.needs_grad = flows(a) || flows(b);
  return push(std::move(n));
}

NodeId Tape::matmul_tn(NodeId a, NodeId b) {
  Node n;
  n.op = Op::matmul_tn;
  n.a = a;
  n.b = b;
  n.value = hta::matmul_tn(node(a).value, node(b).value);
  n.needs_grad = flows(a) || flows(b);
  return push(std::move(n));
}

NodeId Tape::add(NodeId a, NodeId b) {
  Node n;
  n.op = Op::add;
  n.a = a;
  n.b = b;
  n.value = hta::add(node(a).value, node(b).value);
  n.needs_grad = flows(a) || flows(b);
  return push(std::move(n));
}

NodeId Tape::scale(NodeId a, double s) {
  Node n;
  n.op = Op::scale;
  n.a = a;
  n.scalar = s;
  n.value = hta::scale(node(a).value, s);
  n.needs_grad = flows(a);
  return push(std::move(n));
}

NodeId Tape::add_rowvec(NodeId x, NodeId bias) {
  const DenseMatrix& b = node(bias).value;
  if (b.rows() != 1) throw ShapeError("Tape::add_rowvec: bias must be 1 x D");
  Node n;
  n.op = Op::add_rowvec;
  n.a = x;
  n.b = bias;
  n.value = hta::add_rowvec(node(x).value, b.row_as_vector(0));
  n.needs_grad = flows(x) || flows(bias);
  return push(std::move(n));
}

NodeId Tape::rank1_householder_apply(NodeId x, NodeId v) {
  const DenseMatrix& vm = node(v).value;
  if (vm.cols() != 1) throw ShapeError("Tape::rank1_householder_apply: v must be D x 1");
  Node n;
  n.op = Op::rank1_householder;
  n.a = x;
  n.b = v;
  n.value = apply_householder_right(node(x).value, vm.col_as_vector(0));
  n.needs_grad = flows(x) || flows(v);
  return push(std::move(n));
}

NodeId Tape::diag_scale(NodeId x, NodeId d) {
  const DenseMatrix& dm = node(d).value;
  if (dm.cols() != 1) throw ShapeError("Tape::diag_scale: d must be D x 1");
  if (dm.rows() != node(x).value.cols()) {
    throw ShapeError("Tape::diag_scale: d length must equal x cols");
  }
  Node n;
  n.op = Op::diag_scale;
  n.a = x;
  n.b = d;
  n.value = node(x).value;
  for (std::size_t i = 0; i < n.value.rows(); ++i) {
    double* row = n.value.row(i);
    for (std::size_t j = 0; j < n.value.cols(); ++j) row[j] *= dm(j, 0);
  }
  n.needs_grad = flows(x) || flows(d);
  return push(std::move(n));
}

NodeId Tape::layernorm(NodeId x) {
  Node n;
  n.op = Op::layernorm;
  n.a = x;
  LayerNormRows ln = layernorm_rows(node(x).value);
  n.value = std::move(ln.y);
  n.aux = std::move(ln.inv_std);
  n.needs_grad = flows(x);
  return push(std::move(n));
}

NodeId Tape::softmax(NodeId x) {
  Node n;
  n.op = Op::softmax;
  n.a = x;
  n.value = softmax_rows(node(x).value);
  n.needs_grad = flows(x);
  return push(std::move(n));
}

NodeId Tape::gelu(NodeId x) {
  Node n;
  n.op = Op::gelu;
  n.a = x;
  n.value = node(x).value;
  for (double& v : n.value.values()) v = hta::gelu(v);
  n.needs_grad = flows(x);
  return push(std::move(n));
}

NodeId Tape::relu(NodeId x) {
  Node n;
  n.op = Op::relu;
  n.a = x;
  n.value = node(x).value;
  for (double& v : n.value.values()) v = hta::relu(v);
  n.needs_grad = flows(x);
  return push(std::move(n));
}

NodeId Tape::cross_entropy(NodeId logits, std::vector<std::size_t> labels) {
  Node n;
  n.op = Op::cross_entropy;
  n.a = logits;
  CrossEntropyRows ce = cross_entropy_rows(node(logits).value, labels);
  n.value = std::move(ce.losses);
  n.aux = std::move(ce.probs);
  n.indices = std::move(labels);
  n.needs_grad = flows(logits);
  return push(std::move(n));
}

NodeId Tape::mean(NodeId x) {
  Node n;
  n.op = Op::mean;
  n.a = x;
  const DenseMatrix& xv = node(x).value;
  if (xv.size() == 0) throw ShapeError("Tape::mean: empty input");
  double s = 0.0;
  for (double v : xv.values()) s += v;
  n.value = DenseMatrix(1, 1);
  n.value(0, 0) = s / static_cast<double>(xv.size());
  n.needs_grad = flows(x);
  return push(std::move(n));
}

NodeId Tape::gather_rows(NodeId x, std::vector<std::size_t> rows) {
  const DenseMatrix& xv = node(x).value;
  Node n;
  n.op = Op::gather_rows;
  n.a = x;
  n.value = DenseMatrix(rows.size(), xv.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= xv.rows()) throw ShapeError("Tape::gather_rows: row index out of range");
    std::memcpy(n.value.row(r), xv.row(rows[r]), xv.cols() * sizeof(double));
  }
  n.indices = std::move(rows);
  n.needs_grad = flows(x);
  return push(std::move(n));
}

NodeId Tape::slice_cols(NodeId x, std::size_t begin, std::size_t count) {
  const DenseMatrix& xv = node(x).value;
  if (begin + count > xv.cols()) throw ShapeError("Tape::slice_cols: slice out of range");
  Node n;
  n.op = Op::slice_cols;
  n.a = x;
  n.begin = begin;
  n.count = count;
  n.value = DenseMatrix(xv.rows(), count);
  for (std::size_t i = 0; i < xv.rows(); ++i) {
    std::memcpy(n.value.row(i), xv.row(i) + begin, count * sizeof(double));
  }
  n.needs_grad = flows(x);
  return push(std::move(n));
}

NodeId Tape::concat_cols(const std::vector<NodeId>& parts) {
  if (parts.empty()) throw ShapeError("Tape::concat_cols: no parts");
  const std::size_t rows = node(parts[0]).value.rows();
  std::size_t cols = 0;
  bool needs = false;
  for (NodeId p : parts) {
    if (node(p).value.rows() != rows) throw ShapeError("Tape::concat_cols: row mismatch");
    cols += node(p).value.cols();
    needs = needs || flows(p);
  }
  Node n;
  n.op = Op::concat_cols;
  n.many = parts;
  n.value = DenseMatrix(rows, cols);
  std::size_t off = 0;
  for (NodeId p : parts) {
    const DenseMatrix& pv = node(p).value;
    for (std::size_t i = 0; i < rows; ++i) {
      std::memcpy(n.value.row(i) + off, pv.row(i), pv.cols() * sizeof(double));
    }
    off += pv.cols();
  }
  n.needs_grad = needs;
  return push(std::move(n));
}

NodeId Tape::concat_rows(const std::vector<NodeId>& parts) {
  if (parts.empty()) throw ShapeError("Tape::concat_rows: no parts");
  const std::size_t cols = node(parts[0]).value.cols();
  std::size_t rows = 0;
  bool needs = false;
  for (NodeId p : parts) {
    if (node(p).value.cols() != cols) throw ShapeError("Tape::concat_rows: col mismatch");
    rows += node(p).value.rows();
    needs = needs || flows(p);
  }
  Node n;
  n.op = Op::concat_rows;
  n.many = parts;
  n.value = DenseMatrix(rows, cols);
  std::size_t off = 0;
  for (NodeId p : parts) {
    const DenseMatrix& pv = node(p).value;
    std::memcpy(n.value.row(off), pv.data(), pv.size() * sizeof(double));
    off += pv.rows();
  }
  n.needs_grad = needs;
  return push(std::move(n));
}

NodeId Tape::dropout_mask(NodeId x, DenseMatrix mask) {
  const DenseMatrix& xv = node(x).value;
  if (mask.rows() != xv.rows() || mask.cols() != xv.cols()) {
    throw ShapeError("Tape::dropout_mask: mask shape must match input");
  }
  Node n;
  n.op = Op::dropout_mask;
  n.a = x;
  n.value = xv;
  for (std::size_t k = 0; k < n.value.size(); ++k) n.value.data()[k] *= mask.data()[k];
  n.aux = std::move(mask);
  n.needs_grad = flows(x);
  return push(std::move(n));
}

// ---- Tape: backward --------------------------------------------------------------

Grad Tape::backward(NodeId loss) {
  const Node& top = node(loss);
  if (top.value.rows() != 1 || top.value.cols() != 1) {
    throw ShapeError("Tape::backward: loss must be a 1 x 1 scalar node");
  }

  // Adjoints exist only for nodes on a trainable path; everything else is
  // skipped entirely (frozen subgraphs never allocate).
  std::vector<DenseMatrix> adj(nodes_.size());
  const auto accumulate = [&](NodeId id, DenseMatrix g) {
    if (!nodes_[id].needs_grad) return;
    if (adj[id].empty()) {
      adj[id] = std::move(g);
    } else {
      adj[id].add_in_place(g);
    }
  };

  if (top.needs_grad) {
    DenseMatrix seed(1, 1);
    seed(0, 0) = 1.0;
    adj[loss] = std::move(seed);
  }

  for (NodeId id = loss + 1; id-- > 0;) {
    const Node& n = nodes_[id];
    if (!n.needs_grad || adj[id].empty()) continue;
    const DenseMatrix& g = adj[id];
    switch (n.op) {
      case Op::leaf:
        break;
      case Op::matmul:
        if (flows(n.a)) accumulate(n.a, hta::matmul_nt(g, nodes_[n.b].value));
        if (flows(n.b)) accumulate(n.b, hta::matmul_tn(nodes_[n.a].value, g));
        break;
      case Op::matmul_nt:
        if (flows(n.a)) accumulate(n.a, hta::matmul(g, nodes_[n.b].value));
        if (flows(n.b)) accumulate(n.b, hta::matmul_tn(g, nodes_[n.a].value));
        break;
      case Op::matmul_tn:
        if (flows(n.a)) accumulate(n.a, hta::matmul_nt(nodes_[n.b].value, g));
        if (flows(n.b)) accumulate(n.b, hta::matmul(nodes_[n.a].value, g));
        break;
      case Op::add:
        if (flows(n.a)) accumulate(n.a, g);
        if (flows(n.b)) accumulate(n.b, g);
        break;
      case Op::scale:
        accumulate(n.a, hta::scale(g, n.scalar));
        break;
      case Op::add_rowvec: {
        if (flows(n.a)) accumulate(n.a, g);
        if (flows(n.b)) {
          DenseMatrix db(1, g.cols());
          for (std::size_t i = 0; i < g.rows(); ++i) {
            const double* grow = g.row(i);
            for (std::size_t j = 0; j < g.cols(); ++j) db(0, j) += grow[j];
          }
          accumulate(n.b, std::move(db));
        }
        break;
      }
      case Op::rank1_householder: {
        const DenseMatrix& x = nodes_[n.a].value;
        const Vector v = nodes_[n.b].value.col_as_vector(0);
        if (flows(n.a)) accumulate(n.a, apply_householder_right(g, v));
        if (flows(n.b)) {
          // dv = -X^T (G v) - G^T (X v)
          const Vector gv = matvec(g, v);
          const Vector xv = matvec(x, v);
          DenseMatrix dv(v.dim(), 1);
          for (std::size_t i = 0; i < x.rows(); ++i) {
            const double* xrow = x.row(i);
            const double* grow = g.row(i);
            const double gvi = gv[i];
            const double xvi = xv[i];
            for (std::size_t j = 0; j < v.dim(); ++j) {
              dv(j, 0) -= xrow[j] * gvi + grow[j] * xvi;
            }
          }
          accumulate(n.b, std::move(dv));
        }
        break;
      }
      case Op::diag_scale: {
        const DenseMatrix& x = nodes_[n.a].value;
        const DenseMatrix& d = nodes_[n.b].value;
        if (flows(n.a)) {
          DenseMatrix dx = g;
          for (std::size_t i = 0; i < dx.rows(); ++i) {
            double* row = dx.row(i);
            for (std::size_t j = 0; j < dx.cols(); ++j) row[j] *= d(j, 0);
          }
          accumulate(n.a, std::move(dx));
        }
        if (flows(n.b)) {
          DenseMatrix dd(d.rows(), 1);
          for (std::size_t i = 0; i < g.rows(); ++i) {
            const double* grow = g.row(i);
            const double* xrow = x.row(i);
            for (std::size_t j = 0; j < g.cols(); ++j) dd(j, 0) += grow[j] * xrow[j];
          }
          accumulate(n.b, std::move(dd));
        }
        break;
      }
      case Op::layernorm: {
        const DenseMatrix& y = n.value;
        const DenseMatrix& inv_std = n.aux;
        DenseMatrix dx(g.rows(), g.cols());
        const double dn = static_cast<double>(g.cols());
        for (std::size_t i = 0; i < g.rows(); ++i) {
          const double* grow = g.row(i);
          const double* yrow = y.row(i);
          double gsum = 0.0, gysum = 0.0;
          for (std::size_t j = 0; j < g.cols(); ++j) {
            gsum += grow[j];
            gysum += grow[j] * yrow[j];
          }
          const double gmean = gsum / dn;
          const double gymean = gysum / dn;
          const double inv = inv_std(i, 0);
          double* drow = dx.row(i);
          for (std::size_t j = 0; j < g.cols(); ++j) {
            drow[j] = inv * (grow[j] - gmean - yrow[j] * gymean);
          }
        }
        accumulate(n.a, std::move(dx));
        break;
      }
      case Op::softmax: {
        const DenseMatrix& y = n.value;
        DenseMatrix dx(g.rows(), g.cols());
        for (std::size_t i = 0; i < g.rows(); ++i) {
          const double* grow = g.row(i);
          const double* yrow = y.row(i);
          double dot = 0.0;
          for (std::size_t j = 0; j < g.cols(); ++j) dot += grow[j] * yrow[j];
          double* drow = dx.row(i);
          for (std::size_t j = 0; j < g.cols(); ++j) drow[j] = yrow[j] * (grow[j] - dot);
        }
        accumulate(n.a, std::move(dx));
        break;
      }
      case Op::gelu: {
        const DenseMatrix& x = nodes_[n.a].value;
        DenseMatrix dx = g;
        for (std::size_t k = 0; k < dx.size(); ++k) dx.data()[k] *= gelu_grad(x.data()[k]);
        accumulate(n.a, std::move(dx));
        break;
      }
      case Op::relu: {
        const DenseMatrix& x = nodes_[n.a].value;
        DenseMatrix dx = g;
        for (std::size_t k = 0; k < dx.size(); ++k) dx.data()[k] *= relu_grad(x.data()[k]);
        accumulate(n.a, std::move(dx));
        break;
      }
      case Op::cross_entropy: {
        const DenseMatrix& probs = n.aux;
        DenseMatrix dz = probs;
        for (std::size_t i = 0; i < dz.rows(); ++i) {
          double* drow = dz.row(i);
          drow[n.indices[i]] -= 1.0;
          const double gi = g(i, 0);
          for (std::size_t j = 0; j < dz.cols(); ++j) drow[j] *= gi;
        }
        accumulate(n.a, std::move(dz));
        break;
      }
      case Op::mean: {
        const DenseMatrix& x = nodes_[n.a].value;
        const double gv = g(0, 0) / static_cast<double>(x.size());
        accumulate(n.a, DenseMatrix(x.rows(), x.cols(), gv));
        break;
      }
      case Op::gather_rows: {
        const DenseMatrix& x = nodes_[n.a].value;
        DenseMatrix dx(x.rows(), x.cols());
        for (std::size_t r = 0; r < n.indices.size(); ++r) {
          double* drow = dx.row(n.indices[r]);
          const double* grow = g.row(r);
          for (std::size_t j = 0; j < g.cols(); ++j) drow[j] += grow[j];
        }
        accumulate(n.a, std::move(dx));
        break;
      }
      case Op::slice_cols: {
        const DenseMatrix& x = nodes_[n.a].value;
        DenseMatrix dx(x.rows(), x.cols());
        for (std::size_t i = 0; i < g.rows(); ++i) {
          std::memcpy(dx.row(i) + n.begin, g.row(i), n.count * sizeof(double));
        }
        accumulate(n.a, std::move(dx));
        break;
      }
      case Op::concat_cols: {
        std::size_t off = 0;
        for (NodeId p : n.many) {
          const std::size_t w = nodes_[p].value.cols();
          if (flows(p)) {
            DenseMatrix dp(g.rows(), w);
            for (std::size_t i = 0; i < g.rows(); ++i) {
              std::memcpy(dp.row(i), g.row(i) + off, w * sizeof(double));
            }
            accumulate(p, std::move(dp));
          }
          off += w;
        }
        break;
      }
      case Op::concat_rows: {
        std::size_t off = 0;
        for (NodeId p : n.many) {
          const std::size_t h = nodes_[p].value.rows();
          if (flows(p)) {
            DenseMatrix dp(h, g.cols());
            std::memcpy(dp.data(), g.row(off), h * g.cols() * sizeof(double));
            accumulate(p, std::move(dp));
          }
          off += h;
        }
        break;
      }
      case Op::dropout_mask: {
        DenseMatrix dx = g;
        for (std::size_t k = 0; k < dx.size(); ++k) dx.data()[k] *= n.aux.data()[k];
        accumulate(n.a, std::move(dx));
        break;
      }
    }
    if (!nodes_[id].trainable) adj[id] = DenseMatrix();  // free as we go
  }

  Grad grad;
  for (NodeId id = 0; id <= loss && id < nodes_.size(); ++id) {
    if (!nodes_[id].trainable || adj[id].empty()) continue;
    if (!adj[id].all_finite()) {
      throw NumericError("Tape::backward: non-finite gradient at leaf node " +
                         std::to_string(id));
    }
    grad.set(id, std::move(adj[id]));
  }
  return grad;
}

// ---- gradient checking -------------------------------------------------------------

GradCheckResult grad_check(
    const std::vector<std::pair<std::string, Vector>>& params,
    const std::function<double(const std::vector<Vector>&)>& loss_at,
    const std::function<std::vector<Vector>(const std::vector<Vector>&)>& grad_at,
    double h, double rtol, double atol) {
  std::vector<Vector> values;
  values.reserve(params.size());
  for (const auto& [name, v] : params) values.push_back(v);

  const std::vector<Vector> autodiff = grad_at(values);
  if (autodiff.size() != params.size()) {
    throw ConfigError("grad_check: grad_at must return one block per parameter");
  }

  GradCheckResult result;
  for (std::size_t p = 0; p < params.size(); ++p) {
    const auto& [name, center] = params[p];
    if (autodiff[p].dim() != center.dim()) {
      throw ShapeError("grad_check: gradient shape mismatch for '" + name + "'");
    }
    Vector numeric;
    try {
      numeric = finite_diff_grad(
          [&](const Vector& x) {
            std::vector<Vector> probe = values;
            probe[p] = x;
            return loss_at(probe);
          },
          center, h);
    } catch (const NumericError& e) {
      throw NumericError("grad_check: parameter '" + name + "': " + e.what());
    }

    GradCheckResult::Entry entry;
    entry.param = name;
    for (std::size_t i = 0; i < center.dim(); ++i) {
      const double a = autodiff[p][i];
      const double f = numeric[i];
      const double diff = std::abs(a - f);
      const double mag = std::max(std::abs(a), std::abs(f));
      const double rel = mag > 0.0 ? diff / mag : 0.0;
      if (diff > entry.max_abs_diff) entry.max_abs_diff = diff;
      if (diff > atol && rel > entry.max_rel) {
        entry.max_rel = rel;
        entry.worst_index = i;
      }
    }
    entry.pass = entry.max_rel <= rtol;
    result.all_pass = result.all_pass && entry.pass;
    result.entries.push_back(std::move(entry));
  }
  return result;
}

}  // namespace hta
