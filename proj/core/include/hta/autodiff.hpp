#pragma once

#include <cstddef>
#include <functional>
#include <limits>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "hta/linalg.hpp"

namespace hta {

using NodeId = std::size_t;
inline constexpr NodeId kNoNode = std::numeric_limits<NodeId>::max();

/// Rowwise LayerNorm epsilon, shared by the eval path and the tape primitive
/// so the two never disagree.
inline constexpr double kLayerNormEps = 1e-5;

/// Per-leaf gradients for trainable leaves only; frozen leaves never appear.
class Grad {
 public:
  bool contains(NodeId leaf) const { return by_leaf_.count(leaf) != 0; }
  const DenseMatrix& at(NodeId leaf) const;
  std::size_t size() const { return by_leaf_.size(); }
  void set(NodeId leaf, DenseMatrix g) { by_leaf_[leaf] = std::move(g); }

 private:
  std::unordered_map<NodeId, DenseMatrix> by_leaf_;
};

/// Reverse-mode tape over matrix values. Each call records one primitive,
/// computes its value eagerly, and returns the node id. Values are
/// row-major matrices; vector parameters enter as D x 1 leaves and
/// row-broadcast biases as 1 x D leaves. backward() walks the record once
/// in reverse and returns gradients for trainable leaves only — frozen
/// subgraphs are skipped entirely and never allocate adjoint buffers.
class Tape {
 public:
  /// Parameter leaf. Trainable leaves are what backward() reports on.
  NodeId leaf(DenseMatrix value, bool trainable);
  /// Frozen input/constant. Same as leaf(value, false).
  NodeId constant(DenseMatrix value);

  NodeId matmul(NodeId a, NodeId b);     // A B
  NodeId matmul_nt(NodeId a, NodeId b);  // A B^T
  NodeId matmul_tn(NodeId a, NodeId b);  // A^T B
  NodeId add(NodeId a, NodeId b);
  NodeId scale(NodeId a, double s);
  /// x + broadcast of a 1 x D bias row.
  NodeId add_rowvec(NodeId x, NodeId bias);
  /// X (I - v v^T) = X - (X v) v^T with v a D x 1 leaf; the reflection
  /// applied to every row without materializing the matrix.
  NodeId rank1_householder_apply(NodeId x, NodeId v);
  /// X diag(d) with d a D x 1 leaf (column j scaled by d_j).
  NodeId diag_scale(NodeId x, NodeId d);
  /// Rowwise (x - mean) / sqrt(var + kLayerNormEps); no affine (apply one
  /// with diag_scale/add_rowvec if needed).
  NodeId layernorm(NodeId x);
  /// Rowwise softmax, max-shifted.
  NodeId softmax(NodeId x);
  NodeId gelu(NodeId x);
  NodeId relu(NodeId x);
  /// Per-row softmax cross-entropy against integer labels; returns B x 1
  /// losses (mean-reduce separately).
  NodeId cross_entropy(NodeId logits, std::vector<std::size_t> labels);
  /// Mean of all entries; 1 x 1.
  NodeId mean(NodeId x);
  /// Row selection (duplicates legal; backward scatter-adds).
  NodeId gather_rows(NodeId x, std::vector<std::size_t> rows);
  /// Contiguous column slice [begin, begin + count).
  NodeId slice_cols(NodeId x, std::size_t begin, std::size_t count);
  NodeId concat_cols(const std::vector<NodeId>& parts);
  NodeId concat_rows(const std::vector<NodeId>& parts);
  /// Elementwise multiply by a fixed mask (inverted-dropout scaling baked
  /// into the mask values).
  NodeId dropout_mask(NodeId x, DenseMatrix mask);

  const DenseMatrix& value(NodeId id) const;
  bool requires_grad(NodeId id) const;
  std::size_t node_count() const { return nodes_.size(); }

  /// Reverse pass from a 1 x 1 loss node. May be called once per tape.
  Grad backward(NodeId loss);

 private:
  enum class Op {
    leaf,
    matmul,
    matmul_nt,
    matmul_tn,
    add,
    scale,
    add_rowvec,
    rank1_householder,
    diag_scale,
    layernorm,
    softmax,
    gelu,
    relu,
    cross_entropy,
    mean,
    gather_rows,
    slice_cols,
    concat_cols,
    concat_rows,
    dropout_mask,
  };

  struct Node {
    Op op = Op::leaf;
    NodeId a = kNoNode;
    NodeId b = kNoNode;
    DenseMatrix value;
    double scalar = 0.0;                // scale
    std::size_t begin = 0, count = 0;   // slice_cols
    std::vector<std::size_t> indices;   // gather_rows rows / cross_entropy labels
    std::vector<NodeId> many;           // concat inputs
    DenseMatrix aux;                    // layernorm inv-std, softmax/CE probs, dropout mask
    bool needs_grad = false;
    bool trainable = false;
  };

  NodeId push(Node node);
  const Node& node(NodeId id) const;
  bool flows(NodeId id) const { return nodes_[id].needs_grad; }

  std::vector<Node> nodes_;
};

// ---- gradient checking -------------------------------------------------------

/// One named flat parameter block under test.
struct GradCheckResult {
  struct Entry {
    std::string param;
    double max_abs_diff = 0.0;
    double max_rel = 0.0;        // |a-f| / max(|a|,|f|) at the worst coordinate
    std::size_t worst_index = 0;
    bool pass = true;
  };
  std::vector<Entry> entries;
  bool all_pass = true;
};

/// Compare reverse-mode gradients against central differences, parameter
/// block by parameter block. loss_at must be a pure function of the
/// parameter values; grad_at returns autodiff gradients aligned with params.
/// A coordinate passes when |a - f| <= atol or the relative error <= rtol
/// (the absolute floor keeps finite-difference noise from failing
/// negligible components).
GradCheckResult grad_check(
    const std::vector<std::pair<std::string, Vector>>& params,
    const std::function<double(const std::vector<Vector>&)>& loss_at,
    const std::function<std::vector<Vector>(const std::vector<Vector>&)>& grad_at,
    double h = 1e-5, double rtol = 1e-5, double atol = 1e-8);

}  // namespace hta
