#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "hta/linalg.hpp"
#include "hta/rng.hpp"

namespace hta {

enum class Activation { relu, gelu, identity };

const char* activation_name(Activation a);
Activation activation_from_name(const std::string& name);
DenseMatrix apply_activation(Activation a, const DenseMatrix& x);

/// Optional additive low-rank pair: w_down (D x r) times w_up (r x D).
struct LowRankPair {
  DenseMatrix w_down;
  DenseMatrix w_up;
};

/// Householder-transformation adaptor: two reflection vectors around a
/// learnable diagonal, plus an optional additive low-rank term.
/// The composed matrix is (I - v_left v_left^T) diag(d) (I - v_right v_right^T)
/// [+ w_down w_up].
struct HtaAdapter {
  std::size_t dim = 0;
  Vector v_left;
  Vector v_right;
  Vector d;
  std::optional<LowRankPair> lowrank;  // present iff rank_r > 0
  std::size_t rank_r = 0;
  // When set, v_left/v_right are reprojected to ||v||^2 = 2 at init and after
  // every optimizer step, pinning both reflection factors exactly orthogonal.
  bool normalize_v = false;

  /// All-zero parameters (used by tests; composes to the zero matrix).
  static HtaAdapter zeros(std::size_t dim, std::size_t rank_r, bool normalize_v = false);
  /// Default trainable init: d = 0, w_up = 0, w_down and v ~ N(0, 0.02), so
  /// the adaptation matrix is exactly zero at step 0.
  static HtaAdapter init(std::size_t dim, std::size_t rank_r, Rng& rng,
                         bool normalize_v = false);

  void validate() const;
  /// Rescale v_left and v_right to ||v||^2 = 2. Zero vectors stay zero (the
  /// other orthogonality root).
  void project_v();
};

/// Plain low-rank adapter: additive w_down (D_in x r) times w_up (r x D_out).
struct LoraAdapter {
  DenseMatrix w_down;
  DenseMatrix w_up;
  std::size_t rank_r = 1;

  /// w_down ~ N(0, 0.02), w_up = 0: zero adaptation at step 0.
  static LoraAdapter init(std::size_t dim_in, std::size_t dim_out, std::size_t rank_r,
                          Rng& rng);

  void validate() const;
};

/// Bottleneck adapter applied to a module output: Act(out * w_down) * w_up.
struct BottleneckAdapter {
  DenseMatrix w_down;  // D x r
  DenseMatrix w_up;    // r x D
  Activation activation = Activation::gelu;

  static BottleneckAdapter init(std::size_t dim, std::size_t rank_r, Rng& rng,
                                Activation activation = Activation::gelu);

  void validate() const;
};

// ---- composition -----------------------------------------------------------

/// The adaptation matrix (I - v_l v_l^T) diag(d) (I - v_r v_r^T), built with
/// implicit rank-1 updates in O(D^2); the reflection factors are never
/// materialized.
DenseMatrix compose_hta(const HtaAdapter& a);

/// compose_hta plus the additive low-rank term when rank_r > 0.
DenseMatrix hta_full_adaptation(const HtaAdapter& a);

/// w_down * w_up.
DenseMatrix lora_adaptation(const LoraAdapter& a);

/// SVD of hta_full_adaptation; propagates convergence failures.
SvdResult adaptation_spectrum(const HtaAdapter& a);

// ---- attached linear layers --------------------------------------------------

/// How an adapter modifies a linear layer.
///   additive:        y = x (W + delta) + b           (low-rank / HTA delta)
///   multiplicative:  y = (x W + b) acted on by the adapter factor, by
///                    default with a residual path so zero-init adapters
///                    leave the layer's function intact (see literal_factor).
enum class AttachStyle { additive, multiplicative };

enum class ForwardMode { branched, merged };

struct AdaptedLinear {
  DenseMatrix base_w;  // frozen
  Vector base_b;       // frozen
  std::variant<std::monostate, HtaAdapter, LoraAdapter, BottleneckAdapter> adapter;
  AttachStyle style = AttachStyle::additive;
  // Multiplicative style only: drop the residual path and apply the printed
  // factor form y = (x W + b) * (w_down w_up + W_HTA) (or the activated
  // bottleneck) directly. Annihilates the base function at zero init, which
  // is why it is off by default.
  bool literal_factor = false;
  ForwardMode mode = ForwardMode::branched;
  std::optional<DenseMatrix> merged_w;
  std::optional<Vector> merged_b;

  bool has_adapter() const { return !std::holds_alternative<std::monostate>(adapter); }
  void validate() const;
};

/// x (W + delta) + b or the multiplicative equivalent, always through the
/// factored low-cost path (never a materialized D x D delta).
DenseMatrix forward_branched(const AdaptedLinear& layer, const DenseMatrix& x);

/// x merged_w + merged_b; requires Merged mode.
DenseMatrix forward_merged(const AdaptedLinear& layer, const DenseMatrix& x);

/// Dispatch on layer.mode.
DenseMatrix forward(const AdaptedLinear& layer, const DenseMatrix& x);

/// The printed factor forms, with no residual path:
/// module_out * (w_down w_up + W_HTA), resp. Act(module_out * w_down) * w_up.
DenseMatrix forward_adapter_style(const DenseMatrix& module_out, const HtaAdapter& a);
DenseMatrix forward_adapter_style(const DenseMatrix& module_out, const BottleneckAdapter& a);

/// Fold the adapter into the weights: additive deltas add onto W; a
/// multiplicative factor F becomes W(I + F) and b(I + F) (or W F, b F when
/// literal_factor). Nonlinear bottlenecks cannot merge.
AdaptedLinear merge(const AdaptedLinear& layer);

// ---- parameter accounting ----------------------------------------------------

enum class AdapterKind { none, hta, lora, bottleneck };

const char* adapter_kind_name(AdapterKind k);
AdapterKind adapter_kind_from_name(const std::string& name);

struct PositionSpec {
  std::string name;
  std::size_t dim_in = 0;
  std::size_t dim_out = 0;
};

struct ParamCountConfig {
  std::vector<PositionSpec> positions;  // adapted positions within one layer
  AdapterKind kind = AdapterKind::hta;
  std::size_t rank_r = 1;
  std::size_t layers = 1;
  // HTA only: count the additive low-rank pair (2 D r). Off reproduces the
  // reflection-plus-diagonal accounting (3 D).
  bool include_lowrank = true;
  bool count_head = false;
  std::size_t head_dim = 0;
  std::size_t head_classes = 0;
};

/// Exact trainable-parameter count: per position, HTA = 3 D + 2 D r,
/// LoRA = (D_in + D_out) r, bottleneck = 2 D r; summed over positions,
/// times layers, plus the classifier head (weights + bias) when counted.
std::size_t param_count(const ParamCountConfig& config);

}  // namespace hta
