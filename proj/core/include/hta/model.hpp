#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "hta/adapters.hpp"
#include "hta/autodiff.hpp"
#include "hta/linalg.hpp"
#include "hta/rng.hpp"

namespace hta {

// A desk-scale pre-LayerNorm transformer encoder over pre-tokenized feature
// sequences. Every linear projection is frozen; adaptation happens through
// the adapters attached at named positions, plus a trainable classifier head.

/// Adaptation sites within one block. q/k/v/o/fc1/fc2 wrap the projection
/// itself; post_mha and post_ffn act on the corresponding module output
/// (right after o resp. fc2, before the residual add).
enum class Position : std::uint8_t { q, k, v, o, fc1, fc2, post_mha, post_ffn };

inline constexpr std::array<Position, 8> kAllPositions = {
    Position::q,   Position::k,   Position::v,        Position::o,
    Position::fc1, Position::fc2, Position::post_mha, Position::post_ffn};

const char* position_name(Position p);
Position position_from_name(const std::string& name);

/// Where and how adapters attach to a backbone. One config describes one
/// homogeneous family (a comparison run trains several configs side by side).
struct AttachmentConfig {
  std::vector<Position> positions;
  AdapterKind kind = AdapterKind::none;  // none = linear probe (head only)
  std::size_t r = 1;                     // low-rank width (HTA: additive term; 0 = off)
  AttachStyle style = AttachStyle::additive;
  // Multiplicative style only: apply the bare factor with no residual path.
  bool literal_factor = false;
  // Re-project reflection vectors to ||v||^2 = 2 at init and after each step.
  bool normalize_v = false;

  /// Pairing rules: additive attachments only on the square projections
  /// {q,k,v,o}; multiplicative only on {post_mha, post_ffn, fc1, fc2};
  /// lora is additive-only, bottleneck multiplicative-only.
  void validate() const;
};

struct ModelConfig {
  std::size_t dim = 64;
  std::size_t depth = 4;
  std::size_t heads = 4;
  std::size_t tokens = 17;  // sequence length including the class token
  std::size_t classes = 10;
  double mlp_ratio = 4.0;
  // Frozen learned positional embeddings. Off by default so the encoder is
  // exactly permutation-equivariant over content tokens.
  bool learned_positional = false;
  AttachmentConfig adaptation;

  std::size_t hidden_dim() const;
  std::size_t content_tokens() const { return tokens - 1; }
  void validate() const;
};

/// Adapter applied to a module output (no enclosing linear of its own).
struct PostHook {
  std::variant<std::monostate, HtaAdapter, BottleneckAdapter> adapter;
  bool literal_factor = false;

  bool has_adapter() const { return !std::holds_alternative<std::monostate>(adapter); }
};

struct Block {
  // Frozen LayerNorm affines, kept at identity but stored and applied so the
  // frozen-state hash covers them.
  Vector ln1_gamma, ln1_beta;
  Vector ln2_gamma, ln2_beta;
  AdaptedLinear q, k, v, o;
  AdaptedLinear fc1, fc2;
  PostHook post_mha, post_ffn;
};

struct Backbone {
  ModelConfig config;
  std::uint64_t build_seed = 0;
  // Frozen tensors.
  DenseMatrix embed_w;    // dim x dim projection of raw token features
  Vector embed_b;
  DenseMatrix cls_token;  // 1 x dim
  DenseMatrix positional; // tokens x dim; zero unless learned_positional
  std::vector<Block> blocks;
  Vector final_ln_gamma, final_ln_beta;
  // Trainable head.
  DenseMatrix head_w;     // dim x classes
  Vector head_b;
};

/// Deterministic frozen weights from the seed (Gaussian, scaled 1/sqrt(dim);
/// LayerNorm affines at identity), a Gaussian trainable head, and adapters
/// per config.adaptation initialized to zero net adaptation.
Backbone build_backbone(const ModelConfig& config, std::uint64_t seed);

// ---- trainable parameter registry ---------------------------------------------

enum class ParamClass { adapter_matrix, adapter_vector, head_weight, head_bias };

/// A view into one trainable tensor owned by the backbone. `data` stays valid
/// while the backbone is alive and un-reattached.
struct ParamRef {
  std::string name;  // e.g. "block0.q.v_left", "head.w"
  double* data = nullptr;
  std::size_t size = 0;
  ParamClass cls = ParamClass::adapter_matrix;
};

/// Adapter parameters in block/position/field order, then head.w, head.b.
/// taped_forward creates its trainable leaves in exactly this order.
std::vector<ParamRef> trainable_parameters(Backbone& b);
std::size_t trainable_parameter_count(const Backbone& b);

/// The equivalent per-position accounting config (bridge to param_count).
ParamCountConfig param_count_config(const ModelConfig& config);

// ---- forward -------------------------------------------------------------------

struct ForwardOptions {
  ForwardMode mode = ForwardMode::branched;
  // Inverted dropout on adapter-branch outputs only; active when rate > 0 and
  // an rng is supplied (training). The frozen path is never dropped.
  double adapter_dropout = 0.0;
  Rng* dropout_rng = nullptr;
  // Inference only: elide residual adds whose adapter branch is exactly zero,
  // so a freshly attached adapter reproduces the frozen function bit for bit
  // (a connected add could still flip signed zeros). Training graphs must
  // keep the branch connected or its leaves never receive gradients; forward()
  // sets this on its own copy.
  bool skip_zero_branches = false;
};

struct TapedForward {
  Tape tape;
  NodeId logits = kNoNode;
  NodeId loss = kNoNode;  // set only when labels were provided
  // Trainable leaves in trainable_parameters order (absent entries never occur;
  // every registry parameter gets a leaf whether or not the graph uses it).
  std::vector<std::pair<std::string, NodeId>> params;
};

/// Records the full forward pass (and cross-entropy loss when labels are
/// given) on a fresh tape. tokens holds batch * (tokens-1) rows of raw
/// dim-wide features, samples stacked contiguously.
TapedForward taped_forward(const Backbone& b, const DenseMatrix& tokens,
                           std::size_t batch,
                           const std::vector<std::size_t>* labels,
                           const ForwardOptions& options = {});

/// Inference-only logits (batch x classes); same arithmetic as taped_forward.
DenseMatrix forward(const Backbone& b, const DenseMatrix& tokens,
                    std::size_t batch, const ForwardOptions& options = {});

// ---- merge / maintenance --------------------------------------------------------

/// Fold every adapter into its host projection (post hooks fold into o resp.
/// fc2) and switch all layers to merged mode. Nonlinear bottlenecks refuse.
void merge_all(Backbone& b);
/// Drop merged caches and return to branched mode.
void unmerge_all(Backbone& b);

/// Re-project v_left/v_right to ||v||^2 = 2 on every adapter that asked for it.
void project_normalized_v(Backbone& b);

/// FNV-1a over the bytes of every frozen tensor (embedding, class token,
/// positional table, projections, biases, LayerNorm affines). Adapters, head,
/// and merged caches are excluded.
std::uint64_t frozen_state_hash(const Backbone& b);

// ---- checkpoints ----------------------------------------------------------------

/// JSON checkpoint: model config, build seed, every attached adapter, and the
/// head. Frozen weights are reproduced from the seed, not serialized.
void save_checkpoint(const Backbone& b, const std::string& path);
Backbone load_checkpoint(const std::string& path);

}  // namespace hta
