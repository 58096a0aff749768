#include "hta/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "hta/adapter_io.hpp"
#include "hta/errors.hpp"
#include "json.hpp"
#include "model_json.hpp"

namespace hta {

namespace {

constexpr std::array<const char*, 8> kPositionNames = {
    "q", "k", "v", "o", "fc1", "fc2", "post_mha", "post_ffn"};

bool is_projection(Position p) {
  return p == Position::q || p == Position::k || p == Position::v ||
         p == Position::o || p == Position::fc1 || p == Position::fc2;
}

bool is_square_projection(Position p) {
  return p == Position::q || p == Position::k || p == Position::v || p == Position::o;
}

}  // namespace

const char* position_name(Position p) {
  return kPositionNames[static_cast<std::size_t>(p)];
}

Position position_from_name(const std::string& name) {
  for (std::size_t i = 0; i < kPositionNames.size(); ++i) {
    if (name == kPositionNames[i]) return static_cast<Position>(i);
  }
  throw ConfigError("unknown position name: " + name);
}

void AttachmentConfig::validate() const {
  if (kind == AdapterKind::none) {
    if (!positions.empty()) {
      throw ConfigError("kind none cannot name attachment positions");
    }
    return;
  }
  if (positions.empty()) {
    throw ConfigError("adapter attachment needs at least one position");
  }
  for (std::size_t i = 0; i < positions.size(); ++i) {
    for (std::size_t j = i + 1; j < positions.size(); ++j) {
      if (positions[i] == positions[j]) {
        throw ConfigError(std::string("duplicate position: ") + position_name(positions[i]));
      }
    }
  }
  if (kind == AdapterKind::lora && style != AttachStyle::additive) {
    throw ConfigError("lora adapters are additive-only");
  }
  if (kind == AdapterKind::bottleneck && style != AttachStyle::multiplicative) {
    throw ConfigError("bottleneck adapters are multiplicative-only");
  }
  if (kind == AdapterKind::lora && r < 1) {
    throw ConfigError("lora rank must be at least 1");
  }
  if (kind == AdapterKind::bottleneck && r < 1) {
    throw ConfigError("bottleneck rank must be at least 1");
  }
  for (Position p : positions) {
    if (style == AttachStyle::additive && !is_square_projection(p)) {
      throw ConfigError(std::string("additive attachment requires a square projection, got ") +
                        position_name(p));
    }
    if (style == AttachStyle::multiplicative && is_square_projection(p)) {
      throw ConfigError(std::string("multiplicative attachment acts on module outputs, got ") +
                        position_name(p));
    }
  }
}

std::size_t ModelConfig::hidden_dim() const {
  const double h = mlp_ratio * static_cast<double>(dim);
  return static_cast<std::size_t>(h + 0.5);
}

void ModelConfig::validate() const {
  if (dim < 1 || heads < 1 || tokens < 1 || classes < 1) {
    throw ConfigError("model dims, heads, tokens, and classes must all be at least 1");
  }
  if (dim % heads != 0) {
    throw ConfigError("dim must be divisible by heads");
  }
  if (mlp_ratio <= 0.0 || hidden_dim() < 1) {
    throw ConfigError("mlp_ratio must give a positive hidden width");
  }
  adaptation.validate();
}

// ---- construction ---------------------------------------------------------------

namespace {

DenseMatrix gaussian_matrix(std::size_t rows, std::size_t cols, double scale, Rng rng) {
  DenseMatrix m(rows, cols);
  for (std::size_t k = 0; k < m.size(); ++k) m.data()[k] = scale * rng.normal();
  return m;
}

// Per-tensor stream tags for the frozen build. Blocks use 16 + 8*i + slot.
enum : std::uint64_t {
  kStreamEmbed = 0,
  kStreamCls = 1,
  kStreamPositional = 2,
  kStreamHead = 3,
  kStreamAttach = 7,
  kStreamBlockBase = 16,
};

AdaptedLinear frozen_linear(std::size_t dim_in, std::size_t dim_out, double scale, Rng rng) {
  AdaptedLinear layer;
  layer.base_w = gaussian_matrix(dim_in, dim_out, scale, rng);
  layer.base_b = Vector(dim_out);
  return layer;
}

/// Factor dimensionality an adapter at this position acts on.
std::size_t position_factor_dim(const ModelConfig& cfg, Position p) {
  return p == Position::fc1 ? cfg.hidden_dim() : cfg.dim;
}

void attach_one(Block& blk, const ModelConfig& cfg, Position p, Rng rng) {
  const AttachmentConfig& a = cfg.adaptation;
  const std::size_t fdim = position_factor_dim(cfg, p);

  if (is_projection(p)) {
    AdaptedLinear* host = nullptr;
    switch (p) {
      case Position::q: host = &blk.q; break;
      case Position::k: host = &blk.k; break;
      case Position::v: host = &blk.v; break;
      case Position::o: host = &blk.o; break;
      case Position::fc1: host = &blk.fc1; break;
      default: host = &blk.fc2; break;
    }
    host->style = a.style;
    host->literal_factor = a.literal_factor;
    switch (a.kind) {
      case AdapterKind::hta:
        host->adapter = HtaAdapter::init(fdim, a.r, rng, a.normalize_v);
        break;
      case AdapterKind::lora:
        host->adapter = LoraAdapter::init(cfg.dim, cfg.dim, a.r, rng);
        break;
      case AdapterKind::bottleneck:
        host->adapter = BottleneckAdapter::init(fdim, a.r, rng);
        break;
      case AdapterKind::none:
        break;
    }
    host->validate();
    return;
  }

  PostHook& hook = p == Position::post_mha ? blk.post_mha : blk.post_ffn;
  hook.literal_factor = a.literal_factor;
  switch (a.kind) {
    case AdapterKind::hta:
      hook.adapter = HtaAdapter::init(fdim, a.r, rng, a.normalize_v);
      break;
    case AdapterKind::bottleneck:
      hook.adapter = BottleneckAdapter::init(fdim, a.r, rng);
      break;
    default:
      throw ConfigError("post hooks accept hta or bottleneck adapters only");
  }
}

}  // namespace

Backbone build_backbone(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Backbone b;
  b.config = config;
  b.build_seed = seed;

  const std::size_t d = config.dim;
  const std::size_t h = config.hidden_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  Rng root(seed);

  b.embed_w = gaussian_matrix(d, d, scale, root.stream(kStreamEmbed));
  b.embed_b = Vector(d);
  b.cls_token = gaussian_matrix(1, d, scale, root.stream(kStreamCls));
  b.positional = config.learned_positional
                     ? gaussian_matrix(config.tokens, d, scale, root.stream(kStreamPositional))
                     : DenseMatrix(config.tokens, d);
  b.head_w = gaussian_matrix(d, config.classes, scale, root.stream(kStreamHead));
  b.head_b = Vector(config.classes);

  b.blocks.resize(config.depth);
  for (std::size_t i = 0; i < config.depth; ++i) {
    Block& blk = b.blocks[i];
    const std::uint64_t base = kStreamBlockBase + 8 * i;
    blk.ln1_gamma = Vector(d, 1.0);
    blk.ln1_beta = Vector(d);
    blk.ln2_gamma = Vector(d, 1.0);
    blk.ln2_beta = Vector(d);
    blk.q = frozen_linear(d, d, scale, root.stream(base + 0));
    blk.k = frozen_linear(d, d, scale, root.stream(base + 1));
    blk.v = frozen_linear(d, d, scale, root.stream(base + 2));
    blk.o = frozen_linear(d, d, scale, root.stream(base + 3));
    blk.fc1 = frozen_linear(d, h, scale, root.stream(base + 4));
    blk.fc2 = frozen_linear(h, d, scale, root.stream(base + 5));
  }
  b.final_ln_gamma = Vector(d, 1.0);
  b.final_ln_beta = Vector(d);

  if (config.adaptation.kind != AdapterKind::none) {
    Rng attach_root = root.stream(kStreamAttach);
    for (std::size_t i = 0; i < config.depth; ++i) {
      for (Position p : config.adaptation.positions) {
        attach_one(b.blocks[i], config, p,
                   attach_root.stream(16 * i + static_cast<std::uint64_t>(p)));
      }
    }
  }
  return b;
}

// ---- trainable parameter registry -------------------------------------------------

namespace {

// Pointers to exactly one attached adapter, whichever kind it is. Points at
// the backbone's own storage: safe to keep while the backbone lives.
struct AdapterHandle {
  HtaAdapter* hta = nullptr;
  LoraAdapter* lora = nullptr;
  BottleneckAdapter* bottleneck = nullptr;
};

// Single traversal used by both the registry and the tape's leaf creation so
// their orders can never drift apart: blocks ascending, positions in
// declaration order, adapter fields v_left, v_right, d, w_down, w_up.
template <typename F>
void visit_adapters(Backbone& b, F&& f) {
  for (std::size_t i = 0; i < b.blocks.size(); ++i) {
    Block& blk = b.blocks[i];
    const std::array<std::pair<Position, AdaptedLinear*>, 6> hosts = {{
        {Position::q, &blk.q},
        {Position::k, &blk.k},
        {Position::v, &blk.v},
        {Position::o, &blk.o},
        {Position::fc1, &blk.fc1},
        {Position::fc2, &blk.fc2},
    }};
    for (auto [p, host] : hosts) {
      AdapterHandle h;
      h.hta = std::get_if<HtaAdapter>(&host->adapter);
      h.lora = std::get_if<LoraAdapter>(&host->adapter);
      h.bottleneck = std::get_if<BottleneckAdapter>(&host->adapter);
      if (h.hta || h.lora || h.bottleneck) f(i, p, h);
    }
    const std::array<std::pair<Position, PostHook*>, 2> hooks = {{
        {Position::post_mha, &blk.post_mha},
        {Position::post_ffn, &blk.post_ffn},
    }};
    for (auto [p, hook] : hooks) {
      AdapterHandle h;
      h.hta = std::get_if<HtaAdapter>(&hook->adapter);
      h.bottleneck = std::get_if<BottleneckAdapter>(&hook->adapter);
      if (h.hta || h.bottleneck) f(i, p, h);
    }
  }
}

std::string param_name(std::size_t block, Position p, const char* field) {
  return "block" + std::to_string(block) + "." + position_name(p) + "." + field;
}

}  // namespace

std::vector<ParamRef> trainable_parameters(Backbone& b) {
  std::vector<ParamRef> out;
  const auto vec_ref = [&](std::string name, Vector& v) {
    out.push_back({std::move(name), &v[0], v.dim(), ParamClass::adapter_vector});
  };
  const auto mat_ref = [&](std::string name, DenseMatrix& m) {
    out.push_back({std::move(name), m.data(), m.size(), ParamClass::adapter_matrix});
  };
  visit_adapters(b, [&](std::size_t i, Position p, const AdapterHandle& h) {
    if (h.hta != nullptr) {
      vec_ref(param_name(i, p, "v_left"), h.hta->v_left);
      vec_ref(param_name(i, p, "v_right"), h.hta->v_right);
      vec_ref(param_name(i, p, "d"), h.hta->d);
      if (h.hta->lowrank) {
        mat_ref(param_name(i, p, "w_down"), h.hta->lowrank->w_down);
        mat_ref(param_name(i, p, "w_up"), h.hta->lowrank->w_up);
      }
    } else if (h.lora != nullptr) {
      mat_ref(param_name(i, p, "w_down"), h.lora->w_down);
      mat_ref(param_name(i, p, "w_up"), h.lora->w_up);
    } else {
      mat_ref(param_name(i, p, "w_down"), h.bottleneck->w_down);
      mat_ref(param_name(i, p, "w_up"), h.bottleneck->w_up);
    }
  });
  out.push_back({"head.w", b.head_w.data(), b.head_w.size(), ParamClass::head_weight});
  out.push_back({"head.b", &b.head_b[0], b.head_b.dim(), ParamClass::head_bias});
  return out;
}

std::size_t trainable_parameter_count(const Backbone& b) {
  std::size_t n = 0;
  auto& mut = const_cast<Backbone&>(b);  // traversal only reads
  visit_adapters(mut, [&](std::size_t, Position, const AdapterHandle& h) {
    if (h.hta != nullptr) {
      n += 3 * h.hta->dim;
      if (h.hta->lowrank) n += h.hta->lowrank->w_down.size() + h.hta->lowrank->w_up.size();
    } else if (h.lora != nullptr) {
      n += h.lora->w_down.size() + h.lora->w_up.size();
    } else {
      n += h.bottleneck->w_down.size() + h.bottleneck->w_up.size();
    }
  });
  return n + b.head_w.size() + b.head_b.dim();
}

ParamCountConfig param_count_config(const ModelConfig& config) {
  ParamCountConfig pc;
  pc.kind = config.adaptation.kind;
  pc.rank_r = config.adaptation.r;
  pc.layers = config.depth;
  pc.include_lowrank = config.adaptation.r > 0;
  for (Position p : config.adaptation.positions) {
    const std::size_t din = p == Position::fc2 ? config.hidden_dim() : config.dim;
    const std::size_t dout = position_factor_dim(config, p);
    pc.positions.push_back({position_name(p), din, dout});
  }
  return pc;
}

// ---- forward ----------------------------------------------------------------------

namespace {

struct LeafSet {
  NodeId v_left = kNoNode, v_right = kNoNode, d = kNoNode;
  NodeId w_down = kNoNode, w_up = kNoNode;
};

struct TapeContext {
  Tape* tape = nullptr;
  const ForwardOptions* options = nullptr;
  // Leaf ids per (block, position), filled by a pre-pass in registry order.
  std::vector<std::array<LeafSet, 8>> leaves;
  NodeId head_w = kNoNode;
  NodeId head_b = kNoNode;
};

NodeId constant_col(Tape& t, const Vector& v) { return t.constant(DenseMatrix::column(v)); }
NodeId constant_row(Tape& t, const Vector& v) { return t.constant(DenseMatrix::row_vector(v)); }

/// Adapter-branch contribution for input (or module output) node x; kNoNode
/// when structurally absent. The caller adds it (or substitutes it, for
/// literal multiplicative factors).
NodeId taped_contribution(TapeContext& ctx, NodeId x, std::size_t block, Position p) {
  Tape& t = *ctx.tape;
  const LeafSet& ls = ctx.leaves[block][static_cast<std::size_t>(p)];
  NodeId total = kNoNode;
  if (ls.v_left != kNoNode) {  // HTA chain x H_left diag(d) H_right
    NodeId c = t.rank1_householder_apply(x, ls.v_left);
    c = t.diag_scale(c, ls.d);
    c = t.rank1_householder_apply(c, ls.v_right);
    total = c;
  }
  if (ls.w_down != kNoNode) {  // additive low-rank product (all three kinds)
    const NodeId lr = t.matmul(t.matmul(x, ls.w_down), ls.w_up);
    total = total == kNoNode ? lr : t.add(total, lr);
  }
  return total;
}

/// Bottleneck factor Act(x w_down) w_up.
NodeId taped_bottleneck(TapeContext& ctx, NodeId x, std::size_t block, Position p,
                        Activation act) {
  Tape& t = *ctx.tape;
  const LeafSet& ls = ctx.leaves[block][static_cast<std::size_t>(p)];
  NodeId hmid = t.matmul(x, ls.w_down);
  switch (act) {
    case Activation::gelu: hmid = t.gelu(hmid); break;
    case Activation::relu: hmid = t.relu(hmid); break;
    case Activation::identity: break;
  }
  return t.matmul(hmid, ls.w_up);
}

/// Inverted-dropout mask over the adapter branch, drawn only while training.
NodeId maybe_dropout(TapeContext& ctx, NodeId contribution) {
  const ForwardOptions& opt = *ctx.options;
  if (contribution == kNoNode || opt.adapter_dropout <= 0.0 || opt.dropout_rng == nullptr) {
    return contribution;
  }
  Tape& t = *ctx.tape;
  const DenseMatrix& c = t.value(contribution);
  const double keep = 1.0 - opt.adapter_dropout;
  DenseMatrix mask(c.rows(), c.cols());
  for (std::size_t k = 0; k < mask.size(); ++k) {
    mask.data()[k] = opt.dropout_rng->uniform() < keep ? 1.0 / keep : 0.0;
  }
  return t.dropout_mask(contribution, mask);
}

/// x W + b through a frozen projection, plus the adapter branch when one is
/// attached. Mirrors the branched/merged split of the standalone layer type.
NodeId taped_linear(TapeContext& ctx, const AdaptedLinear& layer, NodeId x,
                    std::size_t block, Position p) {
  Tape& t = *ctx.tape;
  if (ctx.options->mode == ForwardMode::merged) {
    if (!layer.merged_w.has_value()) {
      throw ConfigError("merged forward requested before merge_all");
    }
    return t.add_rowvec(t.matmul(x, t.constant(*layer.merged_w)),
                        constant_row(t, *layer.merged_b));
  }
  NodeId out = t.add_rowvec(t.matmul(x, t.constant(layer.base_w)),
                            constant_row(t, layer.base_b));
  if (!layer.has_adapter()) return out;

  if (layer.style == AttachStyle::additive) {
    // Contribution computed from the layer input. At inference a branch that
    // is exactly zero skips the add entirely, so a fresh adapter cannot
    // perturb even the sign of zeros in the logits.
    NodeId c = taped_contribution(ctx, x, block, p);
    if (c == kNoNode) return out;
    if (ctx.options->skip_zero_branches && t.value(c).is_zero()) return out;
    c = maybe_dropout(ctx, c);
    return t.add(out, c);
  }
  // Multiplicative: factor applied to the layer output.
  NodeId c = kNoNode;
  if (auto* bn = std::get_if<BottleneckAdapter>(&layer.adapter)) {
    c = taped_bottleneck(ctx, out, block, p, bn->activation);
  } else {
    c = taped_contribution(ctx, out, block, p);
  }
  if (layer.literal_factor) return maybe_dropout(ctx, c);
  if (c == kNoNode) return out;
  if (ctx.options->skip_zero_branches && t.value(c).is_zero()) return out;
  return t.add(out, maybe_dropout(ctx, c));
}

/// Post-module hook: multiplicative factor on the module output node.
NodeId taped_hook(TapeContext& ctx, const PostHook& hook, NodeId module_out,
                  std::size_t block, Position p) {
  if (!hook.has_adapter() || ctx.options->mode == ForwardMode::merged) {
    // Merged mode folded the hook into the preceding projection already.
    return module_out;
  }
  Tape& t = *ctx.tape;
  NodeId c = kNoNode;
  if (auto* bn = std::get_if<BottleneckAdapter>(&hook.adapter)) {
    c = taped_bottleneck(ctx, module_out, block, p, bn->activation);
  } else {
    c = taped_contribution(ctx, module_out, block, p);
  }
  if (hook.literal_factor) return maybe_dropout(ctx, c);
  if (c == kNoNode) return module_out;
  if (ctx.options->skip_zero_branches && t.value(c).is_zero()) return module_out;
  return t.add(module_out, maybe_dropout(ctx, c));
}

NodeId taped_layernorm(Tape& t, NodeId x, const Vector& gamma, const Vector& beta) {
  NodeId y = t.layernorm(x);
  y = t.diag_scale(y, constant_col(t, gamma));
  return t.add_rowvec(y, constant_row(t, beta));
}

}  // namespace

TapedForward taped_forward(const Backbone& b, const DenseMatrix& tokens,
                           std::size_t batch,
                           const std::vector<std::size_t>* labels,
                           const ForwardOptions& options) {
  const ModelConfig& cfg = b.config;
  const std::size_t T = cfg.tokens;
  const std::size_t content = cfg.content_tokens();
  if (batch < 1) throw ShapeError("batch must be at least 1");
  if (tokens.rows() != batch * content || tokens.cols() != cfg.dim) {
    throw ShapeError("token batch must be (batch * (tokens-1)) x dim");
  }
  if (labels != nullptr && labels->size() != batch) {
    throw ShapeError("labels must have one entry per sample");
  }

  TapedForward fwd;
  Tape& t = fwd.tape;
  TapeContext ctx;
  ctx.tape = &t;
  ctx.options = &options;
  ctx.leaves.resize(b.blocks.size());

  // Leaves first, in registry order, so Grad lookups line up with
  // trainable_parameters without any name matching.
  auto& mut = const_cast<Backbone&>(b);  // leaf() copies; nothing is written
  visit_adapters(mut, [&](std::size_t i, Position p, const AdapterHandle& h) {
    LeafSet& ls = ctx.leaves[i][static_cast<std::size_t>(p)];
    const auto add_param = [&](const char* field, NodeId id) {
      fwd.params.emplace_back(param_name(i, p, field), id);
    };
    if (h.hta != nullptr) {
      ls.v_left = t.leaf(DenseMatrix::column(h.hta->v_left), true);
      add_param("v_left", ls.v_left);
      ls.v_right = t.leaf(DenseMatrix::column(h.hta->v_right), true);
      add_param("v_right", ls.v_right);
      ls.d = t.leaf(DenseMatrix::column(h.hta->d), true);
      add_param("d", ls.d);
      if (h.hta->lowrank) {
        ls.w_down = t.leaf(h.hta->lowrank->w_down, true);
        add_param("w_down", ls.w_down);
        ls.w_up = t.leaf(h.hta->lowrank->w_up, true);
        add_param("w_up", ls.w_up);
      }
    } else if (h.lora != nullptr) {
      ls.w_down = t.leaf(h.lora->w_down, true);
      add_param("w_down", ls.w_down);
      ls.w_up = t.leaf(h.lora->w_up, true);
      add_param("w_up", ls.w_up);
    } else {
      ls.w_down = t.leaf(h.bottleneck->w_down, true);
      add_param("w_down", ls.w_down);
      ls.w_up = t.leaf(h.bottleneck->w_up, true);
      add_param("w_up", ls.w_up);
    }
  });
  ctx.head_w = t.leaf(b.head_w, true);
  fwd.params.emplace_back("head.w", ctx.head_w);
  ctx.head_b = t.leaf(DenseMatrix::row_vector(b.head_b), true);
  fwd.params.emplace_back("head.b", ctx.head_b);

  // Embed raw features, then stitch [cls; sample] per sample.
  NodeId x = t.constant(tokens);
  x = t.add_rowvec(t.matmul(x, t.constant(b.embed_w)), constant_row(t, b.embed_b));
  const NodeId cls = t.constant(b.cls_token);
  {
    std::vector<NodeId> sequences;
    sequences.reserve(batch);
    for (std::size_t s = 0; s < batch; ++s) {
      if (content == 0) {
        sequences.push_back(cls);
        continue;
      }
      std::vector<std::size_t> rows(content);
      for (std::size_t r = 0; r < content; ++r) rows[r] = s * content + r;
      sequences.push_back(t.concat_rows({cls, t.gather_rows(x, std::move(rows))}));
    }
    x = batch == 1 ? sequences[0] : t.concat_rows(sequences);
  }
  if (cfg.learned_positional) {
    std::vector<NodeId> tiles(batch, t.constant(b.positional));
    x = t.add(x, batch == 1 ? tiles[0] : t.concat_rows(tiles));
  }

  const std::size_t dh = cfg.dim / cfg.heads;
  const double attn_scale = 1.0 / std::sqrt(static_cast<double>(dh));

  for (std::size_t i = 0; i < b.blocks.size(); ++i) {
    const Block& blk = b.blocks[i];

    // Attention sublayer.
    NodeId h = taped_layernorm(t, x, blk.ln1_gamma, blk.ln1_beta);
    const NodeId q = taped_linear(ctx, blk.q, h, i, Position::q);
    const NodeId k = taped_linear(ctx, blk.k, h, i, Position::k);
    const NodeId v = taped_linear(ctx, blk.v, h, i, Position::v);

    std::vector<NodeId> per_sample;
    per_sample.reserve(batch);
    for (std::size_t s = 0; s < batch; ++s) {
      std::vector<std::size_t> rows(T);
      for (std::size_t r = 0; r < T; ++r) rows[r] = s * T + r;
      const NodeId qs = t.gather_rows(q, rows);
      const NodeId ks = t.gather_rows(k, rows);
      const NodeId vs = t.gather_rows(v, rows);
      std::vector<NodeId> per_head;
      per_head.reserve(cfg.heads);
      for (std::size_t head = 0; head < cfg.heads; ++head) {
        const NodeId qh = t.slice_cols(qs, head * dh, dh);
        const NodeId kh = t.slice_cols(ks, head * dh, dh);
        const NodeId vh = t.slice_cols(vs, head * dh, dh);
        const NodeId attn = t.softmax(t.scale(t.matmul_nt(qh, kh), attn_scale));
        per_head.push_back(t.matmul(attn, vh));
      }
      per_sample.push_back(cfg.heads == 1 ? per_head[0] : t.concat_cols(per_head));
    }
    NodeId mha = batch == 1 ? per_sample[0] : t.concat_rows(per_sample);
    mha = taped_linear(ctx, blk.o, mha, i, Position::o);
    mha = taped_hook(ctx, blk.post_mha, mha, i, Position::post_mha);
    x = t.add(x, mha);

    // Feed-forward sublayer.
    h = taped_layernorm(t, x, blk.ln2_gamma, blk.ln2_beta);
    h = taped_linear(ctx, blk.fc1, h, i, Position::fc1);
    h = t.gelu(h);
    h = taped_linear(ctx, blk.fc2, h, i, Position::fc2);
    h = taped_hook(ctx, blk.post_ffn, h, i, Position::post_ffn);
    x = t.add(x, h);
  }

  // Class-token pooling, final norm, head.
  std::vector<std::size_t> cls_rows(batch);
  for (std::size_t s = 0; s < batch; ++s) cls_rows[s] = s * T;
  NodeId pooled = t.gather_rows(x, std::move(cls_rows));
  pooled = taped_layernorm(t, pooled, b.final_ln_gamma, b.final_ln_beta);
  fwd.logits = t.add_rowvec(t.matmul(pooled, ctx.head_w), ctx.head_b);

  if (labels != nullptr) {
    fwd.loss = t.mean(t.cross_entropy(fwd.logits, *labels));
  }
  return fwd;
}

DenseMatrix forward(const Backbone& b, const DenseMatrix& tokens, std::size_t batch,
                    const ForwardOptions& options) {
  ForwardOptions inference = options;
  inference.skip_zero_branches = true;
  const TapedForward fwd = taped_forward(b, tokens, batch, nullptr, inference);
  return fwd.tape.value(fwd.logits);
}

// ---- merge / maintenance -----------------------------------------------------------

namespace {

AdaptedLinear fold_hook(const AdaptedLinear& merged_host, const PostHook& hook) {
  AdaptedLinear fold;
  fold.base_w = *merged_host.merged_w;
  fold.base_b = *merged_host.merged_b;
  fold.style = AttachStyle::multiplicative;
  fold.literal_factor = hook.literal_factor;
  if (auto* hta = std::get_if<HtaAdapter>(&hook.adapter)) {
    fold.adapter = *hta;
  } else if (auto* bn = std::get_if<BottleneckAdapter>(&hook.adapter)) {
    fold.adapter = *bn;
  }
  return merge(fold);
}

}  // namespace

void merge_all(Backbone& b) {
  for (Block& blk : b.blocks) {
    for (AdaptedLinear* layer : {&blk.q, &blk.k, &blk.v, &blk.o, &blk.fc1, &blk.fc2}) {
      if (layer->has_adapter()) {
        *layer = merge(*layer);
      } else {
        layer->merged_w = layer->base_w;
        layer->merged_b = layer->base_b;
        layer->mode = ForwardMode::merged;
      }
    }
    if (blk.post_mha.has_adapter()) {
      const AdaptedLinear folded = fold_hook(blk.o, blk.post_mha);
      blk.o.merged_w = folded.merged_w;
      blk.o.merged_b = folded.merged_b;
    }
    if (blk.post_ffn.has_adapter()) {
      const AdaptedLinear folded = fold_hook(blk.fc2, blk.post_ffn);
      blk.fc2.merged_w = folded.merged_w;
      blk.fc2.merged_b = folded.merged_b;
    }
  }
}

void unmerge_all(Backbone& b) {
  for (Block& blk : b.blocks) {
    for (AdaptedLinear* layer : {&blk.q, &blk.k, &blk.v, &blk.o, &blk.fc1, &blk.fc2}) {
      layer->merged_w.reset();
      layer->merged_b.reset();
      layer->mode = ForwardMode::branched;
    }
  }
}

void project_normalized_v(Backbone& b) {
  visit_adapters(b, [](std::size_t, Position, const AdapterHandle& h) {
    if (h.hta != nullptr && h.hta->normalize_v) h.hta->project_v();
  });
}

// ---- frozen-state hash ---------------------------------------------------------------

namespace {

void hash_bytes(std::uint64_t& h, const void* p, std::size_t n) {
  const auto* bytes = static_cast<const unsigned char*>(p);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= bytes[i];
    h *= 0x100000001b3ull;  // FNV-1a prime
  }
}

void hash_matrix(std::uint64_t& h, const DenseMatrix& m) {
  hash_bytes(h, m.data(), m.size() * sizeof(double));
}

void hash_vector(std::uint64_t& h, const Vector& v) {
  if (v.dim() > 0) hash_bytes(h, v.values().data(), v.dim() * sizeof(double));
}

}  // namespace

std::uint64_t frozen_state_hash(const Backbone& b) {
  std::uint64_t h = 0xcbf29ce484222325ull;  // FNV-1a offset basis
  hash_matrix(h, b.embed_w);
  hash_vector(h, b.embed_b);
  hash_matrix(h, b.cls_token);
  hash_matrix(h, b.positional);
  for (const Block& blk : b.blocks) {
    hash_vector(h, blk.ln1_gamma);
    hash_vector(h, blk.ln1_beta);
    hash_vector(h, blk.ln2_gamma);
    hash_vector(h, blk.ln2_beta);
    for (const AdaptedLinear* layer :
         {&blk.q, &blk.k, &blk.v, &blk.o, &blk.fc1, &blk.fc2}) {
      hash_matrix(h, layer->base_w);
      hash_vector(h, layer->base_b);
    }
  }
  hash_vector(h, b.final_ln_gamma);
  hash_vector(h, b.final_ln_beta);
  return h;
}

// ---- checkpoints ------------------------------------------------------------------------

using nlohmann::json;

json attachment_to_json(const AttachmentConfig& a) {
  json out;
  out["positions"] = json::array();
  for (Position p : a.positions) out["positions"].push_back(position_name(p));
  out["kind"] = adapter_kind_name(a.kind);
  out["r"] = a.r;
  out["style"] = a.style == AttachStyle::additive ? "additive" : "multiplicative";
  out["literal_factor"] = a.literal_factor;
  out["normalize_v"] = a.normalize_v;
  return out;
}

AttachmentConfig attachment_from_json(const json& j) {
  AttachmentConfig a;
  for (const auto& name : j.at("positions")) {
    a.positions.push_back(position_from_name(name.get<std::string>()));
  }
  a.kind = adapter_kind_from_name(j.at("kind").get<std::string>());
  a.r = j.at("r").get<std::size_t>();
  const std::string style = j.at("style").get<std::string>();
  if (style == "additive") {
    a.style = AttachStyle::additive;
  } else if (style == "multiplicative") {
    a.style = AttachStyle::multiplicative;
  } else {
    throw ConfigError("unknown attachment style: " + style);
  }
  a.literal_factor = j.at("literal_factor").get<bool>();
  a.normalize_v = j.at("normalize_v").get<bool>();
  return a;
}

json model_config_to_json(const ModelConfig& m) {
  json out;
  out["dim"] = m.dim;
  out["depth"] = m.depth;
  out["heads"] = m.heads;
  out["tokens"] = m.tokens;
  out["classes"] = m.classes;
  out["mlp_ratio"] = m.mlp_ratio;
  out["learned_positional"] = m.learned_positional;
  out["adaptation"] = attachment_to_json(m.adaptation);
  return out;
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig m;
  m.dim = j.at("dim").get<std::size_t>();
  m.depth = j.at("depth").get<std::size_t>();
  m.heads = j.at("heads").get<std::size_t>();
  m.tokens = j.at("tokens").get<std::size_t>();
  m.classes = j.at("classes").get<std::size_t>();
  m.mlp_ratio = j.at("mlp_ratio").get<double>();
  m.learned_positional = j.at("learned_positional").get<bool>();
  m.adaptation = attachment_from_json(j.at("adaptation"));
  return m;
}

namespace {

std::vector<double> flat(const DenseMatrix& m) {
  return {m.data(), m.data() + m.size()};
}

}  // namespace

void save_checkpoint(const Backbone& b, const std::string& path) {
  json out;
  out["format"] = "hta-checkpoint";
  out["version"] = 1;
  out["build_seed"] = b.build_seed;
  out["model"] = model_config_to_json(b.config);

  out["adapters"] = json::array();
  auto& mut = const_cast<Backbone&>(b);
  visit_adapters(mut, [&](std::size_t i, Position p, const AdapterHandle& h) {
    AnyAdapter any = [&]() -> AnyAdapter {
      if (h.hta != nullptr) return *h.hta;
      if (h.lora != nullptr) return *h.lora;
      return *h.bottleneck;
    }();
    json entry;
    entry["block"] = i;
    entry["position"] = position_name(p);
    entry["adapter"] = json::parse(adapter_to_json(any));
    out["adapters"].push_back(std::move(entry));
  });

  out["head"]["w"] = flat(b.head_w);
  std::vector<double> hb(b.head_b.dim());
  for (std::size_t i = 0; i < hb.size(); ++i) hb[i] = b.head_b[i];
  out["head"]["b"] = hb;

  std::ofstream stream(path, std::ios::binary);
  if (!stream) throw ConfigError("cannot open checkpoint for writing: " + path);
  stream << out.dump(2) << "\n";
}

Backbone load_checkpoint(const std::string& path) {
  std::ifstream stream(path, std::ios::binary);
  if (!stream) throw ConfigError("cannot open checkpoint: " + path);
  json in;
  try {
    stream >> in;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed checkpoint: ") + e.what());
  }
  try {
    if (in.at("format").get<std::string>() != "hta-checkpoint" ||
        in.at("version").get<int>() != 1) {
      throw ConfigError("unrecognized checkpoint format/version");
    }
    const ModelConfig cfg = model_config_from_json(in.at("model"));
    Backbone b = build_backbone(cfg, in.at("build_seed").get<std::uint64_t>());

    // Overwrite freshly initialized adapters with the stored parameters.
    std::size_t cursor = 0;
    const auto& stored = in.at("adapters");
    visit_adapters(b, [&](std::size_t i, Position p, const AdapterHandle& h) {
      if (cursor >= stored.size()) throw ConfigError("checkpoint is missing adapters");
      const auto& entry = stored.at(cursor++);
      if (entry.at("block").get<std::size_t>() != i ||
          entry.at("position").get<std::string>() != position_name(p)) {
        throw ConfigError("checkpoint adapter order does not match the config");
      }
      const AnyAdapter any = adapter_from_json(entry.at("adapter").dump());
      if (h.hta != nullptr && std::holds_alternative<HtaAdapter>(any)) {
        *h.hta = std::get<HtaAdapter>(any);
      } else if (h.lora != nullptr && std::holds_alternative<LoraAdapter>(any)) {
        *h.lora = std::get<LoraAdapter>(any);
      } else if (h.bottleneck != nullptr && std::holds_alternative<BottleneckAdapter>(any)) {
        *h.bottleneck = std::get<BottleneckAdapter>(any);
      } else {
        throw ConfigError("checkpoint adapter kind does not match the config");
      }
    });
    if (cursor != stored.size()) {
      throw ConfigError("checkpoint lists adapters the config does not attach");
    }

    const auto hw = in.at("head").at("w").get<std::vector<double>>();
    if (hw.size() != b.head_w.size()) throw ConfigError("head weight size mismatch");
    std::copy(hw.begin(), hw.end(), b.head_w.data());
    const auto hb = in.at("head").at("b").get<std::vector<double>>();
    if (hb.size() != b.head_b.dim()) throw ConfigError("head bias size mismatch");
    for (std::size_t i = 0; i < hb.size(); ++i) b.head_b[i] = hb[i];
    return b;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed checkpoint: ") + e.what());
  }
}

}  // namespace hta
