#include "hta/adapters.hpp"

#include <cmath>

#include "hta/scalar_ops.hpp"

namespace hta {

const char* activation_name(Activation a) {
  switch (a) {
    case Activation::relu: return "relu";
    case Activation::gelu: return "gelu";
    case Activation::identity: return "identity";
  }
  throw ConfigError("activation_name: unknown activation");
}

Activation activation_from_name(const std::string& name) {
  if (name == "relu") return Activation::relu;
  if (name == "gelu") return Activation::gelu;
  if (name == "identity") return Activation::identity;
  throw ConfigError("unknown activation '" + name + "'");
}

DenseMatrix apply_activation(Activation a, const DenseMatrix& x) {
  DenseMatrix out = x;
  switch (a) {
    case Activation::relu:
      for (double& v : out.values()) v = relu(v);
      break;
    case Activation::gelu:
      for (double& v : out.values()) v = gelu(v);
      break;
    case Activation::identity:
      break;
  }
  return out;
}

// ---- HtaAdapter -------------------------------------------------------------

HtaAdapter HtaAdapter::zeros(std::size_t dim, std::size_t rank_r, bool normalize_v) {
  HtaAdapter a;
  a.dim = dim;
  a.v_left = Vector(dim);
  a.v_right = Vector(dim);
  a.d = Vector(dim);
  a.rank_r = rank_r;
  a.normalize_v = normalize_v;
  if (rank_r > 0) a.lowrank = LowRankPair{DenseMatrix(dim, rank_r), DenseMatrix(rank_r, dim)};
  return a;
}

HtaAdapter HtaAdapter::init(std::size_t dim, std::size_t rank_r, Rng& rng, bool normalize_v) {
  HtaAdapter a = zeros(dim, rank_r, normalize_v);
  for (std::size_t i = 0; i < dim; ++i) a.v_left[i] = 0.02 * rng.normal();
  for (std::size_t i = 0; i < dim; ++i) a.v_right[i] = 0.02 * rng.normal();
  if (rank_r > 0) {
    for (double& x : a.lowrank->w_down.values()) x = 0.02 * rng.normal();
    // w_up stays zero so the additive term vanishes at step 0.
  }
  if (normalize_v) a.project_v();
  return a;
}

void HtaAdapter::validate() const {
  if (v_left.dim() != dim || v_right.dim() != dim || d.dim() != dim) {
    throw ShapeError("HtaAdapter: v_left, v_right, d must all have length dim");
  }
  if ((rank_r > 0) != lowrank.has_value()) {
    throw ConfigError("HtaAdapter: lowrank pair must be present exactly when rank_r > 0");
  }
  if (lowrank) {
    if (lowrank->w_down.rows() != dim || lowrank->w_down.cols() != rank_r ||
        lowrank->w_up.rows() != rank_r || lowrank->w_up.cols() != dim) {
      throw ShapeError("HtaAdapter: lowrank shapes must be dim x r and r x dim");
    }
  }
}

void HtaAdapter::project_v() {
  for (Vector* v : {&v_left, &v_right}) {
    const double n2 = v->norm_sq();
    if (n2 == 0.0) continue;  // zero vector is already at an orthogonality root
    const double s = std::sqrt(2.0 / n2);
    for (std::size_t i = 0; i < v->dim(); ++i) (*v)[i] *= s;
  }
}

// ---- LoraAdapter ------------------------------------------------------------

LoraAdapter LoraAdapter::init(std::size_t dim_in, std::size_t dim_out, std::size_t rank_r,
                              Rng& rng) {
  if (rank_r == 0) throw ConfigError("LoraAdapter: rank must be >= 1");
  LoraAdapter a;
  a.rank_r = rank_r;
  a.w_down = DenseMatrix(dim_in, rank_r);
  a.w_up = DenseMatrix(rank_r, dim_out);
  for (double& x : a.w_down.values()) x = 0.02 * rng.normal();
  // w_up stays zero so the adaptation vanishes at step 0.
  return a;
}

void LoraAdapter::validate() const {
  if (rank_r == 0) throw ConfigError("LoraAdapter: rank must be >= 1");
  if (w_down.cols() != rank_r || w_up.rows() != rank_r) {
    throw ShapeError("LoraAdapter: inner dimensions must equal rank_r");
  }
}

// ---- BottleneckAdapter -------------------------------------------------------

BottleneckAdapter BottleneckAdapter::init(std::size_t dim, std::size_t rank_r, Rng& rng,
                                          Activation activation) {
  if (rank_r == 0) throw ConfigError("BottleneckAdapter: rank must be >= 1");
  BottleneckAdapter a;
  a.activation = activation;
  a.w_down = DenseMatrix(dim, rank_r);
  a.w_up = DenseMatrix(rank_r, dim);
  for (double& x : a.w_down.values()) x = 0.02 * rng.normal();
  return a;
}

void BottleneckAdapter::validate() const {
  if (w_down.cols() != w_up.rows()) {
    throw ShapeError("BottleneckAdapter: w_down cols must equal w_up rows");
  }
  if (w_down.rows() != w_up.cols()) {
    throw ShapeError("BottleneckAdapter: bottleneck must map dim -> dim");
  }
}

// ---- composition -------------------------------------------------------------

DenseMatrix compose_hta(const HtaAdapter& a) {
  a.validate();
  // diag(d) (I - v_r v_r^T), then the left reflection, each a rank-1 update.
  DenseMatrix m = apply_householder_right(DenseMatrix::diagonal(a.d), a.v_right);
  return apply_householder_left(a.v_left, m);
}

DenseMatrix hta_full_adaptation(const HtaAdapter& a) {
  DenseMatrix w = compose_hta(a);
  if (a.rank_r > 0) {
    const DenseMatrix add = matmul(a.lowrank->w_down, a.lowrank->w_up);
    if (!add.is_zero()) w.add_in_place(add);
  }
  return w;
}

DenseMatrix lora_adaptation(const LoraAdapter& a) {
  a.validate();
  return matmul(a.w_down, a.w_up);
}

SvdResult adaptation_spectrum(const HtaAdapter& a) { return jacobi_svd(hta_full_adaptation(a)); }

// ---- attached linear layers ----------------------------------------------------

namespace {

// x (I - v_l v_l^T) diag(d) (I - v_r v_r^T) [+ (x w_down) w_up], factored.
DenseMatrix hta_apply_to_rows(const DenseMatrix& x, const HtaAdapter& a) {
  DenseMatrix t = apply_householder_right(x, a.v_left);
  for (std::size_t i = 0; i < t.rows(); ++i) {
    double* row = t.row(i);
    for (std::size_t j = 0; j < t.cols(); ++j) row[j] *= a.d[j];
  }
  t = apply_householder_right(t, a.v_right);
  if (a.rank_r > 0) {
    const DenseMatrix add = matmul(matmul(x, a.lowrank->w_down), a.lowrank->w_up);
    if (!add.is_zero()) t.add_in_place(add);
  }
  return t;
}

}  // namespace

void AdaptedLinear::validate() const {
  if (base_b.dim() != base_w.cols()) {
    throw ShapeError("AdaptedLinear: bias length must equal output dimension");
  }
  if (const auto* hta = std::get_if<HtaAdapter>(&adapter)) {
    hta->validate();
    if (style == AttachStyle::additive) {
      if (base_w.rows() != base_w.cols()) {
        throw ConfigError("AdaptedLinear: additive reflection adapters need a square weight");
      }
      if (hta->dim != base_w.rows()) {
        throw ShapeError("AdaptedLinear: adapter dim must match the square weight");
      }
    } else if (hta->dim != base_w.cols()) {
      throw ShapeError("AdaptedLinear: multiplicative adapter dim must match output dim");
    }
  } else if (const auto* lora = std::get_if<LoraAdapter>(&adapter)) {
    lora->validate();
    if (style != AttachStyle::additive) {
      throw ConfigError("AdaptedLinear: low-rank adapters attach additively only");
    }
    if (lora->w_down.rows() != base_w.rows() || lora->w_up.cols() != base_w.cols()) {
      throw ShapeError("AdaptedLinear: low-rank factors must span the weight's shape");
    }
  } else if (const auto* bn = std::get_if<BottleneckAdapter>(&adapter)) {
    bn->validate();
    if (style != AttachStyle::multiplicative) {
      throw ConfigError("AdaptedLinear: bottleneck adapters attach multiplicatively only");
    }
    if (bn->w_down.rows() != base_w.cols()) {
      throw ShapeError("AdaptedLinear: bottleneck dim must match output dim");
    }
  }
  if (mode == ForwardMode::merged && !merged_w) {
    throw ConfigError("AdaptedLinear: merged mode without merged weights");
  }
}

DenseMatrix forward_branched(const AdaptedLinear& layer, const DenseMatrix& x) {
  layer.validate();
  if (x.cols() != layer.base_w.rows()) {
    throw ShapeError("forward_branched: input cols must equal weight rows");
  }
  DenseMatrix base = add_rowvec(matmul(x, layer.base_w), layer.base_b);
  if (const auto* hta = std::get_if<HtaAdapter>(&layer.adapter)) {
    if (layer.style == AttachStyle::additive) {
      const DenseMatrix contrib = hta_apply_to_rows(x, *hta);
      if (!contrib.is_zero()) base.add_in_place(contrib);
      return base;
    }
    const DenseMatrix factored = forward_adapter_style(base, *hta);
    if (layer.literal_factor) return factored;
    if (!factored.is_zero()) base.add_in_place(factored);
    return base;
  }
  if (const auto* lora = std::get_if<LoraAdapter>(&layer.adapter)) {
    const DenseMatrix contrib = matmul(matmul(x, lora->w_down), lora->w_up);
    if (!contrib.is_zero()) base.add_in_place(contrib);
    return base;
  }
  if (const auto* bn = std::get_if<BottleneckAdapter>(&layer.adapter)) {
    const DenseMatrix factored = forward_adapter_style(base, *bn);
    if (layer.literal_factor) return factored;
    if (!factored.is_zero()) base.add_in_place(factored);
    return base;
  }
  return base;
}

DenseMatrix forward_merged(const AdaptedLinear& layer, const DenseMatrix& x) {
  if (layer.mode != ForwardMode::merged || !layer.merged_w || !layer.merged_b) {
    throw ConfigError("forward_merged: layer has not been merged");
  }
  return add_rowvec(matmul(x, *layer.merged_w), *layer.merged_b);
}

DenseMatrix forward(const AdaptedLinear& layer, const DenseMatrix& x) {
  return layer.mode == ForwardMode::merged ? forward_merged(layer, x)
                                           : forward_branched(layer, x);
}

DenseMatrix forward_adapter_style(const DenseMatrix& module_out, const HtaAdapter& a) {
  a.validate();
  if (module_out.cols() != a.dim) {
    throw ShapeError("forward_adapter_style: output cols must equal adapter dim");
  }
  return hta_apply_to_rows(module_out, a);
}

DenseMatrix forward_adapter_style(const DenseMatrix& module_out, const BottleneckAdapter& a) {
  a.validate();
  if (module_out.cols() != a.w_down.rows()) {
    throw ShapeError("forward_adapter_style: output cols must equal adapter dim");
  }
  return matmul(apply_activation(a.activation, matmul(module_out, a.w_down)), a.w_up);
}

AdaptedLinear merge(const AdaptedLinear& layer) {
  layer.validate();
  AdaptedLinear merged = layer;
  merged.mode = ForwardMode::merged;
  merged.merged_b = layer.base_b;

  // The multiplicative factor F folds as W(I + F) and b(I + F); bias rows
  // transform as b^T F, i.e. F^T b.
  const auto fold_factor = [&](const DenseMatrix& f) {
    if (layer.literal_factor) {
      merged.merged_w = matmul(layer.base_w, f);
      Vector b(f.cols());
      for (std::size_t j = 0; j < f.cols(); ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < f.rows(); ++i) s += layer.base_b[i] * f(i, j);
        b[j] = s;
      }
      merged.merged_b = b;
      return;
    }
    if (f.is_zero()) {
      merged.merged_w = layer.base_w;
      return;
    }
    merged.merged_w = add(layer.base_w, matmul(layer.base_w, f));
    Vector b = layer.base_b;
    for (std::size_t j = 0; j < f.cols(); ++j) {
      double s = 0.0;
      for (std::size_t i = 0; i < f.rows(); ++i) s += layer.base_b[i] * f(i, j);
      b[j] += s;
    }
    merged.merged_b = b;
  };

  if (const auto* hta = std::get_if<HtaAdapter>(&layer.adapter)) {
    const DenseMatrix delta = hta_full_adaptation(*hta);
    if (layer.style == AttachStyle::additive) {
      merged.merged_w = delta.is_zero() ? layer.base_w : add(layer.base_w, delta);
    } else {
      fold_factor(delta);
    }
  } else if (const auto* lora = std::get_if<LoraAdapter>(&layer.adapter)) {
    const DenseMatrix delta = lora_adaptation(*lora);
    merged.merged_w = delta.is_zero() ? layer.base_w : add(layer.base_w, delta);
  } else if (const auto* bn = std::get_if<BottleneckAdapter>(&layer.adapter)) {
    if (bn->activation != Activation::identity) {
      throw ConfigError("merge: a nonlinear bottleneck cannot fold into the weights");
    }
    fold_factor(matmul(bn->w_down, bn->w_up));
  } else {
    merged.merged_w = layer.base_w;
  }
  return merged;
}

// ---- parameter accounting ------------------------------------------------------

const char* adapter_kind_name(AdapterKind k) {
  switch (k) {
    case AdapterKind::none: return "none";
    case AdapterKind::hta: return "hta";
    case AdapterKind::lora: return "lora";
    case AdapterKind::bottleneck: return "bottleneck";
  }
  throw ConfigError("adapter_kind_name: unknown kind");
}

AdapterKind adapter_kind_from_name(const std::string& name) {
  if (name == "none") return AdapterKind::none;
  if (name == "hta") return AdapterKind::hta;
  if (name == "lora") return AdapterKind::lora;
  if (name == "bottleneck") return AdapterKind::bottleneck;
  throw ConfigError("unknown adapter kind '" + name + "'");
}

std::size_t param_count(const ParamCountConfig& config) {
  std::size_t per_layer = 0;
  for (const PositionSpec& pos : config.positions) {
    const std::size_t d_out = pos.dim_out;
    switch (config.kind) {
      case AdapterKind::none:
        break;
      case AdapterKind::hta:
        per_layer += 3 * d_out;
        if (config.include_lowrank) per_layer += 2 * d_out * config.rank_r;
        break;
      case AdapterKind::lora:
        per_layer += (pos.dim_in + pos.dim_out) * config.rank_r;
        break;
      case AdapterKind::bottleneck:
        per_layer += 2 * d_out * config.rank_r;
        break;
    }
  }
  std::size_t total = per_layer * config.layers;
  if (config.count_head) total += config.head_dim * config.head_classes + config.head_classes;
  return total;
}

}  // namespace hta
