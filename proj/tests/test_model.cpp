#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "doctest.h"
#include "hta/errors.hpp"
#include "hta/model.hpp"
#include "hta/rng.hpp"
#include "support/oracles.hpp"

using hta::AdapterKind;
using hta::AttachmentConfig;
using hta::AttachStyle;
using hta::Backbone;
using hta::DenseMatrix;
using hta::ModelConfig;
using hta::Position;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.dim = 8;
  cfg.depth = 1;
  cfg.heads = 2;
  cfg.tokens = 3;
  cfg.classes = 3;
  cfg.mlp_ratio = 2.0;
  return cfg;
}

DenseMatrix random_tokens(const ModelConfig& cfg, std::size_t batch, std::uint64_t seed) {
  hta::Rng rng(seed);
  DenseMatrix m(batch * cfg.content_tokens(), cfg.dim);
  for (std::size_t k = 0; k < m.size(); ++k) m.data()[k] = rng.normal();
  return m;
}

void randomize_trainables(Backbone& b, double scale, std::uint64_t seed) {
  hta::Rng rng(seed);
  for (const hta::ParamRef& ref : trainable_parameters(b)) {
    for (std::size_t i = 0; i < ref.size; ++i) ref.data[i] = scale * rng.normal();
  }
  project_normalized_v(b);
}

// ---- independent reference forward (plain loops, no shared kernels) ----------

DenseMatrix ref_layernorm(const DenseMatrix& x) {
  DenseMatrix y(x.rows(), x.cols());
  const double n = static_cast<double>(x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < x.cols(); ++j) mean += x(i, j);
    mean /= n;
    double var = 0.0;
    for (std::size_t j = 0; j < x.cols(); ++j) var += (x(i, j) - mean) * (x(i, j) - mean);
    var /= n;
    const double inv = 1.0 / std::sqrt(var + 1e-5);
    for (std::size_t j = 0; j < x.cols(); ++j) y(i, j) = (x(i, j) - mean) * inv;
  }
  return y;
}

DenseMatrix ref_softmax(const DenseMatrix& x) {
  DenseMatrix y(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double m = x(i, 0);
    for (std::size_t j = 1; j < x.cols(); ++j) m = std::max(m, x(i, j));
    double s = 0.0;
    for (std::size_t j = 0; j < x.cols(); ++j) {
      y(i, j) = std::exp(x(i, j) - m);
      s += y(i, j);
    }
    for (std::size_t j = 0; j < x.cols(); ++j) y(i, j) /= s;
  }
  return y;
}

DenseMatrix ref_gelu(const DenseMatrix& x) {
  DenseMatrix y(x.rows(), x.cols());
  for (std::size_t k = 0; k < x.size(); ++k) {
    const double v = x.data()[k];
    y.data()[k] = 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0)));
  }
  return y;
}

DenseMatrix ref_linear(const DenseMatrix& x, const DenseMatrix& w, const hta::Vector& b) {
  DenseMatrix y = oracle::naive_matmul(x, w);
  for (std::size_t i = 0; i < y.rows(); ++i) {
    for (std::size_t j = 0; j < y.cols(); ++j) y(i, j) += b[j];
  }
  return y;
}

/// Reference forward for an unadapted backbone, one sample at a time.
DenseMatrix ref_forward(const Backbone& b, const DenseMatrix& tokens, std::size_t batch) {
  const ModelConfig& cfg = b.config;
  const std::size_t T = cfg.tokens;
  const std::size_t content = cfg.content_tokens();
  const std::size_t dh = cfg.dim / cfg.heads;
  DenseMatrix logits(batch, cfg.classes);

  for (std::size_t s = 0; s < batch; ++s) {
    DenseMatrix x(T, cfg.dim);
    for (std::size_t j = 0; j < cfg.dim; ++j) x(0, j) = b.cls_token(0, j);
    for (std::size_t r = 0; r < content; ++r) {
      // Embed the raw feature row.
      for (std::size_t j = 0; j < cfg.dim; ++j) {
        double acc = b.embed_b[j];
        for (std::size_t m = 0; m < cfg.dim; ++m) {
          acc += tokens(s * content + r, m) * b.embed_w(m, j);
        }
        x(r + 1, j) = acc;
      }
    }
    for (const hta::Block& blk : b.blocks) {
      const DenseMatrix h = ref_layernorm(x);
      const DenseMatrix q = ref_linear(h, blk.q.base_w, blk.q.base_b);
      const DenseMatrix k = ref_linear(h, blk.k.base_w, blk.k.base_b);
      const DenseMatrix v = ref_linear(h, blk.v.base_w, blk.v.base_b);
      DenseMatrix heads_out(T, cfg.dim);
      for (std::size_t head = 0; head < cfg.heads; ++head) {
        DenseMatrix scores(T, T);
        for (std::size_t a = 0; a < T; ++a) {
          for (std::size_t c = 0; c < T; ++c) {
            double dot = 0.0;
            for (std::size_t j = 0; j < dh; ++j) {
              dot += q(a, head * dh + j) * k(c, head * dh + j);
            }
            scores(a, c) = dot / std::sqrt(static_cast<double>(dh));
          }
        }
        const DenseMatrix attn = ref_softmax(scores);
        for (std::size_t a = 0; a < T; ++a) {
          for (std::size_t j = 0; j < dh; ++j) {
            double acc = 0.0;
            for (std::size_t c = 0; c < T; ++c) acc += attn(a, c) * v(c, head * dh + j);
            heads_out(a, head * dh + j) = acc;
          }
        }
      }
      const DenseMatrix mha = ref_linear(heads_out, blk.o.base_w, blk.o.base_b);
      for (std::size_t e = 0; e < x.size(); ++e) x.data()[e] += mha.data()[e];

      const DenseMatrix h2 = ref_layernorm(x);
      const DenseMatrix mid = ref_gelu(ref_linear(h2, blk.fc1.base_w, blk.fc1.base_b));
      const DenseMatrix ffn = ref_linear(mid, blk.fc2.base_w, blk.fc2.base_b);
      for (std::size_t e = 0; e < x.size(); ++e) x.data()[e] += ffn.data()[e];
    }
    DenseMatrix cls(1, cfg.dim);
    for (std::size_t j = 0; j < cfg.dim; ++j) cls(0, j) = x(0, j);
    const DenseMatrix pooled = ref_layernorm(cls);
    for (std::size_t c = 0; c < cfg.classes; ++c) {
      double acc = b.head_b[c];
      for (std::size_t j = 0; j < cfg.dim; ++j) acc += pooled(0, j) * b.head_w(j, c);
      logits(s, c) = acc;
    }
  }
  return logits;
}

}  // namespace

TEST_SUITE("model") {
  TEST_CASE("same seed builds bitwise-identical backbones") {
    ModelConfig cfg = tiny_config();
    const Backbone a = build_backbone(cfg, 11);
    const Backbone b = build_backbone(cfg, 11);
    CHECK(frozen_state_hash(a) == frozen_state_hash(b));
    CHECK(a.head_w == b.head_w);
    const DenseMatrix probe = random_tokens(cfg, 2, 5);
    CHECK(forward(a, probe, 2) == forward(b, probe, 2));
    CHECK(frozen_state_hash(a) != frozen_state_hash(build_backbone(cfg, 12)));
  }

  TEST_CASE("config validation rejects bad geometry and pairings") {
    ModelConfig cfg = tiny_config();
    cfg.heads = 3;  // 8 % 3 != 0
    CHECK_THROWS_AS(build_backbone(cfg, 1), hta::ConfigError);

    AttachmentConfig a;
    a.kind = AdapterKind::lora;
    a.style = AttachStyle::multiplicative;
    a.positions = {Position::post_mha};
    CHECK_THROWS_AS(a.validate(), hta::ConfigError);

    a.kind = AdapterKind::hta;
    a.style = AttachStyle::additive;
    a.positions = {Position::post_mha};  // additive needs a square projection
    CHECK_THROWS_AS(a.validate(), hta::ConfigError);

    a.positions = {Position::q, Position::q};
    CHECK_THROWS_AS(a.validate(), hta::ConfigError);

    a.kind = AdapterKind::bottleneck;
    a.style = AttachStyle::additive;
    a.positions = {Position::q};
    CHECK_THROWS_AS(a.validate(), hta::ConfigError);

    a.kind = AdapterKind::none;
    a.positions = {};
    CHECK_NOTHROW(a.validate());
  }

  TEST_CASE("forward yields finite logits of the right shape") {
    ModelConfig cfg;
    cfg.dim = 32;
    cfg.depth = 2;
    cfg.heads = 4;
    cfg.tokens = 5;
    cfg.classes = 7;
    const Backbone b = build_backbone(cfg, 3);
    const DenseMatrix logits = forward(b, random_tokens(cfg, 4, 9), 4);
    CHECK(logits.rows() == 4);
    CHECK(logits.cols() == 7);
    CHECK(logits.all_finite());
    CHECK_THROWS_AS(forward(b, random_tokens(cfg, 4, 9), 3), hta::ShapeError);
  }

  TEST_CASE("depth 0 degenerates to embedding plus head") {
    ModelConfig cfg = tiny_config();
    cfg.depth = 0;
    Backbone b = build_backbone(cfg, 4);
    const DenseMatrix logits = forward(b, random_tokens(cfg, 2, 10), 2);
    CHECK(logits.rows() == 2);
    CHECK(logits.all_finite());
    const auto params = trainable_parameters(b);
    REQUIRE(params.size() == 2);
    CHECK(params[0].name == "head.w");
    CHECK(params[1].name == "head.b");
  }

  TEST_CASE("forward matches an independent reference implementation") {
    ModelConfig cfg = tiny_config();
    cfg.depth = 2;
    const Backbone b = build_backbone(cfg, 21);
    const DenseMatrix tokens = random_tokens(cfg, 3, 22);
    const DenseMatrix got = forward(b, tokens, 3);
    const DenseMatrix want = ref_forward(b, tokens, 3);
    CHECK(hta::max_abs_diff(got, want) <= 1e-12);
  }

  TEST_CASE("single-token attention reduces to the value path") {
    ModelConfig cfg = tiny_config();
    cfg.tokens = 1;  // class token only; softmax over one key is exactly 1
    const Backbone b = build_backbone(cfg, 31);
    const DenseMatrix tokens(0, cfg.dim);
    const DenseMatrix got = forward(b, tokens, 1);
    const DenseMatrix want = ref_forward(b, tokens, 1);
    CHECK(hta::max_abs_diff(got, want) <= 1e-13);
    CHECK(got.all_finite());
  }

  TEST_CASE("fresh adapters leave logits bitwise unchanged") {
    ModelConfig plain = tiny_config();
    plain.depth = 2;
    const Backbone base = build_backbone(plain, 41);
    const DenseMatrix tokens = random_tokens(plain, 2, 42);
    const DenseMatrix base_logits = forward(base, tokens, 2);

    const auto check_variant = [&](AdapterKind kind, AttachStyle style,
                                   std::vector<Position> positions, std::size_t r) {
      ModelConfig cfg = plain;
      cfg.adaptation.kind = kind;
      cfg.adaptation.style = style;
      cfg.adaptation.positions = std::move(positions);
      cfg.adaptation.r = r;
      const Backbone adapted = build_backbone(cfg, 41);
      CHECK(forward(adapted, tokens, 2) == base_logits);
    };
    check_variant(AdapterKind::hta, AttachStyle::additive, {Position::q, Position::v}, 1);
    check_variant(AdapterKind::hta, AttachStyle::additive, {Position::q, Position::v}, 0);
    check_variant(AdapterKind::hta, AttachStyle::multiplicative,
                  {Position::post_mha, Position::post_ffn}, 2);
    check_variant(AdapterKind::lora, AttachStyle::additive,
                  {Position::q, Position::k, Position::v, Position::o}, 4);
    check_variant(AdapterKind::bottleneck, AttachStyle::multiplicative,
                  {Position::post_mha, Position::post_ffn, Position::fc1, Position::fc2}, 2);
  }

  TEST_CASE("content-token permutation leaves logits unchanged") {
    ModelConfig cfg = tiny_config();
    cfg.tokens = 6;
    cfg.depth = 2;
    const Backbone b = build_backbone(cfg, 51);
    const DenseMatrix tokens = random_tokens(cfg, 1, 52);
    DenseMatrix shuffled = tokens;
    // Rotate the five content rows by two.
    for (std::size_t r = 0; r < 5; ++r) {
      for (std::size_t j = 0; j < cfg.dim; ++j) {
        shuffled(r, j) = tokens((r + 2) % 5, j);
      }
    }
    const DenseMatrix a = forward(b, tokens, 1);
    const DenseMatrix c = forward(b, shuffled, 1);
    CHECK(hta::max_abs_diff(a, c) <= 1e-12);

    // A frozen learned positional table must break the symmetry.
    ModelConfig pcfg = cfg;
    pcfg.learned_positional = true;
    const Backbone pb = build_backbone(pcfg, 51);
    const DenseMatrix pa = forward(pb, tokens, 1);
    const DenseMatrix pc = forward(pb, shuffled, 1);
    CHECK(hta::max_abs_diff(pa, pc) > 1e-6);
  }

  TEST_CASE("merged forward matches branched forward with trained-like adapters") {
    const auto check_variant = [](AdapterKind kind, AttachStyle style,
                                  std::vector<Position> positions, std::size_t r,
                                  bool literal) {
      ModelConfig cfg = tiny_config();
      cfg.depth = 2;
      cfg.adaptation.kind = kind;
      cfg.adaptation.style = style;
      cfg.adaptation.positions = std::move(positions);
      cfg.adaptation.r = r;
      cfg.adaptation.literal_factor = literal;
      cfg.adaptation.normalize_v = kind == AdapterKind::hta;
      Backbone b = build_backbone(cfg, 61);
      randomize_trainables(b, 0.2, 62);

      const DenseMatrix tokens = random_tokens(cfg, 3, 63);
      const DenseMatrix branched = forward(b, tokens, 3);
      merge_all(b);
      hta::ForwardOptions merged;
      merged.mode = hta::ForwardMode::merged;
      const DenseMatrix folded = forward(b, tokens, 3, merged);
      const double scale = std::max(1.0, branched.max_abs());
      CHECK(hta::max_abs_diff(branched, folded) / scale <= 1e-9);
      unmerge_all(b);
      CHECK(forward(b, tokens, 3) == branched);
    };
    check_variant(AdapterKind::hta, AttachStyle::additive,
                  {Position::q, Position::v, Position::o}, 2, false);
    check_variant(AdapterKind::hta, AttachStyle::multiplicative,
                  {Position::post_mha, Position::post_ffn, Position::fc1}, 1, false);
    check_variant(AdapterKind::hta, AttachStyle::multiplicative, {Position::post_ffn}, 1,
                  true);  // literal factor, no residual
    check_variant(AdapterKind::lora, AttachStyle::additive,
                  {Position::q, Position::k, Position::v, Position::o}, 3, false);
  }

  TEST_CASE("nonlinear bottlenecks refuse to merge") {
    ModelConfig cfg = tiny_config();
    cfg.adaptation.kind = AdapterKind::bottleneck;
    cfg.adaptation.style = AttachStyle::multiplicative;
    cfg.adaptation.positions = {Position::post_mha};
    cfg.adaptation.r = 2;
    Backbone b = build_backbone(cfg, 71);
    randomize_trainables(b, 0.2, 72);
    CHECK_THROWS_AS(merge_all(b), hta::ConfigError);
  }

  TEST_CASE("trainable registry counts match the accounting formulas") {
    ModelConfig cfg;
    cfg.dim = 32;
    cfg.depth = 2;
    cfg.heads = 4;
    cfg.tokens = 5;
    cfg.classes = 10;
    cfg.adaptation.kind = AdapterKind::hta;
    cfg.adaptation.style = AttachStyle::additive;
    cfg.adaptation.positions = {Position::q, Position::v};
    cfg.adaptation.r = 1;
    Backbone b = build_backbone(cfg, 81);

    // 2 positions x (3*32 + 2*32*1) x 2 layers = 640 adapter parameters.
    CHECK(param_count(param_count_config(cfg)) == 640);
    const std::size_t head = 32 * 10 + 10;
    CHECK(trainable_parameter_count(b) == 640 + head);

    std::size_t total = 0;
    for (const auto& ref : trainable_parameters(b)) total += ref.size;
    CHECK(total == 640 + head);

    ModelConfig lcfg = cfg;
    lcfg.adaptation.kind = AdapterKind::lora;
    lcfg.adaptation.r = 4;
    Backbone lb = build_backbone(lcfg, 81);
    CHECK(param_count(param_count_config(lcfg)) == 1024);
    CHECK(trainable_parameter_count(lb) == 1024 + head);
  }

  TEST_CASE("registry order matches the tape's leaf order") {
    ModelConfig cfg = tiny_config();
    cfg.adaptation.kind = AdapterKind::hta;
    cfg.adaptation.style = AttachStyle::additive;
    cfg.adaptation.positions = {Position::q, Position::v};
    cfg.adaptation.r = 1;
    Backbone b = build_backbone(cfg, 91);
    const auto refs = trainable_parameters(b);
    const auto fwd = taped_forward(b, random_tokens(cfg, 2, 92), 2, nullptr);
    REQUIRE(refs.size() == fwd.params.size());
    for (std::size_t i = 0; i < refs.size(); ++i) {
      CHECK(refs[i].name == fwd.params[i].first);
      CHECK(refs[i].size == fwd.tape.value(fwd.params[i].second).size());
    }
  }

  TEST_CASE("loss gradients flow to every on-path parameter class") {
    ModelConfig cfg = tiny_config();
    cfg.adaptation.kind = AdapterKind::hta;
    cfg.adaptation.style = AttachStyle::additive;
    cfg.adaptation.positions = {Position::q, Position::v};
    cfg.adaptation.r = 1;
    Backbone b = build_backbone(cfg, 101);
    randomize_trainables(b, 0.1, 102);
    const std::vector<std::size_t> labels = {0, 2};
    auto fwd = taped_forward(b, random_tokens(cfg, 2, 103), 2, &labels);
    REQUIRE(fwd.loss != hta::kNoNode);
    const hta::Grad grad = fwd.tape.backward(fwd.loss);
    for (const auto& [name, node] : fwd.params) {
      INFO("param ", name);
      CHECK(grad.contains(node));
      CHECK(grad.at(node).all_finite());
    }
  }

  TEST_CASE("model gradients match central differences for every class") {
    const auto run_case = [](AdapterKind kind, AttachStyle style,
                             std::vector<Position> positions, std::size_t seed) {
      ModelConfig cfg = tiny_config();
      cfg.adaptation.kind = kind;
      cfg.adaptation.style = style;
      cfg.adaptation.positions = std::move(positions);
      cfg.adaptation.r = 1;
      Backbone b = build_backbone(cfg, seed);
      randomize_trainables(b, 0.1, seed + 1);
      const DenseMatrix tokens = random_tokens(cfg, 2, seed + 2);
      const std::vector<std::size_t> labels = {1, 2};

      auto refs = trainable_parameters(b);
      std::vector<std::pair<std::string, hta::Vector>> params;
      for (const auto& ref : refs) {
        hta::Vector v(ref.size);
        for (std::size_t i = 0; i < ref.size; ++i) v[i] = ref.data[i];
        params.emplace_back(ref.name, std::move(v));
      }
      const auto write_back = [&](const std::vector<hta::Vector>& values) {
        for (std::size_t p = 0; p < refs.size(); ++p) {
          for (std::size_t i = 0; i < refs[p].size; ++i) refs[p].data[i] = values[p][i];
        }
      };
      const auto loss_at = [&](const std::vector<hta::Vector>& values) {
        write_back(values);
        const auto fwd = taped_forward(b, tokens, 2, &labels);
        return fwd.tape.value(fwd.loss)(0, 0);
      };
      const auto grad_at = [&](const std::vector<hta::Vector>& values) {
        write_back(values);
        auto fwd = taped_forward(b, tokens, 2, &labels);
        const hta::Grad grad = fwd.tape.backward(fwd.loss);
        std::vector<hta::Vector> out;
        for (std::size_t p = 0; p < refs.size(); ++p) {
          hta::Vector g(refs[p].size);
          if (grad.contains(fwd.params[p].second)) {
            const DenseMatrix& gm = grad.at(fwd.params[p].second);
            for (std::size_t i = 0; i < g.dim(); ++i) g[i] = gm.data()[i];
          }
          out.push_back(std::move(g));
        }
        return out;
      };
      const auto report = hta::grad_check(params, loss_at, grad_at, 1e-5, 1e-5, 1e-8);
      for (const auto& entry : report.entries) {
        INFO("param ", entry.param, " max_rel ", entry.max_rel);
        CHECK(entry.pass);
      }
      CHECK(report.all_pass);
    };
    run_case(AdapterKind::hta, AttachStyle::additive, {Position::q, Position::v}, 111);
    run_case(AdapterKind::bottleneck, AttachStyle::multiplicative,
             {Position::post_mha, Position::post_ffn}, 121);
  }

  TEST_CASE("frozen hash ignores trainables and tracks base weights") {
    ModelConfig cfg = tiny_config();
    cfg.adaptation.kind = AdapterKind::hta;
    cfg.adaptation.style = AttachStyle::additive;
    cfg.adaptation.positions = {Position::q};
    Backbone b = build_backbone(cfg, 131);
    const std::uint64_t before = frozen_state_hash(b);
    randomize_trainables(b, 0.5, 132);
    CHECK(frozen_state_hash(b) == before);
    b.blocks[0].k.base_w(0, 0) += 1.0;
    CHECK(frozen_state_hash(b) != before);
  }

  TEST_CASE("checkpoints round-trip the full model state") {
    ModelConfig cfg = tiny_config();
    cfg.depth = 2;
    cfg.adaptation.kind = AdapterKind::hta;
    cfg.adaptation.style = AttachStyle::additive;
    cfg.adaptation.positions = {Position::q, Position::v};
    cfg.adaptation.r = 1;
    cfg.adaptation.normalize_v = true;
    Backbone b = build_backbone(cfg, 141);
    randomize_trainables(b, 0.3, 142);

    const std::string path = "checkpoint_roundtrip_test.json";
    save_checkpoint(b, path);
    const Backbone loaded = hta::load_checkpoint(path);
    std::remove(path.c_str());

    CHECK(frozen_state_hash(loaded) == frozen_state_hash(b));
    const DenseMatrix tokens = random_tokens(cfg, 2, 143);
    CHECK(forward(loaded, tokens, 2) == forward(b, tokens, 2));
  }

  TEST_CASE("adapter dropout is deterministic and vanishes at rate zero") {
    ModelConfig cfg = tiny_config();
    cfg.adaptation.kind = AdapterKind::hta;
    cfg.adaptation.style = AttachStyle::additive;
    cfg.adaptation.positions = {Position::q, Position::v};
    cfg.adaptation.r = 1;
    Backbone b = build_backbone(cfg, 151);
    randomize_trainables(b, 0.3, 152);
    const DenseMatrix tokens = random_tokens(cfg, 2, 153);

    hta::ForwardOptions plain;
    const DenseMatrix no_dropout = forward(b, tokens, 2, plain);

    hta::Rng rng_a(7), rng_b(7), rng_c(8);
    hta::ForwardOptions drop;
    drop.adapter_dropout = 0.5;
    drop.dropout_rng = &rng_a;
    const DenseMatrix first = forward(b, tokens, 2, drop);
    drop.dropout_rng = &rng_b;
    const DenseMatrix second = forward(b, tokens, 2, drop);
    CHECK(first == second);  // same stream, same masks
    drop.dropout_rng = &rng_c;
    const DenseMatrix third = forward(b, tokens, 2, drop);
    CHECK(hta::max_abs_diff(first, third) > 0.0);

    hta::ForwardOptions zero_rate;
    zero_rate.adapter_dropout = 0.0;
    hta::Rng rng_d(7);
    zero_rate.dropout_rng = &rng_d;
    CHECK(forward(b, tokens, 2, zero_rate) == no_dropout);
  }
}
