#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <vector>

#include "doctest.h"
#include "hta/dataset.hpp"
#include "hta/errors.hpp"
#include "hta/model.hpp"
#include "hta/rng.hpp"
#include "hta/trainer.hpp"

using hta::Backbone;
using hta::Dataset;
using hta::DenseMatrix;
using hta::ModelConfig;
using hta::Sample;
using hta::TrainConfig;

namespace {

ModelConfig probe_config() {
  ModelConfig cfg;
  cfg.dim = 16;
  cfg.depth = 1;
  cfg.heads = 2;
  cfg.tokens = 3;
  cfg.classes = 3;
  cfg.mlp_ratio = 2.0;
  return cfg;
}

/// Well-separated Gaussian clusters in token space: class c draws every
/// content token near a fixed class template, so a linear readout of the
/// frozen features can classify them.
Dataset cluster_task(const ModelConfig& cfg, std::size_t n_train, std::size_t n_eval,
                     std::uint64_t seed, double spread = 0.15) {
  hta::Rng rng(seed);
  std::vector<DenseMatrix> templates;
  for (std::size_t c = 0; c < cfg.classes; ++c) {
    DenseMatrix t(cfg.content_tokens(), cfg.dim);
    for (std::size_t k = 0; k < t.size(); ++k) t.data()[k] = 2.0 * rng.normal();
    templates.push_back(std::move(t));
  }
  const auto draw = [&](std::size_t count, std::vector<Sample>& out) {
    for (std::size_t i = 0; i < count; ++i) {
      const std::size_t label = i % cfg.classes;
      Sample s;
      s.label = label;
      s.tokens = templates[label];
      for (std::size_t k = 0; k < s.tokens.size(); ++k) {
        s.tokens.data()[k] += spread * rng.normal();
      }
      out.push_back(std::move(s));
    }
  };
  Dataset d;
  d.meta = {"clusters", seed, cfg.classes, std::nullopt};
  draw(n_train, d.train);
  draw(n_eval, d.eval);
  return d;
}

}  // namespace

TEST_SUITE("trainer") {
  TEST_CASE("learning-rate schedule follows warmup then cosine exactly") {
    TrainConfig cfg;
    cfg.epochs = 100;
    cfg.warmup_epochs = 10;
    cfg.base_lr = 3e-3;
    const std::size_t steps_per_epoch = 7;
    const std::size_t total = cfg.epochs * steps_per_epoch;
    const std::size_t warmup = cfg.warmup_epochs * steps_per_epoch;

    CHECK(hta::lr_at(cfg, 0, total) == 0.0);
    CHECK(hta::lr_at(cfg, warmup, total) == cfg.base_lr);

    // Independent pointwise recomputation of the closed form.
    double prev = -1.0;
    for (std::size_t step = 0; step < total; ++step) {
      const double want =
          step < warmup
              ? cfg.base_lr * static_cast<double>(step) / static_cast<double>(warmup)
              : cfg.base_lr * 0.5 *
                    (1.0 + std::cos(std::numbers::pi *
                                    static_cast<double>(step - warmup) /
                                    static_cast<double>(total - warmup)));
      const double got = hta::lr_at(cfg, step, total);
      CHECK(std::abs(got - want) <= 1e-12);
      CHECK(got >= 0.0);
      if (step <= warmup) CHECK(got >= prev);  // ramp is nondecreasing
      prev = got;
    }
    const double last = hta::lr_at(cfg, total - 1, total);
    CHECK(last == cfg.base_lr * 0.5 *
                      (1.0 + std::cos(std::numbers::pi *
                                      static_cast<double>(total - 1 - warmup) /
                                      static_cast<double>(total - warmup))));
    CHECK_THROWS_AS(hta::lr_at(cfg, total, total), hta::ConfigError);

    TrainConfig all_warm = cfg;
    all_warm.warmup_epochs = all_warm.epochs;
    CHECK(hta::lr_at(all_warm, total - 1, total) ==
          all_warm.base_lr * static_cast<double>(total - 1) / static_cast<double>(total));
  }

  TEST_CASE("adamw reproduces the hand-computed recurrence") {
    TrainConfig cfg;

    SUBCASE("zero gradient, zero decay leaves parameters untouched") {
      std::vector<double> p = {1.5, -2.0};
      const std::vector<double> g = {0.0, 0.0};
      hta::AdamWState st;
      hta::adamw_step(p, g, st, 1, 0.1, 0.0, cfg);
      CHECK(p[0] == 1.5);
      CHECK(p[1] == -2.0);
    }

    SUBCASE("first scalar step with unit gradient moves by -lr") {
      std::vector<double> p = {0.0};
      const std::vector<double> g = {1.0};
      hta::AdamWState st;
      hta::adamw_step(p, g, st, 1, 0.1, 0.0, cfg);
      // m_hat = 1, v_hat = 1: the step is exactly -lr/(1 + eps).
      CHECK(std::abs(p[0] + 0.1) <= 1e-8);
      CHECK(p[0] == -0.1 / (1.0 + cfg.eps));
    }

    SUBCASE("decay with zero gradient is a pure multiplicative shrink") {
      std::vector<double> p = {2.0};
      const std::vector<double> g = {0.0};
      hta::AdamWState st;
      hta::adamw_step(p, g, st, 1, 0.1, 0.01, cfg);
      CHECK(p[0] == 2.0 * (1.0 - 0.1 * 0.01));
    }

    SUBCASE("three steps match an independent recurrence") {
      const std::vector<double> grads = {0.7, -1.3, 0.2};
      std::vector<double> p = {0.4};
      hta::AdamWState st;
      double mp = 0.0, vp = 0.0, want = 0.4;
      for (std::size_t t = 1; t <= grads.size(); ++t) {
        const double g = grads[t - 1];
        hta::adamw_step(p, std::vector<double>{g}, st, t, 0.05, 0.02, cfg);
        want *= 1.0 - 0.05 * 0.02;
        mp = cfg.beta1 * mp + (1.0 - cfg.beta1) * g;
        vp = cfg.beta2 * vp + (1.0 - cfg.beta2) * g * g;
        const double mh = mp / (1.0 - std::pow(cfg.beta1, static_cast<double>(t)));
        const double vh = vp / (1.0 - std::pow(cfg.beta2, static_cast<double>(t)));
        want -= 0.05 * mh / (std::sqrt(vh) + cfg.eps);
        CHECK(p[0] == want);
      }
    }

    SUBCASE("non-finite gradients are refused") {
      std::vector<double> p = {0.0};
      const std::vector<double> g = {std::numeric_limits<double>::quiet_NaN()};
      hta::AdamWState st;
      CHECK_THROWS_AS(hta::adamw_step(p, g, st, 1, 0.1, 0.0, cfg), hta::NumericError);
    }
  }

  TEST_CASE("config validation") {
    TrainConfig cfg;
    cfg.warmup_epochs = cfg.epochs + 1;
    CHECK_THROWS_AS(cfg.validate(), hta::ConfigError);
    cfg = TrainConfig{};
    cfg.adapter_dropout = 1.0;
    CHECK_THROWS_AS(cfg.validate(), hta::ConfigError);
    cfg = TrainConfig{};
    cfg.batch_size = 0;
    CHECK_THROWS_AS(cfg.validate(), hta::ConfigError);
  }

  TEST_CASE("parameter classes route weight decay structurally") {
    ModelConfig cfg = probe_config();
    cfg.adaptation.kind = hta::AdapterKind::hta;
    cfg.adaptation.style = hta::AttachStyle::additive;
    cfg.adaptation.positions = {hta::Position::q};
    cfg.adaptation.r = 1;
    Backbone b = build_backbone(cfg, 7);
    for (const auto& ref : trainable_parameters(b)) {
      const auto ends_with = [&](const char* suffix) {
        const std::string s(suffix);
        return ref.name.size() >= s.size() &&
               ref.name.compare(ref.name.size() - s.size(), s.size(), s) == 0;
      };
      if (ends_with(".v_left") || ends_with(".v_right") || ends_with(".d")) {
        CHECK(ref.cls == hta::ParamClass::adapter_vector);
      } else if (ends_with(".w_down") || ends_with(".w_up")) {
        CHECK(ref.cls == hta::ParamClass::adapter_matrix);
      } else if (ref.name == "head.w") {
        CHECK(ref.cls == hta::ParamClass::head_weight);
      } else {
        CHECK(ref.name == "head.b");
        CHECK(ref.cls == hta::ParamClass::head_bias);
      }
    }
  }

  TEST_CASE("first-batch loss with fresh adapters equals the unadapted loss") {
    ModelConfig plain = probe_config();
    const Backbone base = build_backbone(plain, 17);
    ModelConfig acfg = plain;
    acfg.adaptation.kind = hta::AdapterKind::hta;
    acfg.adaptation.style = hta::AttachStyle::additive;
    acfg.adaptation.positions = {hta::Position::q, hta::Position::v};
    acfg.adaptation.r = 1;
    const Backbone adapted = build_backbone(acfg, 17);

    const Dataset task = cluster_task(plain, 8, 0, 18);
    std::vector<std::size_t> idx = {0, 1, 2, 3, 4, 5, 6, 7};
    const DenseMatrix tokens = fold_batch(task.train, idx);
    const std::vector<std::size_t> labels = labels_at(task.train, idx);

    const auto f0 = taped_forward(base, tokens, 8, &labels);
    const auto f1 = taped_forward(adapted, tokens, 8, &labels);
    CHECK(f0.tape.value(f0.loss)(0, 0) == f1.tape.value(f1.loss)(0, 0));
  }

  TEST_CASE("same seed gives bitwise-identical loss traces") {
    ModelConfig mcfg = probe_config();
    mcfg.adaptation.kind = hta::AdapterKind::hta;
    mcfg.adaptation.style = hta::AttachStyle::additive;
    mcfg.adaptation.positions = {hta::Position::q, hta::Position::v};
    mcfg.adaptation.r = 1;
    const Dataset task = cluster_task(mcfg, 24, 12, 23);
    TrainConfig tcfg;
    tcfg.epochs = 4;
    tcfg.warmup_epochs = 1;
    tcfg.base_lr = 5e-3;
    tcfg.batch_size = 8;
    tcfg.adapter_dropout = 0.1;
    tcfg.seed = 99;

    Backbone b1 = build_backbone(mcfg, 25);
    const hta::RunRecord r1 = train(b1, task, tcfg);
    Backbone b2 = build_backbone(mcfg, 25);
    const hta::RunRecord r2 = train(b2, task, tcfg);

    REQUIRE(r1.epochs.size() == r2.epochs.size());
    for (std::size_t e = 0; e < r1.epochs.size(); ++e) {
      CHECK(r1.epochs[e].train_loss == r2.epochs[e].train_loss);
      CHECK(r1.epochs[e].eval_acc == r2.epochs[e].eval_acc);
      CHECK(r1.epochs[e].lr == r2.epochs[e].lr);
    }
    CHECK(r1.epochs[0].lr == hta::lr_at(tcfg, 0, 3 * tcfg.epochs));
    // A different train seed shuffles differently.
    Backbone b3 = build_backbone(mcfg, 25);
    TrainConfig other = tcfg;
    other.seed = 100;
    const hta::RunRecord r3 = train(b3, task, other);
    CHECK(r3.epochs.back().train_loss != r1.epochs.back().train_loss);
  }

  TEST_CASE("training never touches frozen tensors") {
    ModelConfig mcfg = probe_config();
    mcfg.adaptation.kind = hta::AdapterKind::hta;
    mcfg.adaptation.style = hta::AttachStyle::multiplicative;
    mcfg.adaptation.positions = {hta::Position::post_mha, hta::Position::post_ffn};
    mcfg.adaptation.r = 2;
    mcfg.adaptation.normalize_v = true;
    Backbone b = build_backbone(mcfg, 31);
    const std::uint64_t before = frozen_state_hash(b);
    const Dataset task = cluster_task(mcfg, 24, 12, 32);
    TrainConfig tcfg;
    tcfg.epochs = 3;
    tcfg.warmup_epochs = 1;
    tcfg.base_lr = 5e-3;
    tcfg.weight_decay = 0.01;
    tcfg.batch_size = 8;
    tcfg.seed = 33;
    train(b, task, tcfg);
    CHECK(frozen_state_hash(b) == before);
  }

  TEST_CASE("zero epochs reports the linear-probe-at-init accuracy") {
    ModelConfig mcfg = probe_config();
    Backbone b = build_backbone(mcfg, 41);
    const Dataset task = cluster_task(mcfg, 12, 18, 42);
    TrainConfig tcfg;
    tcfg.epochs = 0;
    tcfg.warmup_epochs = 0;
    const hta::RunRecord r = train(b, task, tcfg);
    CHECK(r.epochs.empty());
    CHECK(r.best_eval_acc == evaluate_accuracy(b, task.eval, tcfg.batch_size));
  }

  TEST_CASE("head-only training solves a separable task") {
    ModelConfig mcfg = probe_config();
    Backbone b = build_backbone(mcfg, 51);
    const Dataset task = cluster_task(mcfg, 60, 30, 52);
    TrainConfig tcfg;
    tcfg.epochs = 60;
    tcfg.warmup_epochs = 6;
    tcfg.base_lr = 0.05;
    tcfg.batch_size = 16;
    tcfg.seed = 53;
    const hta::RunRecord r = train(b, task, tcfg);
    CHECK(r.best_eval_acc >= 0.95);
    CHECK(r.final_train_loss < 0.5);
  }

  TEST_CASE("adapter parameters move off init and change the outcome") {
    ModelConfig probe_cfg = probe_config();
    ModelConfig adapted_cfg = probe_cfg;
    adapted_cfg.adaptation.kind = hta::AdapterKind::hta;
    adapted_cfg.adaptation.style = hta::AttachStyle::additive;
    adapted_cfg.adaptation.positions = {hta::Position::q, hta::Position::v};
    adapted_cfg.adaptation.r = 1;

    const Dataset task = cluster_task(probe_cfg, 24, 12, 81);
    TrainConfig tcfg;
    tcfg.epochs = 5;
    tcfg.warmup_epochs = 1;
    tcfg.base_lr = 1e-2;
    tcfg.batch_size = 8;
    tcfg.seed = 82;

    Backbone probe = build_backbone(probe_cfg, 83);
    const hta::RunRecord probe_run = train(probe, task, tcfg);
    Backbone adapted = build_backbone(adapted_cfg, 83);
    const hta::RunRecord adapted_run = train(adapted, task, tcfg);

    // The adapter branch receives gradients: the zero-initialized diagonal
    // (and low-rank up matrix) must leave the origin during training.
    double moved = 0.0;
    for (const auto& ref : trainable_parameters(adapted)) {
      if (ref.cls == hta::ParamClass::adapter_vector ||
          ref.cls == hta::ParamClass::adapter_matrix) {
        for (std::size_t i = 0; i < ref.size; ++i) moved += std::abs(ref.data[i]);
      }
    }
    CHECK(moved > 0.0);
    // And the trajectory diverges from the head-only run.
    CHECK(adapted_run.final_train_loss != probe_run.final_train_loss);
  }

  TEST_CASE("non-finite loss aborts the run and records the reason") {
    ModelConfig mcfg = probe_config();
    Backbone b = build_backbone(mcfg, 61);
    Dataset task = cluster_task(mcfg, 8, 4, 62);
    task.train[0].tokens(0, 0) = std::numeric_limits<double>::quiet_NaN();
    TrainConfig tcfg;
    tcfg.epochs = 2;
    tcfg.warmup_epochs = 0;
    tcfg.batch_size = 8;
    const hta::RunRecord r = train(b, task, tcfg);
    CHECK(r.aborted);
    CHECK(r.abort_reason.find("non-finite") != std::string::npos);
  }

  TEST_CASE("labels outside the class range are rejected") {
    ModelConfig mcfg = probe_config();
    Backbone b = build_backbone(mcfg, 71);
    Dataset task = cluster_task(mcfg, 6, 3, 72);
    task.train[2].label = mcfg.classes + 5;
    CHECK_THROWS_AS(train(b, task, TrainConfig{}), hta::ConfigError);
  }
}
