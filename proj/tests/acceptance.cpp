// End-to-end acceptance checks. Each numbered property is verified
// independently of the library's own test suite, printed as a single
// pass/fail line, and the process exits nonzero if any of them fail.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "hta/adapters.hpp"
#include "hta/errors.hpp"
#include "hta/harness.hpp"
#include "hta/linalg.hpp"
#include "hta/model.hpp"
#include "hta/rng.hpp"
#include "hta/trainer.hpp"

namespace {

using hta::AdapterKind;
using hta::AttachmentConfig;
using hta::AttachStyle;
using hta::Backbone;
using hta::DenseMatrix;
using hta::ModelConfig;
using hta::Position;
using hta::Rng;
using hta::Vector;

// ---- small local numerics (independent of the library under test) ----------

double det_by_elimination(DenseMatrix a) {
  const std::size_t n = a.rows();
  double det = 1.0;
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t pivot = col;
    for (std::size_t r = col + 1; r < n; ++r) {
      if (std::abs(a(r, col)) > std::abs(a(pivot, col))) pivot = r;
    }
    if (a(pivot, col) == 0.0) return 0.0;
    if (pivot != col) {
      for (std::size_t c = 0; c < n; ++c) std::swap(a(pivot, c), a(col, c));
      det = -det;
    }
    det *= a(col, col);
    for (std::size_t r = col + 1; r < n; ++r) {
      const double f = a(r, col) / a(col, col);
      for (std::size_t c = col; c < n; ++c) a(r, c) -= f * a(col, c);
    }
  }
  return det;
}

DenseMatrix mul(const DenseMatrix& a, const DenseMatrix& b) {
  DenseMatrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      for (std::size_t j = 0; j < b.cols(); ++j) out(i, j) += aik * b(k, j);
    }
  }
  return out;
}

double max_abs_dev_from_identity(const DenseMatrix& m) {
  double dev = 0.0;
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t j = 0; j < m.cols(); ++j) {
      dev = std::max(dev, std::abs(m(i, j) - (i == j ? 1.0 : 0.0)));
    }
  }
  return dev;
}

void randomize_trainables(Backbone& b, Rng& rng, double scale) {
  for (const hta::ParamRef& ref : trainable_parameters(b)) {
    for (std::size_t i = 0; i < ref.size; ++i) ref.data[i] = scale * rng.normal();
  }
  project_normalized_v(b);
}

DenseMatrix random_tokens(const ModelConfig& cfg, std::size_t batch, Rng& rng) {
  DenseMatrix tokens(batch * cfg.content_tokens(), cfg.dim);
  for (std::size_t i = 0; i < tokens.size(); ++i) tokens.data()[i] = rng.normal();
  return tokens;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

// ---- criteria ----------------------------------------------------------------

bool householder_algebra(std::string& detail) {
  Rng rng(101);
  for (std::size_t d : {std::size_t{4}, std::size_t{16}, std::size_t{64}}) {
    for (int rep = 0; rep < 100; ++rep) {
      Vector v(d);
      double n2 = 0.0;
      for (std::size_t i = 0; i < d; ++i) {
        v[i] = rng.normal();
        n2 += v[i] * v[i];
      }
      const double s = std::sqrt(2.0 / n2);
      for (std::size_t i = 0; i < d; ++i) v[i] *= s;

      DenseMatrix h(d, d);
      for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = 0; j < d; ++j) h(i, j) = (i == j ? 1.0 : 0.0) - v[i] * v[j];
      }
      for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
          if (h(i, j) != h(j, i)) {
            detail = "asymmetric reflection at D=" + std::to_string(d);
            return false;
          }
        }
      }
      DenseMatrix ht(d, d);
      for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = 0; j < d; ++j) ht(i, j) = h(j, i);
      }
      const double dev_tht = max_abs_dev_from_identity(mul(ht, h));
      const double dev_hh = max_abs_dev_from_identity(mul(h, h));
      if (dev_tht > 1e-10 || dev_hh > 1e-10) {
        detail = "orthogonality deviation " + std::to_string(std::max(dev_tht, dev_hh));
        return false;
      }
      const double det = det_by_elimination(h);  // = product of eigenvalues
      if (std::abs(det + 1.0) > 1e-8) {
        detail = "eigenvalue product " + std::to_string(det);
        return false;
      }
    }
  }
  detail = "300 reflections across D in {4,16,64}";
  return true;
}

bool rank_law(std::string& detail) {
  const std::size_t d = 8;
  Rng rng(202);
  for (unsigned mask = 0; mask < (1u << d); ++mask) {
    const std::size_t nnz = static_cast<std::size_t>(__builtin_popcount(mask));
    for (int rep = 0; rep < 50; ++rep) {
      hta::HtaAdapter a = hta::HtaAdapter::init(d, 0, rng, true);
      for (std::size_t i = 0; i < d; ++i) {
        if (mask & (1u << i)) {
          const double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
          a.d[i] = sign * (0.5 + rng.uniform());
        }
      }
      const hta::SvdResult svd = hta::jacobi_svd(compose_hta(a));
      const std::size_t rank = hta::numerical_rank(svd.sigma, 1e-10);
      if (rank != nnz) {
        detail = "mask " + std::to_string(mask) + ": rank " + std::to_string(rank) +
                 " != nnz " + std::to_string(nnz);
        return false;
      }
    }
  }
  detail = "all 256 sparsity patterns at D=8, 50 draws each";
  return true;
}

bool merge_equivalence(std::string& detail) {
  ModelConfig cfg;  // the full default model: 64 wide, 4 deep
  cfg.adaptation.kind = AdapterKind::hta;
  cfg.adaptation.style = AttachStyle::additive;
  cfg.adaptation.positions = {Position::q, Position::v};
  cfg.adaptation.r = 1;
  Backbone b = build_backbone(cfg, 303);
  Rng rng(304);
  randomize_trainables(b, rng, 0.2);

  hta::ForwardOptions folded;
  folded.mode = hta::ForwardMode::merged;
  double max_rel = 0.0;
  double merged_mass = 0.0;
  for (int probe = 0; probe < 8; ++probe) {
    const DenseMatrix tokens = random_tokens(cfg, 4, rng);
    const DenseMatrix branched = forward(b, tokens, 4);
    merge_all(b);
    const DenseMatrix merged = forward(b, tokens, 4, folded);
    unmerge_all(b);
    for (std::size_t i = 0; i < branched.size(); ++i) {
      merged_mass += std::abs(merged.data()[i]);
      const double rel = std::abs(branched.data()[i] - merged.data()[i]) /
                         std::max({1.0, std::abs(branched.data()[i]),
                                   std::abs(merged.data()[i])});
      max_rel = std::max(max_rel, rel);
    }
  }
  detail = "max relative error " + hta::format_double(max_rel) + " over 8 batches";
  return max_rel <= 1e-8 && merged_mass > 0.0;
}

bool gradient_correctness(std::string& detail) {
  const hta::GradCheckReport report = hta::run_model_grad_check(404);
  detail = std::to_string(report.coords_checked) + " coordinates, max abs err " +
           hta::format_double(report.max_abs_err) + ", max |grad| " +
           hta::format_double(report.max_analytic);
  if (!report.pass && !report.failures.empty()) detail += "; first: " + report.failures[0];
  return report.pass;
}

bool parameter_counts(std::string& detail) {
  const hta::PositionSpec p768{"pos", 768, 768};
  hta::ParamCountConfig c;
  c.positions = {p768, p768};
  c.layers = 12;

  c.kind = AdapterKind::hta;
  c.rank_r = 1;
  const std::size_t hta_qv = param_count(c);
  c.kind = AdapterKind::lora;
  c.rank_r = 8;
  const std::size_t lora_qv = param_count(c);
  c.kind = AdapterKind::hta;
  c.rank_r = 0;
  c.include_lowrank = false;
  const std::size_t hta_bare = param_count(c);

  detail = std::to_string(hta_qv) + " / " + std::to_string(lora_qv) + " / " +
           std::to_string(hta_bare);
  return hta_qv == 92160 && lora_qv == 294912 && hta_bare == 55296;
}

bool zero_at_init(std::string& detail) {
  ModelConfig plain;
  plain.dim = 32;
  plain.depth = 2;
  plain.heads = 4;
  plain.tokens = 6;
  plain.classes = 7;
  const Backbone base = build_backbone(plain, 505);
  Rng rng(506);
  const DenseMatrix tokens = random_tokens(plain, 3, rng);
  const DenseMatrix want = forward(base, tokens, 3);

  struct Variant {
    const char* label;
    AdapterKind kind;
    AttachStyle style;
    std::vector<Position> positions;
    std::size_t r;
  };
  const std::vector<Variant> variants = {
      {"hta additive", AdapterKind::hta, AttachStyle::additive, {Position::q, Position::v}, 1},
      {"hta bare", AdapterKind::hta, AttachStyle::additive, {Position::q, Position::v}, 0},
      {"hta multiplicative", AdapterKind::hta, AttachStyle::multiplicative,
       {Position::post_mha, Position::post_ffn}, 2},
      {"lora", AdapterKind::lora, AttachStyle::additive,
       {Position::q, Position::k, Position::v, Position::o}, 3},
      {"bottleneck", AdapterKind::bottleneck, AttachStyle::multiplicative,
       {Position::post_mha, Position::post_ffn}, 4},
  };
  for (const Variant& variant : variants) {
    ModelConfig cfg = plain;
    cfg.adaptation.kind = variant.kind;
    cfg.adaptation.style = variant.style;
    cfg.adaptation.positions = variant.positions;
    cfg.adaptation.r = variant.r;
    const Backbone adapted = build_backbone(cfg, 505);
    const DenseMatrix got = forward(adapted, tokens, 3);
    for (std::size_t i = 0; i < want.size(); ++i) {
      if (got.data()[i] != want.data()[i]) {
        detail = std::string(variant.label) + " perturbs initial logits";
        return false;
      }
    }
  }
  detail = "5 adapter variants, logits bitwise equal";
  return true;
}

bool frozen_integrity(std::string& detail) {
  ModelConfig cfg;
  cfg.dim = 32;
  cfg.depth = 2;
  cfg.heads = 4;
  cfg.tokens = 5;
  cfg.classes = 5;
  cfg.adaptation.kind = AdapterKind::hta;
  cfg.adaptation.style = AttachStyle::additive;
  cfg.adaptation.positions = {Position::q, Position::v};
  cfg.adaptation.r = 1;
  Backbone b = build_backbone(cfg, 607);
  const std::uint64_t before = frozen_state_hash(b);

  hta::TaskSpec spec;
  spec.task_seed = 608;
  spec.planted_rank = 2;
  spec.delta_scale = 4.0;
  spec.train_size = 512;
  spec.eval_size = 128;
  const hta::Dataset task = gen_planted_task(cfg, 607, spec);

  hta::TrainConfig tcfg;
  tcfg.epochs = 20;
  tcfg.warmup_epochs = 2;
  tcfg.base_lr = 1e-2;
  tcfg.batch_size = 32;
  tcfg.seed = 609;
  const hta::RunRecord record = train(b, task, tcfg);
  if (record.aborted) {
    detail = "run aborted: " + record.abort_reason;
    return false;
  }
  double moved = 0.0;
  for (const hta::ParamRef& ref : trainable_parameters(b)) {
    if (ref.cls != hta::ParamClass::head_weight && ref.cls != hta::ParamClass::head_bias) {
      for (std::size_t i = 0; i < ref.size; ++i) moved += std::abs(ref.data[i]);
    }
  }
  const std::uint64_t after = frozen_state_hash(b);
  detail = "hash " + std::to_string(before) + (after == before ? " preserved" : " CHANGED") +
           " across 20 epochs (adapter mass " + hta::format_double(moved) + ")";
  return after == before && moved > 0.0;
}

bool schedule_fidelity(std::string& detail) {
  hta::TrainConfig cfg;
  cfg.epochs = 100;
  cfg.warmup_epochs = 10;
  cfg.base_lr = 7.5e-3;
  const std::size_t steps_per_epoch = 13;
  const std::size_t total = cfg.epochs * steps_per_epoch;
  const std::size_t warmup = cfg.warmup_epochs * steps_per_epoch;
  double max_dev = 0.0;
  for (std::size_t step = 0; step < total; ++step) {
    const double want =
        step < warmup
            ? cfg.base_lr * static_cast<double>(step) / static_cast<double>(warmup)
            : cfg.base_lr * 0.5 *
                  (1.0 + std::cos(std::numbers::pi * static_cast<double>(step - warmup) /
                                  static_cast<double>(total - warmup)));
    max_dev = std::max(max_dev, std::abs(hta::lr_at(cfg, step, total) - want));
  }
  detail = "max deviation " + hta::format_double(max_dev) + " over " +
           std::to_string(total) + " steps";
  return max_dev <= 1e-12;
}

bool directional_ablation(std::string& detail) {
  hta::ExperimentConfig cfg;
  cfg.model.dim = 64;
  cfg.model.depth = 4;
  cfg.model.heads = 2;
  cfg.model.tokens = 3;
  cfg.model.classes = 5;
  cfg.train.epochs = 18;
  cfg.train.warmup_epochs = 2;
  cfg.train.base_lr = 1e-2;
  cfg.train.weight_decay = 3e-3;
  cfg.train.adapter_dropout = 0.1;
  cfg.train.batch_size = 64;
  cfg.train.seed = 7;
  cfg.task.task_seed = 11;
  cfg.task.planted_rank = 4;
  cfg.task.delta_scale = 8.0;
  cfg.task.train_size = 4096;
  cfg.task.eval_size = 2048;
  cfg.trials = 5;
  cfg.backbone_seed = 1;
  cfg.output_dir =
      (std::filesystem::temp_directory_path() / "hta_acceptance_directional").string();

  const auto attach = [](AdapterKind kind, std::size_t r) {
    AttachmentConfig a;
    a.kind = kind;
    a.style = AttachStyle::additive;
    a.positions = {Position::q, Position::v};
    a.r = r;
    return a;
  };
  cfg.variants = {
      {"hta-r0", attach(AdapterKind::hta, 0)},
      {"hta-r1", attach(AdapterKind::hta, 1)},
      {"lora-r1", attach(AdapterKind::lora, 1)},
  };
  std::filesystem::remove_all(cfg.output_dir);
  const hta::ComparisonReport report = run_comparison(cfg);

  std::map<std::string, std::vector<double>> acc, loss;
  for (const hta::TrialResult& res : report.results) {
    if (res.record.aborted) {
      detail = res.variant + " trial " + std::to_string(res.trial) + " aborted";
      return false;
    }
    acc[res.variant].push_back(res.record.epochs.back().eval_acc);
    loss[res.variant].push_back(res.record.final_train_loss);
  }
  const auto median = [](std::vector<double> xs) {
    std::sort(xs.begin(), xs.end());
    const std::size_t n = xs.size();
    return n % 2 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
  };
  const double med_r1 = median(acc["hta-r1"]);
  const double med_r0 = median(acc["hta-r0"]);
  std::size_t paired_wins = 0;
  for (std::size_t t = 0; t < cfg.trials; ++t) {
    paired_wins += loss["hta-r1"][t] <= loss["lora-r1"][t];
  }
  detail = "median final eval acc hta-r1 " + hta::format_double(med_r1) +
           " vs hta-r0 " + hta::format_double(med_r0) + "; train-loss wins vs lora-r1 " +
           std::to_string(paired_wins) + "/5";
  return med_r1 > med_r0 && paired_wins >= 4;
}

bool determinism(std::string& detail) {
  hta::ExperimentConfig cfg;
  cfg.model.dim = 8;
  cfg.model.depth = 1;
  cfg.model.heads = 2;
  cfg.model.tokens = 3;
  cfg.model.classes = 3;
  cfg.model.mlp_ratio = 2.0;
  cfg.train.epochs = 2;
  cfg.train.warmup_epochs = 1;
  cfg.train.base_lr = 5e-3;
  cfg.train.batch_size = 8;
  cfg.train.seed = 13;
  cfg.train.adapter_dropout = 0.1;
  cfg.task.task_seed = 14;
  cfg.task.planted_rank = 2;
  cfg.task.train_size = 16;
  cfg.task.eval_size = 8;
  cfg.trials = 2;
  cfg.backbone_seed = 15;
  cfg.output_dir =
      (std::filesystem::temp_directory_path() / "hta_acceptance_determinism").string();
  hta::VariantSpec probe;
  probe.name = "probe";
  hta::VariantSpec adapted;
  adapted.name = "hta-r1";
  adapted.attach.kind = AdapterKind::hta;
  adapted.attach.style = AttachStyle::additive;
  adapted.attach.positions = {Position::q, Position::v};
  adapted.attach.r = 1;
  cfg.variants = {probe, adapted};

  std::filesystem::remove_all(cfg.output_dir);
  const hta::ComparisonReport first = run_comparison(cfg);
  std::map<std::string, std::string> bytes;
  for (const std::string& rel : first.files) {
    bytes[rel] = slurp(std::filesystem::path(cfg.output_dir) / rel);
  }
  std::filesystem::remove_all(cfg.output_dir);
  const hta::ComparisonReport second = run_comparison(cfg);
  if (first.files != second.files) {
    detail = "file lists differ between runs";
    return false;
  }
  for (const std::string& rel : second.files) {
    if (slurp(std::filesystem::path(cfg.output_dir) / rel) != bytes[rel]) {
      detail = rel + " differs between identical runs";
      return false;
    }
  }
  detail = std::to_string(first.files.size()) + " files byte-identical across reruns";
  return true;
}

}  // namespace

int main(int argc, char** argv) {
  struct Criterion {
    const char* name;
    std::function<bool(std::string&)> fn;
    double limit_seconds;
  };
  const std::vector<Criterion> criteria = {
      {"householder algebra", householder_algebra, 1.0},
      {"rank law", rank_law, 10.0},
      {"merge equivalence", merge_equivalence, 5.0},
      {"gradient correctness", gradient_correctness, 30.0},
      {"parameter counts", parameter_counts, 1.0},
      {"zero-at-init identity", zero_at_init, 1.0},
      {"frozen-backbone integrity", frozen_integrity, 120.0},
      {"schedule fidelity", schedule_fidelity, 1.0},
      {"directional ablation", directional_ablation, 900.0},
      {"determinism", determinism, 60.0},
  };

  // With no arguments every criterion runs; numeric arguments select a subset
  // (development convenience — the test registration always runs the lot).
  std::vector<bool> selected(criteria.size(), argc <= 1);
  for (int a = 1; a < argc; ++a) {
    const int n = std::atoi(argv[a]);
    if (n >= 1 && static_cast<std::size_t>(n) <= criteria.size()) selected[n - 1] = true;
  }

  bool all_ok = true;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!selected[i]) continue;
    const auto start = std::chrono::steady_clock::now();
    std::string detail;
    bool ok = false;
    try {
      ok = criteria[i].fn(detail);
    } catch (const std::exception& e) {
      detail = std::string("exception: ") + e.what();
    }
    const double elapsed =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const bool in_budget = elapsed < criteria[i].limit_seconds;
    all_ok = all_ok && ok && in_budget;
    std::printf("[%s] %2zu. %-28s %7.2fs%s  %s\n", ok && in_budget ? "pass" : "FAIL",
                i + 1, criteria[i].name, elapsed,
                in_budget ? "" : " (over budget)", detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%s\n", all_ok ? "acceptance: all criteria hold" : "acceptance: FAILURES");
  return all_ok ? 0 : 1;
}
