#include "hta/harness.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <variant>

#include "hta/adapters.hpp"
#include "hta/errors.hpp"
#include "hta/linalg.hpp"
#include "hta/rng.hpp"
#include "json.hpp"
#include "model_json.hpp"

namespace hta {

namespace fs = std::filesystem;
using nlohmann::json;

// ---- synthetic tasks -------------------------------------------------------

void TaskSpec::validate() const {
  if (train_size == 0) throw ConfigError("task needs at least one training sample");
  if (eval_size == 0) throw ConfigError("task needs at least one eval sample");
  if (!(label_noise >= 0.0 && label_noise <= 1.0)) {
    throw ConfigError("label_noise must lie in [0, 1]");
  }
  if (!(delta_scale >= 0.0) || !std::isfinite(delta_scale)) {
    throw ConfigError("delta_scale must be finite and nonnegative");
  }
}

namespace {

std::size_t argmax_row(const DenseMatrix& m, std::size_t row) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < m.cols(); ++c) {
    if (m(row, c) > m(row, best)) best = c;
  }
  return best;
}

}  // namespace

Dataset gen_planted_task(const ModelConfig& model, std::uint64_t backbone_seed,
                         const TaskSpec& task) {
  task.validate();
  ModelConfig plain = model;
  plain.adaptation = AttachmentConfig{};
  plain.validate();
  if (task.planted_rank > plain.dim) {
    throw ConfigError("planted rank exceeds the model width");
  }

  Backbone teacher = build_backbone(plain, backbone_seed);
  if (task.planted_rank > 0) {
    // Shift the value projection of one middle block by delta_scale times a
    // sum of k unit-vector outer products: an exactly rank-k perturbation
    // whose singular values sit near delta_scale.
    Rng delta_rng(derive_seed(task.task_seed, 0x9d3a));
    DenseMatrix& wv = teacher.blocks[plain.depth / 2].v.base_w;
    const std::size_t d = plain.dim;
    for (std::size_t j = 0; j < task.planted_rank; ++j) {
      Vector a(d), b(d);
      double an = 0.0, bn = 0.0;
      for (std::size_t i = 0; i < d; ++i) {
        a[i] = delta_rng.normal();
        b[i] = delta_rng.normal();
        an += a[i] * a[i];
        bn += b[i] * b[i];
      }
      an = std::sqrt(an);
      bn = std::sqrt(bn);
      for (std::size_t r = 0; r < d; ++r) {
        for (std::size_t c = 0; c < d; ++c) {
          wv(r, c) += task.delta_scale * (a[r] / an) * (b[c] / bn);
        }
      }
    }
  }

  const std::size_t n = task.train_size + task.eval_size;
  const std::size_t content = plain.content_tokens();
  Rng data_rng(derive_seed(task.task_seed, 0x9d3b));
  std::vector<Sample> all(n);
  for (Sample& s : all) {
    s.tokens = DenseMatrix(content, plain.dim);
    for (std::size_t k = 0; k < s.tokens.size(); ++k) s.tokens.data()[k] = data_rng.normal();
  }

  // Teacher labels, in batches.
  const std::size_t chunk = 64;
  for (std::size_t start = 0; start < n; start += chunk) {
    const std::size_t count = std::min(chunk, n - start);
    std::vector<std::size_t> idx(count);
    for (std::size_t i = 0; i < count; ++i) idx[i] = start + i;
    const DenseMatrix logits = forward(teacher, fold_batch(all, idx), count);
    for (std::size_t i = 0; i < count; ++i) all[start + i].label = argmax_row(logits, i);
  }

  if (task.label_noise > 0.0) {
    Rng noise_rng(derive_seed(task.task_seed, 0x9d3c));
    for (Sample& s : all) {
      if (noise_rng.uniform() < task.label_noise) {
        s.label = std::min(plain.classes - 1,
                           static_cast<std::size_t>(noise_rng.uniform() *
                                                    static_cast<double>(plain.classes)));
      }
    }
  }

  Dataset out;
  out.meta = DatasetMeta{"planted", task.task_seed, plain.classes, task.planted_rank};
  out.train.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(task.train_size));
  out.eval.assign(all.begin() + static_cast<std::ptrdiff_t>(task.train_size), all.end());
  return out;
}

// ---- experiment configuration ----------------------------------------------

namespace {

bool filename_safe(const std::string& name) {
  if (name.empty()) return false;
  for (char c : name) {
    const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') ||
                    (c >= '0' && c <= '9') || c == '-' || c == '_';
    if (!ok) return false;
  }
  return true;
}

}  // namespace

void ExperimentConfig::validate() const {
  ModelConfig plain = model;
  plain.adaptation = AttachmentConfig{};
  plain.validate();
  train.validate();
  task.validate();
  if (trials == 0) throw ConfigError("experiment needs at least one trial");
  if (variants.empty()) throw ConfigError("experiment names no variants");
  for (const VariantSpec& v : variants) {
    if (!filename_safe(v.name)) {
      throw ConfigError("variant name must be nonempty [A-Za-z0-9_-]: '" + v.name + "'");
    }
    v.attach.validate();
  }
  for (std::size_t i = 0; i < variants.size(); ++i) {
    for (std::size_t j = i + 1; j < variants.size(); ++j) {
      if (variants[i].name == variants[j].name) {
        throw ConfigError("duplicate variant name: " + variants[i].name);
      }
    }
  }
  if (output_dir.empty()) throw ConfigError("output_dir is empty");
}

namespace {

json train_to_json(const TrainConfig& t) {
  json out;
  out["epochs"] = t.epochs;
  out["warmup_epochs"] = t.warmup_epochs;
  out["base_lr"] = t.base_lr;
  out["weight_decay"] = t.weight_decay;
  out["batch_size"] = t.batch_size;
  out["adapter_dropout"] = t.adapter_dropout;
  out["seed"] = t.seed;
  out["beta1"] = t.beta1;
  out["beta2"] = t.beta2;
  out["eps"] = t.eps;
  out["decay_head"] = t.decay_head;
  return out;
}

TrainConfig train_from_json(const json& j) {
  TrainConfig t;
  t.epochs = j.at("epochs").get<std::size_t>();
  t.warmup_epochs = j.at("warmup_epochs").get<std::size_t>();
  t.base_lr = j.at("base_lr").get<double>();
  t.weight_decay = j.at("weight_decay").get<double>();
  t.batch_size = j.at("batch_size").get<std::size_t>();
  t.adapter_dropout = j.at("adapter_dropout").get<double>();
  t.seed = j.at("seed").get<std::uint64_t>();
  t.beta1 = j.at("beta1").get<double>();
  t.beta2 = j.at("beta2").get<double>();
  t.eps = j.at("eps").get<double>();
  t.decay_head = j.at("decay_head").get<bool>();
  return t;
}

json task_to_json(const TaskSpec& t) {
  json out;
  out["task_seed"] = t.task_seed;
  out["planted_rank"] = t.planted_rank;
  out["delta_scale"] = t.delta_scale;
  out["label_noise"] = t.label_noise;
  out["train_size"] = t.train_size;
  out["eval_size"] = t.eval_size;
  return out;
}

TaskSpec task_from_json(const json& j) {
  TaskSpec t;
  t.task_seed = j.at("task_seed").get<std::uint64_t>();
  t.planted_rank = j.at("planted_rank").get<std::size_t>();
  t.delta_scale = j.at("delta_scale").get<double>();
  t.label_noise = j.at("label_noise").get<double>();
  t.train_size = j.at("train_size").get<std::size_t>();
  t.eval_size = j.at("eval_size").get<std::size_t>();
  return t;
}

}  // namespace

std::string experiment_to_json(const ExperimentConfig& cfg) {
  json out;
  out["model"] = model_config_to_json(cfg.model);
  out["train"] = train_to_json(cfg.train);
  out["task"] = task_to_json(cfg.task);
  out["variants"] = json::array();
  for (const VariantSpec& v : cfg.variants) {
    json entry;
    entry["name"] = v.name;
    entry["attach"] = attachment_to_json(v.attach);
    out["variants"].push_back(entry);
  }
  out["trials"] = cfg.trials;
  out["backbone_seed"] = cfg.backbone_seed;
  out["output_dir"] = cfg.output_dir;
  return out.dump(2) + "\n";
}

ExperimentConfig experiment_from_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    ExperimentConfig cfg;
    cfg.model = model_config_from_json(j.at("model"));
    cfg.train = train_from_json(j.at("train"));
    cfg.task = task_from_json(j.at("task"));
    for (const json& entry : j.at("variants")) {
      VariantSpec v;
      v.name = entry.at("name").get<std::string>();
      v.attach = attachment_from_json(entry.at("attach"));
      cfg.variants.push_back(std::move(v));
    }
    cfg.trials = j.at("trials").get<std::size_t>();
    cfg.backbone_seed = j.at("backbone_seed").get<std::uint64_t>();
    cfg.output_dir = j.at("output_dir").get<std::string>();
    return cfg;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad experiment config: ") + e.what());
  }
}

ExperimentConfig default_experiment() {
  ExperimentConfig cfg;
  cfg.train.epochs = 40;
  cfg.train.warmup_epochs = 4;
  cfg.train.base_lr = 1e-2;
  cfg.train.batch_size = 32;
  cfg.train.seed = 7;
  cfg.task.task_seed = 11;
  cfg.backbone_seed = 1;

  const auto add = [&](const std::string& name, AdapterKind kind, AttachStyle style,
                       std::vector<Position> positions, std::size_t r) {
    VariantSpec v;
    v.name = name;
    v.attach.kind = kind;
    v.attach.style = style;
    v.attach.positions = std::move(positions);
    v.attach.r = r;
    cfg.variants.push_back(std::move(v));
  };
  using enum Position;
  cfg.variants.push_back(VariantSpec{"probe", AttachmentConfig{}});
  add("hta-r0", AdapterKind::hta, AttachStyle::additive, {q, v}, 0);
  add("hta-r1", AdapterKind::hta, AttachStyle::additive, {q, v}, 1);
  add("lora-r1", AdapterKind::lora, AttachStyle::additive, {q, v}, 1);
  add("lora-r8", AdapterKind::lora, AttachStyle::additive, {q, v}, 8);
  add("adapter-r4", AdapterKind::bottleneck, AttachStyle::multiplicative,
      {post_mha, post_ffn}, 4);
  // Full-rank delta on the same sites: the "just fine-tune those weights"
  // reference point, expressed as an unconstrained additive update.
  add("full-delta", AdapterKind::lora, AttachStyle::additive, {q, v}, cfg.model.dim);
  return cfg;
}

std::size_t variant_param_count(const ModelConfig& model, const AttachmentConfig& attach) {
  if (attach.kind == AdapterKind::none) return 0;
  ModelConfig with = model;
  with.adaptation = attach;
  return param_count(param_count_config(with));
}

// ---- deterministic formatting -----------------------------------------------

std::string format_double(double x) {
  std::array<char, 32> buf;
  const auto res = std::to_chars(buf.data(), buf.data() + buf.size(), x);
  return std::string(buf.data(), res.ptr);
}

// ---- comparison runs ----------------------------------------------------------

namespace {

void write_file(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot open for writing: " + path.string());
  out << content;
  if (!out) throw ConfigError("failed writing: " + path.string());
}

std::string joined_positions(const AttachmentConfig& attach) {
  std::string out;
  for (std::size_t i = 0; i < attach.positions.size(); ++i) {
    if (i) out += '+';
    out += position_name(attach.positions[i]);
  }
  return out;
}

std::string summary_row(const TrialResult& res) {
  std::string row = res.variant;
  row += ',';
  row += joined_positions(res.attach);
  row += ',';
  row += adapter_kind_name(res.attach.kind);
  row += ',';
  row += std::to_string(res.attach.kind == AdapterKind::none ? 0 : res.attach.r);
  row += ',';
  row += std::to_string(res.params);
  row += ',';
  row += std::to_string(res.trial);
  row += ',';
  row += std::to_string(res.seed);
  row += ',';
  row += format_double(res.record.best_eval_acc);
  row += ',';
  row += format_double(res.record.final_train_loss);
  row += '\n';
  return row;
}

double median(std::vector<double> xs) {
  std::sort(xs.begin(), xs.end());
  const std::size_t n = xs.size();
  return n % 2 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

}  // namespace

ComparisonReport run_comparison(const ExperimentConfig& cfg) {
  cfg.validate();
  const fs::path root(cfg.output_dir);
  fs::create_directories(root / "runs");
  const bool any_hta = std::any_of(cfg.variants.begin(), cfg.variants.end(), [](const auto& v) {
    return v.attach.kind == AdapterKind::hta;
  });
  if (any_hta) fs::create_directories(root / "spectra");

  ComparisonReport report;
  write_file(root / "config.json", experiment_to_json(cfg));
  report.files.push_back("config.json");

  std::string summary = "variant,positions,kind,r,params,trial,seed,best_eval_acc,final_train_loss\n";
  for (std::size_t trial = 0; trial < cfg.trials; ++trial) {
    TaskSpec spec = cfg.task;
    spec.task_seed = derive_seed(cfg.task.task_seed, 0xa110 + trial);
    const Dataset task = gen_planted_task(cfg.model, cfg.backbone_seed, spec);
    // One training seed per trial, shared by every variant: within a trial
    // the comparisons are paired (same data order, same dropout draws).
    const std::uint64_t train_seed = derive_seed(cfg.train.seed, 0xa111 + trial);

    for (const VariantSpec& variant : cfg.variants) {
      ModelConfig mcfg = cfg.model;
      mcfg.adaptation = variant.attach;
      Backbone b = build_backbone(mcfg, cfg.backbone_seed);
      TrainConfig tcfg = cfg.train;
      tcfg.seed = train_seed;

      TrialResult res;
      res.variant = variant.name;
      res.attach = variant.attach;
      res.params = variant_param_count(cfg.model, variant.attach);
      res.trial = trial;
      res.seed = train_seed;
      res.record = train(b, task, tcfg);
      if (res.record.aborted) {
        std::cerr << "trial " << trial << " variant " << variant.name
                  << " aborted: " << res.record.abort_reason << "\n";
      }

      std::string run_csv = "epoch,lr,train_loss,train_acc,eval_acc\n";
      for (const EpochRecord& e : res.record.epochs) {
        run_csv += std::to_string(e.epoch);
        run_csv += ',';
        run_csv += format_double(e.lr);
        run_csv += ',';
        run_csv += format_double(e.train_loss);
        run_csv += ',';
        run_csv += format_double(e.train_acc);
        run_csv += ',';
        run_csv += format_double(e.eval_acc);
        run_csv += '\n';
      }
      const std::string tag = variant.name + "-t" + std::to_string(trial);
      const std::string run_name = "runs/" + tag + ".csv";
      write_file(root / run_name, run_csv);
      report.files.push_back(run_name);

      if (variant.attach.kind == AdapterKind::hta) {
        const std::string spectra_name = "spectra/" + tag + ".csv";
        write_spectra_csv(report_spectra(b), (root / spectra_name).string());
        report.files.push_back(spectra_name);
      }

      summary += summary_row(res);
      report.results.push_back(std::move(res));
    }
  }
  write_file(root / "summary.csv", summary);
  report.files.push_back("summary.csv");
  return report;
}

// ---- bottleneck-dimension sweep ------------------------------------------------

std::vector<SweepRow> sweep_bottleneck(const ExperimentConfig& cfg,
                                       const std::vector<std::size_t>& r_values) {
  if (r_values.empty()) throw ConfigError("sweep requires at least one rank value");
  const fs::path root(cfg.output_dir);
  fs::create_directories(root);

  std::vector<SweepRow> rows;
  std::string csv =
      "r,params_adapter,params_with_head,reference_params_adapter,"
      "median_best_eval_acc,min_best_eval_acc,max_best_eval_acc,median_final_train_loss\n";
  for (std::size_t r : r_values) {
    AttachmentConfig attach;
    attach.kind = AdapterKind::hta;
    attach.style = AttachStyle::additive;
    attach.positions = {Position::q, Position::k, Position::v, Position::o};
    attach.r = r;

    ExperimentConfig sub = cfg;
    sub.variants = {VariantSpec{"hta-r" + std::to_string(r), attach}};
    sub.output_dir = (root / ("r" + std::to_string(r))).string();
    const ComparisonReport rep = run_comparison(sub);

    SweepRow row;
    row.r = r;
    row.params_adapter = variant_param_count(cfg.model, attach);
    row.params_with_head =
        row.params_adapter + cfg.model.dim * cfg.model.classes + cfg.model.classes;
    ParamCountConfig ref;
    ref.positions = {{"q", 768, 768}, {"k", 768, 768}, {"v", 768, 768}, {"o", 768, 768}};
    ref.kind = AdapterKind::hta;
    ref.rank_r = r;
    ref.layers = 12;
    ref.include_lowrank = r > 0;
    row.reference_params_adapter = param_count(ref);

    std::vector<double> accs, losses;
    for (const TrialResult& res : rep.results) {
      accs.push_back(res.record.best_eval_acc);
      losses.push_back(res.record.final_train_loss);
      row.aborted_trials += res.record.aborted;
    }
    row.median_best_eval_acc = median(accs);
    row.min_best_eval_acc = *std::min_element(accs.begin(), accs.end());
    row.max_best_eval_acc = *std::max_element(accs.begin(), accs.end());
    row.median_final_train_loss = median(losses);
    rows.push_back(row);

    csv += std::to_string(row.r);
    csv += ',';
    csv += std::to_string(row.params_adapter);
    csv += ',';
    csv += std::to_string(row.params_with_head);
    csv += ',';
    csv += std::to_string(row.reference_params_adapter);
    csv += ',';
    csv += format_double(row.median_best_eval_acc);
    csv += ',';
    csv += format_double(row.min_best_eval_acc);
    csv += ',';
    csv += format_double(row.max_best_eval_acc);
    csv += ',';
    csv += format_double(row.median_final_train_loss);
    csv += '\n';
  }
  write_file(root / "sweep.csv", csv);
  return rows;
}

// ---- adapter spectra --------------------------------------------------------------

std::vector<SpectrumRow> report_spectra(const Backbone& b) {
  std::vector<SpectrumRow> rows;
  const auto emit = [&rows](std::size_t layer, Position pos, const HtaAdapter& a) {
    try {
      const SvdResult svd = adaptation_spectrum(a);
      const std::size_t rank = numerical_rank(svd.sigma, kSpectrumRankTol);
      for (std::size_t i = 0; i < svd.sigma.dim(); ++i) {
        rows.push_back(SpectrumRow{layer, position_name(pos), i, svd.sigma[i], rank});
      }
    } catch (const SvdConvergenceError& e) {
      std::cerr << "spectrum skipped: block " << layer << " " << position_name(pos)
                << ": " << e.what() << "\n";
    }
  };
  for (std::size_t i = 0; i < b.blocks.size(); ++i) {
    const Block& block = b.blocks[i];
    const std::pair<Position, const AdaptedLinear*> hosts[] = {
        {Position::q, &block.q},     {Position::k, &block.k},
        {Position::v, &block.v},     {Position::o, &block.o},
        {Position::fc1, &block.fc1}, {Position::fc2, &block.fc2},
    };
    for (const auto& [pos, host] : hosts) {
      if (const HtaAdapter* a = std::get_if<HtaAdapter>(&host->adapter)) emit(i, pos, *a);
    }
    const std::pair<Position, const PostHook*> hooks[] = {
        {Position::post_mha, &block.post_mha},
        {Position::post_ffn, &block.post_ffn},
    };
    for (const auto& [pos, hook] : hooks) {
      if (const HtaAdapter* a = std::get_if<HtaAdapter>(&hook->adapter)) emit(i, pos, *a);
    }
  }
  return rows;
}

void write_spectra_csv(const std::vector<SpectrumRow>& rows, const std::string& path) {
  std::string csv = "layer,position,sv_index,sigma,numerical_rank\n";
  for (const SpectrumRow& row : rows) {
    csv += std::to_string(row.layer);
    csv += ',';
    csv += row.position;
    csv += ',';
    csv += std::to_string(row.sv_index);
    csv += ',';
    csv += format_double(row.sigma);
    csv += ',';
    csv += std::to_string(row.numerical_rank);
    csv += '\n';
  }
  write_file(fs::path(path), csv);
}

// ---- gradient spot-check ------------------------------------------------------------

GradCheckReport run_model_grad_check(std::uint64_t seed, double h, double rel_tol) {
  ModelConfig cfg;
  cfg.dim = 8;
  cfg.depth = 1;
  cfg.heads = 2;
  cfg.tokens = 3;
  cfg.classes = 3;
  cfg.mlp_ratio = 2.0;
  cfg.adaptation.kind = AdapterKind::hta;
  cfg.adaptation.style = AttachStyle::additive;
  cfg.adaptation.positions = {Position::q};
  cfg.adaptation.r = 1;

  Backbone b = build_backbone(cfg, seed);
  const auto refs = trainable_parameters(b);
  Rng rng(derive_seed(seed, 0x6c4d));
  for (const ParamRef& ref : refs) {
    for (std::size_t i = 0; i < ref.size; ++i) ref.data[i] = 0.25 * rng.normal();
  }

  const std::size_t batch = 4;
  DenseMatrix tokens(batch * cfg.content_tokens(), cfg.dim);
  for (std::size_t k = 0; k < tokens.size(); ++k) tokens.data()[k] = rng.normal();
  const std::vector<std::size_t> labels = {0, 1, 2, 0};

  std::size_t total = 0;
  for (const ParamRef& ref : refs) total += ref.size;
  Vector at(total);
  {
    std::size_t off = 0;
    for (const ParamRef& ref : refs) {
      for (std::size_t i = 0; i < ref.size; ++i) at[off++] = ref.data[i];
    }
  }
  const auto write_back = [&](const Vector& x) {
    std::size_t off = 0;
    for (const ParamRef& ref : refs) {
      for (std::size_t i = 0; i < ref.size; ++i) ref.data[i] = x[off++];
    }
  };
  const auto loss_at = [&](const Vector& x) {
    write_back(x);
    const auto fwd = taped_forward(b, tokens, batch, &labels);
    return fwd.tape.value(fwd.loss)(0, 0);
  };

  write_back(at);
  auto fwd = taped_forward(b, tokens, batch, &labels);
  const Grad grads = fwd.tape.backward(fwd.loss);
  Vector analytic(total);
  {
    std::size_t off = 0;
    for (std::size_t p = 0; p < refs.size(); ++p) {
      const NodeId leaf = fwd.params[p].second;
      if (grads.contains(leaf)) {
        const DenseMatrix& g = grads.at(leaf);
        for (std::size_t i = 0; i < g.size(); ++i) analytic[off + i] = g.data()[i];
      }
      off += refs[p].size;
    }
  }
  const Vector numeric = finite_diff_grad(loss_at, at, h);

  GradCheckReport report;
  report.coords_checked = total;
  std::size_t off = 0;
  for (const ParamRef& ref : refs) {
    for (std::size_t i = 0; i < ref.size; ++i, ++off) {
      const double a = analytic[off], f = numeric[off];
      const double err = std::abs(a - f);
      const double denom = std::max(std::abs(a), std::abs(f));
      report.max_abs_err = std::max(report.max_abs_err, err);
      report.max_analytic = std::max(report.max_analytic, std::abs(a));
      if (err <= 1e-9) continue;
      const double rel = err / std::max(denom, 1e-12);
      report.max_rel_err = std::max(report.max_rel_err, rel);
      if (rel > rel_tol) {
        report.failures.push_back(ref.name + "[" + std::to_string(i) + "]");
      }
    }
  }
  // Agreeing at zero everywhere is how a disconnected graph "passes"; demand
  // that the loss actually depends on the trainables.
  report.pass = report.failures.empty() && report.max_analytic > 1e-6;
  return report;
}

}  // namespace hta
