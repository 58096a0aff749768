#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hta/dataset.hpp"
#include "hta/model.hpp"
#include "hta/trainer.hpp"

namespace hta {

// ---- synthetic tasks -------------------------------------------------------

/// Recipe for a planted-rank task: a teacher backbone whose value projection
/// in one middle block is shifted by a known rank-k matrix labels random
/// token sequences. The rank of the shift is the ground truth an adapter
/// has to express to match the teacher.
struct TaskSpec {
  std::uint64_t task_seed = 1;
  std::size_t planted_rank = 4;
  // Each of the k planted directions is a unit-vector outer product scaled by
  // this, so it is directly comparable to the base weight's singular values.
  double delta_scale = 1.0;
  double label_noise = 0.0;  // probability a label is resampled uniformly
  std::size_t train_size = 256;
  std::size_t eval_size = 128;

  void validate() const;
};

/// Build the teacher from (model, backbone_seed), plant the shift, draw
/// Gaussian token sequences, and label them with the teacher's predictions.
/// Train and eval splits come from disjoint stretches of one sample stream.
Dataset gen_planted_task(const ModelConfig& model, std::uint64_t backbone_seed,
                         const TaskSpec& task);

// ---- experiment configuration ----------------------------------------------

struct VariantSpec {
  std::string name;
  AttachmentConfig attach;  // kind none = linear probe (head only)
};

struct ExperimentConfig {
  ModelConfig model;  // the shared backbone; per-variant adaptation overrides
  TrainConfig train;
  TaskSpec task;
  std::vector<VariantSpec> variants;
  std::size_t trials = 5;
  std::uint64_t backbone_seed = 1;
  std::string output_dir = "out";

  void validate() const;
};

std::string experiment_to_json(const ExperimentConfig& cfg);
ExperimentConfig experiment_from_json(const std::string& text);

/// The comparison set the CLI uses when no config file is given: linear
/// probe, HTA with and without the low-rank addend, LoRA at matching and
/// generous ranks, a post-module bottleneck, and a full-rank delta standing
/// in for fine-tuning the adapted sites outright.
ExperimentConfig default_experiment();

/// Adapter-only trainable parameters for this variant on this model.
std::size_t variant_param_count(const ModelConfig& model, const AttachmentConfig& attach);

// ---- comparison runs ---------------------------------------------------------

struct TrialResult {
  std::string variant;
  AttachmentConfig attach;
  std::size_t params = 0;  // adapter-only, equals variant_param_count
  std::size_t trial = 0;
  std::uint64_t seed = 0;  // per-trial training seed
  RunRecord record;
};

struct ComparisonReport {
  std::vector<TrialResult> results;
  std::vector<std::string> files;  // written artifacts, relative to output_dir
};

/// Train every variant on every trial's task. Each trial re-plants the task
/// with a derived seed and trains all variants with one shared training seed,
/// so comparisons within a trial are paired. Writes, under cfg.output_dir:
/// config.json (echo), summary.csv, runs/<variant>-t<trial>.csv, and, for
/// HTA variants, spectra/<variant>-t<trial>.csv. Aborted trials land in the
/// summary like any other row; the run continues.
ComparisonReport run_comparison(const ExperimentConfig& cfg);

// ---- bottleneck-dimension sweep ----------------------------------------------

struct SweepRow {
  std::size_t r = 0;
  std::size_t params_adapter = 0;    // desk-scale model, adapters only
  std::size_t params_with_head = 0;  // plus the classifier head
  // Same attachment on 768-wide, 12-layer geometry (four attention
  // projections), for juxtaposition against published counts.
  std::size_t reference_params_adapter = 0;
  double median_best_eval_acc = 0.0;
  double min_best_eval_acc = 0.0;
  double max_best_eval_acc = 0.0;
  double median_final_train_loss = 0.0;
  std::size_t aborted_trials = 0;
};

/// One comparison per rank value, each an HTA variant on the four attention
/// projections of cfg.model. Writes sweep.csv under cfg.output_dir plus the
/// per-rank comparison artifacts in r<k>/ subdirectories.
std::vector<SweepRow> sweep_bottleneck(const ExperimentConfig& cfg,
                                       const std::vector<std::size_t>& r_values = {0, 1, 2,
                                                                                   4});

// ---- adapter spectra -----------------------------------------------------------

struct SpectrumRow {
  std::size_t layer = 0;
  std::string position;
  std::size_t sv_index = 0;
  double sigma = 0.0;
  std::size_t numerical_rank = 0;  // repeated on every row of the entry
};

/// Relative threshold under which singular values do not count toward an
/// adaptation matrix's numerical rank in spectrum reports.
inline constexpr double kSpectrumRankTol = 1e-6;

/// Singular values of every attached HTA adaptation matrix, blocks in order.
/// Entries whose decomposition does not converge are skipped with a note on
/// stderr; everything else is still reported.
std::vector<SpectrumRow> report_spectra(const Backbone& b);

void write_spectra_csv(const std::vector<SpectrumRow>& rows, const std::string& path);

// ---- deterministic formatting ---------------------------------------------------

/// Shortest round-trip decimal form, locale-independent; every CSV cell that
/// holds a double goes through this so reruns are byte-identical.
std::string format_double(double x);

// ---- gradient spot-check ---------------------------------------------------------

struct GradCheckReport {
  std::size_t coords_checked = 0;
  double max_rel_err = 0.0;  // among coords above the absolute-agreement guard
  double max_abs_err = 0.0;
  double max_analytic = 0.0;  // largest |analytic gradient|; 0 would mean a
                              // disconnected graph, which fails the check
  bool pass = false;
  std::vector<std::string> failures;  // parameter names over tolerance
};

/// Autodiff vs central differences on a one-block model whose trainables
/// cover every parameter class (reflection vectors, diagonal, low-rank pair,
/// head). Passes when every coordinate agrees within rel_tol at step h.
GradCheckReport run_model_grad_check(std::uint64_t seed, double h = 1e-5,
                                     double rel_tol = 1e-5);

}  // namespace hta
