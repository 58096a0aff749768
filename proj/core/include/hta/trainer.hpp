#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "hta/dataset.hpp"
#include "hta/model.hpp"

namespace hta {

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t warmup_epochs = 10;
  double base_lr = 1e-2;
  double weight_decay = 0.0;
  std::size_t batch_size = 16;
  double adapter_dropout = 0.0;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // Decay is structural: only matrix-shaped adapter factors ever decay, and
  // the head only when asked. Reflection vectors, diagonals, and biases never do.
  bool decay_head = false;

  void validate() const;
};

/// Learning rate at a global step: linear ramp 0 -> base_lr over the warmup
/// steps (warmup_epochs / epochs of total_steps), then cosine decay
/// base_lr * 0.5 * (1 + cos(pi * (step - W) / (T - W))) to the final step.
double lr_at(const TrainConfig& config, std::size_t step, std::size_t total_steps);

/// First/second moment buffers for one parameter tensor.
struct AdamWState {
  std::vector<double> m;
  std::vector<double> v;
};

/// One decoupled-weight-decay Adam update, in place. `t` is the 1-based step
/// count for bias correction. Decay multiplies parameters by (1 - lr * wd)
/// before the moment update touches them. Non-finite gradients are refused.
void adamw_step(std::span<double> param, std::span<const double> grad, AdamWState& state,
                std::size_t t, double lr, double weight_decay, const TrainConfig& config);

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0.0;  // at the first step of the epoch
  double train_loss = 0.0;
  double train_acc = 0.0;
  double eval_acc = 0.0;
};

struct RunRecord {
  std::vector<EpochRecord> epochs;
  double best_eval_acc = 0.0;
  double final_train_loss = 0.0;
  std::size_t trainable_params = 0;
  double wall_seconds = 0.0;  // in-memory only; never serialized (determinism)
  bool aborted = false;
  std::string abort_reason;
};

/// Top-1 accuracy of the model over the given samples (branched mode, no
/// dropout). Ties resolve to the lowest class index.
double evaluate_accuracy(const Backbone& b, const std::vector<Sample>& samples,
                         std::size_t batch_size);

/// Frozen-backbone fine-tuning: AdamW over the trainable registry, warmup +
/// cosine schedule, deterministic per-epoch shuffling from the seed,
/// cross-entropy loss. Divergence aborts early and is recorded.
RunRecord train(Backbone& b, const Dataset& task, const TrainConfig& config);

}  // namespace hta
