#include "hta/trainer.hpp"

#include <chrono>
#include <cmath>
#include <limits>
#include <numbers>

#include "hta/errors.hpp"
#include "hta/rng.hpp"

namespace hta {

void TrainConfig::validate() const {
  if (warmup_epochs > epochs) throw ConfigError("warmup_epochs must not exceed epochs");
  if (adapter_dropout < 0.0 || adapter_dropout >= 1.0) {
    throw ConfigError("adapter_dropout must lie in [0, 1)");
  }
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (base_lr < 0.0 || weight_decay < 0.0) {
    throw ConfigError("base_lr and weight_decay must be nonnegative");
  }
  if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0 || eps <= 0.0) {
    throw ConfigError("betas must lie in [0, 1) and eps must be positive");
  }
}

double lr_at(const TrainConfig& config, std::size_t step, std::size_t total_steps) {
  if (step >= total_steps) throw ConfigError("lr_at: step beyond the schedule");
  if (config.epochs == 0) return config.base_lr;
  // Steps per epoch is total/epochs by construction, so this stays exact.
  const std::size_t warmup_steps = total_steps / config.epochs * config.warmup_epochs;
  if (step < warmup_steps) {
    return config.base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  }
  if (total_steps == warmup_steps) return config.base_lr;  // all-warmup schedule
  const double progress = static_cast<double>(step - warmup_steps) /
                          static_cast<double>(total_steps - warmup_steps);
  return config.base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

void adamw_step(std::span<double> param, std::span<const double> grad, AdamWState& state,
                std::size_t t, double lr, double weight_decay, const TrainConfig& config) {
  if (param.size() != grad.size()) throw ShapeError("adamw_step: param/grad size mismatch");
  if (state.m.empty()) {
    state.m.assign(param.size(), 0.0);
    state.v.assign(param.size(), 0.0);
  }
  if (state.m.size() != param.size()) {
    throw ShapeError("adamw_step: state size mismatch");
  }
  if (t < 1) throw ConfigError("adamw_step: step count is 1-based");
  for (const double g : grad) {
    if (!std::isfinite(g)) throw NumericError("adamw_step: non-finite gradient");
  }
  const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < param.size(); ++i) {
    // Decoupled decay first: shrink the parameter, not the gradient.
    if (weight_decay != 0.0) param[i] *= 1.0 - lr * weight_decay;
    state.m[i] = config.beta1 * state.m[i] + (1.0 - config.beta1) * grad[i];
    state.v[i] = config.beta2 * state.v[i] + (1.0 - config.beta2) * grad[i] * grad[i];
    const double m_hat = state.m[i] / bc1;
    const double v_hat = state.v[i] / bc2;
    param[i] -= lr * m_hat / (std::sqrt(v_hat) + config.eps);
  }
}

namespace {

std::size_t argmax_row(const DenseMatrix& m, std::size_t row) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < m.cols(); ++j) {
    if (m(row, j) > m(row, best)) best = j;
  }
  return best;
}

}  // namespace

double evaluate_accuracy(const Backbone& b, const std::vector<Sample>& samples,
                         std::size_t batch_size) {
  if (samples.empty()) return 0.0;
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  for (std::size_t at = 0; at < samples.size(); at += batch_size) {
    const std::size_t n = std::min(batch_size, samples.size() - at);
    idx.resize(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = at + i;
    const DenseMatrix logits = forward(b, fold_batch(samples, idx), n);
    for (std::size_t i = 0; i < n; ++i) {
      if (argmax_row(logits, i) == samples[at + i].label) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(samples.size());
}

RunRecord train(Backbone& b, const Dataset& task, const TrainConfig& config) {
  config.validate();
  if (task.train.empty()) throw ConfigError("train: empty training split");
  for (const Sample& s : task.train) {
    if (s.label >= b.config.classes) throw ConfigError("train: label out of range");
  }

  const auto t0 = std::chrono::steady_clock::now();
  RunRecord record;
  record.trainable_params = trainable_parameter_count(b);
  record.final_train_loss = std::numeric_limits<double>::quiet_NaN();

  std::vector<ParamRef> refs = trainable_parameters(b);
  std::vector<AdamWState> states(refs.size());
  std::vector<double> grad_buf;

  const std::size_t n_train = task.train.size();
  const std::size_t steps_per_epoch = (n_train + config.batch_size - 1) / config.batch_size;
  const std::size_t total_steps = steps_per_epoch * config.epochs;

  if (config.epochs == 0) {
    record.best_eval_acc = evaluate_accuracy(b, task.eval, config.batch_size);
    return record;
  }

  std::vector<std::size_t> order(n_train);
  std::size_t global_step = 0;

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    for (std::size_t i = 0; i < n_train; ++i) order[i] = i;
    Rng shuffle_rng(derive_seed(config.seed, 0x50f1 + epoch));
    shuffle_rng.shuffle(std::span<std::size_t>(order));

    EpochRecord ep;
    ep.epoch = epoch;
    ep.lr = lr_at(config, global_step, total_steps);
    double loss_sum = 0.0;
    std::size_t correct = 0;

    for (std::size_t at = 0; at < n_train; at += config.batch_size) {
      const std::size_t n = std::min(config.batch_size, n_train - at);
      const std::span<const std::size_t> batch_idx(order.data() + at, n);
      const DenseMatrix tokens = fold_batch(task.train, batch_idx);
      const std::vector<std::size_t> labels = labels_at(task.train, batch_idx);

      Rng dropout_rng(derive_seed(config.seed, 0xd0b0 + global_step));
      ForwardOptions options;
      options.adapter_dropout = config.adapter_dropout;
      options.dropout_rng = config.adapter_dropout > 0.0 ? &dropout_rng : nullptr;

      TapedForward fwd = taped_forward(b, tokens, n, &labels, options);
      const double loss = fwd.tape.value(fwd.loss)(0, 0);
      if (!std::isfinite(loss)) {
        record.aborted = true;
        record.abort_reason = "non-finite loss at epoch " + std::to_string(epoch);
        record.epochs.push_back(ep);
        record.wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        return record;
      }
      loss_sum += loss * static_cast<double>(n);
      const DenseMatrix& logits = fwd.tape.value(fwd.logits);
      for (std::size_t i = 0; i < n; ++i) {
        if (argmax_row(logits, i) == labels[i]) ++correct;
      }

      const Grad grad = fwd.tape.backward(fwd.loss);
      const double lr = lr_at(config, global_step, total_steps);
      ++global_step;  // t below is 1-based

      for (std::size_t p = 0; p < refs.size(); ++p) {
        ParamRef& ref = refs[p];
        grad_buf.assign(ref.size, 0.0);
        const NodeId node = fwd.params[p].second;
        if (grad.contains(node)) {
          const DenseMatrix& g = grad.at(node);
          for (std::size_t i = 0; i < ref.size; ++i) grad_buf[i] = g.data()[i];
        }
        const bool decay = ref.cls == ParamClass::adapter_matrix ||
                           (config.decay_head && ref.cls == ParamClass::head_weight);
        adamw_step(std::span<double>(ref.data, ref.size), grad_buf, states[p], global_step,
                   lr, decay ? config.weight_decay : 0.0, config);
      }
      project_normalized_v(b);
    }

    ep.train_loss = loss_sum / static_cast<double>(n_train);
    ep.train_acc = static_cast<double>(correct) / static_cast<double>(n_train);
    ep.eval_acc = evaluate_accuracy(b, task.eval, config.batch_size);
    record.epochs.push_back(ep);
    record.best_eval_acc = std::max(record.best_eval_acc, ep.eval_acc);
    record.final_train_loss = ep.train_loss;
  }

  record.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return record;
}

}  // namespace hta
