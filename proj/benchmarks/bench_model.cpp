#include <benchmark/benchmark.h>

#include <cstdint>
#include <vector>

#include "hta/model.hpp"
#include "hta/rng.hpp"

namespace {

hta::ModelConfig adapted_config() {
  hta::ModelConfig cfg;  // default desk-scale encoder: 64 wide, 4 deep
  cfg.adaptation.kind = hta::AdapterKind::hta;
  cfg.adaptation.style = hta::AttachStyle::additive;
  cfg.adaptation.positions = {hta::Position::q, hta::Position::v};
  cfg.adaptation.r = 1;
  return cfg;
}

hta::DenseMatrix random_tokens(const hta::ModelConfig& cfg, std::size_t batch,
                               std::uint64_t seed) {
  hta::Rng rng(seed);
  hta::DenseMatrix tokens(batch * cfg.content_tokens(), cfg.dim);
  for (double& x : tokens.values()) x = rng.normal();
  return tokens;
}

void randomize_trainables(hta::Backbone& b, std::uint64_t seed) {
  hta::Rng rng(seed);
  for (const hta::ParamRef& ref : trainable_parameters(b)) {
    for (std::size_t i = 0; i < ref.size; ++i) ref.data[i] = 0.1 * rng.normal();
  }
}

// Inference cost of the extra adapter branch vs the same adapters folded into
// the host weights: the gap is what re-parameterization buys at serving time.
void BM_forward(benchmark::State& state, bool merged) {
  const std::size_t batch = 32;
  hta::Backbone b = build_backbone(adapted_config(), 1);
  randomize_trainables(b, 2);
  const hta::DenseMatrix tokens = random_tokens(adapted_config(), batch, 3);
  hta::ForwardOptions options;
  if (merged) {
    merge_all(b);
    options.mode = hta::ForwardMode::merged;
  }
  for (auto _ : state) {
    auto logits = forward(b, tokens, batch, options);
    benchmark::DoNotOptimize(logits.data());
  }
  state.SetItemsProcessed(static_cast<int64_t>(state.iterations()) * batch);
}
BENCHMARK_CAPTURE(BM_forward, branched, false);
BENCHMARK_CAPTURE(BM_forward, merged, true);

void BM_taped_step(benchmark::State& state) {
  const std::size_t batch = 32;
  hta::Backbone b = build_backbone(adapted_config(), 1);
  const hta::DenseMatrix tokens = random_tokens(adapted_config(), batch, 3);
  std::vector<std::size_t> labels(batch);
  for (std::size_t i = 0; i < batch; ++i) labels[i] = i % 10;
  for (auto _ : state) {
    auto fwd = taped_forward(b, tokens, batch, &labels);
    auto grads = fwd.tape.backward(fwd.loss);
    benchmark::DoNotOptimize(grads);
  }
  state.SetItemsProcessed(static_cast<int64_t>(state.iterations()) * batch);
}
BENCHMARK(BM_taped_step);

}  // namespace
