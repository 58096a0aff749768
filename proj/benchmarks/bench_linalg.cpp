#include <benchmark/benchmark.h>

#include <cmath>
#include <cstdint>

#include "hta/linalg.hpp"
#include "hta/rng.hpp"

namespace {

hta::DenseMatrix random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  hta::Rng rng(seed);
  hta::DenseMatrix m(rows, cols);
  for (double& x : m.values()) x = rng.normal();
  return m;
}

void BM_matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random_matrix(n, n, 1);
  const auto b = random_matrix(n, n, 2);
  for (auto _ : state) {
    auto c = hta::matmul(a, b);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(static_cast<int64_t>(state.iterations()) * n * n * n);
}
BENCHMARK(BM_matmul)->Arg(64)->Arg(192)->Arg(768);

void BM_householder_apply_vs_materialized(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto x = random_matrix(n, n, 3);
  hta::Rng rng(4);
  hta::Vector v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = rng.normal();
  const double s = std::sqrt(2.0) / v.norm();
  for (std::size_t i = 0; i < n; ++i) v[i] *= s;
  if (state.range(1) == 0) {
    for (auto _ : state) {
      auto y = hta::apply_householder_left(v, x);
      benchmark::DoNotOptimize(y.data());
    }
  } else {
    for (auto _ : state) {
      auto h = hta::householder_matrix(v);
      auto y = hta::matmul(h, x);
      benchmark::DoNotOptimize(y.data());
    }
  }
}
BENCHMARK(BM_householder_apply_vs_materialized)
    ->Args({192, 0})
    ->Args({192, 1})
    ->Args({768, 0})
    ->Args({768, 1});

void BM_jacobi_svd(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random_matrix(n, n, 5);
  for (auto _ : state) {
    auto svd = hta::jacobi_svd(a);
    benchmark::DoNotOptimize(svd.sigma.data());
  }
}
BENCHMARK(BM_jacobi_svd)->Arg(8)->Arg(32)->Arg(64);

}  // namespace
