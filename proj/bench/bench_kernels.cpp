#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "refil/kernels.hpp"

namespace k = refil::kernels;

namespace {

std::vector<double> random_vec(std::size_t n, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

// Shapes taken from a training step: rows of entity projections, GRU input
// projection, and the weight-gradient reduction over a long batch.
template <bool Parallel>
void BM_Gemm(benchmark::State& state) {
  const auto m = static_cast<std::size_t>(state.range(0));
  const auto n = static_cast<std::size_t>(state.range(1));
  const auto d = static_cast<std::size_t>(state.range(2));
  const auto a = random_vec(m * d, 1), b = random_vec(d * n, 2);
  std::vector<double> c(m * n);
  for (auto _ : state) {
    if constexpr (Parallel) {
      k::parallel::gemm(m, n, d, a.data(), b.data(), c.data(), false);
    } else {
      k::serial::gemm(m, n, d, a.data(), b.data(), c.data(), false);
    }
    benchmark::DoNotOptimize(c.data());
  }
  state.counters["GFLOPS"] = benchmark::Counter(2e-9 * m * n * d * state.iterations(),
                                                benchmark::Counter::kIsRate);
}

void gemm_shapes(benchmark::internal::Benchmark* b) {
  b->Args({6528, 128, 128})->Args({19584, 192, 256})->Args({256, 192, 19584})->Args({64, 64, 64});
}

template <bool Parallel>
void BM_Attention(benchmark::State& state) {
  k::AttentionDims dims;
  dims.n_outer = 51;
  dims.n_inner = 32;
  dims.n_variants = 3;
  dims.n_query = 4;
  dims.n_key = 4;
  dims.n_heads = 4;
  dims.head_dim = 32;
  const std::size_t w = dims.width(), blocks = dims.n_blocks();
  const auto q = random_vec(blocks * dims.n_query * w, 1);
  const auto kk = random_vec(blocks * dims.n_key * w, 2);
  const auto v = random_vec(blocks * dims.n_key * w, 3);
  std::vector<std::uint8_t> mask(dims.out_rows() * dims.n_key, 1);
  std::vector<double> out(dims.out_rows() * w), probs(dims.prob_size());
  for (auto _ : state) {
    if constexpr (Parallel) {
      k::parallel::attention_forward(dims, q.data(), kk.data(), v.data(), mask.data(), out.data(),
                                     probs.data());
    } else {
      k::serial::attention_forward(dims, q.data(), kk.data(), v.data(), mask.data(), out.data(),
                                   probs.data());
    }
    benchmark::DoNotOptimize(out.data());
  }
}

}  // namespace

BENCHMARK(BM_Gemm<false>)->Name("gemm/serial")->Apply(gemm_shapes)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Gemm<true>)->Name("gemm/parallel")->Apply(gemm_shapes)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Attention<false>)->Name("attention/serial")->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Attention<true>)->Name("attention/parallel")->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
