// Serial vs OpenMP GEMM variants at transformer-ish shapes.
#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "synthehr/kernels.hpp"

namespace {

using GemmFn = void (*)(int, int, int, const double*, const double*, double*, bool);

void run(benchmark::State& state, GemmFn fn) {
  const int m = static_cast<int>(state.range(0));
  const int n = static_cast<int>(state.range(1));
  const int k = static_cast<int>(state.range(2));
  std::mt19937_64 rng(1);
  std::normal_distribution<double> nd;
  std::vector<double> a(static_cast<std::size_t>(m) * k), b(static_cast<std::size_t>(k) * n), c(static_cast<std::size_t>(m) * n);
  for (auto& x : a) x = nd(rng);
  for (auto& x : b) x = nd(rng);
  for (auto _ : state) {
    fn(m, n, k, a.data(), b.data(), c.data(), false);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * 2LL * m * n * k);
}

void BM_GemmSerial(benchmark::State& s) { run(s, synthehr::kernels::gemm_serial); }
void BM_GemmParallel(benchmark::State& s) { run(s, synthehr::kernels::gemm_parallel); }
void BM_GemmNtSerial(benchmark::State& s) { run(s, synthehr::kernels::gemm_nt_serial); }
void BM_GemmNtParallel(benchmark::State& s) { run(s, synthehr::kernels::gemm_nt_parallel); }

void shapes(benchmark::internal::Benchmark* b) {
  b->Args({64, 128, 128})->Args({64, 512, 128})->Args({256, 256, 256})->Args({512, 512, 512});
}

}  // namespace

BENCHMARK(BM_GemmSerial)->Apply(shapes);
BENCHMARK(BM_GemmParallel)->Apply(shapes);
BENCHMARK(BM_GemmNtSerial)->Apply(shapes);
BENCHMARK(BM_GemmNtParallel)->Apply(shapes);

BENCHMARK_MAIN();
