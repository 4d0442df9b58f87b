#include <benchmark/benchmark.h>

#include <numeric>
#include <vector>

#include "pointnorm/kernels.hpp"
#include "pointnorm/random.hpp"

using namespace pointnorm;

namespace {

std::vector<float> random_values(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(uniform(rng, -1.0, 1.0));
  return v;
}

template <bool Parallel>
void BM_Gemm(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random_values(n * n, 1), b = random_values(n * n, 2);
  std::vector<float> c(n * n);
  for (auto _ : state) {
    if constexpr (Parallel)
      kernels::gemm<float>(false, false, n, n, n, 1.0f, a, b, 0.0f, c);
    else
      kernels::reference::gemm<float>(false, false, n, n, n, 1.0f, a, b, 0.0f, c);
    benchmark::DoNotOptimize(c.data());
  }
  state.counters["FLOP/s"] = benchmark::Counter(2.0 * n * n * n, benchmark::Counter::kIsIterationInvariantRate);
}

template <bool Parallel>
void BM_ColumnSums(benchmark::State& state) {
  const auto rows = static_cast<std::size_t>(state.range(0));
  const std::size_t cols = 256;
  const auto x = random_values(rows * cols, 3);
  std::vector<float> sums(cols);
  for (auto _ : state) {
    if constexpr (Parallel)
      kernels::column_sums<float>(rows, cols, x, sums, true);
    else
      kernels::reference::column_sums<float>(rows, cols, x, sums, true);
    benchmark::DoNotOptimize(sums.data());
  }
  state.SetBytesProcessed(static_cast<std::int64_t>(state.iterations() * rows * cols * sizeof(float)));
}

template <bool Parallel>
void BM_MaxMiddle(benchmark::State& state) {
  const auto outer = static_cast<std::size_t>(state.range(0));
  const std::size_t extent = 24, inner = 128;
  const auto x = random_values(outer * extent * inner, 4);
  std::vector<float> out(outer * inner);
  std::vector<std::size_t> arg(outer * inner);
  for (auto _ : state) {
    if constexpr (Parallel)
      kernels::max_middle_axis<float>(outer, extent, inner, x, out, arg);
    else
      kernels::reference::max_middle_axis<float>(outer, extent, inner, x, out, arg);
    benchmark::DoNotOptimize(out.data());
  }
}

template <bool Parallel>
void BM_Fps(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto coords = random_values(3 * n, 5);
  for (auto _ : state) {
    auto idx = Parallel ? kernels::farthest_point_sample<float>(coords, n / 4, 0)
                        : kernels::reference::farthest_point_sample<float>(coords, n / 4, 0);
    benchmark::DoNotOptimize(idx.data());
  }
}

template <bool Parallel>
void BM_Knn(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto coords = random_values(3 * n, 6);
  std::vector<std::size_t> queries(n / 4);
  std::iota(queries.begin(), queries.end(), std::size_t{0});
  for (auto _ : state) {
    auto idx = Parallel ? kernels::knn<float>(coords, queries, 24) : kernels::reference::knn<float>(coords, queries, 24);
    benchmark::DoNotOptimize(idx.data());
  }
}

}  // namespace

BENCHMARK(BM_Gemm<false>)->Name("gemm/serial")->Arg(64)->Arg(256);
BENCHMARK(BM_Gemm<true>)->Name("gemm/parallel")->Arg(64)->Arg(256)->Arg(512);
BENCHMARK(BM_ColumnSums<false>)->Name("column_sums/serial")->Arg(4096)->Arg(65536);
BENCHMARK(BM_ColumnSums<true>)->Name("column_sums/parallel")->Arg(4096)->Arg(65536);
BENCHMARK(BM_MaxMiddle<false>)->Name("max_middle/serial")->Arg(256)->Arg(2048);
BENCHMARK(BM_MaxMiddle<true>)->Name("max_middle/parallel")->Arg(256)->Arg(2048);
BENCHMARK(BM_Fps<false>)->Name("fps/serial")->Arg(1024)->Arg(4096);
BENCHMARK(BM_Fps<true>)->Name("fps/parallel")->Arg(1024)->Arg(4096);
BENCHMARK(BM_Knn<false>)->Name("knn/serial")->Arg(1024)->Arg(4096);
BENCHMARK(BM_Knn<true>)->Name("knn/parallel")->Arg(1024)->Arg(4096);

BENCHMARK_MAIN();
