// SPDX-License-Identifier: Apache-2.0
// Serial reference kernels against the OpenMP versions, plus sequential vs
// parallel sensitivity profiling.

#include <benchmark/benchmark.h>

#include "smoe/kernels.hpp"
#include "smoe/random.hpp"
#include "smoe/sensitivity.hpp"
#include "smoe/tasks.hpp"

namespace {

using namespace smoe;

std::vector<double> random_buffer(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(-1.0, 1.0);
  return v;
}

template <bool Parallel>
void BM_Gemm(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const kernels::GemmDims d{n, n, n};
  const auto a = random_buffer(n * n, 1), b = random_buffer(n * n, 2);
  std::vector<double> c(n * n);
  for (auto _ : state) {
    if constexpr (Parallel) kernels::gemm(d, a, b, c);
    else kernels::reference::gemm(d, a, b, c);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * n * n * n));
  state.counters["threads"] = Parallel ? kernels::max_threads() : 1;
}
BENCHMARK(BM_Gemm<false>)->Name("gemm/reference")->RangeMultiplier(2)->Range(32, 256)->UseRealTime();
BENCHMARK(BM_Gemm<true>)->Name("gemm/openmp")->RangeMultiplier(2)->Range(32, 256)->UseRealTime();

template <bool Parallel>
void BM_Softmax(benchmark::State& state) {
  const auto rows = static_cast<std::size_t>(state.range(0));
  const std::size_t cols = 128;
  const auto x = random_buffer(rows * cols, 3);
  std::vector<double> y(rows * cols);
  for (auto _ : state) {
    if constexpr (Parallel) kernels::softmax_rows(x, y, rows, cols);
    else kernels::reference::softmax_rows(x, y, rows, cols);
    benchmark::DoNotOptimize(y.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * rows * cols));
}
BENCHMARK(BM_Softmax<false>)->Name("softmax/reference")->RangeMultiplier(4)->Range(64, 4096)->UseRealTime();
BENCHMARK(BM_Softmax<true>)->Name("softmax/openmp")->RangeMultiplier(4)->Range(64, 4096)->UseRealTime();

void BM_Profile(benchmark::State& state) {
  ModelConfig c;  // toy reference configuration
  const BaseModel model = init_model(c);
  const auto data = generate_tasks(c.vocab_size, c.max_seq_len, 24, 1, 1);
  const auto samples = make_samples(find_dataset(data, TaskKind::kCopy, Split::kTrain));
  ProfileOptions opts;
  opts.parallel = state.range(0) != 0;
  for (auto _ : state) {
    benchmark::DoNotOptimize(profile_sensitivity(model, samples, GroupSchedule::per_layer(c), opts).values.data());
  }
}
BENCHMARK(BM_Profile)->Name("profile/sequential")->Arg(0)->Unit(benchmark::kMillisecond)->UseRealTime();
BENCHMARK(BM_Profile)->Name("profile/parallel")->Arg(1)->Unit(benchmark::kMillisecond)->UseRealTime();

}  // namespace

BENCHMARK_MAIN();
