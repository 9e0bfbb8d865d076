// OpenMP kernels against the serial reference on the shapes that dominate
// Stage 1 (32x32 toy images, batch 16, hidden width 64).

#include <benchmark/benchmark.h>

#include <vector>

#include "ageflow/kernels.hpp"
#include "ageflow/rng.hpp"

using namespace ageflow;

namespace {

Tensor<float> random_tensor(const Shape& shape, std::uint64_t seed) {
  Tensor<float> t(shape);
  Rng rng(seed);
  for (auto& v : t.values()) v = static_cast<float>(rng.normal());
  return t;
}

template <bool Reference>
void BM_Gemm(benchmark::State& state) {
  const int M = state.range(0), N = state.range(1), K = state.range(2);
  const bool ta = state.range(3) != 0, tb = state.range(4) != 0;
  const auto A = random_tensor({M * K}, 1), B = random_tensor({K * N}, 2);
  std::vector<float> C(static_cast<std::size_t>(M) * N);
  for (auto _ : state) {
    if constexpr (Reference)
      reference::gemm(ta, tb, M, N, K, A.data(), B.data(), C.data(), false);
    else
      kernels::gemm(ta, tb, M, N, K, A.data(), B.data(), C.data(), false);
    benchmark::DoNotOptimize(C.data());
  }
  state.counters["GFLOP/s"] = benchmark::Counter(2.0 * M * N * K, benchmark::Counter::kIsIterationInvariantRate,
                                                 benchmark::Counter::kIs1000);
}

// conv 3x3 forward: output channels, input channels, spatial size
template <bool Reference>
void BM_Conv3x3(benchmark::State& state) {
  const int Co = state.range(0), Ci = state.range(1), S = state.range(2), N = 16;
  const auto x = random_tensor({N, Ci, S, S}, 3), w = random_tensor({Co, Ci, 3, 3}, 4), b = random_tensor({Co}, 5);
  for (auto _ : state) {
    auto y = Reference ? reference::conv2d(x, w, b, 1) : kernels::conv2d(x, w, b, 1);
    benchmark::DoNotOptimize(y.data());
  }
  state.counters["GFLOP/s"] = benchmark::Counter(2.0 * N * Co * Ci * 9 * S * S,
                                                 benchmark::Counter::kIsIterationInvariantRate,
                                                 benchmark::Counter::kIs1000);
}

template <bool Reference>
void BM_Conv3x3Backward(benchmark::State& state) {
  const int Co = state.range(0), Ci = state.range(1), S = state.range(2), N = 16;
  const auto x = random_tensor({N, Ci, S, S}, 3), w = random_tensor({Co, Ci, 3, 3}, 4);
  const auto gy = random_tensor({N, Co, S, S}, 6);
  Tensor<float> gx, gw({Co, Ci, 3, 3}), gb({Co});
  for (auto _ : state) {
    if constexpr (Reference)
      reference::conv2d_backward(x, w, 1, gy, &gx, &gw, &gb);
    else
      kernels::conv2d_backward(x, w, 1, gy, &gx, &gw, &gb);
    benchmark::DoNotOptimize(gx.data());
  }
}

void gemm_shapes(benchmark::internal::Benchmark* b) {
  b->ArgNames({"M", "N", "K", "ta", "tb"});
  b->Args({64, 4096, 576, 0, 0});
  b->Args({576, 4096, 64, 1, 0});
  b->Args({64, 576, 4096, 0, 1});
  b->Args({8, 1024, 36, 0, 0});
}

void conv_shapes(benchmark::internal::Benchmark* b) {
  b->ArgNames({"Co", "Ci", "S"});
  b->Args({64, 2, 16});
  b->Args({64, 64, 16});
  b->Args({64, 64, 8});
}

}  // namespace

BENCHMARK(BM_Gemm<false>)->Name("gemm/openmp")->Apply(gemm_shapes)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Gemm<true>)->Name("gemm/reference")->Apply(gemm_shapes)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Conv3x3<false>)->Name("conv3x3/openmp")->Apply(conv_shapes)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Conv3x3<true>)->Name("conv3x3/reference")->Apply(conv_shapes)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Conv3x3Backward<false>)->Name("conv3x3_backward/openmp")->Apply(conv_shapes)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Conv3x3Backward<true>)->Name("conv3x3_backward/reference")->Apply(conv_shapes)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
