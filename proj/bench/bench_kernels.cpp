#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "sfc/kernels.hpp"

using namespace sfc::kernels;

namespace {

std::vector<double> random_buffer(std::size_t n, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d;
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

template <bool Packed>
void BM_Gemm(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  auto a = random_buffer(n * n, 1), b = random_buffer(n * n, 2);
  std::vector<double> c(n * n);
  for (auto _ : state) {
    if constexpr (Packed)
      gemm(n, n, n, a.data(), b.data(), c.data(), false);
    else
      reference::gemm(n, n, n, a.data(), b.data(), c.data(), false);
    benchmark::DoNotOptimize(c.data());
  }
  state.counters["FLOP/s"] = benchmark::Counter(2.0 * n * n * n, benchmark::Counter::kIsIterationInvariantRate);
}

ConvGeometry stage_geometry(std::size_t channels, std::size_t t, std::size_t side) {
  ConvGeometry g;
  g.c_in = g.c_out = channels;
  g.t_in = t;
  g.h_in = g.w_in = side;
  g.kernel = {3, 1, 1};
  g.padding = {1, 0, 0};
  return g;
}

template <bool Packed>
void BM_Conv3d(benchmark::State& state) {
  const auto g = stage_geometry(static_cast<std::size_t>(state.range(0)), 16, 8);
  auto x = random_buffer(g.c_in * g.in_positions(), 3);
  auto w = random_buffer(g.c_out * g.patch_size(), 4);
  std::vector<double> y(g.c_out * g.out_positions());
  for (auto _ : state) {
    if constexpr (Packed)
      conv3d_forward(g, x.data(), w.data(), nullptr, y.data());
    else
      reference::conv3d_forward(g, x.data(), w.data(), nullptr, y.data());
    benchmark::DoNotOptimize(y.data());
  }
  const double flops = 2.0 * g.patch_size() * g.c_out * g.out_positions();
  state.counters["FLOP/s"] = benchmark::Counter(flops, benchmark::Counter::kIsIterationInvariantRate);
}

}  // namespace

BENCHMARK(BM_Gemm<false>)->Name("gemm/reference")->Arg(64)->Arg(128)->Arg(256);
BENCHMARK(BM_Gemm<true>)->Name("gemm/packed")->Arg(64)->Arg(128)->Arg(256);
BENCHMARK(BM_Conv3d<false>)->Name("conv3d/reference")->Arg(16)->Arg(32);
BENCHMARK(BM_Conv3d<true>)->Name("conv3d/packed")->Arg(16)->Arg(32);

BENCHMARK_MAIN();
