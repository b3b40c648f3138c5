#include <random>

#include <benchmark/benchmark.h>

#include "textif/autograd.hpp"
#include "textif/ops.hpp"

namespace {

using namespace textif;

Tensor filled(std::vector<int> shape, std::uint64_t seed) {
  Tensor t(std::move(shape));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (double& v : t.values()) v = u(rng);
  return t;
}

void BM_Conv3x3(benchmark::State& state) {
  const int c = static_cast<int>(state.range(0)), n = static_cast<int>(state.range(1));
  const auto x = ag::constant(filled({c, n, n}, 1));
  const auto w = ag::constant(filled({c, c * 9}, 2));
  const auto b = ag::constant(filled({c}, 3));
  ag::NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(ag::conv3x3(x, w, b).value().values().data());
  state.SetItemsProcessed(state.iterations() * n * n);
}
BENCHMARK(BM_Conv3x3)->Args({16, 96})->Args({32, 48});

void BM_Conv3x3Backward(benchmark::State& state) {
  const int c = 16, n = 96;
  const Tensor x = filled({c, n, n}, 1), w = filled({c, c * 9}, 2), b = filled({c}, 3);
  for (auto _ : state) {
    const auto xv = ag::leaf(x), wv = ag::leaf(w), bv = ag::leaf(b);
    const auto y = ag::sum(ag::conv3x3(xv, wv, bv));
    ag::backward(y);
    benchmark::DoNotOptimize(wv.grad().values().data());
  }
}
BENCHMARK(BM_Conv3x3Backward);

void BM_LayerNorm(benchmark::State& state) {
  const auto x = ag::constant(filled({16, 96, 96}, 1));
  const auto w = ag::constant(filled({16}, 2)), b = ag::constant(filled({16}, 3));
  ag::NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(ag::layer_norm_channels(x, w, b).value().values().data());
}
BENCHMARK(BM_LayerNorm);

void BM_ChannelAttention(benchmark::State& state) {
  const auto qkv = ag::constant(filled({48, 96, 96}, 1));
  const auto temp = ag::constant(Tensor({2}, std::vector<double>{1.0, 1.0}));
  ag::NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(ag::channel_attention(qkv, temp, 2).value().values().data());
}
BENCHMARK(BM_ChannelAttention);

void BM_SpatialAttention(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const auto q = ag::constant(filled({32, n, n}, 1));
  const auto k = ag::constant(filled({32, n, n}, 2));
  const auto v = ag::constant(filled({32, n, n}, 3));
  ag::NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(ag::spatial_attention(q, k, v, 2).value().values().data());
  state.SetItemsProcessed(state.iterations() * n * n);
}
BENCHMARK(BM_SpatialAttention)->Arg(12)->Arg(24);

}  // namespace
