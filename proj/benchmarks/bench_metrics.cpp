#include <benchmark/benchmark.h>

#include "textif/metrics.hpp"

namespace {

using namespace textif;

Image pattern(int n, ColorSpace cs, int shift) {
  Image img(n, n, cs);
  for (int c = 0; c < img.channels(); ++c)
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x)
        img.at(c, y, x) = ((x * 13 + y * 7 + shift * (c + 1)) % 251) / 250.0;
  return img;
}

void BM_EvaluateMetrics(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const Image f = pattern(n, ColorSpace::Rgb, 1), v = pattern(n, ColorSpace::Rgb, 2),
              ir = pattern(n, ColorSpace::Gray, 3);
  for (auto _ : state) benchmark::DoNotOptimize(evaluate_metrics(f, v, ir).vif);
  state.SetItemsProcessed(state.iterations() * n * n);
}
BENCHMARK(BM_EvaluateMetrics)->Arg(128)->Arg(256)->Unit(benchmark::kMillisecond);

void BM_Qabf(benchmark::State& state) {
  const Image f = pattern(256, ColorSpace::Gray, 1), v = pattern(256, ColorSpace::Gray, 2),
              ir = pattern(256, ColorSpace::Gray, 3);
  for (auto _ : state) benchmark::DoNotOptimize(metric_qabf(f, v, ir));
}
BENCHMARK(BM_Qabf)->Unit(benchmark::kMillisecond);

}  // namespace
