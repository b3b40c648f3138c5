#include <benchmark/benchmark.h>

#include "textif/fusion_net.hpp"
#include "textif/losses.hpp"
#include "textif/text_guidance.hpp"

namespace {

using namespace textif;

Image gradient_image(int n, ColorSpace cs) {
  Image img(n, n, cs);
  for (int c = 0; c < img.channels(); ++c)
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) img.at(c, y, x) = (x + 2 * y + 7 * c) % n / static_cast<double>(n);
  return img;
}

void BM_Fuse(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const NetConfig cfg;
  const FusionNet net(cfg);
  const ParamStore params = init_params(cfg);
  const HashEmbedder embedder(cfg.embed_dim);
  const auto text = embedder.embed("fuse the visible and infrared images");
  const Image vis = gradient_image(n, ColorSpace::Rgb), ir = gradient_image(n, ColorSpace::Gray);
  for (auto _ : state) benchmark::DoNotOptimize(net.fuse(vis, ir, text, params).data().data());
  state.SetItemsProcessed(state.iterations() * n * n);
}
BENCHMARK(BM_Fuse)->Arg(64)->Arg(96)->Unit(benchmark::kMillisecond);

void BM_TrainStep(benchmark::State& state) {
  const int n = 96;
  const NetConfig cfg;
  const FusionNet net(cfg);
  const ParamStore params = init_params(cfg);
  const HashEmbedder embedder(cfg.embed_dim);
  const auto text = embedder.embed("the image is too dark");
  const Image vis = gradient_image(n, ColorSpace::Rgb), ir = gradient_image(n, ColorSpace::Gray);
  const TaskProfile profile = TaskCatalog::builtin().entry("low_light").profile;
  for (auto _ : state) {
    const Bindings b = Bindings::leaves(params);
    const auto fused = net.forward(ag::constant(image_to_tensor(vis)), ag::constant(image_to_tensor(ir)),
                                   ag::constant(Tensor({cfg.embed_dim}, text.vector)), b);
    const auto loss = total_loss_terms(fused, vis, ir, profile).total;
    ag::backward(loss);
    benchmark::DoNotOptimize(b.gradients().tensor_count());
  }
}
BENCHMARK(BM_TrainStep)->Unit(benchmark::kMillisecond);

}  // namespace
