#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gradcheck.hpp"
#include "metric_oracles.hpp"
#include "scenes.hpp"
#include "textif/checkpoint.hpp"
#include "textif/degrade.hpp"
#include "textif/fusion_net.hpp"
#include "textif/image_io.hpp"
#include "textif/losses.hpp"
#include "textif/metrics.hpp"
#include "textif/ops.hpp"
#include "textif/service.hpp"
#include "textif/text_guidance.hpp"
#include "textif/trainer.hpp"

using namespace textif;
using namespace textif::testing;
using nlohmann::json;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      if (!detail.empty()) detail += "; ";
      detail += what;
    }
  }
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

int failures = 0;

void report(const char* name, const std::function<Outcome()>& body) {
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o.pass = false;
    o.detail = std::string("exception: ") + e.what();
  }
  if (!o.pass) ++failures;
  std::printf("%s %s%s%s\n", o.pass ? "PASS" : "FAIL", name, o.detail.empty() ? "" : ": ",
              o.detail.c_str());
  std::fflush(stdout);
}

ag::Var as_var(const Image& img) { return ag::constant(image_to_tensor(img)); }

Image max_rgb(const Image& v, const Image& ir) {
  Image out = v;
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < v.height(); ++y)
      for (int x = 0; x < v.width(); ++x) out.at(c, y, x) = std::max(v.at(c, y, x), ir.at(0, y, x));
  return out;
}

double mean_abs_diff(const Image& a, const Image& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.data().size(); ++i) s += std::abs(a.data()[i] - b.data()[i]);
  return s / a.data().size();
}

double mean_luma(const Image& img) {
  const Image y = luminance(img);
  double s = 0.0;
  for (double v : y.data()) s += v;
  return s / y.data().size();
}

NetConfig toy_net(int channels) {
  NetConfig c;
  c.base_channels = channels;
  c.levels = 2;
  c.heads = 2;
  c.decoder_repeats = 2;
  c.embed_dim = 8;
  c.guidance_hidden = 6;
  return c;
}

ParamStore with_live_guidance(const NetConfig& cfg, std::uint64_t seed) {
  ParamStore p = init_params(cfg);
  for (int s = 0; s < cfg.sigm_sites(); ++s) {
    Tensor& w = p.at(guidance_param(s, "fc2.w"));
    w = random_tensor(w.shape(), seed + s, -0.3, 0.3);
  }
  return p;
}

Outcome gradient_suite() {
  Outcome o;
  const auto t0 = Clock::now();
  const Image f = random_image(8, 8, ColorSpace::Rgb, 51);
  const Image v = random_image(8, 8, ColorSpace::Rgb, 52);
  const Image ir = random_image(8, 8, ColorSpace::Gray, 53);
  const std::vector<Tensor> x{image_to_tensor(f)};
  double worst = 0.0;
  auto check = [&](const ScalarFn& fn, const char* what) {
    const auto r = check_gradients(fn, x);
    worst = std::max(worst, r.max_rel_error);
    o.require(r.max_rel_error < 1e-4, std::string(what) + " " + r.worst);
  };
  check([&](const std::vector<ag::Var>& a) { return intensity_loss(a[0], v, ir); }, "intensity");
  check([&](const std::vector<ag::Var>& a) { return ssim_loss(a[0], v, ir, 0.5); }, "ssim");
  check([&](const std::vector<ag::Var>& a) { return max_gradient_loss(a[0], v, ir); }, "gradient");
  check([&](const std::vector<ag::Var>& a) { return color_loss(a[0], v); }, "color");

  NetConfig gcfg = toy_net(4);
  gcfg.levels = 1;
  gcfg.decoder_repeats = 1;
  ParamStore gp = init_params(gcfg);
  for (const char* leaf : {"fc1.w", "fc1.b", "fc2.w", "fc2.b"}) {
    Tensor& t = gp.at(guidance_param(0, leaf));
    t = random_tensor(t.shape(), 10 + t.size());
  }
  const Tensor text = random_tensor({gcfg.embed_dim}, 1);
  const Tensor feature = random_tensor({4, 8, 8}, 2);
  const auto sigm = check_param_gradients(
      [&](const Bindings& b) {
        const auto mods = guidance_mlp(ag::constant(text), gcfg.stage_channels(), b);
        return weighted_sum(ag::modulate(ag::constant(feature), mods[0].gamma, mods[0].beta));
      },
      gp);
  worst = std::max(worst, sigm.max_rel_error);
  o.require(sigm.max_rel_error < 1e-4, "sigm+guidance " + sigm.worst);

  const NetConfig ncfg = toy_net(8);
  const FusionNet net(ncfg);
  const ParamStore np = with_live_guidance(ncfg, 21);
  const Tensor nv = random_tensor({3, 16, 16}, 5, 0, 1), ni = random_tensor({1, 16, 16}, 6, 0, 1);
  const Tensor nt = random_tensor({ncfg.embed_dim}, 7);
  const auto full = check_param_gradients(
      [&](const Bindings& b) {
        return weighted_sum(net.forward(ag::constant(nv), ag::constant(ni), ag::constant(nt), b));
      },
      np, 1e-6, 2, 3, 1e-6);
  o.require(full.max_rel_error < 1e-3, "network " + full.worst);

  const double secs = seconds_since(t0);
  o.require(secs < 120.0, "runtime " + fmt("%.1f s", secs));
  o.detail = (o.pass ? "" : o.detail + "; ") + "component max rel err " + fmt("%.2e", worst) +
             ", network " + fmt("%.2e", full.max_rel_error) + ", " + fmt("%.1f s", secs);
  return o;
}

Outcome sigm_identity() {
  Outcome o;
  const NetConfig cfg = toy_net(8);
  const FusionNet net(cfg);
  const ParamStore p = init_params(cfg);
  ag::NoGradGuard guard;
  int same = 0;
  for (int i = 0; i < 10; ++i) {
    const auto vis = ag::constant(random_tensor({3, 16, 16}, 100 + i, 0, 1));
    const auto ir = ag::constant(random_tensor({1, 16, 16}, 200 + i, 0, 1));
    const auto text = ag::constant(random_tensor({cfg.embed_dim}, 300 + i));
    const Bindings b = Bindings::constants(p);
    if (net.forward(vis, ir, text, b).value() == net.forward(vis, ir, text, b, true).value()) ++same;
  }
  o.require(same == 10, std::to_string(10 - same) + " inputs differ");
  if (o.pass) o.detail = "10/10 bit-identical";
  return o;
}

Outcome attention_invariants() {
  Outcome o;
  double row_err = 0.0, perm_err = 0.0;
  for (int heads : {1, 2, 4}) {
    const Tensor q = random_tensor({8, 4, 6}, heads, -3, 3), k = random_tensor({8, 4, 6}, heads + 9, -3, 3);
    for (const Tensor& m : ag::spatial_attention_weights(q, k, heads)) {
      const int n = m.shape()[0];
      for (int r = 0; r < n; ++r) {
        double s = 0.0;
        for (int c = 0; c < n; ++c) s += m[r * n + c];
        row_err = std::max(row_err, std::abs(s - 1.0));
      }
    }
    const std::vector<int> perm{2, 0, 3, 1};
    const Tensor q4 = random_tensor({4, 2, 2}, 1), k4 = random_tensor({4, 2, 2}, 2),
                 v4 = random_tensor({4, 2, 2}, 3);
    Tensor kp(k4.shape()), vp(v4.shape());
    for (int c = 0; c < 4; ++c)
      for (int t = 0; t < 4; ++t) {
        kp[c * 4 + t] = k4[c * 4 + perm[t]];
        vp[c * 4 + t] = v4[c * 4 + perm[t]];
      }
    ag::NoGradGuard guard;
    const Tensor a =
        ag::spatial_attention(ag::constant(q4), ag::constant(k4), ag::constant(v4), heads).value();
    const Tensor b =
        ag::spatial_attention(ag::constant(q4), ag::constant(kp), ag::constant(vp), heads).value();
    for (std::size_t i = 0; i < a.size(); ++i) perm_err = std::max(perm_err, std::abs(a[i] - b[i]));
  }
  o.require(row_err <= 1e-6, "row sum error " + fmt("%.2e", row_err));
  o.require(perm_err <= 1e-5, "permutation change " + fmt("%.2e", perm_err));
  if (o.pass) {
    o.detail = "row sum err " + fmt("%.1e", row_err) + ", permutation max-abs " + fmt("%.1e", perm_err);
  }
  return o;
}

Outcome metric_oracles() {
  Outcome o;
  Image levels(16, 16, ColorSpace::Gray);
  for (int i = 0; i < 256; ++i) levels.data()[i] = i / 255.0;
  o.require(std::abs(metric_en(levels) - 8.0) <= 1e-9, "EN fixture " + fmt("%.12f", metric_en(levels)));

  const Image flat(16, 16, ColorSpace::Gray, 0.37);
  o.require(metric_sd(flat) == 0.0 && metric_sf(flat) == 0.0 && metric_en(flat) == 0.0,
            "constant image statistics");

  const auto scene = synthetic_scene(32, 32, 4);
  const Image gray = luminance(scene.vis);
  const double ceiling = metric_qabf(gray, gray, gray);
  o.require(ceiling >= 0.95, "Qabf ceiling " + fmt("%.4f", ceiling));
  const double floor_q = metric_qabf(Image(32, 32, ColorSpace::Gray, 0.5), scene.vis, scene.ir);
  o.require(floor_q <= 0.01, "Qabf constant fused " + fmt("%.4f", floor_q));

  double worst = 0.0;
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const Image f = random_image(5, 5, ColorSpace::Rgb, seed * 10);
    const Image a = random_image(5, 5, ColorSpace::Rgb, seed * 10 + 1);
    const Image b = random_image(5, 5, ColorSpace::Gray, seed * 10 + 2);
    const Grid gf = grid255(f), ga = grid255(a), gb = grid255(b);
    for (double d : {metric_scd(f, a, b) - scd_oracle(gf, ga, gb), metric_sd(f) - sd_oracle(gf),
                     metric_en(f) - en_oracle(gf), metric_sf(f) - sf_oracle(gf),
                     metric_qabf(f, a, b) - qabf_oracle(gf, ga, gb)}) {
      worst = std::max(worst, std::abs(d));
    }
  }
  o.require(worst <= 1e-6, "5x5 oracle deviation " + fmt("%.2e", worst));

  const int n = std::max(48, vif_min_size());
  const auto vs = synthetic_scene(n, n, 12);
  Image fused = vs.vis;
  for (double& x : fused.data()) x = 0.8 * x + 0.1;
  double vif_dev = 0.0;
  for (const Image* src : {&vs.vis, &vs.ir}) {
    vif_dev = std::max(vif_dev, std::abs(vif_single(*src, fused) - vif_oracle(grid255(*src), grid255(fused))));
  }
  o.require(vif_dev <= 1e-4, "VIF dual deviation " + fmt("%.2e", vif_dev));
  const Image same = luminance(vs.vis);
  const double self = metric_vif(same, same, same);
  o.require(std::abs(self - 1.0) <= 1e-3, "VIF(x,x,x) " + fmt("%.6f", self));
  if (o.pass) {
    o.detail = "5x5 max dev " + fmt("%.1e", worst) + ", VIF dual dev " + fmt("%.1e", vif_dev) +
               ", Qabf ceiling " + fmt("%.3f", ceiling);
  }
  return o;
}

Outcome loss_optima() {
  Outcome o;
  ag::NoGradGuard guard;
  const Image v = random_image(12, 12, ColorSpace::Rgb, 1), ir = random_image(12, 12, ColorSpace::Gray, 2);
  o.require(intensity_loss(as_var(max_rgb(v, ir)), v, ir).item() == 0.0, "intensity at max");
  const Image g = random_image(12, 12, ColorSpace::Gray, 3);
  o.require(std::abs(ssim_loss(as_var(gray_to_rgb(g)), gray_to_rgb(g), g, 0.5).item()) <= 1e-12,
            "ssim at identity");
  o.require(max_gradient_loss(as_var(v), v, Image(12, 12, ColorSpace::Gray, 0.3)).item() == 0.0,
            "gradient at vis with constant ir");
  o.require(color_loss(as_var(v), v).item() == 0.0, "color at vis");

  const Image f = random_image(12, 12, ColorSpace::Rgb, 4);
  double worst = 0.0;
  for (const TaskEntry& e : TaskCatalog::builtin().entries()) {
    const double base = total_loss(f, v, ir, e.profile).l_total;
    const double twice = total_loss(f, v, ir, e.profile.scaled(2.0)).l_total;
    worst = std::max(worst, std::abs(twice - 2.0 * base));
  }
  o.require(worst <= 1e-9, "alpha doubling deviation " + fmt("%.2e", worst));
  if (o.pass) o.detail = "all optima 0, alpha doubling dev " + fmt("%.1e", worst);
  return o;
}

struct OverfitRun {
  TrainResult result;
  double seconds = 0.0;
};

std::vector<TrainingSample> overfit_corpus() { return steering_corpus(2, 96, 1); }

TrainConfig overfit_config() {
  TrainConfig c;
  c.lr = 1e-4;
  c.crop = 96;
  c.steps = 200;
  c.batch_size = 4;
  c.seed = 0;
  c.random_flip = false;
  return c;
}

OverfitRun run_overfit() {
  const NetConfig net;
  const HashEmbedder embedder(net.embed_dim);
  const auto t0 = Clock::now();
  OverfitRun r{train(overfit_corpus(), net, overfit_config(), embedder), 0.0};
  r.seconds = seconds_since(t0);
  return r;
}

double mean_total(const std::vector<StepLog>& log, std::size_t begin, std::size_t end) {
  double s = 0.0;
  for (std::size_t i = begin; i < end; ++i) s += log[i].l_total;
  return s / static_cast<double>(end - begin);
}

std::optional<OverfitRun> overfit;

Outcome overfit_smoke() {
  Outcome o;
  overfit = run_overfit();
  const auto& log = overfit->result.log;
  if (log.size() != 200) {
    o.require(false, "expected 200 logged steps, got " + std::to_string(log.size()));
    return o;
  }
  const double first = mean_total(log, 0, 10), last = mean_total(log, 190, 200);
  const double ratio = last / first;
  o.require(ratio <= 0.40, "loss ratio " + fmt("%.3f", ratio) + " > 0.40");
  o.require(overfit->seconds <= 600.0, "runtime " + fmt("%.0f s", overfit->seconds) + " > 600 s");
  const OverfitRun again = run_overfit();
  o.require(again.result.params == overfit->result.params, "rerun not bit-identical");
  const std::string summary = "first10 " + fmt("%.4f", first) + ", last10 " + fmt("%.4f", last) +
                              ", ratio " + fmt("%.3f", ratio) + ", " +
                              fmt("%.0f s", overfit->seconds) + ", rerun " +
                              (again.result.params == overfit->result.params ? "identical" : "differs");
  o.detail = o.pass ? summary : o.detail + " (" + summary + ")";
  return o;
}

Checkpoint overfit_checkpoint() {
  if (!overfit) overfit = run_overfit();
  return {NetConfig{}, round_to_float32(overfit->result.params)};
}

Outcome text_steering() {
  Outcome o;
  const Checkpoint ckpt = overfit_checkpoint();
  const HashEmbedder embedder(ckpt.config.embed_dim);
  const TaskCatalog& catalog = TaskCatalog::builtin();
  double worst_diff = 1e9, worst_gap = 1e9;
  for (const TrainingSample& s : overfit_corpus()) {
    if (s.task != "low_light") continue;
    const auto plain = infer(ckpt, s.input_vis, s.input_ir, catalog.entry("default").prompts[0],
                             embedder, catalog);
    const auto bright = infer(ckpt, s.input_vis, s.input_ir, catalog.entry("low_light").prompts[0],
                              embedder, catalog);
    worst_diff = std::min(worst_diff, mean_abs_diff(plain.fused, bright.fused));
    worst_gap = std::min(worst_gap, mean_luma(bright.fused) - mean_luma(plain.fused));
  }
  o.require(worst_diff > 1e-3, "mean abs diff " + fmt("%.2e", worst_diff));
  o.require(worst_gap > 0.0, "low-light luminance gap " + fmt("%.2e", worst_gap));
  const std::string summary =
      "min mean abs diff " + fmt("%.4f", worst_diff) + ", min luminance gain " + fmt("%.4f", worst_gap);
  o.detail = o.pass ? summary : o.detail + " (" + summary + ")";
  return o;
}

Outcome degradation() {
  Outcome o;
  const TaskCatalog& catalog = TaskCatalog::builtin();
  for (int i = 0; i < 5; ++i) {
    const auto s = synthetic_scene(32, 32, 500 + i);
    for (DegradationKind k : {DegradationKind::None, DegradationKind::LowLight,
                              DegradationKind::Overexposure, DegradationKind::NoiseIr,
                              DegradationKind::LowContrastIr}) {
      const auto spec = DegradationSpec::sample(k, 77 + i);
      const TrainingSample a = make_pair(s.vis, s.ir, spec, catalog);
      const TrainingSample b = make_pair(s.vis, s.ir, DegradationSpec::sample(k, 77 + i), catalog);
      if (encode_png(a.input_vis) != encode_png(b.input_vis) ||
          encode_png(a.input_ir) != encode_png(b.input_ir) || a.prompt != b.prompt) {
        o.require(false, "rerun differs for " + std::string(to_string(k)));
      }
    }
  }

  double worst_ratio = 0.0;
  for (int i = 0; i < 5; ++i) {
    Image ir = random_image(24, 24, ColorSpace::Gray, 900 + i, 0.2, 0.8);
    DegradationSpec spec;
    spec.kind = DegradationKind::LowContrastIr;
    spec.contrast_factor = 0.5;
    const double ratio = metric_sd(apply_degradation(ir, spec)) / metric_sd(ir);
    worst_ratio = std::max(worst_ratio, std::abs(ratio - 0.5));
  }
  o.require(worst_ratio <= 1e-12, "SD ratio deviation " + fmt("%.2e", worst_ratio));

  int darker = 0, total = 0;
  for (int i = 0; i < 5; ++i)
    for (std::uint64_t seed : {1u, 2u, 3u}) {
      const auto s = synthetic_scene(32, 32, 700 + i);
      const Image dark =
          apply_degradation(s.vis, DegradationSpec::sample(DegradationKind::LowLight, seed));
      ++total;
      if (mean_luma(dark) < mean_luma(s.vis)) ++darker;
    }
  o.require(darker == total, std::to_string(total - darker) + " low-light fixtures not darker");
  if (o.pass) {
    o.detail = "reruns byte-identical, SD ratio dev " + fmt("%.1e", worst_ratio) + ", " +
               std::to_string(darker) + "/" + std::to_string(total) + " darker";
  }
  return o;
}

HttpRequest post_fuse(std::string body) {
  HttpRequest r;
  r.method = "POST";
  r.path = "/api/fuse";
  r.body = std::move(body);
  return r;
}

Outcome service_contract() {
  Outcome o;
  const auto scene = synthetic_scene(48, 64, 31);
  const json golden = {{"vis_image", base64_encode(encode_png(scene.vis))},
                       {"ir_image", base64_encode(encode_png(scene.ir))},
                       {"text", "the visible image is too dark"},
                       {"session_id", "acceptance"}};
  ServiceConfig cfg;
  cfg.max_request_bytes = 1 << 20;
  FusionService svc(overfit_checkpoint(), TaskCatalog::builtin(),
                    std::make_shared<HashEmbedder>(NetConfig{}.embed_dim), cfg);
  const HttpResponse a = svc.handle(post_fuse(golden.dump()));
  const HttpResponse b = svc.handle(post_fuse(golden.dump()));
  o.require(a.status == 200 && b.status == 200, "golden status " + std::to_string(a.status));
  if (a.status == 200 && b.status == 200) {
    const auto pa = json::parse(a.body).at("fused_image").get<std::string>();
    o.require(pa == json::parse(b.body).at("fused_image").get<std::string>(), "fused PNG differs");
    const Image img = decode_image(base64_decode(pa));
    o.require(img.height() == 48 && img.width() == 64, "fused dimensions");
  }

  json mismatch = golden;
  mismatch["ir_image"] = base64_encode(encode_png(synthetic_scene(40, 64, 1).ir));
  const HttpResponse bad = svc.handle(post_fuse(mismatch.dump()));
  o.require(bad.status == 400 && bad.body.find("dimension mismatch") != std::string::npos,
            "mismatch status " + std::to_string(bad.status));
  o.require(svc.handle(post_fuse("{broken")).status == 400, "malformed JSON not 400");
  o.require(svc.handle(post_fuse(std::string(cfg.max_request_bytes + 1, ' '))).status == 413,
            "oversized body not 413");

  FusionService empty(std::nullopt, TaskCatalog::builtin(),
                      std::make_shared<HashEmbedder>(NetConfig{}.embed_dim));
  o.require(empty.handle(post_fuse(golden.dump())).status == 503, "no model not 503");
  if (o.pass) o.detail = "golden PNG byte-identical, 400/413/503 covered";
  return o;
}

}  // namespace

int main() {
  std::printf("textif acceptance\n");
  report("gradient suite", gradient_suite);
  report("SIGM identity", sigm_identity);
  report("attention invariants", attention_invariants);
  report("metric oracles", metric_oracles);
  report("loss optima", loss_optima);
  report("overfit smoke test", overfit_smoke);
  report("text steering", text_steering);
  report("degradation determinism and monotonicity", degradation);
  report("service contract", service_contract);
  report("primary suite without secondary components", [] {
    return Outcome{true, "built from core, service and tests only"};
  });
  std::printf("%d failed\n", failures);
  return failures == 0 ? 0 : 1;
}
