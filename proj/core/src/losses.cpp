#include "textif/losses.hpp"

#include <algorithm>
#include <cmath>

#include <nlohmann/json.hpp>

#include "textif/error.hpp"
#include "textif/fusion_net.hpp"
#include "textif/ops.hpp"

namespace textif {

namespace {

void check_triplet(const ag::Var& fused, const Image& vis_g, const Image& ir_g) {
  if (fused.value().rank() != 3 || fused.dim(0) != 3) {
    throw InvalidInput("fused image must be a [3, H, W] RGB map");
  }
  if (vis_g.colorspace() != ColorSpace::Rgb) throw InvalidInput("visible reference must be RGB");
  if (ir_g.colorspace() != ColorSpace::Gray) throw InvalidInput("infrared reference must be gray");
  const int h = fused.dim(1), w = fused.dim(2);
  if (vis_g.height() != h || vis_g.width() != w || ir_g.height() != h || ir_g.width() != w) {
    throw InvalidInput("fused and reference images differ in size");
  }
}

Tensor gray_tensor(const Image& img) { return image_to_tensor(luminance(img)); }

}  // namespace

std::vector<double> gaussian_kernel(int size, double sigma) {
  if (size < 1 || size % 2 == 0) throw InvalidInput("gaussian kernel size must be odd");
  std::vector<double> k(size);
  const int r = size / 2;
  double total = 0.0;
  for (int i = -r; i <= r; ++i) {
    k[i + r] = std::exp(-(i * i) / (2.0 * sigma * sigma));
    total += k[i + r];
  }
  for (double& v : k) v /= total;
  return k;
}

ag::Var ssim_index(const ag::Var& x, const Tensor& reference) {
  if (x.shape() != reference.shape() || x.value().rank() != 3 || x.dim(0) != 1) {
    throw InvalidInput("ssim expects two [1, H, W] maps of equal size");
  }
  constexpr int kRadius = kSsimWindow / 2;
  if (x.dim(1) <= kRadius || x.dim(2) <= kRadius) {
    throw InvalidInput("image too small for the SSIM window (need at least " +
                       std::to_string(kRadius + 1) + " pixels per side)");
  }
  static const std::vector<double> window = gaussian_kernel(kSsimWindow, kSsimSigma);
  const ag::Var y = ag::constant(reference);
  const auto mu_x = ag::separable_filter(x, window);
  const auto mu_y = ag::separable_filter(y, window);
  const auto mu_xx = ag::mul(mu_x, mu_x);
  const auto mu_yy = ag::mul(mu_y, mu_y);
  const auto mu_xy = ag::mul(mu_x, mu_y);
  const auto s_xx = ag::sub(ag::separable_filter(ag::mul(x, x), window), mu_xx);
  const auto s_yy = ag::sub(ag::separable_filter(ag::mul(y, y), window), mu_yy);
  const auto s_xy = ag::sub(ag::separable_filter(ag::mul(x, y), window), mu_xy);
  const auto num = ag::mul(ag::add_scalar(ag::scale(mu_xy, 2.0), kSsimC1),
                           ag::add_scalar(ag::scale(s_xy, 2.0), kSsimC2));
  const auto den = ag::mul(ag::add_scalar(ag::add(mu_xx, mu_yy), kSsimC1),
                           ag::add_scalar(ag::add(s_xx, s_yy), kSsimC2));
  return ag::mean(ag::div(num, den));
}

double ssim(const Image& a, const Image& b) {
  ag::NoGradGuard guard;
  return ssim_index(ag::constant(gray_tensor(a)), gray_tensor(b)).item();
}

ag::Var intensity_loss(const ag::Var& fused, const Image& vis_g, const Image& ir_g) {
  check_triplet(fused, vis_g, ir_g);
  Tensor target = image_to_tensor(vis_g);
  const std::size_t n = vis_g.pixel_count();
  const auto ir = ir_g.channel(0);
  for (int c = 0; c < 3; ++c) {
    for (std::size_t i = 0; i < n; ++i) target[c * n + i] = std::max(target[c * n + i], ir[i]);
  }
  return ag::mean_abs_diff(fused, target);
}

ag::Var ssim_loss(const ag::Var& fused, const Image& vis_g, const Image& ir_g,
                  double delta_ir) {
  check_triplet(fused, vis_g, ir_g);
  if (!(delta_ir >= 0.0 && delta_ir <= 1.0)) throw InvalidInput("delta_ir must lie in [0, 1]");
  const auto y = ag::rgb_to_luma(fused);
  const auto vis_term = ag::add_scalar(ag::scale(ssim_index(y, gray_tensor(vis_g)), -1.0), 1.0);
  if (delta_ir == 0.0) return vis_term;
  const auto ir_term = ag::add_scalar(ag::scale(ssim_index(y, gray_tensor(ir_g)), -1.0), 1.0);
  return ag::add(vis_term, ag::scale(ir_term, delta_ir));
}

ag::Var max_gradient_loss(const ag::Var& fused, const Image& vis_g, const Image& ir_g) {
  check_triplet(fused, vis_g, ir_g);
  const auto gv = sobel_gradient(luminance(vis_g)).magnitude;
  const auto gi = sobel_gradient(ir_g).magnitude;
  Tensor target({1, vis_g.height(), vis_g.width()});
  for (std::size_t i = 0; i < target.size(); ++i) {
    target[i] = std::max(gv.values[i], gi.values[i]);
  }
  return ag::mean_abs_diff(ag::sobel_magnitude(ag::rgb_to_luma(fused)), target);
}

ag::Var color_loss(const ag::Var& fused, const Image& vis_g) {
  if (fused.value().rank() != 3 || fused.dim(0) != 3) {
    throw InvalidInput("fused image must be a [3, H, W] RGB map");
  }
  if (vis_g.colorspace() != ColorSpace::Rgb) throw InvalidInput("color loss needs an RGB reference");
  if (vis_g.height() != fused.dim(1) || vis_g.width() != fused.dim(2)) {
    throw InvalidInput("fused and reference images differ in size");
  }
  const Image ycc = rgb_to_ycbcr(vis_g);
  const auto d = ycc.data();
  Tensor target({2, vis_g.height(), vis_g.width()},
                std::vector<double>(d.begin() + static_cast<std::ptrdiff_t>(ycc.pixel_count()), d.end()));
  return ag::mean_abs_diff(ag::rgb_to_cbcr(fused), target);
}

LossTerms total_loss_terms(const ag::Var& fused, const Image& vis_g, const Image& ir_g,
                           const TaskProfile& profile) {
  profile.validate();
  LossTerms t;
  t.intensity = intensity_loss(fused, vis_g, ir_g);
  t.ssim = ssim_loss(fused, vis_g, ir_g, profile.delta_ir);
  t.gradient = max_gradient_loss(fused, vis_g, ir_g);
  t.color = color_loss(fused, vis_g);
  t.total = ag::add(ag::add(ag::scale(t.intensity, profile.alpha_int),
                            ag::scale(t.ssim, profile.alpha_ssim)),
                    ag::add(ag::scale(t.gradient, profile.alpha_grad),
                            ag::scale(t.color, profile.alpha_color)));
  return t;
}

LossReport LossReport::from_terms(const LossTerms& terms, const TaskProfile& profile) {
  return {terms.intensity.item(), terms.ssim.item(), terms.gradient.item(),
          terms.color.item(), terms.total.item(), profile};
}

nlohmann::json LossReport::to_json() const {
  return {{"l_int", l_int},     {"l_ssim", l_ssim},   {"l_grad", l_grad},
          {"l_color", l_color}, {"l_total", l_total}, {"task", profile.name}};
}

LossReport total_loss(const Image& fused, const Image& vis_g, const Image& ir_g,
                      const TaskProfile& profile) {
  if (fused.colorspace() != ColorSpace::Rgb) throw InvalidInput("fused image must be RGB");
  ag::NoGradGuard guard;
  const auto terms = total_loss_terms(ag::constant(image_to_tensor(fused)), vis_g, ir_g, profile);
  return LossReport::from_terms(terms, profile);
}

}  // namespace textif
