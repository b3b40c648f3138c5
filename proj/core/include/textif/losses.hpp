#pragma once

#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "textif/autograd.hpp"
#include "textif/image.hpp"
#include "textif/text_guidance.hpp"

namespace textif {

// Fusion losses. `fused` is a [3, H, W] RGB map in [0,1]; the references are
// the clean visible (RGB) and infrared (gray) images of the same size.

inline constexpr int kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;
inline constexpr double kSsimC1 = 0.01 * 0.01;
inline constexpr double kSsimC2 = 0.03 * 0.03;

/// Normalized 1-D Gaussian of odd length.
std::vector<double> gaussian_kernel(int size, double sigma);

/// Mean SSIM between a [1, H, W] variable and a fixed [1, H, W] reference
/// (11x11 Gaussian window, reflect borders). Needs H, W >= 6.
ag::Var ssim_index(const ag::Var& x, const Tensor& reference);

/// Mean SSIM of two gray images.
double ssim(const Image& a, const Image& b);

ag::Var intensity_loss(const ag::Var& fused, const Image& vis_g, const Image& ir_g);
ag::Var ssim_loss(const ag::Var& fused, const Image& vis_g, const Image& ir_g,
                  double delta_ir);
ag::Var max_gradient_loss(const ag::Var& fused, const Image& vis_g, const Image& ir_g);
ag::Var color_loss(const ag::Var& fused, const Image& vis_g);

struct LossTerms {
  ag::Var intensity;
  ag::Var ssim;
  ag::Var gradient;
  ag::Var color;
  ag::Var total;
};

LossTerms total_loss_terms(const ag::Var& fused, const Image& vis_g, const Image& ir_g,
                           const TaskProfile& profile);

struct LossReport {
  double l_int = 0.0;
  double l_ssim = 0.0;
  double l_grad = 0.0;
  double l_color = 0.0;
  double l_total = 0.0;
  TaskProfile profile;

  static LossReport from_terms(const LossTerms& terms, const TaskProfile& profile);
  nlohmann::json to_json() const;
};

/// Value-only evaluation on images.
LossReport total_loss(const Image& fused, const Image& vis_g, const Image& ir_g,
                      const TaskProfile& profile);

}  // namespace textif
