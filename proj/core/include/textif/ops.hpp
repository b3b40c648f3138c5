#pragma once

#include <span>
#include <vector>

#include "textif/autograd.hpp"

// Differentiable operations. Feature maps are [C, H, W]; spatial
// convolutions use reflect-101 borders.

namespace textif::ag {

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);

Var sum(const Var& a);
Var mean(const Var& a);
/// mean(|a - target|) over all elements.
Var mean_abs_diff(const Var& a, const Tensor& target);

Var sigmoid(const Var& a);
Var gelu(const Var& a);

/// Concatenation / slicing along the leading dimension.
Var concat0(const std::vector<Var>& parts);
Var slice0(const Var& a, int start, int count);

/// Pointwise convolution. `w` is [Co, Ci]; `b` may be undefined.
Var conv1x1(const Var& x, const Var& w, const Var& b);
/// Full 3x3 convolution. `w` is [Co, Ci * 9] (kernel-row-major per input channel).
Var conv3x3(const Var& x, const Var& w, const Var& b);
/// Depthwise 3x3 convolution. `w` is [C, 9].
Var dwconv3x3(const Var& x, const Var& w, const Var& b);

/// [C, H, W] -> [4C, H/2, W/2], output channel c*4 + dy*2 + dx.
Var pixel_unshuffle2(const Var& x);
/// Inverse of pixel_unshuffle2.
Var pixel_shuffle2(const Var& x);

/// Layer norm across channels at each pixel, affine per channel.
Var layer_norm_channels(const Var& x, const Var& w, const Var& b,
                        double eps = 1e-5);

/// Transposed (channel) self-attention over a stacked [3C, H, W] q/k/v
/// input. Queries and keys are L2-normalized along the spatial axis and the
/// logits scaled by a learnable per-head temperature.
Var channel_attention(const Var& qkv, const Var& temperature, int heads);

/// Spatial attention: tokens are pixels. Each query token of `q` attends
/// over the tokens of `k`/`v`; logits are scaled by 1/sqrt(C / heads).
Var spatial_attention(const Var& q, const Var& k, const Var& v, int heads);

/// Row-stochastic attention matrices [N, N] (one per head) that
/// spatial_attention would use. Not differentiable.
std::vector<Tensor> spatial_attention_weights(const Tensor& q, const Tensor& k,
                                              int heads);

/// (1 + gamma) * x + beta with per-channel broadcast.
Var modulate(const Var& x, const Var& gamma, const Var& beta);

/// Dense layer on a vector: w [O, D], b [O].
Var linear(const Var& x, const Var& w, const Var& b);

/// BT.601 luma of a [3, H, W] RGB map -> [1, H, W].
Var rgb_to_luma(const Var& rgb);
/// BT.601 chroma (Cb, Cr with +0.5 offset) of a [3, H, W] map -> [2, H, W].
Var rgb_to_cbcr(const Var& rgb);

/// Separable filtering of each channel with a symmetric 1-D kernel of odd
/// length, reflect-101 borders.
Var separable_filter(const Var& x, std::span<const double> kernel);

/// Sobel gradient magnitude (kernels normalized by 1/8) of each channel.
/// The subgradient at zero magnitude is taken as zero.
Var sobel_magnitude(const Var& x);

}  // namespace textif::ag
