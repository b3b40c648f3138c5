#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "textif/autograd.hpp"
#include "textif/image.hpp"
#include "textif/params.hpp"
#include "textif/text_guidance.hpp"

namespace textif {

struct NetConfig {
  int base_channels = 16;
  int levels = 2;
  int heads = 2;
  int decoder_repeats = 2;   // SIGM + block repetitions per decoder level
  int embed_dim = 128;
  int ffn_expansion = 2;     // gated feed-forward hidden = channels * expansion
  int guidance_hidden = 64;  // hidden width of each SIGM head
  std::uint64_t seed = 0;

  /// Throws ConfigError.
  void validate() const;
  int channels_at(int level) const { return base_channels << level; }
  /// Channel count of each SIGM site, deepest level first.
  std::vector<int> stage_channels() const;
  int sigm_sites() const { return levels * decoder_repeats; }
  /// Spatial dims must be divisible by this.
  int size_multiple() const { return 1 << levels; }

  nlohmann::json to_json() const;
  static NetConfig from_json(const nlohmann::json& j);
  bool operator==(const NetConfig&) const = default;
};

/// Every learnable tensor of the network, in a fixed order.
std::vector<ParamSpec> parameter_inventory(const NetConfig& cfg);

/// Deterministic in cfg.seed. Weights are uniform in +-sqrt(3 / fan_in),
/// biases zero, norms identity, attention temperatures one, and the last
/// layer of every SIGM head zero so modulation starts as the identity.
ParamStore init_params(const NetConfig& cfg);

enum class Branch { Visible, Infrared };

/// [C, H, W] tensor of an image's channels.
Tensor image_to_tensor(const Image& img);
/// Clamped image from a [3, H, W] (RGB) or [1, H, W] (gray) tensor.
Image tensor_to_image(const Tensor& t);

/// Dual-encoder cross-attention fusion network with a text-modulated
/// decoder. Stateless apart from its configuration: parameters arrive as
/// Bindings on every call, so one instance can serve concurrent callers.
class FusionNet {
 public:
  explicit FusionNet(NetConfig cfg);

  const NetConfig& config() const { return cfg_; }

  /// One feature map per level: [C * 2^l, H / 2^l, W / 2^l].
  std::vector<ag::Var> encode(const ag::Var& image, Branch branch,
                              const Bindings& p) const;

  /// Query-exchanged spatial cross attention of the deepest features,
  /// concatenated and projected back to the working width.
  ag::Var cross_fusion(const ag::Var& f_vis, const ag::Var& f_ir,
                       const Bindings& p) const;

  /// Self-attention, then per level `decoder_repeats` x [SIGM -> block],
  /// upsampling with encoder skips between levels, then a 3x3 conv +
  /// sigmoid head. `mods == nullopt` bypasses SIGM entirely.
  ag::Var decode(const ag::Var& fused, std::span<const ag::Var> vis_features,
                 std::span<const ag::Var> ir_features,
                 std::optional<std::span<const Modulation>> mods,
                 const Bindings& p) const;

  /// Full pipeline on [3, H, W] / [1, H, W] inputs and a [D] embedding.
  ag::Var forward(const ag::Var& vis, const ag::Var& ir, const ag::Var& text,
                  const Bindings& p, bool bypass_sigm = false) const;

  /// Inference convenience: no gradient recording.
  Image fuse(const Image& vis, const Image& ir, const TextEmbedding& text,
             const ParamStore& params) const;

 private:
  ag::Var transformer_block(const ag::Var& x, const std::string& prefix,
                            const Bindings& p) const;
  void check_inputs(const ag::Var& vis, const ag::Var& ir) const;

  NetConfig cfg_;
};

}  // namespace textif
