#include "textif/fusion_net.hpp"

#include <cmath>
#include <random>

#include <nlohmann/json.hpp>

#include "textif/error.hpp"
#include "textif/ops.hpp"

namespace textif {

void NetConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("invalid net config: " + what); };
  if (base_channels < 1) fail("base_channels must be positive");
  if (heads < 1) fail("heads must be positive");
  if (base_channels % heads != 0) fail("base_channels must be divisible by heads");
  if (levels < 1) fail("levels must be at least 1");
  if (levels > 6) fail("levels must be at most 6");
  if (decoder_repeats < 1) fail("decoder_repeats must be at least 1");
  if (embed_dim < 1) fail("embed_dim must be positive");
  if (ffn_expansion < 1) fail("ffn_expansion must be positive");
  if (guidance_hidden < 1) fail("guidance_hidden must be positive");
}

std::vector<int> NetConfig::stage_channels() const {
  std::vector<int> out;
  for (int l = levels - 1; l >= 0; --l) {
    for (int r = 0; r < decoder_repeats; ++r) out.push_back(channels_at(l));
  }
  return out;
}

nlohmann::json NetConfig::to_json() const {
  return {{"base_channels", base_channels},     {"levels", levels},
          {"heads", heads},                     {"decoder_repeats", decoder_repeats},
          {"embed_dim", embed_dim},             {"ffn_expansion", ffn_expansion},
          {"guidance_hidden", guidance_hidden}, {"seed", seed}};
}

NetConfig NetConfig::from_json(const nlohmann::json& j) {
  NetConfig c;
  try {
    c.base_channels = j.value("base_channels", c.base_channels);
    c.levels = j.value("levels", c.levels);
    c.heads = j.value("heads", c.heads);
    c.decoder_repeats = j.value("decoder_repeats", c.decoder_repeats);
    c.embed_dim = j.value("embed_dim", c.embed_dim);
    c.ffn_expansion = j.value("ffn_expansion", c.ffn_expansion);
    c.guidance_hidden = j.value("guidance_hidden", c.guidance_hidden);
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid net config: ") + e.what());
  }
  c.validate();
  return c;
}

namespace {

void add_block_specs(std::vector<ParamSpec>& out, const std::string& prefix, int c,
                     const NetConfig& cfg) {
  const int hid = c * cfg.ffn_expansion;
  auto add = [&](const std::string& leaf, std::vector<int> shape, InitKind init, int fan_in = 1) {
    out.push_back({prefix + "." + leaf, std::move(shape), init, fan_in});
  };
  add("norm1.w", {c}, InitKind::Ones);
  add("norm1.b", {c}, InitKind::Zeros);
  add("attn.qkv.w", {3 * c, c}, InitKind::FanInUniform, c);
  add("attn.qkv.b", {3 * c}, InitKind::Zeros);
  add("attn.dw.w", {3 * c, 9}, InitKind::FanInUniform, 9);
  add("attn.dw.b", {3 * c}, InitKind::Zeros);
  add("attn.temp", {cfg.heads}, InitKind::Ones);
  add("attn.proj.w", {c, c}, InitKind::FanInUniform, c);
  add("attn.proj.b", {c}, InitKind::Zeros);
  add("norm2.w", {c}, InitKind::Ones);
  add("norm2.b", {c}, InitKind::Zeros);
  add("ffn.in.w", {2 * hid, c}, InitKind::FanInUniform, c);
  add("ffn.in.b", {2 * hid}, InitKind::Zeros);
  add("ffn.dw.w", {2 * hid, 9}, InitKind::FanInUniform, 9);
  add("ffn.dw.b", {2 * hid}, InitKind::Zeros);
  add("ffn.out.w", {c, hid}, InitKind::FanInUniform, hid);
  add("ffn.out.b", {c}, InitKind::Zeros);
}

void add_conv(std::vector<ParamSpec>& out, const std::string& prefix, int co, int fan_in) {
  out.push_back({prefix + ".w", {co, fan_in}, InitKind::FanInUniform, fan_in});
  out.push_back({prefix + ".b", {co}, InitKind::Zeros, 1});
}

const char* branch_name(Branch b) { return b == Branch::Visible ? "vis" : "ir"; }

}  // namespace

std::vector<ParamSpec> parameter_inventory(const NetConfig& cfg) {
  cfg.validate();
  std::vector<ParamSpec> out;
  const int deepest = cfg.levels - 1;
  for (Branch b : {Branch::Visible, Branch::Infrared}) {
    const std::string pre = std::string("enc.") + branch_name(b);
    const int in_ch = b == Branch::Visible ? 3 : 1;
    add_conv(out, pre + ".embed", cfg.channels_at(0), in_ch * 9);
    for (int l = 0; l < cfg.levels; ++l) {
      add_block_specs(out, pre + ".l" + std::to_string(l), cfg.channels_at(l), cfg);
      if (l < deepest) {
        add_conv(out, pre + ".down" + std::to_string(l), cfg.channels_at(l + 1),
                 4 * cfg.channels_at(l));
      }
    }
  }
  const int cd = cfg.channels_at(deepest);
  add_conv(out, "cross.vis.qkv", 3 * cd, cd);
  add_conv(out, "cross.ir.qkv", 3 * cd, cd);
  add_conv(out, "cross.proj", cd, 2 * cd);
  add_block_specs(out, "dec.se_att", cd, cfg);
  for (int l = deepest; l >= 0; --l) {
    const std::string lvl = std::to_string(l);
    if (l < deepest) {
      add_conv(out, "dec.up" + lvl, 4 * cfg.channels_at(l), cfg.channels_at(l + 1));
      add_conv(out, "dec.skip" + lvl, cfg.channels_at(l), 3 * cfg.channels_at(l));
    }
    for (int r = 0; r < cfg.decoder_repeats; ++r) {
      add_block_specs(out, "dec.l" + lvl + ".r" + std::to_string(r), cfg.channels_at(l), cfg);
    }
  }
  add_conv(out, "head", 3, cfg.channels_at(0) * 9);
  const auto stages = cfg.stage_channels();
  for (std::size_t s = 0; s < stages.size(); ++s) {
    const int site = static_cast<int>(s);
    out.push_back({guidance_param(site, "fc1.w"), {cfg.guidance_hidden, cfg.embed_dim},
                   InitKind::FanInUniform, cfg.embed_dim});
    out.push_back({guidance_param(site, "fc1.b"), {cfg.guidance_hidden}, InitKind::Zeros, 1});
    out.push_back({guidance_param(site, "fc2.w"), {2 * stages[s], cfg.guidance_hidden},
                   InitKind::Zeros, cfg.guidance_hidden});
    out.push_back({guidance_param(site, "fc2.b"), {2 * stages[s]}, InitKind::Zeros, 1});
  }
  return out;
}

ParamStore init_params(const NetConfig& cfg) {
  std::mt19937_64 rng(cfg.seed);
  ParamStore store;
  for (const ParamSpec& spec : parameter_inventory(cfg)) {
    Tensor t(spec.shape);
    switch (spec.init) {
      case InitKind::Zeros: break;
      case InitKind::Ones: std::fill(t.values().begin(), t.values().end(), 1.0); break;
      case InitKind::FanInUniform: {
        const double bound = std::sqrt(3.0 / spec.fan_in);
        std::uniform_real_distribution<double> dist(-bound, bound);
        for (double& v : t.values()) v = dist(rng);
        break;
      }
    }
    store.add(spec.name, std::move(t));
  }
  return store;
}

Tensor image_to_tensor(const Image& img) {
  const auto d = img.data();
  return Tensor({img.channels(), img.height(), img.width()},
                std::vector<double>(d.begin(), d.end()));
}

Image tensor_to_image(const Tensor& t) {
  if (t.rank() != 3 || (t.dim(0) != 1 && t.dim(0) != 3)) {
    throw InvalidInput("tensor_to_image expects [1|3, H, W], got " + t.shape_string());
  }
  Image img(t.dim(1), t.dim(2), t.dim(0) == 1 ? ColorSpace::Gray : ColorSpace::Rgb,
            std::vector<double>(t.values().begin(), t.values().end()));
  img.clamp();
  return img;
}

FusionNet::FusionNet(NetConfig cfg) : cfg_(cfg) { cfg_.validate(); }

ag::Var FusionNet::transformer_block(const ag::Var& x, const std::string& prefix,
                                     const Bindings& p) const {
  auto P = [&](const char* leaf) -> const ag::Var& { return p[prefix + "." + leaf]; };
  const int c = x.dim(0);
  const int hid = c * cfg_.ffn_expansion;

  auto h = ag::layer_norm_channels(x, P("norm1.w"), P("norm1.b"));
  h = ag::conv1x1(h, P("attn.qkv.w"), P("attn.qkv.b"));
  h = ag::dwconv3x3(h, P("attn.dw.w"), P("attn.dw.b"));
  h = ag::channel_attention(h, P("attn.temp"), cfg_.heads);
  h = ag::conv1x1(h, P("attn.proj.w"), P("attn.proj.b"));
  auto y = ag::add(x, h);

  auto f = ag::layer_norm_channels(y, P("norm2.w"), P("norm2.b"));
  f = ag::conv1x1(f, P("ffn.in.w"), P("ffn.in.b"));
  f = ag::dwconv3x3(f, P("ffn.dw.w"), P("ffn.dw.b"));
  auto gated = ag::mul(ag::gelu(ag::slice0(f, 0, hid)), ag::slice0(f, hid, hid));
  f = ag::conv1x1(gated, P("ffn.out.w"), P("ffn.out.b"));
  return ag::add(y, f);
}

std::vector<ag::Var> FusionNet::encode(const ag::Var& image, Branch branch,
                                       const Bindings& p) const {
  const int expect = branch == Branch::Visible ? 3 : 1;
  if (image.value().rank() != 3 || image.dim(0) != expect) {
    throw InvalidInput(std::string(branch == Branch::Visible ? "visible" : "infrared") +
                       " input must have " + std::to_string(expect) + " channel(s), got " +
                       shape_to_string(image.shape()));
  }
  const int m = cfg_.size_multiple();
  if (image.dim(1) % m != 0 || image.dim(2) % m != 0) {
    throw InvalidInput("input dimensions must be divisible by " + std::to_string(m));
  }
  const std::string pre = std::string("enc.") + branch_name(branch);
  std::vector<ag::Var> feats;
  auto x = ag::conv3x3(image, p[pre + ".embed.w"], p[pre + ".embed.b"]);
  for (int l = 0; l < cfg_.levels; ++l) {
    x = transformer_block(x, pre + ".l" + std::to_string(l), p);
    feats.push_back(x);
    if (l + 1 < cfg_.levels) {
      const std::string down = pre + ".down" + std::to_string(l);
      x = ag::conv1x1(ag::pixel_unshuffle2(x), p[down + ".w"], p[down + ".b"]);
    }
  }
  return feats;
}

ag::Var FusionNet::cross_fusion(const ag::Var& f_vis, const ag::Var& f_ir,
                                const Bindings& p) const {
  if (f_vis.shape() != f_ir.shape()) {
    throw InvalidInput("cross fusion: feature dimension mismatch " +
                       shape_to_string(f_vis.shape()) + " vs " + shape_to_string(f_ir.shape()));
  }
  const int c = f_vis.dim(0);
  auto qkv_v = ag::conv1x1(f_vis, p["cross.vis.qkv.w"], p["cross.vis.qkv.b"]);
  auto qkv_i = ag::conv1x1(f_ir, p["cross.ir.qkv.w"], p["cross.ir.qkv.b"]);
  auto q_v = ag::slice0(qkv_v, 0, c), k_v = ag::slice0(qkv_v, c, c), v_v = ag::slice0(qkv_v, 2 * c, c);
  auto q_i = ag::slice0(qkv_i, 0, c), k_i = ag::slice0(qkv_i, c, c), v_i = ag::slice0(qkv_i, 2 * c, c);
  // Queries are exchanged: visible queries read infrared keys/values and
  // vice versa.
  auto f_from_ir = ag::spatial_attention(q_v, k_i, v_i, cfg_.heads);
  auto f_from_vis = ag::spatial_attention(q_i, k_v, v_v, cfg_.heads);
  return ag::conv1x1(ag::concat0({f_from_ir, f_from_vis}), p["cross.proj.w"], p["cross.proj.b"]);
}

ag::Var FusionNet::decode(const ag::Var& fused, std::span<const ag::Var> vis_features,
                          std::span<const ag::Var> ir_features,
                          std::optional<std::span<const Modulation>> mods,
                          const Bindings& p) const {
  const int deepest = cfg_.levels - 1;
  if (static_cast<int>(vis_features.size()) != cfg_.levels ||
      static_cast<int>(ir_features.size()) != cfg_.levels) {
    throw InvalidInput("decode needs one encoder feature per level");
  }
  if (mods && static_cast<int>(mods->size()) != cfg_.sigm_sites()) {
    throw InvalidInput("decode expects " + std::to_string(cfg_.sigm_sites()) +
                       " modulation sets, got " + std::to_string(mods->size()));
  }
  auto x = transformer_block(fused, "dec.se_att", p);
  int site = 0;
  for (int l = deepest; l >= 0; --l) {
    const std::string lvl = std::to_string(l);
    if (l < deepest) {
      x = ag::pixel_shuffle2(ag::conv1x1(x, p["dec.up" + lvl + ".w"], p["dec.up" + lvl + ".b"]));
      x = ag::conv1x1(ag::concat0({x, vis_features[l], ir_features[l]}),
                      p["dec.skip" + lvl + ".w"], p["dec.skip" + lvl + ".b"]);
    }
    for (int r = 0; r < cfg_.decoder_repeats; ++r, ++site) {
      if (mods) {
        const Modulation& m = (*mods)[site];
        x = ag::modulate(x, m.gamma, m.beta);
      }
      x = transformer_block(x, "dec.l" + lvl + ".r" + std::to_string(r), p);
    }
  }
  return ag::sigmoid(ag::conv3x3(x, p["head.w"], p["head.b"]));
}

void FusionNet::check_inputs(const ag::Var& vis, const ag::Var& ir) const {
  if (vis.value().rank() != 3 || ir.value().rank() != 3 || vis.dim(1) != ir.dim(1) ||
      vis.dim(2) != ir.dim(2)) {
    throw InvalidInput("visible and infrared inputs must share spatial dimensions");
  }
}

ag::Var FusionNet::forward(const ag::Var& vis, const ag::Var& ir, const ag::Var& text,
                           const Bindings& p, bool bypass_sigm) const {
  check_inputs(vis, ir);
  if (text.value().rank() != 1 || text.dim(0) != cfg_.embed_dim) {
    throw InvalidInput("text embedding must have dimension " + std::to_string(cfg_.embed_dim));
  }
  auto f_vis = encode(vis, Branch::Visible, p);
  auto f_ir = encode(ir, Branch::Infrared, p);
  auto fused = cross_fusion(f_vis.back(), f_ir.back(), p);
  if (bypass_sigm) return decode(fused, f_vis, f_ir, std::nullopt, p);
  const auto stages = cfg_.stage_channels();
  const auto mods = guidance_mlp(text, stages, p);
  return decode(fused, f_vis, f_ir, std::span<const Modulation>(mods), p);
}

Image FusionNet::fuse(const Image& vis, const Image& ir, const TextEmbedding& text,
                      const ParamStore& params) const {
  if (vis.colorspace() != ColorSpace::Rgb) throw InvalidInput("visible input must be RGB");
  if (ir.colorspace() != ColorSpace::Gray) throw InvalidInput("infrared input must be gray");
  ag::NoGradGuard no_grad;
  const Bindings p = Bindings::constants(params);
  auto out = forward(ag::constant(image_to_tensor(vis)), ag::constant(image_to_tensor(ir)),
                     ag::constant(Tensor({static_cast<int>(text.vector.size())}, text.vector)),
                     p);
  return tensor_to_image(out.value());
}

}  // namespace textif
