#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>

#include <nlohmann/json.hpp>

#include "gradcheck.hpp"
#include "textif/degrade.hpp"
#include "textif/error.hpp"
#include "textif/fusion_net.hpp"
#include "textif/ops.hpp"
#include "textif/text_guidance.hpp"

using namespace textif;
using textif::testing::random_tensor;

namespace {

double norm(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

std::string random_text(std::mt19937_64& rng) {
  static const std::string alphabet = "abcdefghijklmnopqrstuvwxyz ABCXYZ,.!?-0123456789";
  std::uniform_int_distribution<int> len(1, 60);
  std::uniform_int_distribution<std::size_t> pick(0, alphabet.size() - 1);
  std::string s;
  const int n = len(rng);
  for (int i = 0; i < n; ++i) s.push_back(alphabet[pick(rng)]);
  return s;
}

}  // namespace

TEST(Tokenize, LowercasesAndSplitsOnPunctuation) {
  EXPECT_EQ(tokenize("Fuse the  Images."), (std::vector<std::string>{"fuse", "the", "images"}));
  EXPECT_EQ(tokenize("low-light,night"), (std::vector<std::string>{"low", "light", "night"}));
  EXPECT_TRUE(tokenize(" .,! ").empty());
}

TEST(HashEmbedder, Deterministic) {
  const HashEmbedder a, b;
  const auto e1 = a.embed("the visible image is dark");
  EXPECT_EQ(e1.vector, a.embed("the visible image is dark").vector);
  EXPECT_EQ(e1.vector, b.embed("the visible image is dark").vector);
  EXPECT_EQ(e1.source_text, "the visible image is dark");
}

TEST(HashEmbedder, CaseAndPunctuationInsensitive) {
  const HashEmbedder e;
  EXPECT_EQ(e.embed("fuse the images").vector, e.embed("Fuse the images.").vector);
}

TEST(HashEmbedder, UnitNormForRandomStrings) {
  const HashEmbedder e;
  std::mt19937_64 rng(5);
  for (int i = 0; i < 50; ++i) {
    const std::string s = random_text(rng);
    const auto v = e.embed(s).vector;
    ASSERT_EQ(v.size(), 128u);
    EXPECT_NEAR(norm(v), 1.0, 1e-6) << s;
  }
}

TEST(HashEmbedder, SingleTokenIsSignVectorOverSqrtD) {
  const HashEmbedder e(64);
  for (double v : e.embed("night").vector) EXPECT_NEAR(std::abs(v), 1.0 / 8.0, 1e-15);
}

TEST(HashEmbedder, BagOfTokensIgnoresOrder) {
  const HashEmbedder e;
  EXPECT_EQ(e.embed("dark visible image").vector, e.embed("image visible dark").vector);
  EXPECT_NE(e.embed("dark visible image").vector, e.embed("noisy infrared image").vector);
}

TEST(HashEmbedder, SeedAndDimChangeTheEmbedding) {
  EXPECT_NE(HashEmbedder(128, 1).embed("fuse").vector, HashEmbedder(128, 2).embed("fuse").vector);
  EXPECT_EQ(HashEmbedder(32).embed("fuse").vector.size(), 32u);
  EXPECT_NE(HashEmbedder(128, 1).state(), HashEmbedder(128, 2).state());
}

TEST(HashEmbedder, RejectsEmptyTextAndBadDim) {
  const HashEmbedder e;
  EXPECT_THROW(e.embed(""), InvalidInput);
  EXPECT_THROW(HashEmbedder(0), ConfigError);
  EXPECT_NEAR(norm(e.embed("?!").vector), 1.0, 1e-12);
}

TEST(ResolveTask, Examples) {
  EXPECT_EQ(resolve_task("the visible image is dark, please enhance").name, "low_light");
  EXPECT_EQ(resolve_task("remove the noise in infrared").name, "denoise");
  EXPECT_EQ(resolve_task("fuse").name, "default");
  EXPECT_EQ(resolve_task("completely unrelated words").name, "default");
  EXPECT_THROW(resolve_task(""), InvalidInput);
}

TEST(ResolveTask, PhraseBeatsSingleWord) {
  EXPECT_EQ(resolve_task("the infrared has low contrast").name, "low_contrast");
  EXPECT_EQ(resolve_task("the picture is too bright").name, "overexposure");
}

TEST(ResolveTask, EveryKeywordResolvesToItsTask) {
  for (const TaskEntry& e : TaskCatalog::builtin().entries()) {
    for (const std::string& k : e.keywords) {
      EXPECT_EQ(resolve_task(k).name, e.task_name) << k;
      EXPECT_EQ(resolve_task("Please handle: " + k + "!").name, e.task_name) << k;
    }
  }
}

TEST(ResolveTask, SampledPromptsMatchTheirDegradationTask) {
  const TaskCatalog& catalog = TaskCatalog::builtin();
  const Image vis(8, 8, ColorSpace::Rgb), ir(8, 8, ColorSpace::Gray);
  for (auto kind : {DegradationKind::None, DegradationKind::LowLight,
                    DegradationKind::Overexposure, DegradationKind::NoiseIr,
                    DegradationKind::LowContrastIr}) {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      const TrainingSample s = make_pair(vis, ir, DegradationSpec::sample(kind, seed), catalog);
      ASSERT_EQ(s.task, task_for(kind));
      EXPECT_EQ(catalog.resolve(s.prompt).name, s.task) << s.prompt;
    }
  }
}

TEST(ResolveTask, SynonymsShareAProfile) {
  const TaskCatalog& catalog = TaskCatalog::builtin();
  for (const TaskEntry& e : catalog.entries()) {
    std::set<std::string> names;
    for (const std::string& p : e.prompts) names.insert(catalog.resolve(p).name);
    for (const std::string& k : e.keywords) EXPECT_EQ(catalog.resolve(k), e.profile);
    EXPECT_EQ(names, std::set<std::string>{e.task_name});
  }
}

TEST(TaskCatalog, CanonicalJsonRoundTrips) {
  const TaskCatalog& c = TaskCatalog::builtin();
  const TaskCatalog again = TaskCatalog::from_json(c.canonical_json());
  EXPECT_EQ(again.canonical_json(), c.canonical_json());
  const auto j = nlohmann::json::parse(c.canonical_json());
  ASSERT_TRUE(j.is_array());
  EXPECT_EQ(j.size(), 5u);
  EXPECT_EQ(j.dump(), c.canonical_json());
}

TEST(TaskCatalog, DefaultProfileValues) {
  const TaskProfile p = TaskCatalog::builtin().entry("default").profile;
  EXPECT_EQ(p, (TaskProfile{"default", 1.0, 1.0, 1.0, 1.0, 0.5}));
  EXPECT_EQ(TaskCatalog::builtin().entry("low_light").profile.alpha_int, 2.0);
  EXPECT_EQ(TaskCatalog::builtin().entry("denoise").profile.alpha_ssim, 2.0);
}

TEST(TaskCatalog, RejectsInvalidDocuments) {
  EXPECT_THROW(TaskCatalog::from_json("{"), LoadError);
  EXPECT_THROW(TaskCatalog::from_json("[]"), LoadError);
  EXPECT_THROW(TaskCatalog::from_json(R"([{"task_name":"default","keywords":[],"prompts":["x"],
      "profile":{"alpha_int":-1,"alpha_ssim":1,"alpha_grad":1,"alpha_color":1,"delta_ir":0.5}}])"),
               LoadError);
  EXPECT_THROW(TaskCatalog::builtin().entry("nope"), InvalidInput);
}

TEST(TaskProfile, Validation) {
  EXPECT_NO_THROW(TaskProfile{}.validate());
  EXPECT_THROW((TaskProfile{"x", 0, 0, 0, 0, 0.5}.validate()), ConfigError);
  EXPECT_THROW((TaskProfile{"x", 1, 1, 1, 1, 1.5}.validate()), ConfigError);
  EXPECT_THROW((TaskProfile{"x", 1, -1, 1, 1, 0.5}.validate()), ConfigError);
  const TaskProfile s = TaskProfile{}.scaled(2.0);
  EXPECT_EQ(s.alpha_int, 2.0);
  EXPECT_EQ(s.delta_ir, 0.5);
}

TEST(SigmModulate, IdentityAtZero) {
  const Tensor f = random_tensor({3, 4, 5}, 1);
  EXPECT_EQ(sigm_modulate(f, {std::vector<double>(3, 0.0), std::vector<double>(3, 0.0), 0}), f);
}

TEST(SigmModulate, GammaOneDoubles) {
  const Tensor f = random_tensor({2, 3, 3}, 2);
  const Tensor y = sigm_modulate(f, {std::vector<double>(2, 1.0), std::vector<double>(2, 0.0), 0});
  for (std::size_t i = 0; i < f.size(); ++i) EXPECT_EQ(y[i], 2.0 * f[i]);
}

TEST(SigmModulate, MatchesElementwiseLoop) {
  const Tensor f = random_tensor({2, 3, 3}, 3);
  const ModulationParams m{{0.3, -0.7}, {0.25, -1.5}, 0};
  const Tensor y = sigm_modulate(f, m);
  for (int c = 0; c < 2; ++c)
    for (int i = 0; i < 9; ++i)
      EXPECT_NEAR(y[c * 9 + i], (1.0 + m.gamma[c]) * f[c * 9 + i] + m.beta[c], 1e-7);
}

TEST(SigmModulate, LinearInGammaBeta) {
  const Tensor f = random_tensor({2, 2, 2}, 4);
  const ModulationParams a{{0.1, 0.2}, {0.3, 0.4}, 0}, b{{-0.5, 0.6}, {0.7, -0.8}, 0};
  const ModulationParams ab{{-0.4, 0.8}, {1.0, -0.4}, 0};
  const ModulationParams zero{{0, 0}, {0, 0}, 0};
  const Tensor ya = sigm_modulate(f, a), yb = sigm_modulate(f, b), yab = sigm_modulate(f, ab),
               y0 = sigm_modulate(f, zero);
  for (std::size_t i = 0; i < f.size(); ++i) EXPECT_NEAR(yab[i], ya[i] + yb[i] - y0[i], 1e-12);
}

TEST(SigmModulate, RejectsLengthMismatch) {
  EXPECT_THROW(sigm_modulate(Tensor({3, 2, 2}), {{0, 0}, {0, 0, 0}, 0}), InvalidInput);
  EXPECT_THROW(sigm_modulate(Tensor({3, 2, 2}), {{0, 0, 0}, {0, 0}, 0}), InvalidInput);
}

TEST(GuidanceMlp, ZeroAtInitialization) {
  const NetConfig cfg;
  const ParamStore params = init_params(cfg);
  const HashEmbedder e;
  ag::NoGradGuard guard;
  const auto mods = to_modulation_params(
      guidance_mlp(ag::constant(Tensor({128}, e.embed("the image is dark").vector)),
                   cfg.stage_channels(), Bindings::constants(params)));
  const auto channels = cfg.stage_channels();
  ASSERT_EQ(mods.size(), channels.size());
  for (std::size_t s = 0; s < mods.size(); ++s) {
    EXPECT_EQ(mods[s].stage_index, static_cast<int>(s));
    EXPECT_EQ(mods[s].gamma, std::vector<double>(channels[s], 0.0));
    EXPECT_EQ(mods[s].beta, std::vector<double>(channels[s], 0.0));
  }
}

TEST(GuidanceMlp, ChunksIntoGammaThenBeta) {
  NetConfig cfg;
  cfg.levels = 1;
  cfg.decoder_repeats = 1;
  cfg.embed_dim = 4;
  cfg.guidance_hidden = 3;
  ParamStore p = init_params(cfg);
  const int c = cfg.stage_channels()[0];
  Tensor& b2 = p.at(guidance_param(0, "fc2.b"));
  for (int i = 0; i < 2 * c; ++i) b2[i] = i;
  ag::NoGradGuard guard;
  const auto m = to_modulation_params(guidance_mlp(ag::constant(Tensor({4}, 0.5)),
                                                   cfg.stage_channels(), Bindings::constants(p)));
  ASSERT_EQ(m.size(), 1u);
  for (int i = 0; i < c; ++i) {
    EXPECT_EQ(m[0].gamma[i], i);
    EXPECT_EQ(m[0].beta[i], c + i);
  }
}

TEST(GuidanceMlp, MatchesHandComputedMlp) {
  NetConfig cfg;
  cfg.base_channels = 2;
  cfg.heads = 1;
  cfg.levels = 1;
  cfg.decoder_repeats = 1;
  cfg.embed_dim = 3;
  cfg.guidance_hidden = 2;
  ParamStore p = init_params(cfg);
  const std::string w1 = guidance_param(0, "fc1.w"), b1 = guidance_param(0, "fc1.b"),
                    w2 = guidance_param(0, "fc2.w"), b2 = guidance_param(0, "fc2.b");
  p.at(w1) = random_tensor({2, 3}, 1);
  p.at(b1) = random_tensor({2}, 2);
  const int c = cfg.stage_channels()[0];
  p.at(w2) = random_tensor({2 * c, 2}, 3);
  p.at(b2) = random_tensor({2 * c}, 4);
  const Tensor x = random_tensor({3}, 5);
  ag::NoGradGuard guard;
  const auto m = to_modulation_params(
      guidance_mlp(ag::constant(x), cfg.stage_channels(), Bindings::constants(p)));
  double h[2];
  for (int j = 0; j < 2; ++j) {
    double a = p.at(b1)[j];
    for (int i = 0; i < 3; ++i) a += p.at(w1)[j * 3 + i] * x[i];
    h[j] = 0.5 * a * (1.0 + std::erf(a / std::sqrt(2.0)));
  }
  ASSERT_EQ(static_cast<int>(m[0].gamma.size()), c);
  for (int o = 0; o < 2 * c; ++o) {
    const double v = p.at(b2)[o] + p.at(w2)[o * 2] * h[0] + p.at(w2)[o * 2 + 1] * h[1];
    EXPECT_NEAR(o < c ? m[0].gamma[o] : m[0].beta[o - c], v, 1e-12);
  }
}

TEST(GuidanceMlp, GradientMatchesFiniteDifferences) {
  NetConfig cfg;
  cfg.base_channels = 4;
  cfg.levels = 1;
  cfg.decoder_repeats = 1;
  cfg.embed_dim = 6;
  cfg.guidance_hidden = 5;
  ParamStore p = init_params(cfg);
  const std::vector<std::string> names{guidance_param(0, "fc1.w"), guidance_param(0, "fc1.b"),
                                       guidance_param(0, "fc2.w"), guidance_param(0, "fc2.b")};
  for (std::size_t i = 0; i < names.size(); ++i) {
    p.at(names[i]) = random_tensor(p.at(names[i]).shape(), 10 + i);
  }
  const Tensor text = random_tensor({6}, 1);
  const Tensor feature = random_tensor({4, 3, 3}, 2);
  const auto objective = [&](const Bindings& b) {
    const auto mods = guidance_mlp(ag::constant(text), cfg.stage_channels(), b);
    return textif::testing::weighted_sum(
        ag::modulate(ag::constant(feature), mods[0].gamma, mods[0].beta));
  };
  const auto r = textif::testing::check_param_gradients(objective, p);
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
}

TEST(GuidanceMlp, RejectsWrongStageWidth) {
  const NetConfig cfg;
  const ParamStore p = init_params(cfg);
  std::vector<int> stages = cfg.stage_channels();
  stages[0] += 1;
  ag::NoGradGuard guard;
  EXPECT_THROW(guidance_mlp(ag::constant(Tensor({128}, 0.1)), stages, Bindings::constants(p)),
               InvalidInput);
}
