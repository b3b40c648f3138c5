#include "textif/text_guidance.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "textif/error.hpp"
#include "textif/ops.hpp"

namespace textif {

namespace {

constexpr std::string_view kBuiltinCatalog =
#include "textif/builtin_catalog.inc"
    ;

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  std::string cur;
  for (unsigned char c : text) {
    if (std::isspace(c) || std::ispunct(c)) {
      if (!cur.empty()) tokens.push_back(std::exchange(cur, {}));
    } else {
      cur.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  if (!cur.empty()) tokens.push_back(std::move(cur));
  return tokens;
}

HashEmbedder::HashEmbedder(int dim, std::uint64_t seed) : dim_(dim), seed_(seed) {
  if (dim < 1) throw ConfigError("embedding dimension must be positive");
}

TextEmbedding HashEmbedder::embed(std::string_view text) const {
  if (text.empty()) throw InvalidInput("text must be nonempty");
  auto tokens = tokenize(text);
  // Punctuation-only text still needs a well-defined direction.
  if (tokens.empty()) tokens.emplace_back("<empty>");
  std::vector<double> acc(dim_, 0.0);
  for (const std::string& tok : tokens) {
    std::uint64_t state = fnv1a(tok) ^ seed_;
    std::uint64_t bits = 0;
    for (int d = 0; d < dim_; ++d) {
      if (d % 64 == 0) bits = splitmix64(state);
      acc[d] += (bits >> (d % 64)) & 1U ? 1.0 : -1.0;
    }
  }
  double norm = 0.0;
  for (double v : acc) norm += v * v;
  norm = std::sqrt(norm);
  if (norm == 0.0) {
    // Exact cancellation between tokens; fall back to the first token alone.
    return embed(tokens.front() == "<empty>" ? std::string_view("<empty>")
                                             : std::string_view(tokens.front()));
  }
  for (double& v : acc) v /= norm;
  return {std::move(acc), std::string(text)};
}

std::vector<std::uint8_t> HashEmbedder::state() const {
  std::vector<std::uint8_t> out;
  auto put = [&](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  };
  put(static_cast<std::uint64_t>(dim_));
  put(seed_);
  return out;
}

void TaskProfile::validate() const {
  for (double a : {alpha_int, alpha_ssim, alpha_grad, alpha_color}) {
    if (!(a >= 0.0) || !std::isfinite(a)) {
      throw ConfigError("task profile '" + name + "': alphas must be finite and nonnegative");
    }
  }
  if (alpha_int + alpha_ssim + alpha_grad + alpha_color <= 0.0) {
    throw ConfigError("task profile '" + name + "': at least one alpha must be positive");
  }
  if (!(delta_ir >= 0.0 && delta_ir <= 1.0)) {
    throw ConfigError("task profile '" + name + "': delta_ir must lie in [0, 1]");
  }
}

TaskProfile TaskProfile::scaled(double factor) const {
  TaskProfile p = *this;
  p.alpha_int *= factor;
  p.alpha_ssim *= factor;
  p.alpha_grad *= factor;
  p.alpha_color *= factor;
  return p;
}

TaskCatalog TaskCatalog::from_json(std::string_view text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(std::string("task catalog is not valid JSON: ") + e.what());
  }
  if (!doc.is_array() || doc.empty()) throw LoadError("task catalog must be a nonempty list");
  TaskCatalog cat;
  try {
    for (const auto& item : doc) {
      TaskEntry e;
      e.task_name = item.at("task_name").get<std::string>();
      e.keywords = item.at("keywords").get<std::vector<std::string>>();
      const auto& p = item.at("profile");
      e.profile.name = e.task_name;
      e.profile.alpha_int = p.at("alpha_int").get<double>();
      e.profile.alpha_ssim = p.at("alpha_ssim").get<double>();
      e.profile.alpha_grad = p.at("alpha_grad").get<double>();
      e.profile.alpha_color = p.at("alpha_color").get<double>();
      e.profile.delta_ir = p.at("delta_ir").get<double>();
      e.profile.validate();
      if (item.contains("prompts")) e.prompts = item.at("prompts").get<std::vector<std::string>>();
      if (cat.has_task(e.task_name)) throw LoadError("duplicate task " + e.task_name);
      cat.entries_.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(std::string("malformed task catalog: ") + e.what());
  } catch (const ConfigError& e) {
    throw LoadError(e.what());
  }
  if (!cat.has_task("default")) throw LoadError("task catalog needs a 'default' entry");
  cat.canonical_ = doc.dump();
  return cat;
}

TaskCatalog TaskCatalog::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open task catalog " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

std::string_view TaskCatalog::builtin_json() { return kBuiltinCatalog; }

const TaskCatalog& TaskCatalog::builtin() {
  static const TaskCatalog cat = from_json(kBuiltinCatalog);
  return cat;
}

const TaskEntry& TaskCatalog::entry(std::string_view task_name) const {
  for (const TaskEntry& e : entries_) {
    if (e.task_name == task_name) return e;
  }
  throw InvalidInput("unknown task " + std::string(task_name));
}

bool TaskCatalog::has_task(std::string_view task_name) const {
  return std::ranges::any_of(entries_,
                             [&](const TaskEntry& e) { return e.task_name == task_name; });
}

TaskProfile TaskCatalog::resolve(std::string_view text) const {
  const auto tokens = tokenize(text);
  const TaskEntry* best = nullptr;
  std::size_t best_score = 0;
  for (const TaskEntry& e : entries_) {
    std::size_t score = 0;
    for (const std::string& kw : e.keywords) {
      const auto phrase = tokenize(kw);
      if (phrase.empty() || phrase.size() > tokens.size()) continue;
      for (std::size_t i = 0; i + phrase.size() <= tokens.size(); ++i) {
        if (std::equal(phrase.begin(), phrase.end(), tokens.begin() + i)) {
          score += phrase.size();
        }
      }
    }
    if (score > best_score) {
      best_score = score;
      best = &e;
    }
  }
  return best ? best->profile : entry("default").profile;
}

std::string TaskCatalog::canonical_json() const { return canonical_; }

TaskProfile resolve_task(std::string_view text, const TaskCatalog& catalog) {
  if (text.empty()) throw InvalidInput("text must be nonempty");
  return catalog.resolve(text);
}

std::string guidance_param(int site, const char* leaf) {
  return "guide.s" + std::to_string(site) + "." + leaf;
}

std::vector<Modulation> guidance_mlp(const ag::Var& embedding,
                                     std::span<const int> stage_channels,
                                     const Bindings& params) {
  std::vector<Modulation> mods;
  mods.reserve(stage_channels.size());
  for (std::size_t s = 0; s < stage_channels.size(); ++s) {
    const int site = static_cast<int>(s);
    const int c = stage_channels[s];
    const ag::Var& w2 = params[guidance_param(site, "fc2.w")];
    if (w2.dim(0) != 2 * c) {
      throw InvalidInput("guidance head " + std::to_string(site) + " produces " +
                         std::to_string(w2.dim(0)) + " values, stage needs " +
                         std::to_string(2 * c));
    }
    auto hidden = ag::gelu(ag::linear(embedding, params[guidance_param(site, "fc1.w")],
                                      params[guidance_param(site, "fc1.b")]));
    auto out = ag::linear(hidden, w2, params[guidance_param(site, "fc2.b")]);
    mods.push_back({ag::slice0(out, 0, c), ag::slice0(out, c, c)});
  }
  return mods;
}

std::vector<ModulationParams> to_modulation_params(const std::vector<Modulation>& mods) {
  std::vector<ModulationParams> out;
  for (std::size_t i = 0; i < mods.size(); ++i) {
    const auto g = mods[i].gamma.value().values();
    const auto b = mods[i].beta.value().values();
    out.push_back({{g.begin(), g.end()}, {b.begin(), b.end()}, static_cast<int>(i)});
  }
  return out;
}

Tensor sigm_modulate(const Tensor& feature, const ModulationParams& m) {
  const int c = static_cast<int>(m.gamma.size());
  ag::NoGradGuard guard;
  return ag::modulate(ag::constant(feature), ag::constant(Tensor({c}, m.gamma)),
                      ag::constant(Tensor({static_cast<int>(m.beta.size())}, m.beta)))
      .value();
}

}  // namespace textif
