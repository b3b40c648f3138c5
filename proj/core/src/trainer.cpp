#include "textif/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

#include "textif/error.hpp"
#include "textif/image_io.hpp"
#include "textif/ops.hpp"

namespace textif {

void TrainConfig::validate(const NetConfig& net) const {
  if (!(lr > 0.0)) throw ConfigError("lr must be positive");
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (steps < 0) throw ConfigError("steps must be non-negative");
  if (crop < net.size_multiple() || crop % net.size_multiple() != 0) {
    throw ConfigError("crop " + std::to_string(crop) + " is not a positive multiple of " +
                      std::to_string(net.size_multiple()));
  }
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("betas must lie in [0, 1)");
  }
  if (!(eps > 0.0)) throw ConfigError("eps must be positive");
  if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be non-negative");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"lr", lr},
          {"batch_size", batch_size},
          {"crop", crop},
          {"steps", steps},
          {"weight_decay", weight_decay},
          {"betas", {beta1, beta2}},
          {"eps", eps},
          {"seed", seed},
          {"checkpoint_every", checkpoint_every},
          {"random_flip", random_flip}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  try {
    c.lr = j.value("lr", c.lr);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.crop = j.value("crop", c.crop);
    c.steps = j.value("steps", c.steps);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    if (j.contains("betas")) {
      const auto& b = j.at("betas");
      if (!b.is_array() || b.size() != 2) throw ConfigError("betas must be a pair");
      c.beta1 = b[0].get<double>();
      c.beta2 = b[1].get<double>();
    }
    c.eps = j.value("eps", c.eps);
    c.seed = j.value("seed", c.seed);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    c.random_flip = j.value("random_flip", c.random_flip);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed training config: ") + e.what());
  }
  return c;
}

AdamW::AdamW(const ParamStore& like, double lr, double beta1, double beta2, double eps,
             double weight_decay)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), wd_(weight_decay),
      m_(like.zeros_like()), v_(like.zeros_like()) {}

void AdamW::step(ParamStore& params, const ParamStore& grads) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, t_);
  const double bc2 = 1.0 - std::pow(beta2_, t_);
  for (const std::string& name : params.names()) {
    auto p = params.at(name).values();
    const auto g = grads.at(name).values();
    auto m = m_.at(name).values();
    auto v = v_.at(name).values();
    if (g.size() != p.size()) throw InvalidInput("gradient shape mismatch for " + name);
    for (std::size_t i = 0; i < p.size(); ++i) {
      p[i] -= lr_ * wd_ * p[i];
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
      p[i] -= lr_ * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps_);
    }
  }
}

nlohmann::json ManifestRecord::to_json() const {
  nlohmann::json j;
  j["input_vis_path"] = input_vis_path;
  j["input_ir_path"] = input_ir_path;
  j["target_vis_path"] = target_vis_path;
  j["target_ir_path"] = target_ir_path;
  j["prompt"] = prompt;
  j["task"] = task;
  j["spec"] = spec.to_json();
  return j;
}

ManifestRecord ManifestRecord::from_json(const nlohmann::json& j) {
  ManifestRecord r;
  try {
    r.input_vis_path = j.at("input_vis_path").get<std::string>();
    r.input_ir_path = j.at("input_ir_path").get<std::string>();
    r.target_vis_path = j.at("target_vis_path").get<std::string>();
    r.target_ir_path = j.at("target_ir_path").get<std::string>();
    r.prompt = j.at("prompt").get<std::string>();
    r.task = j.at("task").get<std::string>();
    if (j.contains("spec")) r.spec = DegradationSpec::from_json(j.at("spec"));
  } catch (const nlohmann::json::exception& e) {
    throw InvalidInput(std::string("malformed manifest record: ") + e.what());
  }
  return r;
}

std::string manifest_to_jsonl(const std::vector<ManifestRecord>& records) {
  std::string out;
  for (const auto& r : records) {
    out += r.to_json().dump();
    out += '\n';
  }
  return out;
}

std::vector<ManifestRecord> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot read manifest " + path.string());
  std::vector<ManifestRecord> records;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      records.push_back(ManifestRecord::from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw InvalidInput(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    } catch (const InvalidInput& e) {
      throw InvalidInput(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return records;
}

std::vector<TrainingSample> load_samples(const std::filesystem::path& manifest) {
  const auto records = read_manifest(manifest);
  const auto base = manifest.parent_path();
  auto load = [&](const std::string& p) {
    std::filesystem::path path(p);
    if (path.is_relative()) path = base / path;
    try {
      return load_image(path);
    } catch (const Error& e) {
      throw LoadError("cannot read " + path.string() + ": " + e.what());
    }
  };
  std::vector<TrainingSample> samples;
  for (const auto& r : records) {
    TrainingSample s;
    s.input_vis = load(r.input_vis_path);
    s.input_ir = load(r.input_ir_path);
    s.target_vis = load(r.target_vis_path);
    s.target_ir = load(r.target_ir_path);
    s.prompt = r.prompt;
    s.task = r.task;
    samples.push_back(std::move(s));
  }
  return samples;
}

nlohmann::json StepLog::to_json() const {
  return {{"step", step},       {"l_int", l_int},     {"l_ssim", l_ssim}, {"l_grad", l_grad},
          {"l_color", l_color}, {"l_total", l_total}, {"task", task}};
}

namespace {

Image as_rgb(const Image& img) {
  return img.colorspace() == ColorSpace::Gray ? gray_to_rgb(img) : img;
}

Image as_gray(const Image& img) {
  return img.colorspace() == ColorSpace::Gray ? img : luminance(img);
}

struct PreparedSample {
  Image input_vis, input_ir, target_vis, target_ir;
  TaskProfile profile;
  std::vector<double> embedding;
};

void check_sample(const TrainingSample& s, std::size_t index, int crop) {
  const Image* all[] = {&s.input_vis, &s.input_ir, &s.target_vis, &s.target_ir};
  for (const Image* img : all) {
    if (img->height() != s.input_vis.height() || img->width() != s.input_vis.width()) {
      throw InvalidInput("sample " + std::to_string(index) + " images are not aligned");
    }
  }
  if (s.input_vis.height() < crop || s.input_vis.width() < crop) {
    throw InvalidInput("sample " + std::to_string(index) + " is smaller than the crop size");
  }
}

}  // namespace

TrainResult train(const std::vector<TrainingSample>& data, const NetConfig& net_cfg,
                  const TrainConfig& cfg, const TextEmbedder& embedder,
                  const TaskCatalog& catalog, const TrainCallbacks& callbacks) {
  net_cfg.validate();
  cfg.validate(net_cfg);
  if (data.empty()) throw InvalidInput("training data is empty");
  if (embedder.dim() != net_cfg.embed_dim) {
    throw ConfigError("embedder dimension " + std::to_string(embedder.dim()) +
                      " does not match embed_dim " + std::to_string(net_cfg.embed_dim));
  }

  std::vector<PreparedSample> prepared;
  prepared.reserve(data.size());
  std::map<std::string, std::vector<double>> embeddings;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const TrainingSample& s = data[i];
    check_sample(s, i, cfg.crop);
    PreparedSample p{as_rgb(s.input_vis), as_gray(s.input_ir), as_rgb(s.target_vis),
                     as_gray(s.target_ir), catalog.resolve(s.prompt), {}};
    auto it = embeddings.find(s.prompt);
    if (it == embeddings.end()) {
      it = embeddings.emplace(s.prompt, embedder.embed(s.prompt).vector).first;
    }
    p.embedding = it->second;
    prepared.push_back(std::move(p));
  }

  const FusionNet net(net_cfg);
  TrainResult result;
  result.params = init_params(net_cfg);
  AdamW opt(result.params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay);
  std::mt19937_64 rng(cfg.seed);
  const int d = net_cfg.embed_dim;
  std::vector<std::size_t> order(prepared.size());
  std::size_t cursor = order.size();

  for (int step = 0; step < cfg.steps; ++step) {
    const Bindings bindings = Bindings::leaves(result.params);
    StepLog log;
    log.step = step;
    const double inv_batch = 1.0 / cfg.batch_size;
    for (int b = 0; b < cfg.batch_size; ++b) {
      if (cursor == order.size()) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      const PreparedSample& s = prepared[order[cursor++]];
      const int x0 =
          std::uniform_int_distribution<int>(0, s.input_vis.width() - cfg.crop)(rng);
      const int y0 =
          std::uniform_int_distribution<int>(0, s.input_vis.height() - cfg.crop)(rng);
      const bool flip = cfg.random_flip && std::bernoulli_distribution(0.5)(rng);
      auto view = [&](const Image& img) {
        Image c = crop(img, x0, y0, cfg.crop, cfg.crop);
        return flip ? flip_horizontal(c) : c;
      };
      const Image in_vis = view(s.input_vis), in_ir = view(s.input_ir);
      const Image tg_vis = view(s.target_vis), tg_ir = view(s.target_ir);

      const ag::Var fused =
          net.forward(ag::constant(image_to_tensor(in_vis)), ag::constant(image_to_tensor(in_ir)),
                      ag::constant(Tensor({d}, s.embedding)), bindings);
      const LossTerms terms = total_loss_terms(fused, tg_vis, tg_ir, s.profile);
      const double total = terms.total.item();
      if (!std::isfinite(total)) {
        throw NumericalError("non-finite loss at step " + std::to_string(step));
      }
      ag::backward(terms.total, inv_batch);
      log.l_int += terms.intensity.item() * inv_batch;
      log.l_ssim += terms.ssim.item() * inv_batch;
      log.l_grad += terms.gradient.item() * inv_batch;
      log.l_color += terms.color.item() * inv_batch;
      log.l_total += total * inv_batch;
      if (log.task.empty()) log.task = s.profile.name;
      else if (log.task != s.profile.name) log.task = "mixed";
    }
    ParamStore grads;
    try {
      grads = bindings.gradients();
    } catch (const NumericalError& e) {
      throw NumericalError(std::string(e.what()) + " at step " + std::to_string(step));
    }
    opt.step(result.params, grads);
    if (callbacks.on_step) callbacks.on_step(log);
    result.log.push_back(std::move(log));
    if (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 &&
        callbacks.on_checkpoint) {
      callbacks.on_checkpoint(step + 1, result.params);
    }
  }
  return result;
}

TrainResult train_from_manifest(const std::filesystem::path& manifest,
                                const NetConfig& net_cfg, const TrainConfig& cfg,
                                const std::filesystem::path& out,
                                const std::optional<std::filesystem::path>& log_path,
                                const TextEmbedder& embedder, const TaskCatalog& catalog) {
  const auto samples = load_samples(manifest);
  if (samples.empty()) throw InvalidInput("manifest " + manifest.string() + " has no records");
  std::ofstream log_file;
  if (log_path) {
    log_file.open(*log_path, std::ios::binary | std::ios::trunc);
    if (!log_file) throw Error("cannot write " + log_path->string());
  }
  TrainCallbacks callbacks;
  callbacks.on_step = [&](const StepLog& s) {
    if (log_file.is_open()) log_file << s.to_json().dump() << '\n' << std::flush;
  };
  callbacks.on_checkpoint = [&](int done, const ParamStore& params) {
    auto path = out;
    path.replace_extension(".step" + std::to_string(done) + out.extension().string());
    save_checkpoint(path, net_cfg, params);
  };
  TrainResult result = train(samples, net_cfg, cfg, embedder, catalog, callbacks);
  save_checkpoint(out, net_cfg, result.params);
  return result;
}

InferenceResult infer(const Checkpoint& ckpt, const Image& vis, const Image& ir,
                      std::string_view text, const TextEmbedder& embedder,
                      const TaskCatalog& catalog, bool with_report) {
  if (vis.height() != ir.height() || vis.width() != ir.width()) {
    throw InvalidInput("dimension mismatch: visible " + std::to_string(vis.width()) + "x" +
                       std::to_string(vis.height()) + ", infrared " +
                       std::to_string(ir.width()) + "x" + std::to_string(ir.height()));
  }
  if (embedder.dim() != ckpt.config.embed_dim) {
    throw LoadError("checkpoint embed_dim does not match the text embedder");
  }
  const Image vis_rgb = as_rgb(vis), ir_gray = as_gray(ir);
  const int m = ckpt.config.size_multiple();
  const Image vis_pad = pad_reflect_to_multiple(vis_rgb, m);
  const Image ir_pad = pad_reflect_to_multiple(ir_gray, m);
  InferenceResult r;
  r.profile = resolve_task(text, catalog);
  const FusionNet net(ckpt.config);
  const Image fused = net.fuse(vis_pad, ir_pad, embedder.embed(text), ckpt.params);
  r.fused = crop(fused, 0, 0, vis.width(), vis.height());
  if (with_report) r.report = total_loss(r.fused, vis_rgb, ir_gray, r.profile);
  return r;
}

}  // namespace textif
