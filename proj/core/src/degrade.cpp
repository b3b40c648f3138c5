#include "textif/degrade.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <random>

#include <nlohmann/json.hpp>

#include "textif/error.hpp"

namespace textif {

namespace {

struct KindInfo {
  DegradationKind kind;
  std::string_view name;
  std::string_view task;
};

constexpr std::array<KindInfo, 5> kKinds = {{
    {DegradationKind::None, "none", "default"},
    {DegradationKind::LowLight, "low_light", "low_light"},
    {DegradationKind::Overexposure, "overexposure", "overexposure"},
    {DegradationKind::NoiseIr, "noise_ir", "denoise"},
    {DegradationKind::LowContrastIr, "low_contrast_ir", "low_contrast"},
}};

const KindInfo& info(DegradationKind kind) {
  for (const auto& k : kKinds) {
    if (k.kind == kind) return k;
  }
  throw InvalidInput("unknown degradation kind");
}

constexpr double kLowLightNoiseSigma = 0.01;

void in_range(double v, double lo, double hi, const char* what) {
  if (!(v >= lo && v <= hi)) {
    throw InvalidInput(std::string(what) + " out of range [" + std::to_string(lo) + ", " +
                       std::to_string(hi) + "]");
  }
}

}  // namespace

std::string_view to_string(DegradationKind kind) { return info(kind).name; }

DegradationKind degradation_from_string(std::string_view name) {
  for (const auto& k : kKinds) {
    if (k.name == name) return k.kind;
  }
  throw InvalidInput("unknown degradation kind '" + std::string(name) + "'");
}

std::string_view task_for(DegradationKind kind) { return info(kind).task; }

DegradationSpec DegradationSpec::sample(DegradationKind kind, std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ 0x5eedULL);
  auto uniform = [&](double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
  };
  DegradationSpec s;
  s.kind = kind;
  s.seed = seed;
  switch (kind) {
    case DegradationKind::LowLight:
      s.gamma = uniform(1.5, 3.5);
      s.gain = uniform(0.2, 0.7);
      break;
    case DegradationKind::Overexposure: s.gain = uniform(1.5, 3.0); break;
    case DegradationKind::NoiseIr: s.sigma = uniform(0.02, 0.1); break;
    case DegradationKind::LowContrastIr: s.contrast_factor = uniform(0.3, 0.7); break;
    case DegradationKind::None: break;
  }
  return s;
}

void DegradationSpec::validate() const {
  switch (kind) {
    case DegradationKind::LowLight:
      in_range(gamma, 1.5, 3.5, "low-light gamma");
      in_range(gain, 0.2, 0.7, "low-light gain");
      break;
    case DegradationKind::Overexposure: in_range(gain, 1.5, 3.0, "overexposure gain"); break;
    case DegradationKind::NoiseIr: in_range(sigma, 0.02, 0.1, "noise sigma"); break;
    case DegradationKind::LowContrastIr:
      in_range(contrast_factor, 0.3, 0.7, "contrast factor");
      break;
    case DegradationKind::None: break;
  }
}

nlohmann::json DegradationSpec::to_json() const {
  nlohmann::json j = {{"kind", std::string(to_string(kind))}, {"seed", seed}};
  switch (kind) {
    case DegradationKind::LowLight:
      j["gamma"] = gamma;
      j["gain"] = gain;
      break;
    case DegradationKind::Overexposure: j["gain"] = gain; break;
    case DegradationKind::NoiseIr: j["sigma"] = sigma; break;
    case DegradationKind::LowContrastIr: j["contrast_factor"] = contrast_factor; break;
    case DegradationKind::None: break;
  }
  return j;
}

DegradationSpec DegradationSpec::from_json(const nlohmann::json& j) {
  DegradationSpec s;
  try {
    s.kind = degradation_from_string(j.at("kind").get<std::string>());
    s.seed = j.value("seed", s.seed);
    s.gamma = j.value("gamma", s.gamma);
    s.gain = j.value("gain", s.gain);
    s.sigma = j.value("sigma", s.sigma);
    s.contrast_factor = j.value("contrast_factor", s.contrast_factor);
  } catch (const nlohmann::json::exception& e) {
    throw InvalidInput(std::string("malformed degradation spec: ") + e.what());
  }
  s.validate();
  return s;
}

Image apply_degradation(const Image& img, const DegradationSpec& spec) {
  spec.validate();
  const bool needs_rgb = spec.kind == DegradationKind::LowLight ||
                         spec.kind == DegradationKind::Overexposure;
  const bool needs_gray = spec.kind == DegradationKind::NoiseIr ||
                          spec.kind == DegradationKind::LowContrastIr;
  if (needs_rgb && img.colorspace() != ColorSpace::Rgb) {
    throw InvalidInput(std::string(to_string(spec.kind)) + " applies to RGB images");
  }
  if (needs_gray && img.colorspace() != ColorSpace::Gray) {
    throw InvalidInput(std::string(to_string(spec.kind)) + " applies to gray images");
  }
  Image out = img;
  std::mt19937_64 rng(spec.seed);
  switch (spec.kind) {
    case DegradationKind::None: return out;
    case DegradationKind::LowLight: {
      std::normal_distribution<double> noise(0.0, kLowLightNoiseSigma);
      for (double& v : out.data()) v = spec.gain * std::pow(v, spec.gamma) + noise(rng);
      break;
    }
    case DegradationKind::Overexposure:
      for (double& v : out.data()) v *= spec.gain;
      break;
    case DegradationKind::NoiseIr: {
      std::normal_distribution<double> noise(0.0, spec.sigma);
      for (double& v : out.data()) v += noise(rng);
      break;
    }
    case DegradationKind::LowContrastIr: {
      double mean = 0.0;
      for (double v : out.data()) mean += v;
      mean /= static_cast<double>(out.size());
      for (double& v : out.data()) v = mean + spec.contrast_factor * (v - mean);
      break;
    }
  }
  out.clamp();
  return out;
}

TrainingSample make_pair(const Image& clean_vis, const Image& clean_ir,
                         const DegradationSpec& spec, const TaskCatalog& catalog) {
  if (clean_vis.height() != clean_ir.height() || clean_vis.width() != clean_ir.width()) {
    throw InvalidInput("clean pair is not aligned");
  }
  TrainingSample s;
  s.target_vis = clean_vis;
  s.target_ir = clean_ir;
  s.input_vis = clean_vis;
  s.input_ir = clean_ir;
  switch (spec.kind) {
    case DegradationKind::LowLight:
    case DegradationKind::Overexposure: s.input_vis = apply_degradation(clean_vis, spec); break;
    case DegradationKind::NoiseIr:
    case DegradationKind::LowContrastIr: s.input_ir = apply_degradation(clean_ir, spec); break;
    case DegradationKind::None: spec.validate(); break;
  }
  s.task = std::string(task_for(spec.kind));
  const TaskEntry& entry = catalog.entry(s.task);
  if (entry.prompts.empty()) throw InvalidInput("task " + s.task + " has no prompt templates");
  std::mt19937_64 rng(spec.seed ^ 0x9e3779b97f4a7c15ULL);
  std::uniform_int_distribution<std::size_t> pick(0, entry.prompts.size() - 1);
  s.prompt = entry.prompts[pick(rng)];
  return s;
}

}  // namespace textif
