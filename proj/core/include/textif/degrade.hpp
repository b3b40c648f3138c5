#pragma once

#include <cstdint>
#include <string>
#include <string_view>

#include <nlohmann/json_fwd.hpp>

#include "textif/image.hpp"
#include "textif/text_guidance.hpp"

namespace textif {

enum class DegradationKind { None, LowLight, Overexposure, NoiseIr, LowContrastIr };

std::string_view to_string(DegradationKind kind);
DegradationKind degradation_from_string(std::string_view name);
/// Catalog task a degradation is labeled with.
std::string_view task_for(DegradationKind kind);

struct DegradationSpec {
  DegradationKind kind = DegradationKind::None;
  double gamma = 2.5;            // LowLight: [1.5, 3.5]
  double gain = 0.45;            // LowLight: [0.2, 0.7]; Overexposure: [1.5, 3]
  double sigma = 0.05;           // NoiseIr: [0.02, 0.1]
  double contrast_factor = 0.5;  // LowContrastIr: [0.3, 0.7]
  std::uint64_t seed = 0;

  /// Parameters drawn uniformly from the declared ranges of `kind`.
  static DegradationSpec sample(DegradationKind kind, std::uint64_t seed);

  /// Throws InvalidInput when a parameter used by `kind` is out of range.
  void validate() const;
  nlohmann::json to_json() const;
  static DegradationSpec from_json(const nlohmann::json& j);
};

/// Seeded, pure. LowLight/Overexposure need RGB; NoiseIr/LowContrastIr gray.
Image apply_degradation(const Image& img, const DegradationSpec& spec);

struct TrainingSample {
  Image input_vis;
  Image input_ir;
  Image target_vis;
  Image target_ir;
  std::string prompt;
  std::string task;
};

/// Degrades the modality named by `spec.kind` and attaches a prompt drawn
/// (seeded by spec.seed) from that task's catalog templates.
TrainingSample make_pair(const Image& clean_vis, const Image& clean_ir,
                         const DegradationSpec& spec,
                         const TaskCatalog& catalog = TaskCatalog::builtin());

}  // namespace textif
