#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "textif/checkpoint.hpp"
#include "textif/degrade.hpp"
#include "textif/fusion_net.hpp"
#include "textif/losses.hpp"
#include "textif/params.hpp"
#include "textif/text_guidance.hpp"

namespace textif {

struct TrainConfig {
  double lr = 1e-4;
  int batch_size = 4;
  int crop = 96;
  int steps = 200;
  double weight_decay = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t seed = 0;
  int checkpoint_every = 0;  // 0: only the final checkpoint
  bool random_flip = true;

  /// Throws ConfigError.
  void validate(const NetConfig& net) const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

/// Decoupled-weight-decay Adam:
///   p <- p - lr*wd*p
///   m <- b1*m + (1-b1)*g ;  v <- b2*v + (1-b2)*g^2
///   p <- p - lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)
class AdamW {
 public:
  AdamW(const ParamStore& like, double lr, double beta1 = 0.9, double beta2 = 0.999,
        double eps = 1e-8, double weight_decay = 1e-2);

  void step(ParamStore& params, const ParamStore& grads);
  int steps_taken() const { return t_; }

 private:
  double lr_, beta1_, beta2_, eps_, wd_;
  int t_ = 0;
  ParamStore m_;
  ParamStore v_;
};

struct ManifestRecord {
  std::string input_vis_path;
  std::string input_ir_path;
  std::string target_vis_path;
  std::string target_ir_path;
  std::string prompt;
  std::string task;
  DegradationSpec spec;

  nlohmann::json to_json() const;
  static ManifestRecord from_json(const nlohmann::json& j);
};

/// One JSON object per line, in record order.
std::string manifest_to_jsonl(const std::vector<ManifestRecord>& records);
std::vector<ManifestRecord> read_manifest(const std::filesystem::path& path);

/// Loads every referenced image. Relative paths resolve against the
/// manifest's directory. Throws LoadError naming the unreadable file.
std::vector<TrainingSample> load_samples(const std::filesystem::path& manifest);

struct StepLog {
  int step = 0;
  double l_int = 0.0;
  double l_ssim = 0.0;
  double l_grad = 0.0;
  double l_color = 0.0;
  double l_total = 0.0;
  std::string task;  // task of the batch; "mixed" when it spans several

  nlohmann::json to_json() const;
};

struct TrainCallbacks {
  std::function<void(const StepLog&)> on_step;
  /// Called every checkpoint_every steps with the number of completed steps.
  std::function<void(int, const ParamStore&)> on_checkpoint;
};

struct TrainResult {
  ParamStore params;
  std::vector<StepLog> log;
};

/// Mini-batch AdamW over `data`. Each step takes batch_size samples from
/// shuffled passes over the data, with a random crop and an optional
/// horizontal flip, all drawn from one seeded stream;
/// embeds each prompt with the frozen embedder and weights the loss with the
/// profile resolved from the prompt. Logged losses are those computed
/// before the step's update. Throws NumericalError("... step k") on a
/// non-finite loss.
TrainResult train(const std::vector<TrainingSample>& data, const NetConfig& net_cfg,
                  const TrainConfig& cfg, const TextEmbedder& embedder,
                  const TaskCatalog& catalog = TaskCatalog::builtin(),
                  const TrainCallbacks& callbacks = {});

/// Training from a manifest; writes the final checkpoint to `out` and, when
/// `log_path` is set, the JSONL step log.
TrainResult train_from_manifest(const std::filesystem::path& manifest,
                                const NetConfig& net_cfg, const TrainConfig& cfg,
                                const std::filesystem::path& out,
                                const std::optional<std::filesystem::path>& log_path,
                                const TextEmbedder& embedder,
                                const TaskCatalog& catalog = TaskCatalog::builtin());

struct InferenceResult {
  Image fused;  // RGB, same size as the inputs
  TaskProfile profile;
  std::optional<LossReport> report;
};

/// Gray visible inputs are expanded to RGB. Inputs are reflect-padded to a
/// multiple of 2^levels and the output is cropped back.
InferenceResult infer(const Checkpoint& ckpt, const Image& vis, const Image& ir,
                      std::string_view text, const TextEmbedder& embedder,
                      const TaskCatalog& catalog = TaskCatalog::builtin(),
                      bool with_report = false);

}  // namespace textif
