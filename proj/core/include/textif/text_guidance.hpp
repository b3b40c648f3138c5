#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "textif/autograd.hpp"
#include "textif/params.hpp"

namespace textif {

struct TextEmbedding {
  std::vector<double> vector;  // unit L2 norm
  std::string source_text;
};

/// Frozen text encoder. Implementations are pure: the same text always maps
/// to the same vector, and nothing about them is trained.
class TextEmbedder {
 public:
  virtual ~TextEmbedder() = default;
  virtual int dim() const = 0;
  virtual TextEmbedding embed(std::string_view text) const = 0;
  /// Serialized backend state, for checking that training leaves it alone.
  virtual std::vector<std::uint8_t> state() const = 0;
};

/// Deterministic bag-of-tokens embedder: every token hashes to a signed ±1
/// vector; the sum is L2-normalized.
class HashEmbedder final : public TextEmbedder {
 public:
  static constexpr std::uint64_t kDefaultSeed = 0x7e57f00dULL;

  explicit HashEmbedder(int dim = 128, std::uint64_t seed = kDefaultSeed);

  int dim() const override { return dim_; }
  TextEmbedding embed(std::string_view text) const override;
  std::vector<std::uint8_t> state() const override;

 private:
  int dim_;
  std::uint64_t seed_;
};

/// Lowercases ASCII, turns punctuation into separators, splits on whitespace.
std::vector<std::string> tokenize(std::string_view text);

struct TaskProfile {
  std::string name = "default";
  double alpha_int = 1.0;
  double alpha_ssim = 1.0;
  double alpha_grad = 1.0;
  double alpha_color = 1.0;
  double delta_ir = 0.5;

  void validate() const;
  TaskProfile scaled(double factor) const;
  bool operator==(const TaskProfile&) const = default;
};

struct TaskEntry {
  std::string task_name;
  std::vector<std::string> keywords;
  TaskProfile profile;
  std::vector<std::string> prompts;
};

/// Keyword catalog mapping free text onto loss profiles. The JSON document
/// is a list of {task_name, keywords[], profile{...}, prompts[]}.
class TaskCatalog {
 public:
  /// Throws LoadError on malformed documents or invalid profiles.
  static TaskCatalog from_json(std::string_view text);
  static TaskCatalog load(const std::string& path);
  /// Catalog compiled into the library (same content as data/task_catalog.json).
  static const TaskCatalog& builtin();
  static std::string_view builtin_json();

  const std::vector<TaskEntry>& entries() const { return entries_; }
  const TaskEntry& entry(std::string_view task_name) const;
  bool has_task(std::string_view task_name) const;

  /// Best keyword match (phrase matches weighted by token length, ties to the
  /// earlier entry); text matching nothing resolves to "default".
  TaskProfile resolve(std::string_view text) const;

  /// Canonical JSON text of the catalog.
  std::string canonical_json() const;

 private:
  std::vector<TaskEntry> entries_;
  std::string canonical_;
};

/// Throws InvalidInput on empty text.
TaskProfile resolve_task(std::string_view text,
                         const TaskCatalog& catalog = TaskCatalog::builtin());

/// Per-channel modulation for one decoder SIGM site.
struct ModulationParams {
  std::vector<double> gamma;
  std::vector<double> beta;
  int stage_index = 0;
};

struct Modulation {
  ag::Var gamma;
  ag::Var beta;
};

/// Parameter names of the guidance head for SIGM site `site`.
std::string guidance_param(int site, const char* leaf);

/// Two-layer MLP per SIGM site (D -> hidden -> 2C), chunked into (gamma, beta).
std::vector<Modulation> guidance_mlp(const ag::Var& embedding,
                                     std::span<const int> stage_channels,
                                     const Bindings& params);

std::vector<ModulationParams> to_modulation_params(const std::vector<Modulation>& mods);

/// (1 + gamma) * F + beta on a [C, H, W] feature tensor.
Tensor sigm_modulate(const Tensor& feature, const ModulationParams& m);

}  // namespace textif
