#include "cli.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <httplib.h>
#include <nlohmann/json.hpp>

#include "textif/checkpoint.hpp"
#include "textif/degrade.hpp"
#include "textif/error.hpp"
#include "textif/image_io.hpp"
#include "textif/metrics.hpp"
#include "textif/service.hpp"
#include "textif/trainer.hpp"

namespace fs = std::filesystem;

namespace textif::cli {

namespace {

constexpr std::string_view kDefaultPrompt = "fuse the infrared and visible images";

struct Pair {
  std::string name;
  fs::path vis;
  fs::path ir;
};

std::vector<Pair> find_pairs(const fs::path& dir, std::ostream& err) {
  if (!fs::is_directory(dir)) throw InvalidInput("not a directory: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file()) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<Pair> pairs;
  for (const auto& f : files) {
    const std::string file = f.filename().string();
    constexpr std::string_view suffix = "_vis.png";
    if (file.size() <= suffix.size() || !file.ends_with(suffix)) continue;
    const std::string name = file.substr(0, file.size() - suffix.size());
    const fs::path ir = dir / (name + "_ir.png");
    if (!fs::exists(ir)) {
      err << "warning: " << f.string() << " has no matching " << ir.filename().string()
          << ", skipped\n";
      continue;
    }
    pairs.push_back({name, f, ir});
  }
  return pairs;
}

std::vector<DegradationKind> parse_kinds(const std::string& text) {
  static const DegradationKind all[] = {DegradationKind::None, DegradationKind::LowLight,
                                        DegradationKind::Overexposure, DegradationKind::NoiseIr,
                                        DegradationKind::LowContrastIr};
  if (text == "all") return {std::begin(all), std::end(all)};
  std::vector<DegradationKind> kinds;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    const auto k = degradation_from_string(item);
    if (std::find(kinds.begin(), kinds.end(), k) == kinds.end()) kinds.push_back(k);
  }
  if (kinds.empty()) throw InvalidInput("no degradation kinds given");
  return kinds;
}

Image as_rgb(const Image& img) {
  return img.colorspace() == ColorSpace::Gray ? gray_to_rgb(img) : img;
}

Image as_gray(const Image& img) {
  return img.colorspace() == ColorSpace::Gray ? img : luminance(img);
}

int cmd_degrade(const fs::path& clean_dir, const fs::path& out_dir, const std::string& kinds_text,
                std::uint64_t seed, std::ostream& out, std::ostream& err) {
  const auto kinds = parse_kinds(kinds_text);
  const auto pairs = find_pairs(clean_dir, err);
  if (pairs.empty()) {
    err << "no pairs found in " << clean_dir.string() << "\n";
    return kBadInput;
  }
  fs::create_directories(out_dir);
  const TaskCatalog& catalog = TaskCatalog::builtin();
  std::vector<ManifestRecord> records;
  std::map<std::string, int> per_task;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const Pair& p = pairs[i];
    const Image vis = as_rgb(load_image(p.vis));
    const Image ir = as_gray(load_image(p.ir));
    if (vis.height() != ir.height() || vis.width() != ir.width()) {
      err << "warning: " << p.name << " pair is not aligned, skipped\n";
      continue;
    }
    const std::string clean_vis = p.name + "_clean_vis.png";
    const std::string clean_ir = p.name + "_clean_ir.png";
    save_image(vis, out_dir / clean_vis);
    save_image(ir, out_dir / clean_ir);
    for (const DegradationKind kind : kinds) {
      const std::uint64_t sample_seed =
          seed * 1000003ULL + i * 16ULL + static_cast<std::uint64_t>(kind);
      const auto spec = DegradationSpec::sample(kind, sample_seed);
      const TrainingSample s = make_pair(vis, ir, spec, catalog);
      const std::string tag = p.name + "_" + std::string(to_string(kind));
      ManifestRecord r;
      r.input_vis_path = kind == DegradationKind::LowLight || kind == DegradationKind::Overexposure
                             ? tag + "_vis.png"
                             : clean_vis;
      r.input_ir_path = kind == DegradationKind::NoiseIr || kind == DegradationKind::LowContrastIr
                            ? tag + "_ir.png"
                            : clean_ir;
      if (r.input_vis_path != clean_vis) save_image(s.input_vis, out_dir / r.input_vis_path);
      if (r.input_ir_path != clean_ir) save_image(s.input_ir, out_dir / r.input_ir_path);
      r.target_vis_path = clean_vis;
      r.target_ir_path = clean_ir;
      r.prompt = s.prompt;
      r.task = s.task;
      r.spec = spec;
      records.push_back(std::move(r));
      ++per_task[s.task];
    }
  }
  if (records.empty()) {
    err << "no pairs found in " << clean_dir.string() << "\n";
    return kBadInput;
  }
  const std::string manifest = manifest_to_jsonl(records);
  write_file_bytes(out_dir / "manifest.jsonl",
                   std::vector<std::uint8_t>(manifest.begin(), manifest.end()));
  out << "pairs: " << pairs.size() << ", samples: " << records.size() << "\n";
  for (const auto& [task, n] : per_task) out << "  " << task << ": " << n << "\n";
  out << "manifest: " << (out_dir / "manifest.jsonl").string() << "\n";
  return kOk;
}

int cmd_train(const fs::path& manifest, const std::optional<fs::path>& config_path,
              const fs::path& out_path, const std::optional<fs::path>& log_path,
              std::optional<std::uint64_t> seed, std::optional<int> steps, std::ostream& out) {
  NetConfig net;
  TrainConfig train;
  if (config_path) {
    const auto bytes = read_file_bytes(*config_path);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(bytes.begin(), bytes.end());
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(config_path->string() + ": " + e.what());
    }
    if (j.contains("net")) net = NetConfig::from_json(j.at("net"));
    if (j.contains("train")) train = TrainConfig::from_json(j.at("train"));
  }
  if (seed) train.seed = *seed;
  if (steps) train.steps = *steps;
  if (out_path.has_parent_path()) fs::create_directories(out_path.parent_path());
  const HashEmbedder embedder(net.embed_dim);
  const auto result = train_from_manifest(manifest, net, train, out_path, log_path, embedder);
  out << "steps: " << result.log.size();
  if (!result.log.empty()) out << ", final l_total: " << result.log.back().l_total;
  out << "\ncheckpoint: " << out_path.string() << "\n";
  return kOk;
}

int cmd_fuse(const fs::path& ckpt_path, const fs::path& vis_path, const fs::path& ir_path,
             const std::string& text, const fs::path& out_path, bool report, std::ostream& out) {
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  const Image vis = load_image(vis_path);
  const Image ir = load_image(ir_path);
  const HashEmbedder embedder(ckpt.config.embed_dim);
  const auto r = infer(ckpt, vis, ir, text, embedder, TaskCatalog::builtin(), report);
  if (out_path.has_parent_path()) fs::create_directories(out_path.parent_path());
  save_image(r.fused, out_path);
  out << "task: " << r.profile.name << "\n";
  if (r.report) out << r.report->to_json().dump() << "\n";
  out << "wrote " << out_path.string() << "\n";
  return kOk;
}

std::optional<fs::path> find_source(const fs::path& dir, const fs::path& fused_file,
                                    const char* suffix) {
  const std::string stem = fused_file.stem().string();
  for (const fs::path& candidate :
       {dir / fused_file.filename(), dir / (stem + ".png"), dir / (stem + suffix)}) {
    if (fs::exists(candidate)) return candidate;
  }
  return std::nullopt;
}

std::string fixed(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10f", v);
  return buf;
}

int cmd_eval(const fs::path& fused_dir, const fs::path& vis_dir, const fs::path& ir_dir,
             const fs::path& out_path, std::ostream& out) {
  if (!fs::is_directory(fused_dir)) throw InvalidInput("not a directory: " + fused_dir.string());
  std::vector<fs::path> fused_files;
  for (const auto& e : fs::directory_iterator(fused_dir)) {
    const auto ext = e.path().extension().string();
    if (e.is_regular_file() && (ext == ".png" || ext == ".jpg" || ext == ".jpeg")) {
      fused_files.push_back(e.path());
    }
  }
  std::sort(fused_files.begin(), fused_files.end());
  if (fused_files.empty()) throw InvalidInput("no fused images in " + fused_dir.string());
  std::string csv = "name,scd,sd,en,vif,qabf,sf\n";
  std::vector<MetricReport> reports;
  for (const auto& f : fused_files) {
    const auto vis = find_source(vis_dir, f, "_vis.png");
    const auto ir = find_source(ir_dir, f, "_ir.png");
    if (!vis || !ir) {
      throw InvalidInput("no source pair for " + f.filename().string());
    }
    const Image fused = load_image(f);
    const MetricReport m = evaluate_metrics(fused, load_image(*vis), load_image(*ir));
    csv += f.stem().string() + "," + fixed(m.scd) + "," + fixed(m.sd) + "," + fixed(m.en) +
           "," + fixed(m.vif) + "," + fixed(m.qabf) + "," + fixed(m.sf) + "\n";
    reports.push_back(m);
  }
  if (out_path.has_parent_path()) fs::create_directories(out_path.parent_path());
  write_file_bytes(out_path, std::vector<std::uint8_t>(csv.begin(), csv.end()));
  fs::path json_path = out_path;
  json_path.replace_extension(".json");
  const nlohmann::json agg = {{"count", reports.size()},
                              {"mean", mean_report(reports).to_json()}};
  const std::string agg_text = agg.dump(2) + "\n";
  write_file_bytes(json_path, std::vector<std::uint8_t>(agg_text.begin(), agg_text.end()));
  out << "evaluated " << reports.size() << " images\n"
      << "csv: " << out_path.string() << "\njson: " << json_path.string() << "\n";
  return kOk;
}

int cmd_serve(const std::string& host, int port, const std::optional<fs::path>& ckpt_path,
              const std::optional<fs::path>& catalog_path, std::size_t max_bytes,
              std::ostream& out, std::ostream& err) {
  std::optional<Checkpoint> ckpt;
  if (ckpt_path) ckpt = load_checkpoint(*ckpt_path);
  else err << "warning: no checkpoint, /api/fuse will answer 503\n";
  TaskCatalog catalog = catalog_path ? TaskCatalog::load(catalog_path->string())
                                     : TaskCatalog::builtin();
  const int dim = ckpt ? ckpt->config.embed_dim : NetConfig{}.embed_dim;
  ServiceConfig cfg;
  cfg.max_request_bytes = max_bytes;
  FusionService service(std::move(ckpt), std::move(catalog),
                        std::make_shared<HashEmbedder>(dim), cfg);
  httplib::Server server;
  mount(server, service);
  if (!server.bind_to_port(host, port)) throw Error("cannot bind " + host + ":" + std::to_string(port));
  out << "listening on http://" << host << ":" << port << "\n" << std::flush;
  server.listen_after_bind();
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Text-guided infrared/visible image fusion"};
  app.require_subcommand(1);

  std::string clean_dir, out_dir, kinds = "all";
  std::uint64_t seed = 0;
  auto* degrade = app.add_subcommand("degrade", "Synthesize degraded training pairs");
  degrade->add_option("--clean-dir", clean_dir, "Directory of name_vis.png / name_ir.png pairs")
      ->required();
  degrade->add_option("--out-dir", out_dir, "Output directory")->required();
  degrade->add_option("--kinds", kinds,
                      "Comma list of none,low_light,overexposure,noise_ir,low_contrast_ir or all");
  degrade->add_option("--seed", seed, "Random seed");

  std::string manifest, config, ckpt_out, log_path;
  std::optional<std::uint64_t> train_seed;
  std::optional<int> steps;
  auto* train = app.add_subcommand("train", "Train a fusion network");
  train->add_option("--manifest", manifest, "Manifest JSONL")->required();
  train->add_option("--config", config, "JSON with optional \"net\" and \"train\" objects");
  train->add_option("--out", ckpt_out, "Checkpoint path")->required();
  train->add_option("--log", log_path, "Training log JSONL");
  train->add_option("--seed", train_seed, "Overrides train.seed");
  train->add_option("--steps", steps, "Overrides train.steps");

  std::string ckpt, vis, ir, text = std::string(kDefaultPrompt), fused_out;
  bool report = false;
  auto* fuse = app.add_subcommand("fuse", "Fuse one image pair");
  fuse->add_option("--checkpoint", ckpt, "Checkpoint")->required();
  fuse->add_option("--vis", vis, "Visible image")->required();
  fuse->add_option("--ir", ir, "Infrared image")->required();
  fuse->add_option("--text", text, "Guidance text");
  fuse->add_option("--out", fused_out, "Output image")->required();
  fuse->add_flag("--report", report, "Print the loss report against the sources");

  std::string fused_dir, vis_dir, ir_dir, eval_out;
  auto* eval = app.add_subcommand("eval", "Compute fusion metrics");
  eval->add_option("--fused-dir", fused_dir)->required();
  eval->add_option("--vis-dir", vis_dir)->required();
  eval->add_option("--ir-dir", ir_dir)->required();
  eval->add_option("--out", eval_out, "CSV path; the aggregate goes next to it as .json")
      ->required();

  std::string host = "127.0.0.1", serve_ckpt, catalog;
  int port = 8080;
  std::size_t max_bytes = ServiceConfig{}.max_request_bytes;
  auto* serve = app.add_subcommand("serve", "Run the HTTP API");
  serve->add_option("--host", host);
  serve->add_option("--port", port);
  serve->add_option("--checkpoint", serve_ckpt);
  serve->add_option("--catalog", catalog, "Task catalog JSON");
  serve->add_option("--max-request-bytes", max_bytes);

  std::vector<std::string> rest(args.size() > 1 ? args.begin() + 1 : args.end(), args.end());
  std::reverse(rest.begin(), rest.end());
  const std::string prog = args.empty() ? "textif" : fs::path(args.front()).filename().string();
  try {
    app.parse(rest);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << prog << ": " << e.what() << "\n";
    return kBadInput;
  }

  auto opt_path = [](const std::string& s) -> std::optional<fs::path> {
    if (s.empty()) return std::nullopt;
    return fs::path(s);
  };
  const std::string cmd = app.get_subcommands().front()->get_name();
  try {
    if (cmd == "degrade") return cmd_degrade(clean_dir, out_dir, kinds, seed, out, err);
    if (cmd == "train") {
      return cmd_train(manifest, opt_path(config), ckpt_out, opt_path(log_path), train_seed, steps,
                       out);
    }
    if (cmd == "fuse") return cmd_fuse(ckpt, vis, ir, text, fused_out, report, out);
    if (cmd == "eval") return cmd_eval(fused_dir, vis_dir, ir_dir, eval_out, out);
    return cmd_serve(host, port, opt_path(serve_ckpt), opt_path(catalog), max_bytes, out, err);
  } catch (const InvalidInput& e) {
    err << prog << " " << cmd << ": " << e.what() << "\n";
    return kBadInput;
  } catch (const ConfigError& e) {
    err << prog << " " << cmd << ": " << e.what() << "\n";
    return kBadInput;
  } catch (const LoadError& e) {
    err << prog << " " << cmd << ": " << e.what() << "\n";
    return kBadInput;
  } catch (const std::exception& e) {
    err << prog << " " << cmd << ": " << e.what() << "\n";
    return kRuntimeFailure;
  }
}

}  // namespace textif::cli
