#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "cli.hpp"
#include "metric_oracles.hpp"
#include "scenes.hpp"
#include "textif/image_io.hpp"
#include "textif/trainer.hpp"

namespace fs = std::filesystem;
using namespace textif;
using namespace textif::testing;

namespace {

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("textif_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  int run(std::vector<std::string> args) {
    args.insert(args.begin(), "textif");
    out_.str("");
    err_.str("");
    return cli::run(args, out_, err_);
  }

  fs::path sub(const std::string& name) const {
    fs::create_directories(dir_ / name);
    return dir_ / name;
  }

  void write_pairs(const fs::path& d, int n, int size) {
    for (int i = 0; i < n; ++i) {
      const auto s = synthetic_scene(size, size, 40 + i);
      save_image(s.vis, d / ("p" + std::to_string(i) + "_vis.png"));
      save_image(s.ir, d / ("p" + std::to_string(i) + "_ir.png"));
    }
  }

  static std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  }

  fs::path dir_;
  std::ostringstream out_, err_;
};

std::vector<std::vector<std::string>> read_csv(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::stringstream lines(text);
  std::string line;
  while (std::getline(lines, line)) {
    rows.emplace_back();
    std::stringstream cells(line);
    std::string cell;
    while (std::getline(cells, cell, ',')) rows.back().push_back(cell);
  }
  return rows;
}

}  // namespace

TEST_F(CliTest, DegradeEmptyDirectory) {
  EXPECT_EQ(run({"degrade", "--clean-dir", sub("clean").string(), "--out-dir",
                 (dir_ / "out").string()}),
            2);
  EXPECT_NE(err_.str().find("no pairs found"), std::string::npos);
}

TEST_F(CliTest, DegradeAllKinds) {
  const fs::path clean = sub("clean");
  write_pairs(clean, 4, 24);
  const std::string a = (dir_ / "a").string(), b = (dir_ / "b").string();
  ASSERT_EQ(run({"degrade", "--clean-dir", clean.string(), "--out-dir", a, "--kinds", "all",
                 "--seed", "7"}),
            0)
      << err_.str();
  EXPECT_NE(out_.str().find("samples: 20"), std::string::npos) << out_.str();
  ASSERT_EQ(run({"degrade", "--clean-dir", clean.string(), "--out-dir", b, "--kinds", "all",
                 "--seed", "7"}),
            0);
  const std::string ma = slurp(fs::path(a) / "manifest.jsonl");
  EXPECT_EQ(ma, slurp(fs::path(b) / "manifest.jsonl"));

  const auto samples = load_samples(fs::path(a) / "manifest.jsonl");
  ASSERT_EQ(samples.size(), 20u);
  std::map<std::string, int> tasks;
  for (const auto& s : samples) ++tasks[s.task];
  for (const char* t : {"default", "low_light", "overexposure", "denoise", "low_contrast"}) {
    EXPECT_EQ(tasks[t], 4) << t;
  }

  ASSERT_EQ(run({"degrade", "--clean-dir", clean.string(), "--out-dir", (dir_ / "c").string(),
                 "--kinds", "all", "--seed", "8"}),
            0);
  EXPECT_NE(ma, slurp(dir_ / "c" / "manifest.jsonl"));
}

TEST_F(CliTest, DegradeSkipsUnpairedFiles) {
  const fs::path clean = sub("clean");
  write_pairs(clean, 2, 16);
  fs::remove(clean / "p1_ir.png");
  ASSERT_EQ(run({"degrade", "--clean-dir", clean.string(), "--out-dir", (dir_ / "o").string(),
                 "--kinds", "none,low_light"}),
            0);
  EXPECT_NE(err_.str().find("warning"), std::string::npos);
  EXPECT_NE(out_.str().find("samples: 2"), std::string::npos);
  EXPECT_EQ(run({"degrade", "--clean-dir", clean.string(), "--out-dir", (dir_ / "o").string(),
                 "--kinds", "sunburn"}),
            2);
}

TEST_F(CliTest, BadArgumentsExitTwo) {
  EXPECT_EQ(run({}), 2);
  EXPECT_EQ(run({"fuse", "--vis", "x.png"}), 2);
  EXPECT_EQ(run({"launch"}), 2);
  EXPECT_EQ(run({"--help"}), 0);
  EXPECT_FALSE(out_.str().empty());
}

TEST_F(CliTest, TrainThenFuse) {
  const fs::path clean = sub("clean");
  write_pairs(clean, 2, 24);
  const fs::path data = dir_ / "data";
  ASSERT_EQ(run({"degrade", "--clean-dir", clean.string(), "--out-dir", data.string(), "--kinds",
                 "none,low_light"}),
            0);
  const nlohmann::json config = {
      {"net", {{"base_channels", 4}, {"levels", 1}, {"heads", 1}, {"decoder_repeats", 1},
               {"embed_dim", 16}, {"guidance_hidden", 8}}},
      {"train", {{"batch_size", 2}, {"crop", 16}, {"steps", 5}}}};
  std::ofstream(dir_ / "config.json") << config.dump();
  const fs::path ckpt = dir_ / "model" / "net.ckpt";
  const fs::path log = dir_ / "train.jsonl";
  ASSERT_EQ(run({"train", "--manifest", (data / "manifest.jsonl").string(), "--config",
                 (dir_ / "config.json").string(), "--out", ckpt.string(), "--log", log.string(),
                 "--steps", "3", "--seed", "2"}),
            0)
      << err_.str();
  EXPECT_TRUE(fs::exists(ckpt));
  std::ifstream lines(log);
  int n = 0;
  for (std::string line; std::getline(lines, line); ++n) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j.at("step"), n);
    EXPECT_TRUE(j.contains("l_total"));
  }
  EXPECT_EQ(n, 3);

  const fs::path fused = dir_ / "fused" / "p0.png";
  ASSERT_EQ(run({"fuse", "--checkpoint", ckpt.string(), "--vis", (clean / "p0_vis.png").string(),
                 "--ir", (clean / "p0_ir.png").string(), "--out", fused.string()}),
            0)
      << err_.str();
  const Image img = load_image(fused);
  EXPECT_EQ(img.height(), 24);
  EXPECT_EQ(img.width(), 24);
  EXPECT_EQ(img.channels(), 3);
  EXPECT_NE(out_.str().find("task: default"), std::string::npos);

  ASSERT_EQ(run({"fuse", "--checkpoint", ckpt.string(), "--vis", (clean / "p0_vis.png").string(),
                 "--ir", (clean / "p0_ir.png").string(), "--out", fused.string(), "--text",
                 "it is too dark", "--report"}),
            0);
  EXPECT_NE(out_.str().find("task: low_light"), std::string::npos);
  EXPECT_NE(out_.str().find("l_total"), std::string::npos);

  save_image(synthetic_scene(20, 24, 1).ir, dir_ / "small_ir.png");
  EXPECT_EQ(run({"fuse", "--checkpoint", ckpt.string(), "--vis", (clean / "p0_vis.png").string(),
                 "--ir", (dir_ / "small_ir.png").string(), "--out", fused.string()}),
            2);
  EXPECT_NE(err_.str().find("dimension mismatch"), std::string::npos);
  EXPECT_EQ(run({"fuse", "--checkpoint", (dir_ / "missing.ckpt").string(), "--vis",
                 (clean / "p0_vis.png").string(), "--ir", (clean / "p0_ir.png").string(),
                 "--out", fused.string()}),
            2);
}

TEST_F(CliTest, EvalWithConstantInfraredGivesZeroScd) {
  const fs::path fused = sub("fused"), vis = sub("vis"), ir = sub("ir");
  for (int i = 0; i < 2; ++i) {
    const auto s = synthetic_scene(48, 48, 60 + i);
    const std::string name = "img" + std::to_string(i);
    save_image(s.vis, fused / (name + ".png"));
    save_image(s.vis, vis / (name + ".png"));
    save_image(Image(48, 48, ColorSpace::Gray, 0.4), ir / (name + ".png"));
  }
  const fs::path csv = dir_ / "report" / "metrics.csv";
  ASSERT_EQ(run({"eval", "--fused-dir", fused.string(), "--vis-dir", vis.string(), "--ir-dir",
                 ir.string(), "--out", csv.string()}),
            0)
      << err_.str();
  const auto rows = read_csv(slurp(csv));
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0][1], "scd");
  for (int r = 1; r < 3; ++r) EXPECT_EQ(std::stod(rows[r][1]), 0.0);
  const auto agg = nlohmann::json::parse(slurp(dir_ / "report" / "metrics.json"));
  EXPECT_EQ(agg.at("count"), 2);
  EXPECT_EQ(agg.at("mean").at("scd"), 0.0);
}

TEST_F(CliTest, EvalMatchesOracles) {
  const fs::path fused = sub("fused"), vis = sub("vis"), ir = sub("ir");
  std::vector<std::string> names;
  for (int i = 0; i < 3; ++i) {
    const auto s = synthetic_scene(48, 52, 80 + i);
    const std::string name = "t" + std::to_string(i);
    Image f = s.vis;
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < 48; ++y)
        for (int x = 0; x < 52; ++x) f.at(c, y, x) = 0.5 * f.at(c, y, x) + 0.5 * s.ir.at(0, y, x);
    save_image(f, fused / (name + ".png"));
    save_image(s.vis, vis / (name + "_vis.png"));
    save_image(s.ir, ir / (name + "_ir.png"));
    names.push_back(name);
  }
  const fs::path csv = dir_ / "m.csv";
  ASSERT_EQ(run({"eval", "--fused-dir", fused.string(), "--vis-dir", vis.string(), "--ir-dir",
                 ir.string(), "--out", csv.string()}),
            0)
      << err_.str();
  const auto rows = read_csv(slurp(csv));
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[0], (std::vector<std::string>{"name", "scd", "sd", "en", "vif", "qabf", "sf"}));
  for (int i = 0; i < 3; ++i) {
    const auto& row = rows[i + 1];
    ASSERT_EQ(row.size(), 7u);
    EXPECT_EQ(row[0], names[i]);
    const Grid f = grid255(load_image(fused / (names[i] + ".png")));
    const Grid a = grid255(load_image(vis / (names[i] + "_vis.png")));
    const Grid b = grid255(load_image(ir / (names[i] + "_ir.png")));
    EXPECT_NEAR(std::stod(row[1]), scd_oracle(f, a, b), 1e-6);
    EXPECT_NEAR(std::stod(row[2]), sd_oracle(f), 1e-6);
    EXPECT_NEAR(std::stod(row[3]), en_oracle(f), 1e-6);
    EXPECT_NEAR(std::stod(row[4]), 0.5 * (vif_oracle(a, f) + vif_oracle(b, f)), 1e-4);
    EXPECT_NEAR(std::stod(row[5]), qabf_oracle(f, a, b), 1e-6);
    EXPECT_NEAR(std::stod(row[6]), sf_oracle(f), 1e-6);
  }
}

TEST_F(CliTest, EvalMissingSourcesExitTwo) {
  const fs::path fused = sub("fused");
  save_image(synthetic_scene(40, 40, 1).vis, fused / "lonely.png");
  EXPECT_EQ(run({"eval", "--fused-dir", fused.string(), "--vis-dir", sub("vis").string(),
                 "--ir-dir", sub("ir").string(), "--out", (dir_ / "m.csv").string()}),
            2);
  EXPECT_NE(err_.str().find("lonely"), std::string::npos);
  EXPECT_EQ(run({"eval", "--fused-dir", sub("empty").string(), "--vis-dir", sub("vis").string(),
                 "--ir-dir", sub("ir").string(), "--out", (dir_ / "m.csv").string()}),
            2);
}
