#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>

#include "dmalign/cli.hpp"

using namespace dmalign;

namespace {

int run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "dmalign");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  return cli::run(static_cast<int>(argv.size()), argv.data());
}

fs::path fresh(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("dmalign_cli_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

void write_small_generator(const fs::path& p) {
  scene::GeneratorConfig g;
  g.width = 32;
  g.height = 32;
  std::ofstream(p) << g.to_json().dump();
}

fs::path tiny_model(const fs::path& dir) {
  codec::CodecConfig cc;
  cc.width = 8;
  cc.width_low = 8;
  codec::Codec c(cc, 2);
  c.freeze();
  ModelConfig m;
  m.unet.base = 8;
  m.unet.mults = {1, 2};
  m.unet.pe_dim = 16;
  m.predictor.hidden1 = 4;
  m.predictor.hidden2 = 4;
  AlignerModel(std::move(c), m).save(dir);
  return dir;
}

}  // namespace

TEST(Cli, GenerateThenScoreIdentityBaseline) {
  const fs::path root = fresh("gen");
  write_small_generator(root / "gen.json");
  ASSERT_EQ(run_cli({"gen-data", "--config", (root / "gen.json").string(), "--out", (root / "data").string(), "--count", "4",
                     "--seed", "3"}),
            0);
  EXPECT_EQ(scene::Dataset(root / "data").size(), 4u);
  ASSERT_EQ(run_cli({"eval", "--data", (root / "data").string(), "--baseline", "identity", "--out", (root / "ev").string()}), 0);
  EXPECT_TRUE(fs::exists(root / "ev" / "report_identity.json"));
  EXPECT_TRUE(fs::exists(root / "ev" / "report.md"));
  fs::remove_all(root);
}

TEST(Cli, AlignRecordsSamplerSettings) {
  const fs::path root = fresh("align");
  write_small_generator(root / "gen.json");
  ASSERT_EQ(run_cli({"gen-data", "--config", (root / "gen.json").string(), "--out", (root / "data").string(), "--count", "1",
                     "--seed", "5"}),
            0);
  const auto tr = scene::Dataset(root / "data").load(0);
  write_png(root / "i1.png", tr.i1);
  write_png(root / "i2.png", tr.i2);
  tiny_model(root / "model");
  ASSERT_EQ(run_cli({"align", "--ckpt", (root / "model").string(), "--i1", (root / "i1.png").string(), "--i2",
                     (root / "i2.png").string(), "--out", (root / "out").string(), "--steps", "1000", "--seed", "4"}),
            0);
  const json j = cli::read_json_file((root / "out" / "align.json").string());
  EXPECT_EQ(j.at("denoiser_calls").get<int>(), 1);
  EXPECT_EQ(j.at("stride").get<int>(), 1000);
  EXPECT_EQ(j.at("seed").get<int>(), 4);
  EXPECT_EQ(j.at("sigma").size(), 1u);
  EXPECT_EQ(read_png(root / "out" / "aligned.png", 3).width, 32);
  EXPECT_TRUE(fs::exists(root / "out" / "mask.png"));
  // stride beyond T is a parameter error
  EXPECT_EQ(run_cli({"align", "--ckpt", (root / "model").string(), "--i1", (root / "i1.png").string(), "--i2",
                     (root / "i2.png").string(), "--out", (root / "out2").string(), "--steps", "1001"}),
            1);
  fs::remove_all(root);
}

TEST(Cli, ErrorsExitNonZero) {
  const fs::path root = fresh("err");
  EXPECT_NE(run_cli({}), 0);
  EXPECT_NE(run_cli({"gen-data", "--out", (root / "x").string()}), 0);
  EXPECT_NE(run_cli({"eval", "--data", (root / "missing").string(), "--out", (root / "ev").string()}), 0);
  EXPECT_EQ(run_cli({"eval", "--data", root.string(), "--out", (root / "ev").string(), "--baseline", "identity"}), 1);
  fs::remove_all(root);
}

TEST(Cli, RelativeOutputsHonourRoot) {
  const fs::path root = fresh("root");
  write_small_generator(root / "gen.json");
  ::setenv("DMALIGN_OUTPUT_ROOT", root.c_str(), 1);
  const int rc = run_cli({"gen-data", "--config", (root / "gen.json").string(), "--out", "rel", "--count", "1", "--seed", "1"});
  ::unsetenv("DMALIGN_OUTPUT_ROOT");
  EXPECT_EQ(rc, 0);
  EXPECT_EQ(scene::Dataset(root / "rel").size(), 1u);
  fs::remove_all(root);
}
