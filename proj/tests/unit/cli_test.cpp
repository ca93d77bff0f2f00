// Drives the ldlearn binary as a user would: exit codes, diagnostics and
// the artifacts it leaves behind.

#include "ldlearn/io.hpp"

#include <gtest/gtest.h>

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace fs = std::filesystem;
using namespace ldl;

namespace {

struct Result {
  int code = -1;
  std::string output;  // stdout and stderr together
};

Result run(const std::string& args) {
  const char* cli = std::getenv("LDLEARN_CLI");
  if (!cli) throw std::runtime_error("LDLEARN_CLI is not set");
  Result r;
  FILE* pipe = popen((std::string("'") + cli + "' " + args + " 2>&1").c_str(), "r");
  if (!pipe) throw std::runtime_error("popen failed");
  std::array<char, 4096> buf{};
  while (std::fgets(buf.data(), buf.size(), pipe)) r.output += buf.data();
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

fs::path temp_dir(const std::string& name) {
  auto d = fs::temp_directory_path() / ("ldlearn_cli_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::string write_config(const fs::path& dir, const std::string& body) {
  const auto path = (dir / "config.json").string();
  std::ofstream(path) << body;
  return path;
}

const char* kSmall = R"({
  "synth": {"kind": "disc_curves", "train_count": 3, "test_count": 2, "reference_count": 2},
  "network": {"height": 32, "width": 32, "width_divisor": 8, "embed_dim": 8, "num_clusters": 4}
})";

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

}  // namespace

TEST(Cli, HelpExitsZero) {
  EXPECT_EQ(run("--help").code, 0);
  EXPECT_EQ(run("pretrain --help").code, 0);
}

TEST(Cli, UsageErrorsExitOne) {
  EXPECT_EQ(run("").code, 1);
  EXPECT_EQ(run("frobnicate").code, 1);
  EXPECT_EQ(run("pretrain --no-such-flag").code, 1);
  EXPECT_EQ(run("pretrain --seed notanumber").code, 1);
  EXPECT_EQ(run("plot").code, 1);
}

TEST(Cli, ConfigErrorsExitOneAndNameTheProblem) {
  const auto dir = temp_dir("bad_config");
  auto r = run("pretrain --dry-run -c " + (dir / "missing.json").string());
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.output.find("missing.json"), std::string::npos) << r.output;

  const auto cfg = write_config(dir, R"({"pretrain": {"warmup_epoch": 3}})");
  r = run("pretrain --dry-run -c " + cfg);
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.output.find("pretrain.warmup_epoch"), std::string::npos) << r.output;

  write_config(dir, R"({"pretrain": {"tau": -1}})");
  EXPECT_EQ(run("pretrain --dry-run -c " + cfg).code, 1);
}

TEST(Cli, DryRunPrintsScheduleAndTrainsNothing) {
  const auto dir = temp_dir("dry");
  const auto cfg = write_config(dir, kSmall);
  for (const char* cmd : {"pretrain", "shapeseg", "oneshot", "finetune"}) {
    auto r = run(std::string(cmd) + " --dry-run -c " + cfg + " -o " + (dir / "run").string() + " --seed 12");
    EXPECT_EQ(r.code, 0) << cmd << '\n' << r.output;
    EXPECT_NE(r.output.find("schedule:"), std::string::npos) << cmd;
    EXPECT_NE(r.output.find("seed: 12"), std::string::npos) << cmd;
  }
  EXPECT_FALSE(fs::exists(dir / "run"));
}

TEST(Cli, MissingDataIsAnInputError) {
  const auto dir = temp_dir("nodata");
  const auto cfg = write_config(dir, kSmall);
  auto r = run("pretrain -c " + cfg + " -o " + (dir / "run").string());
  EXPECT_EQ(r.code, 1) << r.output;
  EXPECT_NE(r.output.find("manifest"), std::string::npos) << r.output;
}

TEST(Cli, SynthIsDeterministicPerSeed) {
  const auto dir = temp_dir("synth");
  const auto cfg = write_config(dir, kSmall);
  ASSERT_EQ(run("synth -c " + cfg + " -o " + (dir / "a").string() + " --seed 3").code, 0);
  ASSERT_EQ(run("synth -c " + cfg + " -o " + (dir / "b").string() + " --seed 3").code, 0);
  ASSERT_EQ(run("synth -c " + cfg + " -o " + (dir / "c").string() + " --seed 4").code, 0);
  EXPECT_TRUE(fs::exists(dir / "a" / "config.resolved"));
  int compared = 0;
  bool any_differs = false;
  for (const auto& e : fs::recursive_directory_iterator(dir / "a" / "data")) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), dir / "a");
    EXPECT_EQ(slurp(e.path()), slurp(dir / "b" / rel)) << rel;
    if (e.path().extension() == ".png" && slurp(e.path()) != slurp(dir / "c" / rel)) any_differs = true;
    ++compared;
  }
  EXPECT_GT(compared, 10);
  EXPECT_TRUE(any_differs);
  auto test = load_dataset((dir / "a" / "data" / "test" / "manifest.txt").string());
  EXPECT_EQ(test.size(), 2u);
  EXPECT_TRUE(test[0].landmark.has_value());
}

TEST(Cli, EvalOfIdenticalMaskDirectories) {
  const auto dir = temp_dir("eval");
  const auto cfg = write_config(dir, kSmall);
  fs::create_directories(dir / "masks");
  for (int i = 0; i < 3; ++i)
    write_mask((dir / "masks" / ("m" + std::to_string(i) + ".png")).string(),
               (torch::rand({1, 16, 16}) > 0.5).to(torch::kFloat32));
  const auto out = dir / "run";
  auto r = run("eval -c " + cfg + " -o " + out.string() + " --pred-dir " + (dir / "masks").string() + " --truth-dir " +
               (dir / "masks").string());
  EXPECT_EQ(r.code, 0) << r.output;
  EXPECT_NE(r.output.find("mean DSC 1 over 3 images"), std::string::npos) << r.output;
  auto table = read_csv((out / "predictions" / "eval" / "dsc.csv").string());
  EXPECT_EQ(table.rows.size(), 4u);

  r = run("eval -c " + cfg + " -o " + out.string() + " --pred-dir " + (dir / "nowhere").string() + " --truth-dir " +
          (dir / "masks").string());
  EXPECT_EQ(r.code, 1);
}

TEST(Cli, PlotOnEmptyRunWarnsButSucceeds) {
  const auto dir = temp_dir("plot");
  fs::create_directories(dir / "run");
  auto r = run("plot " + (dir / "run").string());
  EXPECT_EQ(r.code, 0) << r.output;
  EXPECT_NE(r.output.find("figures: 0"), std::string::npos) << r.output;
  EXPECT_EQ(run("plot " + (dir / "absent").string()).code, 1);
}
