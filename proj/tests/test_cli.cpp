#include <gtest/gtest.h>

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <random>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

namespace fs = std::filesystem;

namespace {

struct Run {
  int status = -1;
  std::string out;
};

Run run(const std::string& args) {
  const std::string cmd = std::string(MTABL_CLI) + " " + args + " 2>/dev/null";
  Run r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return r;
  std::array<char, 4096> buf{};
  while (std::size_t n = fread(buf.data(), 1, buf.size(), pipe)) r.out.append(buf.data(), n);
  const int raw = pclose(pipe);
  r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("mtabl_cli_" + std::to_string(std::random_device{}()));
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  std::string path(const std::string& name) const { return (dir_ / name).string(); }
  fs::path dir_;
};

constexpr const char* kQuick =
    " --synth --synth-samples 60 --synth-validation 30 --synth-test 30 --epochs 3 --batch-size 16";

}  // namespace

TEST_F(CliTest, TrainWritesOneCheckpointPerSeedAndSummary) {
  const auto r = run("train --topology A --layer mtabl --heads 3 --seeds 4" + std::string(kQuick) + " --out " +
                     path("run"));
  ASSERT_EQ(r.status, 0) << r.out;
  for (int s = 0; s < 4; ++s) {
    EXPECT_TRUE(fs::exists(dir_ / "run" / ("seed_" + std::to_string(s)) / "model.ckpt"));
    EXPECT_NE(r.out.find("seed=" + std::to_string(s) + " "), std::string::npos);
  }
  EXPECT_NE(r.out.find("runs=4"), std::string::npos);
  EXPECT_NE(r.out.find("macro_f1_std="), std::string::npos);
  const auto summary = nlohmann::json::parse(slurp(dir_ / "run" / "summary.json"));
  EXPECT_EQ(summary["runs"].size(), 4u);
  const auto cfg = nlohmann::json::parse(slurp(dir_ / "run" / "config.json"));
  EXPECT_EQ(cfg["heads"], 3);
  EXPECT_EQ(cfg["epochs"], 3);
}

TEST_F(CliTest, ZeroHeadsIsUsageErrorBeforeAnyWork) {
  const auto r = run("train --heads 0 --synth --out " + path("never"));
  EXPECT_EQ(r.status, 2);
  EXPECT_FALSE(fs::exists(dir_ / "never"));
}

TEST_F(CliTest, ExitCodesDistinguishFailures) {
  EXPECT_EQ(run("train --synth --topology D --out " + path("x")).status, 2);
  EXPECT_EQ(run("train --out " + path("x")).status, 2);
  EXPECT_EQ(run("bogus").status, 2);
  EXPECT_EQ(run("train --data " + path("missing") + " --out " + path("x")).status, 3);
  std::ofstream(path("junk.ckpt")) << "not a checkpoint";
  EXPECT_EQ(run("eval " + path("junk.ckpt")).status, 5);
  EXPECT_EQ(run("eval " + path("absent.ckpt")).status, 5);
  EXPECT_EQ(run("--help").status, 0);
}

TEST_F(CliTest, EvalReproducesTrainingReportBitExactly) {
  ASSERT_EQ(run("train --heads 2 --seeds 1" + std::string(kQuick) + " --out " + path("run")).status, 0);
  const auto r = run("eval " + path("run/seed_0/model.ckpt") + " --json " + path("eval.json"));
  ASSERT_EQ(r.status, 0);
  EXPECT_EQ(r.out, slurp(dir_ / "run" / "seed_0" / "report.txt"));
  EXPECT_EQ(nlohmann::json::parse(slurp(path("eval.json"))),
            nlohmann::json::parse(slurp(dir_ / "run" / "seed_0" / "report.json")));
}

TEST_F(CliTest, PersistedConfigReproducesIdenticalResults) {
  ASSERT_EQ(run("train --heads 2 --seeds 2 --lr 0.02" + std::string(kQuick) + " --out " + path("a")).status, 0);
  ASSERT_EQ(run("train --config " + path("a/config.json") + " --out " + path("b")).status, 0);
  EXPECT_EQ(slurp(dir_ / "a" / "summary.txt"), slurp(dir_ / "b" / "summary.txt"));
  EXPECT_EQ(slurp(dir_ / "a" / "seed_1" / "report.txt"), slurp(dir_ / "b" / "seed_1" / "report.txt"));
  // A flag overrides the file.
  ASSERT_EQ(run("train --config " + path("a/config.json") + " --seeds 1 --out " + path("c")).status, 0);
  EXPECT_EQ(nlohmann::json::parse(slurp(dir_ / "c" / "config.json"))["seeds"], 1);
  EXPECT_EQ(nlohmann::json::parse(slurp(dir_ / "c" / "config.json"))["lr"], 0.02);
}

TEST_F(CliTest, SynthCacheFeedsTraining) {
  ASSERT_EQ(run("synth --out " + path("ds.bin") + " --synth-samples 30 --synth-test 12 --synth-difficulty single")
                .status,
            0);
  const auto r = run("train --dataset " + path("ds.bin") + " --epochs 2 --out " + path("run"));
  ASSERT_EQ(r.status, 0);
  EXPECT_NE(r.out.find("partition=test"), std::string::npos);
}

TEST_F(CliTest, GradcheckOnPresetExitsZero) {
  const auto r = run("gradcheck --topology A --layer mtabl --heads 3 --json " + path("g.json"));
  EXPECT_EQ(r.status, 0) << r.out;
  EXPECT_NE(r.out.find("passed=true"), std::string::npos);
  EXPECT_TRUE(nlohmann::json::parse(slurp(path("g.json")))["passed"].get<bool>());
  EXPECT_EQ(run("gradcheck --layer tabl --cases 20").status, 0);
  EXPECT_EQ(run("gradcheck --heads 0").status, 2);
}

TEST_F(CliTest, ComplexityTableIsMonotoneInHeads) {
  const auto r = run("complexity --d 40 --t 10 --dout 3 --tout 1 --kmin 1 --kmax 5 --measure --json " + path("c.json"));
  ASSERT_EQ(r.status, 0);
  EXPECT_NE(r.out.find("K=2 D'DT=1200 D'TT'=30 2D'T'=6 KD'T^2=600 3D'T=90 D'(D'K)T=180 total=2106"),
            std::string::npos)
      << r.out;
  const auto j = nlohmann::json::parse(slurp(path("c.json")));
  ASSERT_EQ(j["rows"].size(), 5u);
  for (std::size_t i = 1; i < 5; ++i) EXPECT_GT(j["rows"][i]["total"], j["rows"][i - 1]["total"]);
  EXPECT_EQ(run("complexity --kmin 0").status, 2);
}
