#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#ifndef RNPE_CLI_PATH
#error "RNPE_CLI_PATH must name the CLI binary"
#endif

namespace fs = std::filesystem;

namespace {

const char* kSmallConfig = R"(task = gaussian_linear
seed = 7
evaluate.n_samples = 100
evaluate.levels = 11

[simulate]
n_train = 800
n_test = 40

[estimator]
hidden = 16,16

[train]
batch_size = 200
val_size = 100
max_epochs = 5

[attack]
eps = 0.5
steps = 10
n_points = 20
)";

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("rnpe_cli_" + std::to_string(::getpid()) + "_" +
            ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  fs::path write(const std::string& name, const std::string& body) const {
    const fs::path p = dir_ / name;
    std::ofstream(p) << body;
    return p;
  }

  int run(const std::string& args) const {
    const std::string cmd = std::string(RNPE_CLI_PATH) + " " + args + " >>" + (dir_ / "log.txt").string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  }

  std::string log() const {
    std::ifstream f(dir_ / "log.txt");
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
  }

  std::string stage_args(const fs::path& cfg, const std::string& extra = "") const {
    return "--config " + cfg.string() + " --out " + (dir_ / "out").string() + " " + extra;
  }

  fs::path dir_;
};

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace

TEST_F(Cli, FullPipeline) {
  const fs::path cfg = write("c.ini", kSmallConfig);
  for (const char* stage : {"simulate", "train", "attack", "evaluate"})
    ASSERT_EQ(run(std::string(stage) + " " + stage_args(cfg)), 0) << stage << "\n" << log();
  const fs::path out = dir_ / "out";
  const std::string csv = slurp(out / "report" / "robustness.csv");
  EXPECT_EQ(csv.rfind("# config_hash=", 0), 0u);
  EXPECT_NE(csv.find("task,estimator,defense,kind,rel_eps,abs_eps,median_kl,q15_kl,q85_kl,coverage_id"),
            std::string::npos);
  for (const char* svg : {"kl_vs_eps.svg", "coverage.svg"}) {
    const std::string s = slurp(out / "report" / svg);
    EXPECT_EQ(s.rfind("<?xml", 0), 0u) << svg;
    EXPECT_NE(s.find("<svg"), std::string::npos);
    EXPECT_NE(s.find("</svg>"), std::string::npos);
  }
  EXPECT_FALSE(fs::exists(out / ".rnpe.lock"));
}

TEST_F(Cli, RefusesOverwriteWithoutForce) {
  const fs::path cfg = write("c.ini", kSmallConfig);
  ASSERT_EQ(run("simulate " + stage_args(cfg)), 0) << log();
  EXPECT_EQ(run("simulate " + stage_args(cfg)), 2);
  EXPECT_NE(log().find("--force"), std::string::npos);
  EXPECT_EQ(run("simulate " + stage_args(cfg, "--force")), 0);
}

TEST_F(Cli, LockedOutputDirectory) {
  const fs::path cfg = write("c.ini", kSmallConfig);
  fs::create_directories(dir_ / "out");
  std::ofstream(dir_ / "out" / ".rnpe.lock") << "";
  EXPECT_EQ(run("simulate " + stage_args(cfg)), 2);
  EXPECT_NE(log().find("locked"), std::string::npos);
}

TEST_F(Cli, UnknownKeyIsConfigError) {
  const fs::path cfg = write("c.ini", std::string(kSmallConfig) + "not_a_key = 1\n");
  EXPECT_EQ(run("simulate " + stage_args(cfg)), 2);
  EXPECT_NE(log().find("not_a_key"), std::string::npos);
}

TEST_F(Cli, BadValueAndMissingFile) {
  EXPECT_EQ(run("simulate " + stage_args(write("c.ini", "seed = banana\n"))), 2);
  EXPECT_EQ(run("simulate --config " + (dir_ / "missing.ini").string()), 2);
  EXPECT_EQ(run("frobnicate"), 2);
}

TEST_F(Cli, MissingInputsAreConfigErrors) {
  const fs::path cfg = write("c.ini", kSmallConfig);
  EXPECT_EQ(run("train " + stage_args(cfg)), 2);
  EXPECT_NE(log().find("missing inputs"), std::string::npos);
}

TEST_F(Cli, ConfigHashMismatchIsRefused) {
  const fs::path cfg = write("c.ini", kSmallConfig);
  ASSERT_EQ(run("simulate " + stage_args(cfg)), 0) << log();
  EXPECT_EQ(run("train " + stage_args(cfg, "--seed 8")), 2);
  EXPECT_NE(log().find("config hash"), std::string::npos);
}

TEST_F(Cli, EmptyAttackSetFailsEvaluate) {
  std::string body = kSmallConfig;
  body.replace(body.find("n_points = 20"), 13, "n_points = 0");
  const fs::path cfg = write("c.ini", body);
  for (const char* stage : {"simulate", "train", "attack"}) ASSERT_EQ(run(std::string(stage) + " " + stage_args(cfg)), 0);
  EXPECT_EQ(run("evaluate " + stage_args(cfg)), 2);
  EXPECT_NE(log().find("empty"), std::string::npos);
}

TEST_F(Cli, DivergedTrainingIsNumericFailure) {
  std::string body = kSmallConfig;
  body.replace(body.find("max_epochs = 5"), 14, "max_epochs = 5\nlr = 1e300\nlr_fallbacks = 0");
  const fs::path cfg = write("c.ini", body);
  ASSERT_EQ(run("simulate " + stage_args(cfg)), 0);
  EXPECT_EQ(run("train " + stage_args(cfg)), 3) << log();
  EXPECT_NE(log().find("numeric failure"), std::string::npos);
}

TEST_F(Cli, Version) {
  EXPECT_EQ(run("--version"), 0);
  EXPECT_FALSE(log().empty());
}
