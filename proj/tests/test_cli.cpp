#include <gtest/gtest.h>

#include <sys/wait.h>

#include <array>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "bseg/pgm.hpp"

namespace fs = std::filesystem;

namespace {

struct RunResult {
  int code = -1;
  std::string output;
};

RunResult run(const std::string& args) {
  const std::string cmd = std::string(BSEG_CLI_PATH) + " " + args + " 2>&1";
  RunResult r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return r;
  std::array<char, 4096> buf{};
  while (fgets(buf.data(), buf.size(), pipe)) r.output += buf.data();
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> lines_of(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::string> out;
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

double csv_field(const std::string& row, std::size_t index) {
  std::stringstream ss(row);
  std::string cell;
  for (std::size_t i = 0; i <= index; ++i) std::getline(ss, cell, ',');
  return std::stod(cell);
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir_ = fs::temp_directory_path() / (std::string("bseg_cli_") + info->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  void write(const std::string& name, const std::string& text) const { std::ofstream(dir_ / name) << text; }

  fs::path dir_;
};

}  // namespace

TEST_F(Cli, GenDataWritesPairsAndManifest) {
  ASSERT_EQ(run("gen-data --out " + path("d") + " --n 8 --size 32 --seed 1").code, 0);
  std::size_t pgm = 0;
  for (const auto& e : fs::directory_iterator(path("d"))) pgm += e.path().extension() == ".pgm";
  EXPECT_EQ(pgm, 16u);
  const auto manifest = lines_of(path("d") + "/manifest.csv");
  ASSERT_EQ(manifest.size(), 9u);
  EXPECT_EQ(manifest[0], "id,image,mask");
}

TEST_F(Cli, GenDataIsByteReproducible) {
  ASSERT_EQ(run("gen-data --out " + path("a") + " --n 3 --size 16 --seed 4 --difficulty hard").code, 0);
  ASSERT_EQ(run("gen-data --out " + path("b") + " --n 3 --size 16 --seed 4 --difficulty hard").code, 0);
  for (const auto& e : fs::directory_iterator(path("a")))
    EXPECT_EQ(slurp(e.path()), slurp(fs::path(path("b")) / e.path().filename())) << e.path();
}

TEST_F(Cli, GenDataWarnsOnIndivisibleSize) {
  const auto r = run("gen-data --out " + path("d") + " --n 1 --size 33 --seed 1");
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.output.find("not divisible by 8"), std::string::npos) << r.output;
  EXPECT_EQ(run("gen-data --out " + path("e") + " --n 1 --size 32 --seed 1").output.find("warning"), std::string::npos);
}

TEST_F(Cli, UsageErrorsExitOne) {
  EXPECT_EQ(run("").code, 1);
  EXPECT_EQ(run("gen-data --n 3").code, 1);
  EXPECT_EQ(run("frobnicate").code, 1);
  EXPECT_EQ(run("gen-data --out " + path("d") + " --difficulty medium").code, 1);
}

TEST_F(Cli, HelpListsDefaults) {
  const auto r = run("train --help");
  EXPECT_EQ(r.code, 0);
  for (const char* needle : {"--batch-size", "16", "--lr", "0.001", "--optimizer", "adam", "--momentum", "0.9",
                             "--weight-decay", "0.0005", "--scheduler", "plateau", "--patience", "10", "--factor",
                             "0.1", "--gamma", "--latent-dim", "--epochs", "500", "--seed", "--resume", "--config"})
    EXPECT_NE(r.output.find(needle), std::string::npos) << needle;
  for (const char* sub : {"gen-data", "predict", "evaluate", "selftest"}) EXPECT_EQ(run(std::string(sub) + " --help").code, 0);
}

TEST_F(Cli, TrainWritesMetricsAndConverges) {
  ASSERT_EQ(run("gen-data --out " + path("d") + " --n 8 --size 32 --seed 1").code, 0);
  write("run.cfg", "max_epochs = 30\n");
  const auto r = run("train --data " + path("d") + " --config " + path("run.cfg") + " --out " + path("m.bseg"));
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_NE(r.output.find("epoch 30"), std::string::npos) << r.output;
  const auto rows = lines_of(path("m.metrics.csv"));
  ASSERT_EQ(rows.size(), 31u);
  EXPECT_EQ(rows[0], "epoch,train_loss,val_loss,seg_loss,kl_weights,kl_latent,lr");
  EXPECT_LT(csv_field(rows[30], 2), csv_field(rows[1], 2));
}

TEST_F(Cli, TrainIsDeterministicAndResumeWithZeroEpochsIsIdentity) {
  ASSERT_EQ(run("gen-data --out " + path("d") + " --n 4 --size 16 --seed 2").code, 0);
  const std::string common = "train --data " + path("d") + " --epochs 2 --batch-size 2 --seed 5 --out ";
  ASSERT_EQ(run(common + path("a.bseg")).code, 0);
  ASSERT_EQ(run(common + path("b.bseg")).code, 0);
  EXPECT_EQ(slurp(path("a.bseg")), slurp(path("b.bseg")));
  EXPECT_EQ(slurp(path("a.metrics.csv")), slurp(path("b.metrics.csv")));

  const auto r = run("train --data " + path("d") + " --resume " + path("a.bseg") + " --epochs 0 --out " + path("c.bseg"));
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_EQ(slurp(path("a.bseg")), slurp(path("c.bseg")));
}

TEST_F(Cli, BadConfigKeyExitsOneNamingKey) {
  ASSERT_EQ(run("gen-data --out " + path("d") + " --n 2 --size 16 --seed 2").code, 0);
  write("bad.cfg", "max_epochs = 1\nlearnin_rate = 0.1\n");
  const auto r = run("train --data " + path("d") + " --config " + path("bad.cfg") + " --out " + path("m.bseg"));
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.output.find("learnin_rate"), std::string::npos) << r.output;
}

TEST_F(Cli, DataErrorsExitTwo) {
  EXPECT_EQ(run("train --data " + path("missing") + " --out " + path("m.bseg")).code, 2);
  ASSERT_EQ(run("gen-data --out " + path("d") + " --n 2 --size 12 --seed 2").code, 0);
  const auto r = run("train --data " + path("d") + " --epochs 1 --out " + path("m.bseg"));
  EXPECT_EQ(r.code, 2) << r.output;
}

TEST_F(Cli, PredictOutputsAndDeterminism) {
  ASSERT_EQ(run("gen-data --out " + path("d") + " --n 4 --size 16 --seed 3").code, 0);
  ASSERT_EQ(run("train --data " + path("d") + " --epochs 3 --batch-size 2 --out " + path("m.bseg")).code, 0);
  const std::string img = path("d") + "/img_0000.pgm";

  const auto r20 = run("predict --ckpt " + path("m.bseg") + " --image " + img + " --out " + path("p20") +
                       " --samples 20 --seed 9");
  ASSERT_EQ(r20.code, 0) << r20.output;
  EXPECT_NE(r20.output.find("mean total variance"), std::string::npos);
  for (const char* f : {"mean.pgm", "mask.pgm", "aleatoric.pgm", "epistemic.pgm"})
    EXPECT_TRUE(fs::exists(fs::path(path("p20")) / f)) << f;

  ASSERT_EQ(run("predict --ckpt " + path("m.bseg") + " --image " + img + " --out " + path("again") +
                " --samples 20 --seed 9")
                .code,
            0);
  for (const char* f : {"mean.pgm", "mask.pgm", "aleatoric.pgm", "epistemic.pgm"})
    EXPECT_EQ(slurp(fs::path(path("p20")) / f), slurp(fs::path(path("again")) / f)) << f;

  ASSERT_EQ(run("predict --ckpt " + path("m.bseg") + " --image " + img + " --out " + path("p1") + " --samples 1").code, 0);
  const bseg::Grid epi = bseg::read_image(fs::path(path("p1")) / "epistemic.pgm");
  for (double v : epi.raw()) EXPECT_EQ(v, 1.0);
  const bseg::Grid mask = bseg::read_image(fs::path(path("p1")) / "mask.pgm");
  for (double v : mask.raw()) EXPECT_TRUE(v == 0.0 || v == 1.0);
}

TEST_F(Cli, PredictShapeMismatchExitsTwo) {
  ASSERT_EQ(run("gen-data --out " + path("d") + " --n 2 --size 16 --seed 3").code, 0);
  ASSERT_EQ(run("gen-data --out " + path("odd") + " --n 1 --size 12 --seed 3").code, 0);
  ASSERT_EQ(run("train --data " + path("d") + " --epochs 1 --out " + path("m.bseg")).code, 0);
  const auto r = run("predict --ckpt " + path("m.bseg") + " --image " + path("odd") + "/img_0000.pgm --out " + path("p"));
  EXPECT_EQ(r.code, 2) << r.output;
}

TEST_F(Cli, EvaluateAfterOverfitAndOnEmptySet) {
  ASSERT_EQ(run("gen-data --out " + path("d") + " --n 4 --size 32 --seed 8").code, 0);
  write("fit.cfg", "max_epochs = 200\nval_fraction = 0\nbatch_size = 4\nlearning_rate = 0.005\n");
  ASSERT_EQ(run("train --data " + path("d") + " --config " + path("fit.cfg") + " --out " + path("m.bseg")).code, 0);
  const auto r = run("evaluate --ckpt " + path("m.bseg") + " --data " + path("d") + " --samples 10 --out " +
                     path("eval.csv"));
  ASSERT_EQ(r.code, 0) << r.output;
  const auto rows = lines_of(path("eval.csv"));
  ASSERT_EQ(rows.size(), 6u);
  EXPECT_EQ(rows[0], "image_id,dsc,iou");
  EXPECT_GE(csv_field(rows.back(), 1), 0.95) << rows.back();

  fs::create_directories(path("empty"));
  write("empty/manifest.csv", "id,image,mask\n");
  EXPECT_EQ(run("evaluate --ckpt " + path("m.bseg") + " --data " + path("empty")).code, 2);
}

TEST_F(Cli, SelftestPassesQuickly) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto r = run("selftest");
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  EXPECT_EQ(r.code, 0) << r.output;
  EXPECT_EQ(r.output.find("FAIL"), std::string::npos) << r.output;
  EXPECT_LT(secs, 60.0);
}
