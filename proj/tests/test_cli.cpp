#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "denomamba/cli.hpp"
#include "test_util.hpp"

namespace denomamba {
namespace {

namespace fs = std::filesystem;
using test::TempDir;

struct Result {
  int code;
  std::string out, err;
};

Result run_cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::size_t count_files(const fs::path& dir, const std::string& ext) {
  std::size_t n = 0;
  for (const auto& e : fs::directory_iterator(dir)) n += e.path().extension() == ext;
  return n;
}

std::size_t csv_rows(const std::string& text) {
  return static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n')) - 1;
}

void simulate(const fs::path& dir, std::size_t n, std::uint64_t seed, const std::string& size = "32") {
  const Result r = run_cli({"simulate-ldct", "--n", std::to_string(n), "--size", size, "--dose", "0.25", "--seed",
                            std::to_string(seed), "--out", dir.string()});
  ASSERT_EQ(r.code, 0) << r.err;
}

TEST(Cli, SimulateWritesImagesAndManifestDeterministically) {
  TempDir dir;
  simulate(dir / "a", 8, 7);
  EXPECT_EQ(count_files(dir / "a/ndct", ".dnim"), 8u);
  EXPECT_EQ(count_files(dir / "a/ldct", ".dnim"), 8u);
  EXPECT_EQ(csv_rows(read_file(dir / "a/manifest.csv")), 8u);
  EXPECT_TRUE(fs::exists(dir / "a/resolved_config.json"));
  simulate(dir / "b", 8, 7);
  for (const char* rel : {"manifest.csv", "ndct/0003.dnim", "ldct/0007.dnim"})
    EXPECT_EQ(read_file(dir / "a" / rel), read_file(dir / "b" / rel)) << rel;
}

TEST(Cli, SimulateWritesPgmOnRequest) {
  TempDir dir;
  const Result r = run_cli({"simulate-ldct", "--n", "2", "--size", "16", "--format", "pgm", "--out", (dir / "p").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(count_files(dir / "p/ldct", ".pgm"), 2u);
}

TEST(Cli, InvalidDoseIsAUsageErrorNamingTheInterval) {
  TempDir dir;
  const Result r = run_cli({"simulate-ldct", "--dose", "0", "--out", (dir / "x").string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("(0, 1]"), std::string::npos) << r.err;
}

TEST(Cli, UnwritableOutputIsAUsageError) {
  TempDir dir;
  write_file(dir / "blocker", "x");
  const Result r = run_cli({"simulate-ldct", "--n", "1", "--out", (dir / "blocker/sub").string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("blocker"), std::string::npos) << r.err;
}

TEST(Cli, ConfigFileValuesYieldToFlags) {
  TempDir dir;
  write_file(dir / "cfg.json", R"({"n": 3, "size": 16, "seed": 5})");
  const Result r = run_cli({"simulate-ldct", "--config", (dir / "cfg.json").string(), "--n", "2", "--out",
                            (dir / "s").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(csv_rows(read_file(dir / "s/manifest.csv")), 2u);
  const auto resolved = nlohmann::json::parse(read_file(dir / "s/resolved_config.json"));
  EXPECT_EQ(resolved.at("n"), 2);
  EXPECT_EQ(resolved.at("size"), 16);
  EXPECT_EQ(resolved.at("seed"), 5);
  write_file(dir / "bad.json", "[1, 2");
  EXPECT_EQ(run_cli({"simulate-ldct", "--config", (dir / "bad.json").string(), "--out", (dir / "t").string()}).code, 2);
}

TEST(Cli, TrainWritesCheckpointsAndHistory) {
  TempDir dir;
  simulate(dir / "train", 3, 1);
  simulate(dir / "val", 2, 100);
  const Result r = run_cli({"train", "--data", (dir / "train/manifest.csv").string(), "--val",
                            (dir / "val/manifest.csv").string(), "--epochs", "2", "--out", (dir / "run").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* f : {"best.ckpt", "final.ckpt", "last.ckpt", "history.csv", "resolved_config.json"})
    EXPECT_TRUE(fs::exists(dir / "run" / f)) << f;
  EXPECT_EQ(csv_rows(read_file(dir / "run/history.csv")), 2u);
  const auto resolved = nlohmann::json::parse(read_file(dir / "run/resolved_config.json"));
  EXPECT_EQ(resolved.at("lr"), 1e-3);
  EXPECT_EQ(resolved.at("model").at("enc_widths"), nlohmann::json({8, 16, 32}));
}

TEST(Cli, TrainAblationFlagBuildsTheVariant) {
  TempDir dir;
  simulate(dir / "train", 2, 1);
  const Result r = run_cli({"train", "--data", (dir / "train/manifest.csv").string(), "--epochs", "1", "--ablate",
                            "no-cha-ssm", "--out", (dir / "run").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  DenoMambaModel m = load_checkpoint(dir / "run/final.ckpt");
  EXPECT_TRUE(m.config().ablation.no_channel_ssm);
  DenoMambaModel full(ModelConfig::desk());
  EXPECT_LT(m.param_count(), full.param_count());
  EXPECT_EQ(run_cli({"train", "--data", (dir / "train/manifest.csv").string(), "--ablate", "no-attention", "--out",
                     (dir / "bad").string()})
                .code,
            2);
}

TEST(Cli, ResumeContinuesTheInterruptedRun) {
  TempDir dir;
  simulate(dir / "train", 3, 1);
  simulate(dir / "val", 2, 100);
  const std::string data = (dir / "train/manifest.csv").string(), val = (dir / "val/manifest.csv").string();
  ASSERT_EQ(run_cli({"train", "--data", data, "--val", val, "--epochs", "3", "--out", (dir / "full").string()}).code, 0);
  ASSERT_EQ(run_cli({"train", "--data", data, "--val", val, "--epochs", "1", "--out", (dir / "part").string()}).code, 0);
  const Result r =
      run_cli({"train", "--data", data, "--val", val, "--epochs", "3", "--resume", "--out", (dir / "part").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("resuming after epoch 1"), std::string::npos);
  EXPECT_EQ(read_file(dir / "full/history.csv"), read_file(dir / "part/history.csv"));
  EXPECT_EQ(read_file(dir / "full/final.ckpt"), read_file(dir / "part/final.ckpt"));
  EXPECT_EQ(read_file(dir / "full/best.ckpt"), read_file(dir / "part/best.ckpt"));
}

TEST(Cli, TrainRejectsIndivisibleExtentsNamingTheConstraint) {
  TempDir dir;
  simulate(dir / "train", 1, 1, "18");
  const Result r = run_cli({"train", "--data", (dir / "train/manifest.csv").string(), "--epochs", "1", "--out",
                            (dir / "run").string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("divisible by 4"), std::string::npos) << r.err;
}

TEST(Cli, DenoiseHandlesFilesDirectoriesAndManifests) {
  TempDir dir;
  simulate(dir / "d", 3, 1);
  DenoMambaModel model(ModelConfig::desk());
  save_checkpoint(dir / "m.ckpt", model);
  const std::string ckpt = (dir / "m.ckpt").string();

  Result r = run_cli({"denoise", "--checkpoint", ckpt, "--input", (dir / "d/ldct/0001.dnim").string(), "--out",
                      (dir / "one").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(read_image(dir / "one/0001.dnim").shape(), (Shape{1, 1, 32, 32}));

  r = run_cli({"denoise", "--checkpoint", ckpt, "--input", (dir / "d/ldct").string(), "--out", (dir / "all").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(count_files(dir / "all", ".dnim"), 3u);

  r = run_cli({"denoise", "--checkpoint", ckpt, "--input", (dir / "d/manifest.csv").string(), "--out",
               (dir / "man").string(), "--montage"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(read_image(dir / "man/montage/0002.pgm").shape(), (Shape{1, 1, 32, 98}));
  EXPECT_EQ(read_file(dir / "man/0002.dnim"), read_file(dir / "all/0002.dnim"));
}

TEST(Cli, CorruptCheckpointExitsWithIntegrityCode) {
  TempDir dir;
  simulate(dir / "d", 1, 1);
  DenoMambaModel model(ModelConfig::desk());
  std::string bytes = encode_checkpoint(model);
  bytes[100] ^= 0x01;
  write_file(dir / "bad.ckpt", bytes);
  const Result r = run_cli({"denoise", "--checkpoint", (dir / "bad.ckpt").string(), "--input",
                            (dir / "d/ldct").string(), "--out", (dir / "o").string()});
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("checksum"), std::string::npos) << r.err;
}

TEST(Cli, EvalAgainstItselfIsPerfectAndComparisonIsDegenerate) {
  TempDir dir;
  simulate(dir / "d", 3, 1);
  const std::string ref = (dir / "d/ndct").string();
  Result r = run_cli({"eval", "--pred", ref, "--ref", ref, "--out", (dir / "self.csv").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rows = cli::detail::decode_report(read_file(dir / "self.csv"), "self");
  ASSERT_EQ(rows.size(), 3u);
  for (const auto& row : rows) {
    EXPECT_EQ(row.psnr, 99.0);
    EXPECT_NEAR(row.ssim, 1.0, 1e-12);
    EXPECT_EQ(row.rmse_pct, 0.0);
  }
  r = run_cli({"eval", "--pred", ref, "--ref", ref, "--out", (dir / "again.csv").string(), "--compare",
               (dir / "self.csv").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.err.find("warning"), std::string::npos);
  const std::string cmp = read_file(dir / "again_compare.csv");
  EXPECT_NE(cmp.find(",1,exact,1"), std::string::npos) << cmp;
}

TEST(Cli, EvalListsOrphans) {
  TempDir dir;
  simulate(dir / "d", 2, 1);
  fs::create_directories(dir / "pred");
  fs::copy_file(dir / "d/ldct/0000.dnim", dir / "pred/0000.dnim");
  fs::copy_file(dir / "d/ldct/0001.dnim", dir / "pred/0009.dnim");
  const Result r = run_cli({"eval", "--pred", (dir / "pred").string(), "--ref", (dir / "d/ndct").string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("0009.dnim"), std::string::npos) << r.err;
  EXPECT_NE(r.err.find("0001.dnim"), std::string::npos) << r.err;
}

TEST(Cli, ShortTrainingRaisesSsimOverTheNoisyInput) {
  TempDir dir;
  simulate(dir / "train", 8, 1);
  simulate(dir / "test", 4, 3000);
  ASSERT_EQ(run_cli({"train", "--data", (dir / "train/manifest.csv").string(), "--epochs", "6", "--out",
                     (dir / "run").string()})
                .code,
            0);
  ASSERT_EQ(run_cli({"denoise", "--checkpoint", (dir / "run/final.ckpt").string(), "--input",
                     (dir / "test/ldct").string(), "--out", (dir / "den").string()})
                .code,
            0);
  const std::string ref = (dir / "test/ndct").string();
  ASSERT_EQ(run_cli({"eval", "--pred", (dir / "test/ldct").string(), "--ref", ref, "--out", (dir / "noisy.csv").string()}).code, 0);
  ASSERT_EQ(run_cli({"eval", "--pred", (dir / "den").string(), "--ref", ref, "--out", (dir / "den.csv").string()}).code, 0);
  // PSNR needs far longer training to overtake the input; SSIM moves within a few epochs.
  auto mean_ssim = [](const std::string& text) {
    double s = 0.0;
    const auto rows = cli::detail::decode_report(text, "r");
    for (const auto& r : rows) s += r.ssim;
    return s / static_cast<double>(rows.size());
  };
  EXPECT_GT(mean_ssim(read_file(dir / "den.csv")), mean_ssim(read_file(dir / "noisy.csv")));
}

TEST(Cli, GradcheckRestrictsModulesAndFailsOnCorruptedBackward) {
  Result r = run_cli({"gradcheck", "--module", "ssm"});
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("selective_scan"), std::string::npos);
  EXPECT_EQ(r.out.find("conv2d"), std::string::npos);
  r = run_cli({"gradcheck", "--module", "ops", "--corrupt-backward"});
  EXPECT_EQ(r.code, 1) << r.out;
  EXPECT_EQ(run_cli({"gradcheck", "--module", "nope"}).code, 2);
}

TEST(Cli, AblateTrainsEveryVariant) {
  TempDir dir;
  simulate(dir / "train", 2, 1);
  simulate(dir / "val", 1, 100);
  const Result r = run_cli({"ablate", "--data", (dir / "train/manifest.csv").string(), "--val",
                            (dir / "val/manifest.csv").string(), "--epochs", "1", "--out", (dir / "ab").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const std::string csv = read_file(dir / "ab/ablation.csv");
  EXPECT_EQ(csv_rows(csv), 6u);
  for (const char* v : {"full,", "no-spa-ssm,", "no-cha-ssm,", "no-cfm,", "no-gcn,", "no-iden,"})
    EXPECT_NE(csv.find(v), std::string::npos) << v;
}

TEST(Cli, InfoPrintsThePaperLayout) {
  const Result r = run_cli({"info", "--preset", "paper"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("encoder widths [48,96,192,384]"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("decoder widths [192,96,48,48]"), std::string::npos) << r.out;
}

TEST(Cli, UsageErrors) {
  EXPECT_EQ(run_cli({}).code, 2);
  EXPECT_EQ(run_cli({"frobnicate"}).code, 2);
  EXPECT_EQ(run_cli({"denoise", "--input", "x"}).code, 2);
  EXPECT_EQ(run_cli({"train", "--out", "/tmp/x"}).code, 2);
  EXPECT_EQ(run_cli({"--help"}).code, 0);
  EXPECT_EQ(run_cli({"info", "--preset", "huge"}).code, 2);
}

}  // namespace
}  // namespace denomamba
