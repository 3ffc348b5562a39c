#include <filesystem>

#include <gtest/gtest.h>
#include <json.hpp>

#include "hbat/checkpoint.hpp"
#include "hbat/cli.hpp"
#include "hbat/config.hpp"

namespace hbat {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

const std::vector<std::string> kSmall = {
    "model.d_model=8",     "model.layers=1",     "model.heads=2",       "model.context=16",
    "model.d_ff=16",       "synth.train_size=16", "synth.val_size=8",   "synth.min_length=2",
    "synth.max_length=3",  "ifa.epochs=1",        "ifa.lr=0.05",        "dpo.epochs=1",
    "eval.prompts=4",      "gen.max_new_tokens=4", "eval.max_new_tokens=4", "hbat.cold_start_steps=2",
    "ppo.batch_size=4",    "rm.epochs=1"};

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    root_ = fs::temp_directory_path() / ("hbat_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(root_);
    fs::create_directories(root_);
  }
  void TearDown() override { fs::remove_all(root_); }

  int run(const std::string& sub, const std::string& out, std::vector<std::string> extra = {},
          bool small = true) {
    std::vector<std::string> args = {"hbat", sub};
    auto add = [&](const std::string& kv) {
      args.push_back("-s");
      args.push_back(kv);
    };
    if (small) for (const auto& kv : kSmall) add(kv);
    add("run.output_dir=" + (root_ / out).string());
    for (const auto& kv : extra) {
      if (kv.rfind("-", 0) == 0) {
        args.push_back(kv);
      } else {
        add(kv);
      }
    }
    return run_cli(args);
  }

  std::string file(const std::string& rel) const { return read_file_bytes(root_ / rel); }
  fs::path path(const std::string& rel) const { return root_ / rel; }

  fs::path root_;
};

TEST_F(CliTest, UnknownKeysAreConfigErrors) {
  EXPECT_EQ(run("sft", "a", {"ifa.learning_rat=0.1"}), kExitConfigError);
  write_file_bytes(path("bad.cfg"), "# comment\nrun.seed = 3\nmodel.widht = 8\n");
  EXPECT_EQ(run_cli({"hbat", "sft", "-c", path("bad.cfg").string()}), kExitConfigError);
  EXPECT_EQ(run("sft", "b", {"ifa.lr=abc"}), kExitConfigError);
  EXPECT_EQ(run("sft", "c", {"ifa.lr"}), kExitConfigError);
  EXPECT_EQ(run_cli({"hbat", "frobnicate"}), kExitConfigError);
  EXPECT_FALSE(fs::exists(path("a/run.json")));
}

TEST_F(CliTest, MissingPathsAndReward) {
  EXPECT_EQ(run("ppo", "ppo"), kExitConfigError);
  EXPECT_EQ(run("hbat", "hbat", {"hbat.hpa=ppo"}), kExitConfigError);
  EXPECT_EQ(run("sft", "init", {"model.init_checkpoint=" + path("nope.ckpt").string()}), kExitConfigError);
  EXPECT_EQ(run("eval", "eval"), kExitConfigError);
  EXPECT_FALSE(fs::exists(path("ppo/checkpoints")));
}

TEST_F(CliTest, ConfigFileDumpRoundTrips) {
  RunConfig c;
  c.set("hbat.lambda", "0.25");
  c.set("run.seed", "9");
  const RunConfig back = RunConfig::parse(c.dump());
  EXPECT_EQ(back.dump(), c.dump());
  EXPECT_EQ(back.get("hbat.lambda"), "0.25");
  EXPECT_EQ(RunConfig{}.get("hbat.lambda"), "1");
  EXPECT_EQ(RunConfig{}.get("hbat.f_max"), "50");
  EXPECT_EQ(RunConfig{}.get("hbat.cold_start_steps"), "50");
  EXPECT_EQ(RunConfig{}.get("gen.temperature"), "0.75");
  EXPECT_EQ(RunConfig{}.get("gen.top_p"), "0.95");
  EXPECT_THROW(RunConfig::parse("run.seed 3\n"), ConfigError);
  EXPECT_EQ(run_cli({"hbat", "keys"}), kExitOk);
}

TEST_F(CliTest, RunDirectoryContents) {
  ASSERT_EQ(run("hbat", "h"), kExitOk);
  for (const char* f : {"config.txt", "run.json", "final.ckpt", "last.ckpt", "ledger.bin", "metrics.csv",
                        "summary.json", "timing.json", "train_curve.csv", "checkpoints/IFA1.ckpt",
                        "checkpoints/HPA2.ckpt"}) {
    EXPECT_TRUE(fs::exists(path("h") / f)) << f;
  }
  EXPECT_FALSE(fs::exists(path("h/.lock")));
  const json info = json::parse(file("h/run.json"));
  EXPECT_EQ(info["subcommand"], "hbat");
  EXPECT_TRUE(info.contains("data_hash"));
  EXPECT_EQ(info["phases"].size(), 4u);
  // The saved config reproduces the run.
  const RunConfig saved = RunConfig::load(path("h/config.txt"));
  EXPECT_EQ(saved.get("model.d_model"), "8");
  EXPECT_EQ(run_cli({"hbat", "hbat", "-c", path("h/config.txt").string(), "-s",
                     "run.output_dir=" + path("h2").string()}),
            kExitOk);
  EXPECT_EQ(file("h/final.ckpt"), file("h2/final.ckpt"));
}

TEST_F(CliTest, LockedDirectoryIsRejected) {
  fs::create_directories(path("locked"));
  write_file_bytes(path("locked/.lock"), "");
  EXPECT_NE(run("sft", "locked"), kExitOk);
  EXPECT_FALSE(fs::exists(path("locked/run.json")));
}

TEST_F(CliTest, NumericAbortExitsWithThree) {
  EXPECT_EQ(run("sft", "boom", {"ifa.lr=1e200", "ifa.momentum=0"}), kExitNumericAbort);
  EXPECT_TRUE(fs::exists(path("boom/last_good.ckpt")));
}

TEST_F(CliTest, EverySubcommandIsReproducible) {
  ASSERT_EQ(run("sft", "sft1"), kExitOk);
  ASSERT_EQ(run("sft", "sft2"), kExitOk);
  ASSERT_EQ(run("rm-train", "rm1"), kExitOk);
  ASSERT_EQ(run("rm-train", "rm2"), kExitOk);
  const std::string rm = "reward.checkpoint=" + path("rm1/final.ckpt").string();
  const std::string init = "model.init_checkpoint=" + path("sft1/final.ckpt").string();
  ASSERT_EQ(run("ppo", "ppo1", {rm, init}), kExitOk);
  ASSERT_EQ(run("ppo", "ppo2", {rm, init}), kExitOk);
  ASSERT_EQ(run("dpo", "dpo1", {init}), kExitOk);
  ASSERT_EQ(run("dpo", "dpo2", {init}), kExitOk);
  ASSERT_EQ(run("hbat", "hb1", {rm, "hbat.hpa=ppo"}), kExitOk);
  ASSERT_EQ(run("hbat", "hb2", {rm, "hbat.hpa=ppo"}), kExitOk);
  ASSERT_EQ(run("hbat", "fz1", {"run.baseline=hbat-freeze"}), kExitOk);
  ASSERT_EQ(run("hbat", "fz2", {"run.baseline=hbat-freeze"}), kExitOk);
  const std::string ev = "eval.checkpoint=" + path("dpo1/final.ckpt").string();
  const std::string base = "eval.baseline_checkpoint=" + path("sft1/final.ckpt").string();
  ASSERT_EQ(run("eval", "ev1", {ev, base, rm}), kExitOk);
  ASSERT_EQ(run("eval", "ev2", {ev, base, rm}), kExitOk);
  ASSERT_EQ(run("gen-data", "gd1"), kExitOk);
  ASSERT_EQ(run("gen-data", "gd2"), kExitOk);
  for (const char* pair : {"sft", "rm", "ppo", "dpo", "hb", "fz", "ev", "gd"}) {
    const std::string a = std::string(pair) + "1/", b = std::string(pair) + "2/";
    for (const char* f : {"final.ckpt", "last.ckpt", "value.ckpt", "ledger.bin", "metrics.csv", "summary.json",
                          "train_curve.csv", "judgments.jsonl", "ifa_train.jsonl", "hpa_val.jsonl"}) {
      if (!fs::exists(path(a + f))) continue;
      EXPECT_EQ(file(a + f), file(b + f)) << a << f;
    }
    EXPECT_TRUE(fs::exists(path(a + "metrics.csv"))) << pair;
  }
  EXPECT_TRUE(fs::exists(path("hb1/value.ckpt")));
  EXPECT_TRUE(fs::exists(path("ev1/judgments.jsonl")));
  const json summary = json::parse(file("ev1/summary.json"));
  EXPECT_TRUE(summary.contains("win_rate_a"));
}

TEST_F(CliTest, SftThenDpoEqualsTwoStage) {
  ASSERT_EQ(run("hbat", "two", {"run.baseline=two-stage", "hbat.subsets=1", "hbat.lambda=0"}), kExitOk);
  ASSERT_EQ(run("sft", "sft", {"hbat.subsets=1"}), kExitOk);
  ASSERT_EQ(run("dpo", "dpo", {"hbat.subsets=1", "model.init_checkpoint=" + path("sft/last.ckpt").string()}), kExitOk);
  EXPECT_EQ(file("two/checkpoints/IFA1.ckpt"), file("sft/last.ckpt"));
  EXPECT_EQ(file("two/last.ckpt"), file("dpo/last.ckpt"));
  const json two = json::parse(file("two/run.json"));
  const json dpo = json::parse(file("dpo/run.json"));
  EXPECT_EQ(two["phases"].back()["metrics"], dpo["phases"].back()["metrics"]);
}

TEST_F(CliTest, GeneratedDataLoadsFromFiles) {
  ASSERT_EQ(run("gen-data", "gd"), kExitOk);
  const std::vector<std::string> files = {
      "data.source=files",
      "data.ifa_train=" + path("gd/ifa_train.jsonl").string(),
      "data.hpa_train=" + path("gd/hpa_train.jsonl").string(),
      "data.ifa_val=" + path("gd/ifa_val.jsonl").string(),
      "data.hpa_val=" + path("gd/hpa_val.jsonl").string()};
  ASSERT_EQ(run("sft", "from_files", files), kExitOk);
  ASSERT_EQ(run("sft", "synthetic"), kExitOk);
  EXPECT_EQ(file("from_files/final.ckpt"), file("synthetic/final.ckpt"));
  EXPECT_EQ(json::parse(file("from_files/run.json"))["data_hash"], json::parse(file("synthetic/run.json"))["data_hash"]);

  write_file_bytes(path("broken.jsonl"), "{\"prompt\":\"a\",\"response\":\"b\"}\n{\"prompt\":1}\n");
  std::vector<std::string> broken = files;
  broken[1] = "data.ifa_train=" + path("broken.jsonl").string();
  EXPECT_EQ(run("sft", "broken", broken), kExitConfigError);
}

TEST_F(CliTest, OutputRootEnvironmentVariable) {
  ::setenv("HBAT_OUTPUT_ROOT", root_.c_str(), 1);
  std::vector<std::string> args = {"hbat", "gen-data", "-s", "run.output_dir=relative/run", "-s", "synth.train_size=4",
                                   "-s", "synth.val_size=2"};
  const int code = run_cli(args);
  ::unsetenv("HBAT_OUTPUT_ROOT");
  EXPECT_EQ(code, kExitOk);
  EXPECT_TRUE(fs::exists(path("relative/run/ifa_train.jsonl")));
}

// Default model and optimizer on the short copy task.
TEST_F(CliTest, RewardModelReachesHighHeldOutAccuracy) {
  ASSERT_EQ(run("rm-train", "rm", {"synth.task=copy", "synth.min_length=2", "synth.max_length=3"}, false), kExitOk);
  const json summary = json::parse(file("rm/run.json"));
  EXPECT_GE(summary["pairwise_accuracy"].get<double>(), 0.9) << summary.dump();
}

}  // namespace
}  // namespace hbat
