#include <gtest/gtest.h>
#include <sys/wait.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "hyperaug/metrics.hpp"
#include "testutil.hpp"

// Exercises the installed binary end to end through a shell, the way users
// and scripts drive it. HYPERAUG_CLI_PATH comes from the build system.

namespace fs = std::filesystem;

namespace {

struct CliResult {
  int exit_code = -1;
  std::string out, err;
};

CliResult run_cli(const std::string& args, const fs::path& dir,
                  const std::string& env_prefix = "") {
  fs::path out_file = dir / "stdout.txt";
  fs::path err_file = dir / "stderr.txt";
  std::string cmd = env_prefix + std::string(HYPERAUG_CLI_PATH) + " " + args +
                    " > " + out_file.string() + " 2> " + err_file.string();
  int rc = std::system(cmd.c_str());
  CliResult res;
  res.exit_code = WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
  res.out = testutil::slurp(out_file);
  res.err = testutil::slurp(err_file);
  return res;
}

fs::path write_config(const fs::path& dir, const std::string& output_dir,
                      const std::string& extra = "") {
  fs::path p = dir / "run.toml";
  std::ofstream out(p);
  out << "[run]\n"
      << "method = learned\n"
      << "seed = 3\n"
      << "output_dir = \"" << output_dir << "\"\n"
      << "[data]\n"
      << "dataset = synth\n"
      << "synth_count = 48\n"
      << "synth_classes = 4\n"
      << "validation_fraction = 0.25\n"
      << "[model]\n"
      << "kind = mlp\n"
      << "hidden = 8\n"
      << "[train]\n"
      << "epochs = 2\n"
      << "batch_size = 8\n"
      << "inner_steps = 2\n"
      << "warmup_epochs = 0\n"
      << "policy_lr = 0.05\n"
      << "[hypergrad]\n"
      << "alpha = 0.01\n"
      << "terms = 3\n"
      << extra;
  return p;
}

}  // namespace

TEST(CliTrain, WritesAllArtifactsAndExitsZero) {
  fs::path dir = testutil::fresh_dir("cli");
  fs::path run_dir = dir / "out";
  fs::path cfg = write_config(dir, run_dir.string());

  auto res = run_cli("train " + cfg.string(), dir);
  EXPECT_EQ(res.exit_code, 0) << res.err;
  EXPECT_NE(res.out.find("final test error"), std::string::npos) << res.out;
  EXPECT_NE(res.out.find("epoch"), std::string::npos);

  EXPECT_TRUE(fs::exists(run_dir / "metrics.jsonl"));
  EXPECT_TRUE(fs::exists(run_dir / "policy.json"));
  EXPECT_TRUE(fs::exists(run_dir / "checkpoint.bin"));
  EXPECT_TRUE(fs::exists(run_dir / "checkpoint.json"));

  auto records = hyperaug::read_metrics_jsonl((run_dir / "metrics.jsonl").string());
  ASSERT_EQ(records.size(), 3u);  // initial state plus two epochs
  EXPECT_EQ(records[0].epoch, 0);
  EXPECT_EQ(records[2].epoch, 2);

  auto snap = hyperaug::read_policy_json((run_dir / "policy.json").string());
  ASSERT_EQ(snap.stages.size(), 2u);
}

TEST(CliTrain, QuietSuppressesProgressAndOverridesApply) {
  fs::path dir = testutil::fresh_dir("cli");
  fs::path run_dir = dir / "out";
  fs::path cfg = write_config(dir, run_dir.string());

  auto res = run_cli("train " + cfg.string() +
                         " --quiet --set train.epochs=1 --set run.seed=9",
                     dir);
  EXPECT_EQ(res.exit_code, 0) << res.err;
  EXPECT_EQ(res.out, "");
  auto records = hyperaug::read_metrics_jsonl((run_dir / "metrics.jsonl").string());
  EXPECT_EQ(records.size(), 2u);
}

TEST(CliTrain, ConfigErrorsExitTwoAndNameTheProblem) {
  fs::path dir = testutil::fresh_dir("cli");
  fs::path cfg = write_config(dir, (dir / "out").string(),
                              "[extra]\nunknown_knob = 1\n");
  auto res = run_cli("train " + cfg.string() + " --quiet", dir);
  EXPECT_EQ(res.exit_code, 2);
  EXPECT_NE(res.err.find("config error:"), std::string::npos) << res.err;
  EXPECT_NE(res.err.find("'extra.unknown_knob'"), std::string::npos) << res.err;

  auto missing = run_cli("train " + (dir / "absent.toml").string(), dir);
  EXPECT_EQ(missing.exit_code, 2);
  EXPECT_NE(missing.err.find("cannot open config file"), std::string::npos);

  fs::path bad = write_config(dir, (dir / "out2").string());
  auto invalid = run_cli(
      "train " + bad.string() + " --quiet --set train.momentum=2.0", dir);
  EXPECT_EQ(invalid.exit_code, 2);
  EXPECT_NE(invalid.err.find("momentum"), std::string::npos) << invalid.err;
}

TEST(CliVerify, AllChecksPass) {
  fs::path dir = testutil::fresh_dir("cli");
  auto res = run_cli("verify", dir);
  EXPECT_EQ(res.exit_code, 0) << res.out << res.err;
  EXPECT_NE(res.out.find("7/7 checks passed"), std::string::npos) << res.out;
  EXPECT_EQ(res.out.find("FAIL"), std::string::npos) << res.out;

  auto seeded = run_cli("verify --seed 5", dir);
  EXPECT_EQ(seeded.exit_code, 0) << seeded.out;
}

TEST(CliSeedEnv, OverridesConfigSeed) {
  fs::path dir = testutil::fresh_dir("cli");
  fs::path run_a = dir / "a";
  fs::path run_b = dir / "b";
  fs::path run_c = dir / "c";

  fs::path cfg_a = write_config(dir, run_a.string());
  auto a = run_cli("train " + cfg_a.string() + " --quiet", dir,
                   "RA_SEED=1234 ");
  EXPECT_EQ(a.exit_code, 0) << a.err;

  // The env seed beats both the file seed and --set.
  auto b = run_cli("train " + cfg_a.string() + " --quiet --set run.seed=3" +
                       " --set run.output_dir=" + run_b.string(),
                   dir, "RA_SEED=1234 ");
  EXPECT_EQ(b.exit_code, 0) << b.err;

  auto c = run_cli("train " + cfg_a.string() + " --quiet --set run.output_dir=" +
                       run_c.string(),
                   dir);
  EXPECT_EQ(c.exit_code, 0) << c.err;

  std::string ma = testutil::slurp(run_a / "metrics.jsonl");
  std::string mb = testutil::slurp(run_b / "metrics.jsonl");
  std::string mc = testutil::slurp(run_c / "metrics.jsonl");
  EXPECT_EQ(ma, mb);  // same effective seed
  EXPECT_NE(ma, mc);  // env seed actually changed the run
}

TEST(CliSeedEnv, MalformedValueExitsTwo) {
  fs::path dir = testutil::fresh_dir("cli");
  fs::path cfg = write_config(dir, (dir / "out").string());
  auto res = run_cli("train " + cfg.string() + " --quiet", dir,
                     "RA_SEED=12x ");
  EXPECT_EQ(res.exit_code, 2);
  EXPECT_NE(res.err.find("RA_SEED"), std::string::npos) << res.err;

  // Empty counts as unset.
  auto empty = run_cli("train " + cfg.string() + " --quiet", dir, "RA_SEED= ");
  EXPECT_EQ(empty.exit_code, 0) << empty.err;
}

TEST(CliSweep, RunsEveryValueSeedPairAndEmitsCsv) {
  fs::path dir = testutil::fresh_dir("cli");
  fs::path base_out = dir / "sweep_out";
  fs::path cfg = write_config(dir, base_out.string());

  auto res = run_cli("sweep " + cfg.string() +
                         " --param train.inner_steps --values 1,2 --seeds 5bb"
                         " --quiet --set train.epochs=1",
                     dir);
  // CLI11 rejects the malformed seed list before the command runs.
  EXPECT_NE(res.exit_code, 0);

  res = run_cli("sweep " + cfg.string() +
                    " --param train.inner_steps --values 1,2 --seeds 5"
                    " --quiet --set train.epochs=1",
                dir);
  EXPECT_EQ(res.exit_code, 0) << res.err;

  fs::path csv = base_out / "sweep.csv";
  ASSERT_TRUE(fs::exists(csv));
  std::string text = testutil::slurp(csv);
  EXPECT_NE(text.find("param,value,seed,final_test_error,peak_memory_proxy,status"),
            std::string::npos);
  EXPECT_NE(text.find("train.inner_steps,1.0,5,"), std::string::npos) << text;
  EXPECT_NE(text.find("train.inner_steps,2.0,5,"), std::string::npos) << text;
  // Every run succeeded: each data row ends in status "ok".
  EXPECT_EQ(text.find(",error"), std::string::npos) << text;
  EXPECT_EQ(text.find(",diverged"), std::string::npos) << text;

  EXPECT_TRUE(fs::exists(base_out / "sweep_train.inner_steps_1_seed5" /
                         "metrics.jsonl"));
  EXPECT_TRUE(fs::exists(base_out / "sweep_train.inner_steps_2_seed5" /
                         "metrics.jsonl"));
}

TEST(CliSweep, RejectsValuesThatFailTheSchemaBeforeRunning) {
  fs::path dir = testutil::fresh_dir("cli");
  fs::path base_out = dir / "sweep_out";
  fs::path cfg = write_config(dir, base_out.string());

  auto res = run_cli("sweep " + cfg.string() +
                         " --param train.inner_steps --values 1,0 --quiet",
                     dir);
  EXPECT_EQ(res.exit_code, 2);
  EXPECT_NE(res.err.find("config error:"), std::string::npos) << res.err;
  EXPECT_FALSE(fs::exists(base_out / "sweep.csv"));
}

TEST(CliExportPolicy, ConvertsMetricsAndRejectsMissingRuns) {
  fs::path dir = testutil::fresh_dir("cli");
  fs::path run_dir = dir / "out";
  fs::path cfg = write_config(dir, run_dir.string());
  ASSERT_EQ(run_cli("train " + cfg.string() + " --quiet", dir).exit_code, 0);

  auto res = run_cli("export-policy " + run_dir.string(), dir);
  EXPECT_EQ(res.exit_code, 0) << res.err;
  fs::path csv = run_dir / "policy_evolution.csv";
  ASSERT_TRUE(fs::exists(csv));
  std::string text = testutil::slurp(csv);
  EXPECT_NE(text.find("epoch,stage,op,pi,p,mu"), std::string::npos);
  // 3 records x 2 stages x 14 ops data rows.
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 1 + 3 * 2 * 14);

  auto missing = run_cli("export-policy " + (dir / "nope").string(), dir);
  EXPECT_EQ(missing.exit_code, 2);
  EXPECT_NE(missing.err.find("no metrics.jsonl"), std::string::npos);
}

TEST(CliParsing, UnknownSubcommandFails) {
  fs::path dir = testutil::fresh_dir("cli");
  auto res = run_cli("frobnicate", dir);
  EXPECT_NE(res.exit_code, 0);
  auto nothing = run_cli("", dir);
  EXPECT_NE(nothing.exit_code, 0);
}
