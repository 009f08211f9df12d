// Command-line front end: train / verify / sweep / export-policy.
// Flag parsing only; the command logic lives in hyperaug/cli.hpp.

#include <cstdint>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "hyperaug/cli.hpp"

int main(int argc, char** argv) {
  CLI::App app{"bilevel trainer for image classifiers with a learned, "
               "differentiable augmentation policy"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  bool quiet = false;

  auto* train = app.add_subcommand("train", "run one training configuration");
  train->add_option("config", config_path, "config file (TOML-style)")
      ->required();
  train->add_option("--set", overrides,
                    "override a config key, e.g. --set train.epochs=5");
  train->add_flag("--quiet", quiet, "suppress per-epoch progress lines");

  uint64_t verify_seed = 0;
  auto* verify = app.add_subcommand(
      "verify", "run the built-in oracle suite and print a pass/fail table");
  verify->add_option("--seed", verify_seed, "seed for randomized checks");

  std::string sweep_param;
  std::vector<std::string> sweep_values;
  std::vector<uint64_t> sweep_seeds;
  auto* sweep = app.add_subcommand(
      "sweep", "run the base config once per value per seed, emit sweep.csv");
  sweep->add_option("config", config_path, "base config file")->required();
  sweep->add_option("--param", sweep_param,
                    "config key to sweep, e.g. train.inner_steps")
      ->required();
  sweep->add_option("--values", sweep_values, "values to sweep over")
      ->required()
      ->delimiter(',');
  sweep->add_option("--seeds", sweep_seeds,
                    "seeds per value (default: the config seed)")
      ->delimiter(',');
  sweep->add_option("--set", overrides, "base-config overrides");
  sweep->add_flag("--quiet", quiet, "suppress per-run progress lines");

  std::string run_dir;
  auto* expol = app.add_subcommand(
      "export-policy",
      "convert a run's metrics.jsonl into policy_evolution.csv");
  expol->add_option("run_dir", run_dir, "directory holding metrics.jsonl")
      ->required();

  CLI11_PARSE(app, argc, argv);

  if (train->parsed()) return hyperaug::cmd_train(config_path, overrides, quiet);
  if (verify->parsed()) return hyperaug::cmd_verify(verify_seed);
  if (sweep->parsed())
    return hyperaug::cmd_sweep(config_path, overrides, sweep_param,
                               sweep_values, sweep_seeds, quiet);
  return hyperaug::cmd_export_policy(run_dir);
}
