#pragma once

// Command implementations behind the CLI verbs train / verify / sweep /
// export-policy. Each returns a process exit code: 0 success, 1 runtime
// failure, 2 configuration failure. The thin main() in tools/ only parses
// flags and dispatches here, so commands stay testable in-process.

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <set>
#include <string>
#include <vector>

#include "hyperaug/config.hpp"
#include "hyperaug/data.hpp"
#include "hyperaug/metrics.hpp"
#include "hyperaug/models.hpp"
#include "hyperaug/trainloop.hpp"
#include "hyperaug/verify.hpp"

namespace hyperaug {

// RA_SEED overrides the config seed after file values and flag overrides.
inline bool apply_env_seed(RunConfig& rc) {
  const char* env = std::getenv("RA_SEED");
  if (!env || !*env) return false;
  try {
    size_t pos = 0;
    uint64_t seed = std::stoull(env, &pos);
    if (pos != std::string(env).size()) throw std::invalid_argument("trailing");
    rc.seed = seed;
    return true;
  } catch (const std::exception&) {
    throw ConfigError(std::string("RA_SEED='") + env +
                      "' is not a non-negative integer");
  }
}

template <typename Real>
struct LoadedData {
  Dataset<Real> train, val, test;
};

// Resolves the configured dataset into train/val/test splits. Synth draws
// two disjoint seeded samples; file-backed sets honor train/test limits by
// taking a file-order prefix (deterministic).
template <typename Real>
LoadedData<Real> load_data(const RunConfig& rc) {
  Dataset<Real> pool, test;
  switch (rc.dataset) {
    case DatasetKind::Synth: {
      pool = synth_dataset<Real>(rc.synth_count, rc.synth_classes, rc.seed);
      int64_t test_n = rc.test_limit > 0 ? rc.test_limit
                                         : std::max<int64_t>(rc.synth_count / 4, 16);
      test = synth_dataset<Real>(test_n, rc.synth_classes,
                                 Rng::mix(rc.seed, 0x74657374ull));
      break;
    }
    case DatasetKind::Mnist: {
      pool = load_mnist_idx<Real>(rc.data_dir + "/train-images-idx3-ubyte",
                                  rc.data_dir + "/train-labels-idx1-ubyte");
      test = load_mnist_idx<Real>(rc.data_dir + "/t10k-images-idx3-ubyte",
                                  rc.data_dir + "/t10k-labels-idx1-ubyte");
      break;
    }
    case DatasetKind::Cifar10: {
      std::vector<std::string> files;
      for (int i = 1; i <= 5; ++i)
        files.push_back(rc.data_dir + "/data_batch_" + std::to_string(i) +
                        ".bin");
      pool = load_cifar10_binary<Real>(files);
      test = load_cifar10_binary<Real>(rc.data_dir + "/test_batch.bin");
      break;
    }
  }
  auto prefix = [](Dataset<Real>& ds, int64_t limit) {
    if (limit <= 0 || limit >= ds.count()) return;
    std::vector<int64_t> idx(size_t(limit), 0);
    for (int64_t i = 0; i < limit; ++i) idx[size_t(i)] = i;
    ds = ds.subset(idx);
  };
  if (rc.dataset != DatasetKind::Synth) {
    prefix(pool, rc.train_limit);
    prefix(test, rc.test_limit);
  }
  SplitSpec ss;
  ss.validation_fraction = rc.validation_fraction;
  ss.split_seed = rc.seed;
  auto [train, val] = split(pool, ss);
  return LoadedData<Real>{std::move(train), std::move(val), std::move(test)};
}

inline ModelSpec model_spec_for(const RunConfig& rc, int64_t channels,
                                int64_t height, int64_t width,
                                int64_t classes) {
  ModelSpec spec;
  spec.kind = rc.model_kind;
  spec.in_channels = channels;
  spec.height = height;
  spec.width = width;
  spec.hidden = rc.hidden;
  spec.classes = classes;
  return spec;
}

struct RunSummary {
  double final_test_error = 0;
  uint64_t peak_memory_proxy = 0;  // max peak_tape_nodes over the run
  std::string metrics_path;
};

// One full training run with all artifacts written under rc.output_dir:
// metrics.jsonl (streamed per epoch), policy.json, checkpoint.bin/.json.
template <typename Real>
RunSummary run_one(const RunConfig& rc, bool quiet = false) {
  namespace fs = std::filesystem;
  fs::create_directories(rc.output_dir);
  LoadedData<Real> data = load_data<Real>(rc);
  ModelSpec spec = model_spec_for(rc, data.train.channels, data.train.height,
                                  data.train.width, data.train.class_count);
  TrainConfig<Real> tc = rc.train_config<Real>();

  RunSummary summary;
  summary.metrics_path = rc.output_dir + "/metrics.jsonl";
  MetricsWriter writer(summary.metrics_path, rc.timings);

  auto on_start = [&](const PolicySnapshot& snap, double initial_error) {
    writer.write_initial(snap, initial_error);
    summary.final_test_error = initial_error;
  };
  auto on_epoch = [&](const EpochRecord& rec) {
    summary.final_test_error = rec.test_error;
    summary.peak_memory_proxy =
        std::max(summary.peak_memory_proxy, uint64_t(rec.peak_tape_nodes));
    writer.write_epoch(rec);
    if (!quiet) {
      std::printf(
          "epoch %3lld  train %.4f  val %.4f  test_err %.4f  |hg| %.5f%s\n",
          (long long)rec.epoch, rec.train_loss, rec.val_loss, rec.test_error,
          rec.hypergrad_norm, rec.divergence_skips ? "  [skipped updates]" : "");
      std::fflush(stdout);
    }
  };

  TrainResult<Real> result = run_training<Real>(tc, spec, data.train, data.val,
                                                data.test, on_epoch, on_start);

  write_policy_json(rc.output_dir + "/policy.json", result.policy.snapshot());
  save_checkpoint<Real>(rc.output_dir + "/checkpoint.bin",
                        rc.output_dir + "/checkpoint.json", spec,
                        result.params);
  return summary;
}

inline RunSummary run_one_dispatch(const RunConfig& rc, bool quiet = false) {
  if (rc.precision == Precision::F32) return run_one<float>(rc, quiet);
  return run_one<double>(rc, quiet);
}

// ---- commands ----

inline int cmd_train(const std::string& config_path,
                     const std::vector<std::string>& overrides,
                     bool quiet = false) {
  RunConfig rc;
  try {
    rc = load_run_config(config_path, overrides);
    apply_env_seed(rc);
    rc.validate();
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  }
  try {
    RunSummary s = run_one_dispatch(rc, quiet);
    if (!quiet)
      std::printf("final test error %.4f  (metrics: %s)\n", s.final_test_error,
                  s.metrics_path.c_str());
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "runtime error: " << e.what() << "\n";
    return 1;
  }
}

inline int cmd_verify(uint64_t seed = 0) {
  std::vector<SelfCheck> checks;
  try {
    checks = run_self_checks(seed);
  } catch (const std::exception& e) {
    std::cerr << "verify crashed: " << e.what() << "\n";
    return 1;
  }
  size_t width = 0;
  for (const auto& c : checks) width = std::max(width, c.name.size());
  bool all = true;
  for (const auto& c : checks) {
    std::printf("%-*s  %s  %s\n", int(width), c.name.c_str(),
                c.pass ? "PASS" : "FAIL", c.detail.c_str());
    all = all && c.pass;
  }
  std::printf("%zu/%zu checks passed\n",
              size_t(std::count_if(checks.begin(), checks.end(),
                                   [](const SelfCheck& c) { return c.pass; })),
              checks.size());
  return all ? 0 : 1;
}

// Runs base_config once per (value, seed), value applied as an override to
// `param`, each run in its own subdirectory. Emits sweep.csv in the base
// output_dir. Per-run failures are recorded and the sweep continues.
inline int cmd_sweep(const std::string& config_path,
                     const std::vector<std::string>& overrides,
                     const std::string& param,
                     const std::vector<std::string>& values,
                     std::vector<uint64_t> seeds, bool quiet = false) {
  RunConfig base;
  try {
    base = load_run_config(config_path, overrides);
    apply_env_seed(base);
    if (param.empty()) throw ConfigError("sweep: --param is required");
    if (values.empty()) throw ConfigError("sweep: --values is required");
    // every value must parse against the schema before any run starts
    for (const auto& v : values)
      (void)load_run_config(config_path, [&] {
        auto o = overrides;
        o.push_back(param + "=" + v);
        return o;
      }());
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  }
  if (seeds.empty()) seeds.push_back(base.seed);

  std::vector<std::string> unique_values;
  std::set<std::string> seen;
  for (const auto& v : values)
    if (seen.insert(v).second) unique_values.push_back(v);

  namespace fs = std::filesystem;
  fs::create_directories(base.output_dir);
  std::vector<SweepRow> rows;
  for (const auto& value : unique_values) {
    for (uint64_t seed : seeds) {
      SweepRow row;
      row.param = param;
      try {
        row.value = std::stod(value);
      } catch (const std::exception&) {
        row.value = 0;  // non-numeric sweep values keep 0 in the value column
      }
      row.seed = seed;
      try {
        auto o = overrides;
        o.push_back(param + "=" + value);
        RunConfig rc = load_run_config(config_path, o);
        apply_env_seed(rc);
        rc.seed = seed;
        rc.output_dir = base.output_dir + "/sweep_" + param + "_" + value +
                        "_seed" + std::to_string(seed);
        RunSummary s = run_one_dispatch(rc, /*quiet=*/true);
        row.final_test_error = s.final_test_error;
        row.peak_memory_proxy = s.peak_memory_proxy;
        if (!quiet)
          std::printf("sweep %s=%s seed=%llu -> test_err %.4f, peak nodes %llu\n",
                      param.c_str(), value.c_str(), (unsigned long long)seed,
                      row.final_test_error,
                      (unsigned long long)row.peak_memory_proxy);
      } catch (const std::exception& e) {
        row.status = "error";
        std::cerr << "sweep " << param << "=" << value << " seed=" << seed
                  << " failed: " << e.what() << "\n";
      }
      rows.push_back(row);
    }
  }
  std::string csv = base.output_dir + "/sweep.csv";
  write_sweep_csv(csv, rows);
  if (!quiet) std::printf("wrote %s (%zu rows)\n", csv.c_str(), rows.size());
  return 0;
}

inline int cmd_export_policy(const std::string& run_dir) {
  std::string metrics = run_dir + "/metrics.jsonl";
  if (!std::filesystem::exists(metrics)) {
    std::cerr << "config error: no metrics.jsonl under " << run_dir << "\n";
    return 2;
  }
  try {
    std::string csv = run_dir + "/policy_evolution.csv";
    export_policy_evolution(metrics, csv);
    std::printf("wrote %s\n", csv.c_str());
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "runtime error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace hyperaug
