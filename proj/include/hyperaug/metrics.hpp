#pragma once

// Run artifacts: the per-epoch metrics.jsonl stream, the final policy.json,
// and the two plot-ready CSV exports (policy evolution and sweep results).
//
// metrics.jsonl carries one JSON object per line: an epoch-0 record with the
// pre-training policy and test error, then one record per trained epoch,
// epoch strictly increasing. Every line is flushed when written so the file
// stays valid line-by-line even if the run dies. wall_ms is serialized as 0
// unless timings are enabled; everything else is bit-deterministic for a
// fixed seed in 64-bit mode.

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "hyperaug/augment.hpp"
#include "hyperaug/policy.hpp"
#include "hyperaug/tensor.hpp"
#include "hyperaug/trainloop.hpp"

namespace hyperaug {

namespace detail {

inline nlohmann::json snapshot_to_json(const PolicySnapshot& snap) {
  nlohmann::json j;
  nlohmann::json stages = nlohmann::json::array();
  for (const auto& st : snap.stages) {
    nlohmann::json s;
    s["pi"] = st.pi;
    s["p"] = st.p;
    s["mu"] = st.mu;
    stages.push_back(s);
  }
  j["stages"] = stages;
  return j;
}

inline PolicySnapshot snapshot_from_json(const nlohmann::json& j) {
  PolicySnapshot snap;
  for (const auto& s : j.at("stages")) {
    PolicyStageSnapshot st;
    st.pi = s.at("pi").get<std::vector<double>>();
    st.p = s.at("p").get<std::vector<double>>();
    st.mu = s.at("mu").get<std::vector<double>>();
    snap.stages.push_back(std::move(st));
  }
  return snap;
}

// Shortest decimal that parses back to the same double; matches the JSON
// serialization so CSV exports round-trip bit-exactly.
inline std::string double_repr(double v) {
  nlohmann::json j = v;
  return j.dump();
}

}  // namespace detail

// Streams metrics.jsonl; one flush per record.
class MetricsWriter {
 public:
  MetricsWriter(const std::string& path, bool timings)
      : out_(path), timings_(timings) {
    if (!out_) throw DataError("MetricsWriter: cannot open " + path);
  }

  // Pre-training state as the epoch-0 record.
  void write_initial(const PolicySnapshot& policy, double initial_test_error) {
    nlohmann::json j;
    j["epoch"] = 0;
    j["train_loss"] = 0.0;
    j["val_loss"] = 0.0;
    j["test_error"] = initial_test_error;
    j["grad_norm_theta"] = 0.0;
    j["hypergrad_norm"] = 0.0;
    j["policy_snapshot"] = detail::snapshot_to_json(policy);
    j["peak_tape_nodes"] = 0;
    j["wall_ms"] = 0.0;
    j["divergence_skips"] = 0;
    out_ << j.dump() << "\n";
    out_.flush();
  }

  void write_epoch(const EpochRecord& rec) {
    nlohmann::json j;
    j["epoch"] = rec.epoch;
    j["train_loss"] = rec.train_loss;
    j["val_loss"] = rec.val_loss;
    j["test_error"] = rec.test_error;
    j["grad_norm_theta"] = rec.grad_norm_theta;
    j["hypergrad_norm"] = rec.hypergrad_norm;
    j["policy_snapshot"] = detail::snapshot_to_json(rec.policy);
    j["peak_tape_nodes"] = rec.peak_tape_nodes;
    j["wall_ms"] = timings_ ? rec.wall_ms : 0.0;
    j["divergence_skips"] = rec.divergence_skips;
    out_ << j.dump() << "\n";
    out_.flush();
  }

 private:
  std::ofstream out_;
  bool timings_;
};

inline void write_policy_json(const std::string& path,
                              const PolicySnapshot& snap) {
  std::ofstream out(path);
  if (!out) throw DataError("write_policy_json: cannot open " + path);
  nlohmann::json j = detail::snapshot_to_json(snap);
  nlohmann::json ops = nlohmann::json::array();
  for (int i = 0; i < kNumAugOps; ++i) ops.push_back(aug_op_name(AugOp(i)));
  j["ops"] = ops;
  out << j.dump(2) << "\n";
}

inline PolicySnapshot read_policy_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("read_policy_json: cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("read_policy_json: bad JSON in " + path + ": " + e.what());
  }
  return detail::snapshot_from_json(j);
}

// One parsed metrics.jsonl line.
struct MetricsRecord {
  int64_t epoch = 0;
  double train_loss = 0, val_loss = 0, test_error = 0;
  double grad_norm_theta = 0, hypergrad_norm = 0;
  PolicySnapshot policy;
  uint64_t peak_tape_nodes = 0;
  double wall_ms = 0;
  int64_t divergence_skips = 0;
};

inline std::vector<MetricsRecord> read_metrics_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("read_metrics_jsonl: cannot open " + path);
  std::vector<MetricsRecord> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw DataError("read_metrics_jsonl: " + path + ":" +
                      std::to_string(lineno) + ": " + e.what());
    }
    MetricsRecord r;
    r.epoch = j.at("epoch").get<int64_t>();
    r.train_loss = j.at("train_loss").get<double>();
    r.val_loss = j.at("val_loss").get<double>();
    r.test_error = j.at("test_error").get<double>();
    r.grad_norm_theta = j.at("grad_norm_theta").get<double>();
    r.hypergrad_norm = j.at("hypergrad_norm").get<double>();
    r.policy = detail::snapshot_from_json(j.at("policy_snapshot"));
    r.peak_tape_nodes = j.at("peak_tape_nodes").get<uint64_t>();
    r.wall_ms = j.at("wall_ms").get<double>();
    r.divergence_skips = j.value("divergence_skips", int64_t(0));
    out.push_back(std::move(r));
  }
  return out;
}

// Per-operation time series from a run's metrics stream:
// epoch,stage,op,pi,p,mu with mu left empty for ops without a magnitude.
// Values print in round-trip form, so re-parsing gives the snapshot doubles
// bit-exactly.
inline void export_policy_evolution(const std::string& metrics_path,
                                    const std::string& csv_path) {
  auto records = read_metrics_jsonl(metrics_path);
  if (records.empty())
    throw DataError("export_policy_evolution: no records in " + metrics_path);
  std::ofstream out(csv_path);
  if (!out) throw DataError("export_policy_evolution: cannot open " + csv_path);
  out << "epoch,stage,op,pi,p,mu\n";
  for (const auto& r : records) {
    for (size_t k = 0; k < r.policy.stages.size(); ++k) {
      const auto& st = r.policy.stages[k];
      for (int i = 0; i < kNumAugOps; ++i) {
        AugOp op = AugOp(i);
        out << r.epoch << "," << k << "," << aug_op_name(op) << ","
            << detail::double_repr(st.pi[size_t(i)]) << ","
            << detail::double_repr(st.p[size_t(i)]) << ",";
        if (aug_op_has_magnitude(op))
          out << detail::double_repr(st.mu[size_t(aug_op_mu_index(op))]);
        out << "\n";
      }
    }
  }
}

// One sweep result row per (value, seed) run.
struct SweepRow {
  std::string param;
  double value = 0;
  uint64_t seed = 0;
  double final_test_error = 0;
  uint64_t peak_memory_proxy = 0;  // max peak_tape_nodes over the run
  std::string status = "ok";
};

inline void write_sweep_csv(const std::string& path,
                            const std::vector<SweepRow>& rows) {
  std::ofstream out(path);
  if (!out) throw DataError("write_sweep_csv: cannot open " + path);
  out << "param,value,seed,final_test_error,peak_memory_proxy,status\n";
  for (const auto& r : rows)
    out << r.param << "," << detail::double_repr(r.value) << "," << r.seed
        << "," << detail::double_repr(r.final_test_error) << ","
        << r.peak_memory_proxy << "," << r.status << "\n";
}

}  // namespace hyperaug
