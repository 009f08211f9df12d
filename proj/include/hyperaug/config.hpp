#pragma once

// Declarative run configuration: a small TOML-style file of [section]s and
// key = value lines feeding one RunConfig. Parsing is total: every reachable
// failure throws ConfigError naming the offending line or key, and keys the
// schema does not know are rejected rather than ignored.

#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "hyperaug/models.hpp"
#include "hyperaug/tensor.hpp"
#include "hyperaug/trainloop.hpp"

namespace hyperaug {

struct ConfigError : TensorError {
  using TensorError::TensorError;
};

enum class Precision { F32, F64 };

inline const char* precision_name(Precision p) {
  return p == Precision::F32 ? "f32" : "f64";
}

inline Precision precision_from_name(const std::string& s) {
  if (s == "f32") return Precision::F32;
  if (s == "f64") return Precision::F64;
  throw ConfigError("unknown precision '" + s + "' (want f32|f64)");
}

enum class DatasetKind { Synth, Mnist, Cifar10 };

inline const char* dataset_kind_name(DatasetKind k) {
  switch (k) {
    case DatasetKind::Synth: return "synth";
    case DatasetKind::Mnist: return "mnist";
    default: return "cifar10";
  }
}

inline DatasetKind dataset_kind_from_name(const std::string& s) {
  if (s == "synth") return DatasetKind::Synth;
  if (s == "mnist") return DatasetKind::Mnist;
  if (s == "cifar10") return DatasetKind::Cifar10;
  throw ConfigError("unknown dataset '" + s + "' (want synth|mnist|cifar10)");
}

// Everything one run needs; numeric training fields mirror TrainConfig.
struct RunConfig {
  // [run]
  Method method = Method::Learned;
  HypergradMethod hypergrad_method = HypergradMethod::Neumann;
  Precision precision = Precision::F64;
  uint64_t seed = 0;
  std::string output_dir = "runs/out";
  bool timings = false;  // measured wall_ms in metrics; off for bit-exact logs

  // [data]
  DatasetKind dataset = DatasetKind::Synth;
  std::string data_dir;
  int64_t synth_count = 512;
  int64_t synth_classes = 4;
  int64_t train_limit = 0;  // 0 = use everything
  int64_t test_limit = 0;
  double validation_fraction = 0.10;

  // [model]
  ModelKind model_kind = ModelKind::SmallCnn;
  int64_t hidden = 64;

  // [train]
  int64_t epochs = 30;
  int64_t batch_size = 32;
  int inner_steps = 30;
  int warmup_epochs = 20;
  double inner_lr = 0.05;
  double momentum = 0.9;
  double policy_lr = 1e-2;
  double rms_decay = 0.99;
  double rms_eps = 1e-8;
  bool keep_partial = true;
  bool baseline_flip = false;
  bool abort_on_divergence = false;

  // [policy]
  int policy_stages = 2;
  double tau = 0.05;

  // [hypergrad]
  double alpha = 1e-3;
  int neumann_terms = 5;
  double divergence_factor = 1e6;
  uint64_t cache_cap_floats = uint64_t(1) << 30;

  template <typename Real>
  TrainConfig<Real> train_config() const {
    TrainConfig<Real> t;
    t.epochs = epochs;
    t.batch_size = batch_size;
    t.inner_steps = inner_steps;
    t.warmup_epochs = warmup_epochs;
    t.inner_lr = Real(inner_lr);
    t.momentum = Real(momentum);
    t.policy_lr = Real(policy_lr);
    t.rms_decay = Real(rms_decay);
    t.rms_eps = Real(rms_eps);
    t.policy_stages = policy_stages;
    t.tau = Real(tau);
    t.neumann.alpha = Real(alpha);
    t.neumann.terms = neumann_terms;
    t.neumann.divergence_factor = Real(divergence_factor);
    t.hypergrad_method = hypergrad_method;
    t.cache_cap_floats = size_t(cache_cap_floats);
    t.method = method;
    t.keep_partial = keep_partial;
    t.baseline_flip = baseline_flip;
    t.abort_on_divergence = abort_on_divergence;
    t.seed = seed;
    return t;
  }

  void validate() const {
    try {
      train_config<double>().validate();
    } catch (const ValueError& e) {
      throw ConfigError(e.what());
    }
    if (validation_fraction <= 0 || validation_fraction >= 1)
      throw ConfigError("data.validation_fraction must be in (0,1)");
    if (synth_count < 10) throw ConfigError("data.synth_count must be >= 10");
    if (synth_classes < 2 || synth_classes > 16)
      throw ConfigError("data.synth_classes must be in [2,16]");
    if (train_limit < 0 || test_limit < 0)
      throw ConfigError("data limits must be >= 0");
    if (dataset != DatasetKind::Synth && data_dir.empty())
      throw ConfigError("data.data_dir is required for dataset '" +
                        std::string(dataset_kind_name(dataset)) + "'");
    if (hidden < 1) throw ConfigError("model.hidden must be >= 1");
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace detail

// Flat "section.key" -> raw value map in file order. Quotes around string
// values are stripped; '#' starts a comment outside quotes.
class ConfigMap {
 public:
  static ConfigMap parse_text(const std::string& text,
                              const std::string& origin = "<string>") {
    ConfigMap cm;
    std::istringstream in(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      // strip comments, respecting double quotes
      bool quoted = false;
      for (size_t i = 0; i < line.size(); ++i) {
        if (line[i] == '"') quoted = !quoted;
        if (line[i] == '#' && !quoted) {
          line = line.substr(0, i);
          break;
        }
      }
      line = detail::trim(line);
      if (line.empty()) continue;
      if (line.front() == '[') {
        if (line.back() != ']')
          throw ConfigError(origin + ":" + std::to_string(lineno) +
                            ": unterminated section header '" + line + "'");
        section = detail::trim(line.substr(1, line.size() - 2));
        if (section.empty())
          throw ConfigError(origin + ":" + std::to_string(lineno) +
                            ": empty section name");
        continue;
      }
      size_t eq = line.find('=');
      if (eq == std::string::npos)
        throw ConfigError(origin + ":" + std::to_string(lineno) +
                          ": expected 'key = value', got '" + line + "'");
      std::string key = detail::trim(line.substr(0, eq));
      std::string value = detail::trim(line.substr(eq + 1));
      if (key.empty())
        throw ConfigError(origin + ":" + std::to_string(lineno) +
                          ": empty key");
      if (value.size() >= 2 && value.front() == '"' && value.back() == '"')
        value = value.substr(1, value.size() - 2);
      std::string full = section.empty() ? key : section + "." + key;
      if (cm.values_.count(full))
        throw ConfigError(origin + ":" + std::to_string(lineno) +
                          ": duplicate key '" + full + "'");
      cm.values_[full] = value;
      cm.order_.push_back(full);
    }
    return cm;
  }

  static ConfigMap parse_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_text(ss.str(), path);
  }

  // Applies "section.key=value" (CLI override syntax) on top.
  void set(const std::string& assignment) {
    size_t eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0)
      throw ConfigError("override '" + assignment +
                        "' is not of the form section.key=value");
    std::string key = detail::trim(assignment.substr(0, eq));
    std::string value = detail::trim(assignment.substr(eq + 1));
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"')
      value = value.substr(1, value.size() - 2);
    if (!values_.count(key)) order_.push_back(key);
    values_[key] = value;
  }

  bool has(const std::string& key) const { return values_.count(key) != 0; }

  // Typed getters mark the key consumed; leftovers() names anything never
  // consumed so unknown keys fail loudly.
  std::string get_string(const std::string& key, const std::string& dflt) {
    auto it = values_.find(key);
    if (it == values_.end()) return dflt;
    consumed_.insert(key);
    return it->second;
  }

  int64_t get_int(const std::string& key, int64_t dflt) {
    auto it = values_.find(key);
    if (it == values_.end()) return dflt;
    consumed_.insert(key);
    try {
      size_t pos = 0;
      int64_t v = std::stoll(it->second, &pos);
      if (pos != it->second.size()) throw std::invalid_argument("trailing");
      return v;
    } catch (const std::exception&) {
      throw ConfigError("key '" + key + "': '" + it->second +
                        "' is not an integer");
    }
  }

  uint64_t get_uint(const std::string& key, uint64_t dflt) {
    auto it = values_.find(key);
    if (it == values_.end()) return dflt;
    consumed_.insert(key);
    try {
      size_t pos = 0;
      uint64_t v = std::stoull(it->second, &pos);
      if (pos != it->second.size()) throw std::invalid_argument("trailing");
      return v;
    } catch (const std::exception&) {
      throw ConfigError("key '" + key + "': '" + it->second +
                        "' is not a non-negative integer");
    }
  }

  double get_real(const std::string& key, double dflt) {
    auto it = values_.find(key);
    if (it == values_.end()) return dflt;
    consumed_.insert(key);
    try {
      size_t pos = 0;
      double v = std::stod(it->second, &pos);
      if (pos != it->second.size()) throw std::invalid_argument("trailing");
      return v;
    } catch (const std::exception&) {
      throw ConfigError("key '" + key + "': '" + it->second +
                        "' is not a number");
    }
  }

  bool get_bool(const std::string& key, bool dflt) {
    auto it = values_.find(key);
    if (it == values_.end()) return dflt;
    consumed_.insert(key);
    if (it->second == "true") return true;
    if (it->second == "false") return false;
    throw ConfigError("key '" + key + "': '" + it->second +
                      "' is not true or false");
  }

  std::vector<std::string> leftovers() const {
    std::vector<std::string> out;
    for (const auto& k : order_)
      if (!consumed_.count(k)) out.push_back(k);
    return out;
  }

 private:
  std::map<std::string, std::string> values_;
  std::vector<std::string> order_;
  std::set<std::string> consumed_;
};

// Builds a validated RunConfig; any key the schema does not consume is an
// error naming that key.
inline RunConfig run_config_from_map(ConfigMap cm) {
  RunConfig rc;
  try {
    rc.method = method_from_name(cm.get_string("run.method", "learned"));
    rc.hypergrad_method =
        hypergrad_method_from_name(cm.get_string("run.hypergrad", "neumann"));
  } catch (const ValueError& e) {
    throw ConfigError(e.what());
  }
  rc.precision = precision_from_name(cm.get_string("run.precision", "f64"));
  rc.seed = cm.get_uint("run.seed", 0);
  rc.output_dir = cm.get_string("run.output_dir", "runs/out");
  rc.timings = cm.get_bool("run.timings", false);

  rc.dataset = dataset_kind_from_name(cm.get_string("data.dataset", "synth"));
  rc.data_dir = cm.get_string("data.data_dir", "");
  rc.synth_count = cm.get_int("data.synth_count", 512);
  rc.synth_classes = cm.get_int("data.synth_classes", 4);
  rc.train_limit = cm.get_int("data.train_limit", 0);
  rc.test_limit = cm.get_int("data.test_limit", 0);
  rc.validation_fraction = cm.get_real("data.validation_fraction", 0.10);

  try {
    rc.model_kind =
        model_kind_from_name(cm.get_string("model.kind", "smallcnn"));
  } catch (const ValueError& e) {
    throw ConfigError(e.what());
  }
  rc.hidden = cm.get_int("model.hidden", 64);

  rc.epochs = cm.get_int("train.epochs", 30);
  rc.batch_size = cm.get_int("train.batch_size", 32);
  rc.inner_steps = int(cm.get_int("train.inner_steps", 30));
  rc.warmup_epochs = int(cm.get_int("train.warmup_epochs", 20));
  rc.inner_lr = cm.get_real("train.inner_lr", 0.05);
  rc.momentum = cm.get_real("train.momentum", 0.9);
  rc.policy_lr = cm.get_real("train.policy_lr", 1e-2);
  rc.rms_decay = cm.get_real("train.rms_decay", 0.99);
  rc.rms_eps = cm.get_real("train.rms_eps", 1e-8);
  rc.keep_partial = cm.get_bool("train.keep_partial", true);
  rc.baseline_flip = cm.get_bool("train.baseline_flip", false);
  rc.abort_on_divergence = cm.get_bool("train.abort_on_divergence", false);

  rc.policy_stages = int(cm.get_int("policy.stages", 2));
  rc.tau = cm.get_real("policy.tau", 0.05);

  rc.alpha = cm.get_real("hypergrad.alpha", 1e-3);
  rc.neumann_terms = int(cm.get_int("hypergrad.terms", 5));
  rc.divergence_factor = cm.get_real("hypergrad.divergence_factor", 1e6);
  rc.cache_cap_floats =
      cm.get_uint("hypergrad.cache_cap_floats", uint64_t(1) << 30);

  auto unknown = cm.leftovers();
  if (!unknown.empty()) {
    std::string msg = "unknown config key";
    if (unknown.size() > 1) msg += "s";
    msg += ":";
    for (const auto& k : unknown) msg += " '" + k + "'";
    throw ConfigError(msg);
  }
  rc.validate();
  return rc;
}

inline RunConfig load_run_config(const std::string& path,
                                 const std::vector<std::string>& overrides = {}) {
  ConfigMap cm = ConfigMap::parse_file(path);
  for (const auto& o : overrides) cm.set(o);
  return run_config_from_map(std::move(cm));
}

}  // namespace hyperaug
