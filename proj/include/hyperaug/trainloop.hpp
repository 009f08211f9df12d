#pragma once

// The bilevel training procedure: repeat [s inner SGD steps on the policy-
// augmented training batch] then [one policy update from the validation
// loss's hypergradient]. The first `warmup_epochs` epochs train the weights
// on raw batches and leave the policy untouched.
//
// Inner steps never need a gradient in phi, so augmentation there runs on
// constants (no tape). The outer step builds one differentiable graph of
// f(theta, phi) over the last training batch and reuses it for every
// curvature product; g is the loss on an unaugmented validation batch.
//
// theta moves only in inner_step; phi moves only in outer_step.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "hyperaug/augment.hpp"
#include "hyperaug/data.hpp"
#include "hyperaug/hypergrad.hpp"
#include "hyperaug/models.hpp"
#include "hyperaug/policy.hpp"
#include "hyperaug/rng.hpp"

namespace hyperaug {

// Fatal training failure (non-finite loss, exhausted data); message carries
// epoch/step context.
struct TrainError : TensorError {
  using TensorError::TensorError;
};

// Treatment of the augmentation policy over the run.
enum class Method {
  Learned,  // sample from the policy and update it by hypergradient
  Fixed,    // sample from the frozen initial policy, never update
  None,     // no policy augmentation at all
};

inline const char* method_name(Method m) {
  switch (m) {
    case Method::Learned: return "learned";
    case Method::Fixed: return "fixed";
    default: return "none";
  }
}

inline Method method_from_name(const std::string& s) {
  if (s == "learned") return Method::Learned;
  if (s == "fixed") return Method::Fixed;
  if (s == "none") return Method::None;
  throw ValueError("unknown method '" + s + "' (want learned|fixed|none)");
}

enum class HypergradMethod { Neumann, Unrolled };

inline const char* hypergrad_method_name(HypergradMethod m) {
  return m == HypergradMethod::Neumann ? "neumann" : "unrolled";
}

inline HypergradMethod hypergrad_method_from_name(const std::string& s) {
  if (s == "neumann") return HypergradMethod::Neumann;
  if (s == "unrolled") return HypergradMethod::Unrolled;
  throw ValueError("unknown hypergrad method '" + s +
                   "' (want neumann|unrolled)");
}

template <typename Real>
struct TrainConfig {
  int64_t epochs = 30;
  int64_t batch_size = 32;
  int inner_steps = 30;     // s: inner updates per policy update
  int warmup_epochs = 20;   // w: epochs before the policy participates
  Real inner_lr = Real(0.05);
  Real momentum = Real(0.9);
  Real policy_lr = Real(1e-2);
  Real rms_decay = Real(0.99);
  Real rms_eps = Real(1e-8);
  int policy_stages = 2;
  Real tau = Real(0.05);
  NeumannConfig<Real> neumann;
  HypergradMethod hypergrad_method = HypergradMethod::Neumann;
  size_t cache_cap_floats = size_t(1) << 30;
  Method method = Method::Learned;
  bool keep_partial = true;
  bool abort_on_divergence = false;
  bool baseline_flip = false;  // horizontal flips; keep off for digit sets
  uint64_t seed = 0;

  void validate() const {
    if (epochs < 0) throw ValueError("train: epochs must be >= 0");
    if (batch_size < 1) throw ValueError("train: batch_size must be >= 1");
    if (inner_steps < 1) throw ValueError("train: inner_steps must be >= 1");
    if (warmup_epochs < 0) throw ValueError("train: warmup_epochs must be >= 0");
    if (!(inner_lr > Real(0))) throw ValueError("train: inner_lr must be positive");
    if (!(policy_lr > Real(0))) throw ValueError("train: policy_lr must be positive");
    if (momentum < Real(0) || momentum >= Real(1))
      throw ValueError("train: momentum must be in [0,1)");
    if (!(rms_decay > Real(0)) || !(rms_decay < Real(1)))
      throw ValueError("train: rms_decay must be in (0,1)");
    if (!(rms_eps > Real(0))) throw ValueError("train: rms_eps must be positive");
    if (policy_stages < 1) throw ValueError("train: policy_stages must be >= 1");
    if (!(tau > Real(0))) throw ValueError("train: tau must be positive");
    neumann.validate();
  }
};

// ---- optimizers ----

// v <- momentum * v + grad; theta <- theta - lr * v. Buffers mirror the
// parameter tensors and start at zero.
template <typename Real>
class SgdMomentum {
 public:
  SgdMomentum(Real lr, Real momentum) : lr_(lr), momentum_(momentum) {}

  void step(ModelParams<Real>& params, std::span<const Tensor<Real>> grads) {
    if (grads.size() != params.count())
      throw ShapeError("sgd: " + std::to_string(grads.size()) +
                       " gradients for " + std::to_string(params.count()) +
                       " tensors");
    if (velocity_.empty()) {
      velocity_.resize(params.count());
      for (size_t i = 0; i < params.count(); ++i)
        velocity_[i].assign(size_t(params.entries()[i].value.numel()), Real(0));
    }
    for (size_t i = 0; i < params.count(); ++i) {
      const auto& e = params.entries()[i];
      auto gv = grads[i].values();
      auto xv = e.value.values();
      if (gv.size() != xv.size())
        throw ShapeError("sgd: gradient " + std::to_string(i) +
                         " has wrong size");
      std::vector<Real> nx(xv.begin(), xv.end());
      auto& vel = velocity_[i];
      for (size_t k = 0; k < nx.size(); ++k) {
        vel[k] = momentum_ * vel[k] + gv[k];
        nx[k] -= lr_ * vel[k];
      }
      params.entry(i).value =
          Tensor<Real>::constant(Shape(e.value.shape()), std::move(nx));
    }
  }

 private:
  Real lr_, momentum_;
  std::vector<std::vector<Real>> velocity_;
};

// acc <- decay * acc + (1-decay) * g^2; x <- x - lr * g / (sqrt(acc) + eps).
template <typename Real>
class Rmsprop {
 public:
  Rmsprop(Real lr, Real decay, Real eps) : lr_(lr), decay_(decay), eps_(eps) {}

  void step(std::vector<Real>& x, std::span<const Real> grad) {
    if (grad.size() != x.size())
      throw ShapeError("rmsprop: gradient size " + std::to_string(grad.size()) +
                       " vs parameter size " + std::to_string(x.size()));
    if (acc_.empty()) acc_.assign(x.size(), Real(0));
    for (size_t i = 0; i < x.size(); ++i) {
      acc_[i] = decay_ * acc_[i] + (Real(1) - decay_) * grad[i] * grad[i];
      x[i] -= lr_ * grad[i] / (std::sqrt(acc_[i]) + eps_);
    }
  }

 private:
  Real lr_, decay_, eps_;
  std::vector<Real> acc_;
};

// ---- steps ----

template <typename Real>
struct InnerStepResult {
  Real loss = Real(0);
  Real grad_norm = Real(0);
  size_t tape_nodes = 0;
};

// One SGD-with-momentum step on the cross-entropy of the (optionally
// policy-augmented) batch. policy == nullptr trains on the raw batch.
// Augmentation runs off-tape: phi is constant here.
template <typename Real>
InnerStepResult<Real> inner_step(const ModelSpec& spec,
                                 ModelParams<Real>& params,
                                 const PolicyParams<Real>* policy,
                                 const Tensor<Real>& x,
                                 const std::vector<int64_t>& labels,
                                 SgdMomentum<Real>& opt, Rng& rng) {
  Tensor<Real> input = policy ? sample_and_apply(*policy, x, rng) : x;
  Tape<Real> tape;
  std::vector<Tensor<Real>> theta;
  theta.reserve(params.count());
  for (const auto& e : params.entries()) theta.push_back(tape.watch(e.value));
  Tensor<Real> loss = model_loss<Real>(spec, theta, input, labels);
  InnerStepResult<Real> res;
  res.loss = Real(loss.value());
  if (!std::isfinite(double(res.loss)))
    throw TrainError("inner_step: non-finite training loss " +
                     std::to_string(double(res.loss)) +
                     "; lower inner_lr or check the input range");
  auto grads = tape.backward(loss, theta, false);
  Real sq = Real(0);
  for (const auto& g : grads)
    for (Real v : g.values()) sq += v * v;
  res.grad_norm = std::sqrt(sq);
  res.tape_nodes = tape.size();
  opt.step(params, grads);
  return res;
}

template <typename Real>
struct OuterStepResult {
  Real val_loss = Real(0);
  Real hypergrad_norm = Real(0);
  size_t peak_tape_nodes = 0;
  bool skipped = false;   // divergence detected; policy left unchanged
  int divergence_term = -1;
  // Per-step training losses along the recorded trajectory (unrolled only).
  std::vector<Real> step_losses;
};

// One policy update. f is the training loss with the policy applied on-tape
// (phi watched); g is the loss on the raw validation batch. The implicit
// hypergradient feeds one RMSprop step on the raw policy parameters. A
// diverging Neumann series skips the update unless abort_on_divergence.
template <typename Real>
OuterStepResult<Real> outer_step(const ModelSpec& spec,
                                 const ModelParams<Real>& params,
                                 PolicyParams<Real>& policy,
                                 const Tensor<Real>& train_x,
                                 const std::vector<int64_t>& train_labels,
                                 const Tensor<Real>& val_x,
                                 const std::vector<int64_t>& val_labels,
                                 Rmsprop<Real>& opt,
                                 const TrainConfig<Real>& cfg, Rng& rng) {
  OuterStepResult<Real> res;
  ModelParams<Real> hyper = policy.as_model_params();
  const Real tau = policy.tau, tau_b = policy.tau_b;

  ScalarFn2<Real> f = [&](Tape<Real>&, std::span<const Tensor<Real>> theta,
                          std::span<const Tensor<Real>> phi) {
    PolicyParams<Real> live = policy.with_tensors(phi);
    Tensor<Real> input = sample_and_apply(live, train_x, rng);
    return model_loss<Real>(spec, theta, input, train_labels);
  };
  ScalarFn<Real> g = [&](Tape<Real>&, std::span<const Tensor<Real>> theta) {
    return model_loss<Real>(spec, theta, val_x, val_labels);
  };

  HypergradResult<Real> hg;
  try {
    hg = hypergradient<Real>(f, g, params, hyper, cfg.neumann);
  } catch (const DivergenceError& e) {
    if (cfg.abort_on_divergence) throw;
    res.skipped = true;
    res.divergence_term = e.term;
    return res;
  }
  res.hypergrad_norm = detail::l2_norm<Real>(hg.grad_phi);
  res.peak_tape_nodes = hg.peak_tape_nodes;
  if (!std::isfinite(double(res.hypergrad_norm)))
    throw TrainError("outer_step: non-finite hypergradient norm");

  std::vector<Real> flat = hyper.flatten();
  opt.step(flat, hg.grad_phi);
  hyper.unflatten(flat);
  policy.from_model_params(hyper);
  policy.tau = tau;
  policy.tau_b = tau_b;
  return res;
}

// ---- full run ----

struct EpochRecord {
  int64_t epoch = 0;  // 1-based
  double train_loss = 0, val_loss = 0, test_error = 0;
  double grad_norm_theta = 0, hypergrad_norm = 0;
  PolicySnapshot policy;
  size_t peak_tape_nodes = 0;
  double wall_ms = 0;
  int64_t divergence_skips = 0;
};

struct RunMetrics {
  PolicySnapshot initial_policy;
  double initial_test_error = 0;
  std::vector<EpochRecord> epochs;
};

template <typename Real>
struct TrainResult {
  RunMetrics metrics;
  ModelParams<Real> params;
  PolicyParams<Real> policy;
};

namespace detail {

// Full-dataset cross-entropy, off-tape, in fixed chunks.
template <typename Real>
double dataset_loss(const ModelSpec& spec, const ModelParams<Real>& params,
                    const Dataset<Real>& ds) {
  std::vector<Tensor<Real>> theta;
  for (const auto& e : params.entries()) theta.push_back(e.value);
  double total = 0;
  constexpr int64_t chunk = 256;
  for (int64_t start = 0; start < ds.count(); start += chunk) {
    int64_t stop = std::min(ds.count(), start + chunk);
    std::vector<int64_t> idx;
    for (int64_t i = start; i < stop; ++i) idx.push_back(i);
    Tensor<Real> loss = model_loss<Real>(
        spec, theta, ds.batch(idx), ds.batch_labels(idx));
    total += loss.value() * double(stop - start);
  }
  return total / double(ds.count());
}

template <typename Real>
double dataset_error(const ModelSpec& spec, const ModelParams<Real>& params,
                     const Dataset<Real>& ds) {
  std::vector<Tensor<Real>> theta;
  for (const auto& e : params.entries()) theta.push_back(e.value);
  double wrong = 0;
  constexpr int64_t chunk = 256;
  for (int64_t start = 0; start < ds.count(); start += chunk) {
    int64_t stop = std::min(ds.count(), start + chunk);
    std::vector<int64_t> idx;
    for (int64_t i = start; i < stop; ++i) idx.push_back(i);
    auto labels = ds.batch_labels(idx);
    wrong += error_rate(model_forward<Real>(spec, theta, ds.batch(idx)), labels) *
             double(stop - start);
  }
  return wrong / double(ds.count());
}

}  // namespace detail

// Unrolled counterpart of one [s inner steps; 1 policy update] cycle, for
// the memory-contrast diagnostics: all s steps live on a single tape, so the
// node count grows with s. Uses plain SGD (no momentum) along the recorded
// trajectory. Adopts theta_T and applies one RMSprop step to the policy.
template <typename Real>
OuterStepResult<Real> unrolled_cycle(
    const ModelSpec& spec, ModelParams<Real>& params,
    PolicyParams<Real>& policy,
    const std::vector<Tensor<Real>>& step_x,
    const std::vector<std::vector<int64_t>>& step_labels,
    const Tensor<Real>& val_x, const std::vector<int64_t>& val_labels,
    Rmsprop<Real>& opt, const TrainConfig<Real>& cfg, Rng& rng) {
  if (step_x.empty() || step_x.size() != step_labels.size())
    throw ValueError("unrolled_cycle: need one batch per step");
  OuterStepResult<Real> res;
  ModelParams<Real> hyper = policy.as_model_params();
  const Real tau = policy.tau, tau_b = policy.tau_b;

  UnrolledStepFn<Real> f_step = [&](Tape<Real>&,
                                    std::span<const Tensor<Real>> theta,
                                    std::span<const Tensor<Real>> phi, int t) {
    PolicyParams<Real> live = policy.with_tensors(phi);
    Tensor<Real> input = sample_and_apply(live, step_x[size_t(t)], rng);
    return model_loss<Real>(spec, theta, input, step_labels[size_t(t)]);
  };
  ScalarFn<Real> g = [&](Tape<Real>&, std::span<const Tensor<Real>> theta) {
    return model_loss<Real>(spec, theta, val_x, val_labels);
  };

  UnrolledConfig<Real> ucfg;
  ucfg.steps = int(step_x.size());
  ucfg.lr = cfg.inner_lr;
  ucfg.cache_cap_floats = cfg.cache_cap_floats;
  HypergradResult<Real> hg =
      unrolled_hypergradient<Real>(f_step, g, params, hyper, ucfg);
  res.hypergrad_norm = detail::l2_norm<Real>(hg.grad_phi);
  res.peak_tape_nodes = hg.peak_tape_nodes;
  res.step_losses = std::move(hg.step_losses);
  for (Real l : res.step_losses)
    if (!std::isfinite(double(l)))
      throw TrainError("unrolled_cycle: non-finite training loss " +
                       std::to_string(double(l)));

  params.unflatten(hg.theta_final);
  std::vector<Real> flat = hyper.flatten();
  opt.step(flat, hg.grad_phi);
  hyper.unflatten(flat);
  policy.from_model_params(hyper);
  policy.tau = tau;
  policy.tau_b = tau_b;
  return res;
}

// Runs `epochs` epochs of [inner_steps x inner_step; 1 x outer_step] cycles.
// An epoch's trailing group with fewer than inner_steps batches runs inner
// steps only. With hypergrad_method = Unrolled each full group becomes one
// recorded trajectory (unrolled_cycle); warm-up and trailing groups train
// normally. Deterministic given the config; per-epoch records go to on_epoch
// as soon as they are complete.
template <typename Real>
TrainResult<Real> run_training(
    const TrainConfig<Real>& cfg, const ModelSpec& spec,
    const Dataset<Real>& train, const Dataset<Real>& val,
    const Dataset<Real>& test,
    const std::function<void(const EpochRecord&)>& on_epoch = nullptr,
    const std::function<void(const PolicySnapshot&, double)>& on_start =
        nullptr) {
  cfg.validate();
  spec.validate();
  if (cfg.method != Method::None && val.count() < 1)
    throw ValueError("run_training: validation set is empty");

  ModelParams<Real> params = init_model<Real>(spec, cfg.seed);
  PolicyParams<Real> policy = PolicyParams<Real>::init(cfg.policy_stages, cfg.tau);
  SgdMomentum<Real> inner_opt(cfg.inner_lr, cfg.momentum);
  Rmsprop<Real> outer_opt(cfg.policy_lr, cfg.rms_decay, cfg.rms_eps);

  TrainResult<Real> result{RunMetrics{}, params.clone(), policy};
  result.metrics.initial_policy = policy.snapshot();
  result.metrics.initial_test_error = detail::dataset_error(spec, params, test);
  if (on_start)
    on_start(result.metrics.initial_policy, result.metrics.initial_test_error);

  CyclicSampler val_sampler(val.count(), cfg.batch_size);
  const bool use_policy_at_all = cfg.method != Method::None;
  const bool learn_policy = cfg.method == Method::Learned;

  for (int64_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    auto t0 = std::chrono::steady_clock::now();
    const bool warm = epoch <= int64_t(cfg.warmup_epochs);
    const bool augment_now = use_policy_at_all && !warm;

    Rng shuffle_rng(Rng::mix(cfg.seed, Rng::mix(0x6261746368ull, uint64_t(epoch))));
    Rng noise_rng(Rng::mix(cfg.seed, Rng::mix(0x6e6f697365ull, uint64_t(epoch))));
    Rng base_rng(Rng::mix(cfg.seed, Rng::mix(0x63726f70ull, uint64_t(epoch))));
    auto batches = epoch_batches(train.count(), cfg.batch_size, shuffle_rng,
                                 cfg.keep_partial);

    EpochRecord rec;
    rec.epoch = epoch;
    double loss_sum = 0, gnorm_sum = 0, hnorm_sum = 0;
    int64_t inner_count = 0, plain_count = 0, outer_count = 0;

    size_t bi = 0;
    while (bi < batches.size()) {
      const size_t group = std::min(size_t(cfg.inner_steps), batches.size() - bi);
      const bool full_group = group == size_t(cfg.inner_steps);
      const bool update_policy = learn_policy && !warm && full_group;

      if (update_policy && cfg.hypergrad_method == HypergradMethod::Unrolled) {
        std::vector<Tensor<Real>> xs;
        std::vector<std::vector<int64_t>> ls;
        for (size_t k = 0; k < group; ++k) {
          xs.push_back(baseline_augment(train.batch(batches[bi + k]),
                                        cfg.baseline_flip, base_rng));
          ls.push_back(train.batch_labels(batches[bi + k]));
        }
        auto vidx = val_sampler.next();
        auto out = unrolled_cycle<Real>(spec, params, policy, xs, ls,
                                        val.batch(vidx), val.batch_labels(vidx),
                                        outer_opt, cfg, noise_rng);
        for (Real l : out.step_losses) loss_sum += double(l);
        inner_count += int64_t(group);
        rec.peak_tape_nodes = std::max(rec.peak_tape_nodes, out.peak_tape_nodes);
        hnorm_sum += double(out.hypergrad_norm);
        ++outer_count;
      } else {
        Tensor<Real> last_x;
        std::vector<int64_t> last_labels;
        for (size_t k = 0; k < group; ++k) {
          Tensor<Real> x = baseline_augment(train.batch(batches[bi + k]),
                                            cfg.baseline_flip, base_rng);
          std::vector<int64_t> labels = train.batch_labels(batches[bi + k]);
          auto step = inner_step<Real>(spec, params,
                                       augment_now ? &policy : nullptr, x,
                                       labels, inner_opt, noise_rng);
          loss_sum += double(step.loss);
          gnorm_sum += double(step.grad_norm);
          rec.peak_tape_nodes = std::max(rec.peak_tape_nodes, step.tape_nodes);
          ++inner_count;
          ++plain_count;
          last_x = x;
          last_labels = std::move(labels);
        }
        if (update_policy) {
          auto vidx = val_sampler.next();
          auto out = outer_step<Real>(spec, params, policy, last_x, last_labels,
                                      val.batch(vidx), val.batch_labels(vidx),
                                      outer_opt, cfg, noise_rng);
          rec.peak_tape_nodes = std::max(rec.peak_tape_nodes, out.peak_tape_nodes);
          if (out.skipped) {
            ++rec.divergence_skips;
          } else {
            hnorm_sum += double(out.hypergrad_norm);
            ++outer_count;
          }
        }
      }
      bi += group;
    }

    rec.train_loss = inner_count ? loss_sum / double(inner_count) : 0.0;
    // Unrolled trajectory steps have no standalone gradient reading, so the
    // norm averages over plain steps only.
    rec.grad_norm_theta = plain_count ? gnorm_sum / double(plain_count) : 0.0;
    rec.hypergrad_norm = outer_count ? hnorm_sum / double(outer_count) : 0.0;
    rec.val_loss = detail::dataset_loss(spec, params, val);
    rec.test_error = detail::dataset_error(spec, params, test);
    rec.policy = policy.snapshot();
    rec.wall_ms = std::chrono::duration<double, std::milli>(
                      std::chrono::steady_clock::now() - t0)
                      .count();
    result.metrics.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }

  result.params = std::move(params);
  result.policy = std::move(policy);
  return result;
}

}  // namespace hyperaug
