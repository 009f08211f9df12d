#pragma once

// Learnable augmentation policy. A policy is K sequential stages; each stage
// holds unconstrained parameters
//   select_logits (14)  -> op distribution pi via softmax
//   raw_p         (14)  -> per-op application probability via sigmoid
//   raw_mu        (11)  -> per-op magnitude via sigmoid (magnitude ops only)
// for 39 parameters per stage (78 at the default K = 2).
//
// Sampling an op uses the Gumbel-softmax relaxation: u = softmax((log pi +
// G)/tau) with Gumbel noise G, the applied op is argmax(u), and the image is
// scaled by u_i / stop_grad(u_i). That factor is exactly 1 in value, so the
// forward pass applies the hard op, while its gradient routes the outer
// objective into the selection logits. Ops are sampled independently per
// batch element and stage.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "hyperaug/augment.hpp"
#include "hyperaug/model_params.hpp"
#include "hyperaug/ops.hpp"
#include "hyperaug/rng.hpp"
#include "hyperaug/tensor.hpp"

namespace hyperaug {

inline constexpr int kPolicyMagnitudeOps = 11;
inline constexpr int kPolicyParamsPerStage =
    kNumAugOps + kNumAugOps + kPolicyMagnitudeOps;  // 39

// Index of an op within raw_mu, or -1 for magnitude-free ops.
inline int aug_op_mu_index(AugOp op) {
  int idx = 0;
  for (int i = 0; i < kNumAugOps; ++i) {
    if (AugOp(i) == op) return aug_op_has_magnitude(op) ? idx : -1;
    if (aug_op_has_magnitude(AugOp(i))) ++idx;
  }
  return -1;
}

template <typename Real>
struct PolicyStage {
  Tensor<Real> select_logits;  // (14)
  Tensor<Real> raw_p;          // (14)
  Tensor<Real> raw_mu;         // (11)
};

// Effective (constrained) view of one stage, for reporting.
struct PolicyStageSnapshot {
  std::vector<double> pi;  // 14, sums to 1
  std::vector<double> p;   // 14, in (0,1)
  std::vector<double> mu;  // 11, in (0,1)
};

struct PolicySnapshot {
  std::vector<PolicyStageSnapshot> stages;
};

template <typename Real>
struct PolicyParams {
  std::vector<PolicyStage<Real>> stages;
  Real tau = Real(0.05);    // Gumbel-softmax temperature
  Real tau_b = Real(0.05);  // relaxed-Bernoulli temperature (same by default)

  // Raw parameters start at 0.5, i.e. probabilities and magnitudes at
  // sigmoid(0.5) ~ 0.6225; logits start at 0 for a uniform op distribution.
  static PolicyParams init(int k_stages, Real tau = Real(0.05)) {
    if (k_stages <= 0)
      throw ValueError("PolicyParams: need at least one stage, got " +
                       std::to_string(k_stages));
    PolicyParams p;
    p.tau = tau;
    p.tau_b = tau;
    for (int k = 0; k < k_stages; ++k) {
      PolicyStage<Real> s;
      s.select_logits = Tensor<Real>::zeros({kNumAugOps});
      s.raw_p = Tensor<Real>::full({kNumAugOps}, Real(0.5));
      s.raw_mu = Tensor<Real>::full({kPolicyMagnitudeOps}, Real(0.5));
      p.stages.push_back(std::move(s));
    }
    return p;
  }

  int64_t param_count() const {
    return int64_t(stages.size()) * kPolicyParamsPerStage;
  }

  // Canonical flat order: per stage, select_logits then raw_p then raw_mu.
  ModelParams<Real> as_model_params() const {
    ModelParams<Real> mp;
    for (size_t k = 0; k < stages.size(); ++k) {
      std::string sk = "stage" + std::to_string(k);
      mp.add(sk + ".select_logits", stages[k].select_logits);
      mp.add(sk + ".raw_p", stages[k].raw_p);
      mp.add(sk + ".raw_mu", stages[k].raw_mu);
    }
    return mp;
  }

  void from_model_params(const ModelParams<Real>& mp) {
    if (mp.count() != stages.size() * 3)
      throw ShapeError("PolicyParams: expected " +
                       std::to_string(stages.size() * 3) + " tensors, got " +
                       std::to_string(mp.count()));
    for (size_t k = 0; k < stages.size(); ++k) {
      stages[k].select_logits = mp.entry(3 * k + 0).value.detached();
      stages[k].raw_p = mp.entry(3 * k + 1).value.detached();
      stages[k].raw_mu = mp.entry(3 * k + 2).value.detached();
    }
  }

  // Same structure with tensors replaced (e.g. by watched leaves), in
  // as_model_params order.
  PolicyParams with_tensors(std::span<const Tensor<Real>> ts) const {
    if (ts.size() != stages.size() * 3)
      throw ShapeError("PolicyParams: expected " +
                       std::to_string(stages.size() * 3) + " tensors, got " +
                       std::to_string(ts.size()));
    PolicyParams p = *this;
    for (size_t k = 0; k < p.stages.size(); ++k) {
      p.stages[k].select_logits = ts[3 * k + 0];
      p.stages[k].raw_p = ts[3 * k + 1];
      p.stages[k].raw_mu = ts[3 * k + 2];
    }
    return p;
  }

  PolicySnapshot snapshot() const {
    PolicySnapshot snap;
    for (const auto& s : stages) {
      PolicyStageSnapshot ss;
      auto lv = s.select_logits.values();
      double mx = double(lv[0]);
      for (Real v : lv) mx = std::max(mx, double(v));
      double z = 0;
      for (Real v : lv) z += std::exp(double(v) - mx);
      for (Real v : lv) ss.pi.push_back(std::exp(double(v) - mx) / z);
      for (Real v : s.raw_p.values())
        ss.p.push_back(1.0 / (1.0 + std::exp(-double(v))));
      for (Real v : s.raw_mu.values())
        ss.mu.push_back(1.0 / (1.0 + std::exp(-double(v))));
      snap.stages.push_back(std::move(ss));
    }
    return snap;
  }
};

// Relaxed categorical draw: weights u = softmax((log softmax(logits) + G)/tau)
// and the index of the largest weight. With zero noise and tau = 1 the
// weights equal softmax(logits).
template <typename Real>
struct GumbelSelect {
  Tensor<Real> weights;  // (14), tape-linked iff logits are
  int index = 0;
};

template <typename Real>
GumbelSelect<Real> gumbel_select(const Tensor<Real>& select_logits,
                                 const Tensor<Real>& noise, Real tau) {
  if (select_logits.shape() != Shape{kNumAugOps})
    throw ShapeError("gumbel_select: logits must be (" +
                     std::to_string(kNumAugOps) + "), got " +
                     shape_str(select_logits.shape()));
  if (noise.shape() != select_logits.shape())
    throw ShapeError("gumbel_select: noise shape mismatch");
  if (!(tau > Real(0)))
    throw ValueError("gumbel_select: temperature must be positive");
  Tensor<Real> logpi =
      log_softmax_rows(reshape(select_logits, {1, kNumAugOps}));
  Tensor<Real> u = softmax_rows(mul_scalar(
      add(logpi, reshape(noise, {1, kNumAugOps})), Real(1) / tau));
  GumbelSelect<Real> out;
  out.weights = reshape(u, {kNumAugOps});
  auto uv = out.weights.values();
  for (int i = 1; i < kNumAugOps; ++i)
    if (uv[size_t(i)] > uv[size_t(out.index)]) out.index = i;
  return out;
}

// Applies the policy to a batch: for each element and each stage, draw an
// op, apply it with its learned probability and magnitude, and scale by the
// gradient-routing factor. Noise order per element: 14 Gumbels, then one
// logistic draw, stage by stage.
template <typename Real>
Tensor<Real> sample_and_apply(const PolicyParams<Real>& policy,
                              const Tensor<Real>& x, Rng& rng) {
  detail::check_image(x, "sample_and_apply");
  if (policy.stages.empty())
    throw ValueError("sample_and_apply: policy has no stages");
  int64_t B = x.shape()[0];
  std::vector<Tensor<Real>> rows;
  rows.reserve(size_t(B));
  for (int64_t b = 0; b < B; ++b) {
    Tensor<Real> xi = slice_dim0(x, b, 1);
    for (const auto& stage : policy.stages) {
      std::vector<Real> gv(kNumAugOps);
      for (auto& g : gv) g = Real(rng.gumbel());
      GumbelSelect<Real> sel = gumbel_select(
          stage.select_logits,
          Tensor<Real>::constant({kNumAugOps}, std::move(gv)), policy.tau);
      AugOp op = AugOp(sel.index);
      Tensor<Real> ui = slice_dim0(sel.weights, sel.index, 1);
      Tensor<Real> scale = div(ui, ui.detached());
      Tensor<Real> p = sigmoid(slice_dim0(stage.raw_p, sel.index, 1));
      Tensor<Real> mu =
          aug_op_has_magnitude(op)
              ? sigmoid(slice_dim0(stage.raw_mu, aug_op_mu_index(op), 1))
              : Tensor<Real>::scalar(Real(0));
      Tensor<Real> yi = apply_with_probability_noise(
          op, xi, mu, p, policy.tau_b, Real(rng.logistic()));
      xi = mul(scale, yi);
    }
    rows.push_back(xi);
  }
  return concat_dim0(std::span<const Tensor<Real>>(rows));
}

}  // namespace hyperaug
