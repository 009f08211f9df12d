#pragma once

// Hypergradients of a validation objective with respect to hyperparameters,
// treating the trained weights as an implicit function of them.
//
// Writing theta*(phi) for an inner stationary point of f(theta, phi) and
// g(theta) for the outer objective, the chain rule plus the implicit
// function theorem give
//
//   dg/dphi = - grad_theta(g) . [H_f]^{-1} . d2f/(dtheta dphi),
//
// where H_f is the inner Hessian at theta*. The inverse is approximated by
// the truncated Neumann series
//
//   [H]^{-1} v  ~=  alpha * sum_{j=0..J} (I - alpha H)^j v,
//
// valid when alpha * lambda_max(H) < 1. Each term costs one Hessian-vector
// product; memory stays at a few parameter-sized vectors regardless of J.
//
// The unrolled baseline differentiates through T recorded gradient-descent
// steps instead. It needs no curvature assumptions but must keep the whole
// trajectory alive, so its memory grows linearly with T; it exists here as
// the reference the approximation is judged against.

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "hyperaug/model_params.hpp"
#include "hyperaug/ops.hpp"
#include "hyperaug/second_order.hpp"
#include "hyperaug/tensor.hpp"

namespace hyperaug {

// Neumann series left the contraction region: iterate norms grew past the
// configured factor times ||v||.
struct DivergenceError : TensorError {
  int term;
  DivergenceError(int term_, const std::string& msg)
      : TensorError(msg), term(term_) {}
};

// Unrolled differentiation would exceed the configured activation budget.
struct CacheLimitError : TensorError {
  size_t requested, cap;
  CacheLimitError(size_t requested_, size_t cap_, const std::string& msg)
      : TensorError(msg), requested(requested_), cap(cap_) {}
};

template <typename Real>
struct NeumannConfig {
  Real alpha = Real(1e-3);  // series step; requires alpha*lambda_max < 1
  int terms = 5;            // J: highest power of (I - alpha H) included
  Real divergence_factor = Real(1e6);

  void validate() const {
    if (!(alpha > Real(0)))
      throw ValueError("neumann: alpha must be positive, got " +
                       std::to_string(double(alpha)));
    if (terms < 1)
      throw ValueError("neumann: terms must be >= 1, got " +
                       std::to_string(terms));
    if (!(divergence_factor > Real(0)))
      throw ValueError("neumann: divergence_factor must be positive");
  }
};

template <typename Real>
struct HypergradResult {
  std::vector<Real> grad_phi;
  // ||alpha * partial sum|| after each Neumann term, J+1 entries; empty for
  // the unrolled method.
  std::vector<Real> partial_sum_norms;
  Real grad_theta_norm = Real(0);
  size_t peak_tape_nodes = 0;
  size_t peak_aux_floats = 0;
  // Floats held for the differentiated trajectory (unrolled method only).
  size_t cache_floats = 0;
  // Values of theta after the T recorded steps (unrolled method only);
  // callers adopting the trajectory endpoint read it from here.
  std::vector<Real> theta_final;
  // Inner loss at each recorded step (unrolled method only).
  std::vector<Real> step_losses;
};

namespace detail {

template <typename Real>
Real l2_norm(std::span<const Real> v) {
  Real acc = 0;
  for (Real x : v) acc += x * x;
  return std::sqrt(acc);
}

// Runs the truncated series on an existing gradient graph. Appends one
// partial-sum norm per term. Working set: p, hp, acc plus the returned
// vector, all of length M.
template <typename Real>
std::vector<Real> neumann_on_graph(GradGraph<Real>& graph,
                                   std::span<const Real> v,
                                   const NeumannConfig<Real>& cfg,
                                   std::vector<Real>& partial_norms,
                                   size_t& aux_floats) {
  cfg.validate();
  const size_t m = v.size();
  const Real vnorm = l2_norm(v);
  std::vector<Real> p(v.begin(), v.end());
  std::vector<Real> acc(v.begin(), v.end());
  partial_norms.push_back(cfg.alpha * l2_norm<Real>(acc));
  aux_floats = 4 * m;
  for (int j = 1; j <= cfg.terms; ++j) {
    std::vector<Real> hp = graph.hvp_theta(p);
    for (size_t i = 0; i < m; ++i) p[i] -= cfg.alpha * hp[i];
    Real pnorm = l2_norm<Real>(p);
    if (pnorm > cfg.divergence_factor * vnorm)
      throw DivergenceError(
          j, "neumann_inverse_hvp: series diverged at term " +
                 std::to_string(j) + " (|p| = " + std::to_string(double(pnorm)) +
                 ", |v| = " + std::to_string(double(vnorm)) +
                 "); alpha likely exceeds 1/lambda_max");
    for (size_t i = 0; i < m; ++i) acc[i] += p[i];
    partial_norms.push_back(cfg.alpha * l2_norm<Real>(acc));
  }
  for (size_t i = 0; i < m; ++i) acc[i] *= cfg.alpha;
  return acc;
}

}  // namespace detail

template <typename Real>
struct NeumannResult {
  std::vector<Real> inverse_hvp;
  std::vector<Real> partial_sum_norms;
  size_t tape_nodes = 0;
  size_t aux_floats = 0;
};

// alpha * sum_{j=0..J} (I - alpha H)^j v for H the Hessian of f in theta,
// with phi held fixed.
template <typename Real>
NeumannResult<Real> neumann_inverse_hvp(const ScalarFn2<Real>& f,
                                        const ModelParams<Real>& params,
                                        const ModelParams<Real>& hyper,
                                        std::span<const Real> v,
                                        const NeumannConfig<Real>& cfg) {
  GradGraph<Real> graph(f, params, &hyper);
  NeumannResult<Real> res;
  res.inverse_hvp =
      detail::neumann_on_graph(graph, v, cfg, res.partial_sum_norms,
                               res.aux_floats);
  res.tape_nodes = graph.tape_nodes();
  return res;
}

// Implicit-function-theorem hypergradient: dg/dphi at the current theta.
// g is evaluated and differentiated on its own short-lived tape; f is built
// once, with both groups watched, and serves every curvature product.
template <typename Real>
HypergradResult<Real> hypergradient(const ScalarFn2<Real>& f,
                                    const ScalarFn<Real>& g,
                                    const ModelParams<Real>& params,
                                    const ModelParams<Real>& hyper,
                                    const NeumannConfig<Real>& cfg) {
  HypergradResult<Real> res;

  std::vector<Real> v;
  size_t g_nodes = 0;
  {
    Tape<Real> tg;
    std::vector<Tensor<Real>> th;
    th.reserve(params.count());
    for (const auto& e : params.entries()) th.push_back(tg.watch(e.value));
    Tensor<Real> gl = g(tg, th);
    if (gl.numel() != 1)
      throw ShapeError("hypergradient: outer objective must be scalar");
    auto grads = tg.backward(gl, th, false);
    v = detail::flatten_tensors<Real>(grads);
    g_nodes = tg.size();
  }

  GradGraph<Real> graph(f, params, &hyper);
  res.grad_theta_norm = detail::l2_norm<Real>(graph.grad_theta_flat());
  std::vector<Real> u = detail::neumann_on_graph(graph, std::span<const Real>(v),
                                                 cfg, res.partial_sum_norms,
                                                 res.peak_aux_floats);
  res.grad_phi = graph.mixed_vp(u);
  for (Real& x : res.grad_phi) x = -x;
  res.peak_tape_nodes = std::max(g_nodes, graph.tape_nodes());
  res.peak_aux_floats += v.size() + res.grad_phi.size();
  return res;
}

// Inner objective for one unrolled step; t selects the step so callers can
// vary minibatch and noise along the trajectory.
template <typename Real>
using UnrolledStepFn = std::function<Tensor<Real>(
    Tape<Real>&, std::span<const Tensor<Real>>, std::span<const Tensor<Real>>,
    int t)>;

template <typename Real>
struct UnrolledConfig {
  int steps = 1;                       // T
  Real lr = Real(0.05);                // inner step size
  size_t cache_cap_floats = size_t(1) << 30;
};

// Differentiates g(theta_T) through T plain gradient-descent steps recorded
// on one tape. Exact for the finite trajectory; memory grows with T.
template <typename Real>
HypergradResult<Real> unrolled_hypergradient(const UnrolledStepFn<Real>& f_step,
                                             const ScalarFn<Real>& g,
                                             const ModelParams<Real>& params,
                                             const ModelParams<Real>& hyper,
                                             const UnrolledConfig<Real>& cfg) {
  if (cfg.steps < 0)
    throw ValueError("unrolled_hypergradient: steps must be >= 0");
  HypergradResult<Real> res;
  Tape<Real> tape;
  std::vector<Tensor<Real>> theta;
  theta.reserve(params.count());
  for (const auto& e : params.entries()) theta.push_back(tape.watch(e.value));
  std::vector<Tensor<Real>> phi;
  phi.reserve(hyper.count());
  for (const auto& e : hyper.entries()) phi.push_back(tape.watch(e.value));

  const size_t m = size_t(params.total_dim());
  for (int t = 0; t < cfg.steps; ++t) {
    res.cache_floats += m;
    if (res.cache_floats > cfg.cache_cap_floats)
      throw CacheLimitError(
          res.cache_floats, cfg.cache_cap_floats,
          "unrolled_hypergradient: caching step " + std::to_string(t) +
              " needs " + std::to_string(res.cache_floats) +
              " floats, cap is " + std::to_string(cfg.cache_cap_floats));
    Tensor<Real> ft = f_step(tape, theta, phi, t);
    if (ft.numel() != 1)
      throw ShapeError("unrolled_hypergradient: inner objective must be scalar");
    res.step_losses.push_back(Real(ft.value()));
    auto gt = tape.backward(ft, theta, /*create_graph=*/true);
    for (size_t i = 0; i < theta.size(); ++i)
      theta[i] = sub(theta[i], mul_scalar(gt[i], cfg.lr));
  }

  Tensor<Real> gl = g(tape, theta);
  if (gl.numel() != 1)
    throw ShapeError("unrolled_hypergradient: outer objective must be scalar");
  auto grads = tape.backward(gl, phi, false);
  res.grad_phi = detail::flatten_tensors<Real>(grads);
  res.theta_final = detail::flatten_tensors<Real>(theta);
  res.grad_theta_norm = Real(0);
  res.peak_tape_nodes = tape.size();
  res.peak_aux_floats = res.grad_phi.size();
  return res;
}

}  // namespace hyperaug
