#pragma once

// Exact second-order products without materializing a Hessian.
//
// The mechanism: build the scalar objective once, take its gradient with
// create_graph=true so the gradient itself lives on the tape, then obtain
// H.v (or the mixed block product) as a vector-Jacobian product over that
// gradient graph, seeded with v. Cost per product is one extra backward
// pass; memory stays proportional to the parameter count M because only the
// two sweeps' activations are held, never an M x M matrix. Repeated products
// on one graph do not grow the tape.

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "hyperaug/model_params.hpp"
#include "hyperaug/ops.hpp"
#include "hyperaug/tensor.hpp"

namespace hyperaug {

// Builds a scalar objective from watched parameter tensors (entry order of
// the ModelParams it was created from).
template <typename Real>
using ScalarFn =
    std::function<Tensor<Real>(Tape<Real>&, std::span<const Tensor<Real>>)>;

// Same, with a second (hyper)parameter group.
template <typename Real>
using ScalarFn2 = std::function<Tensor<Real>(
    Tape<Real>&, std::span<const Tensor<Real>>, std::span<const Tensor<Real>>)>;

namespace detail {

template <typename Real>
std::vector<Real> flatten_tensors(std::span<const Tensor<Real>> ts) {
  std::vector<Real> flat;
  int64_t n = 0;
  for (const auto& t : ts) n += t.numel();
  flat.reserve(size_t(n));
  for (const auto& t : ts) {
    auto v = t.values();
    flat.insert(flat.end(), v.begin(), v.end());
  }
  return flat;
}

// Splits a flat vector into constants shaped like the given tensors.
template <typename Real>
std::vector<Tensor<Real>> chunk_like(std::span<const Real> flat,
                                     std::span<const Tensor<Real>> like,
                                     const char* op) {
  int64_t total = 0;
  for (const auto& t : like) total += t.numel();
  if (int64_t(flat.size()) != total)
    throw ShapeError(std::string(op) + ": vector has dim " +
                     std::to_string(flat.size()) + ", parameters have dim " +
                     std::to_string(total));
  std::vector<Tensor<Real>> out;
  out.reserve(like.size());
  size_t off = 0;
  for (const auto& t : like) {
    size_t n = size_t(t.numel());
    out.push_back(Tensor<Real>::constant(
        t.shape(), std::vector<Real>(flat.begin() + off, flat.begin() + off + n)));
    off += n;
  }
  return out;
}

}  // namespace detail

// Counters filled by the second-order routines: high-water node count of the
// tape they built and the auxiliary flat-vector floats they allocated.
struct SecondOrderStats {
  size_t tape_nodes = 0;
  size_t aux_floats = 0;
};

// One objective graph plus its differentiable gradient, reusable for many
// products against the same parameters.
template <typename Real>
class GradGraph {
 public:
  GradGraph(const ScalarFn2<Real>& f, const ModelParams<Real>& theta,
            const ModelParams<Real>* phi) {
    for (const auto& e : theta.entries()) theta_.push_back(tape_.watch(e.value));
    if (phi)
      for (const auto& e : phi->entries()) phi_.push_back(tape_.watch(e.value));
    loss_ = f(tape_, theta_, phi_);
    if (loss_.numel() != 1)
      throw ShapeError("GradGraph: objective must be scalar, got shape " +
                       shape_str(loss_.shape()));
    grad_theta_ = tape_.backward(loss_, theta_, /*create_graph=*/true);
  }

  Real loss_value() const { return loss_.value(); }

  std::vector<Real> grad_theta_flat() const {
    return detail::flatten_tensors<Real>(grad_theta_);
  }

  int64_t theta_dim() const {
    int64_t n = 0;
    for (const auto& t : theta_) n += t.numel();
    return n;
  }

  // (d2f/dtheta2) . v
  std::vector<Real> hvp_theta(std::span<const Real> v) {
    auto seeds = detail::chunk_like<Real>(v, theta_, "hvp");
    auto grads = tape_.backward_seeded(grad_theta_, seeds, theta_, false);
    return detail::flatten_tensors<Real>(grads);
  }

  // (d2f/dphi dtheta)^T . v: gradient w.r.t. phi of <v, grad_theta f>.
  std::vector<Real> mixed_vp(std::span<const Real> v) {
    if (phi_.empty())
      throw TapeError("mixed_vp: graph was built without hyperparameters");
    auto seeds = detail::chunk_like<Real>(v, theta_, "mixed_hvp");
    auto grads = tape_.backward_seeded(grad_theta_, seeds, phi_, false);
    return detail::flatten_tensors<Real>(grads);
  }

  size_t tape_nodes() const { return tape_.size(); }

 private:
  Tape<Real> tape_;
  std::vector<Tensor<Real>> theta_;
  std::vector<Tensor<Real>> phi_;
  Tensor<Real> loss_;
  std::vector<Tensor<Real>> grad_theta_;
};

// Hessian-vector product of a scalar objective at the given parameters.
template <typename Real>
std::vector<Real> hvp(const ScalarFn<Real>& f, const ModelParams<Real>& params,
                      std::span<const Real> v,
                      SecondOrderStats* stats = nullptr) {
  ScalarFn2<Real> f2 = [&f](Tape<Real>& tape, std::span<const Tensor<Real>> th,
                            std::span<const Tensor<Real>>) {
    return f(tape, th);
  };
  GradGraph<Real> g(f2, params, nullptr);
  std::vector<Real> out = g.hvp_theta(v);
  if (stats) {
    stats->tape_nodes = g.tape_nodes();
    // v's chunked copy, the gradient flat view, and the result.
    stats->aux_floats = v.size() + out.size() + size_t(g.theta_dim());
  }
  return out;
}

// Mixed second-order product: gradient w.r.t. the hyperparameters of
// <v, grad_theta f(theta, phi)>; the phi-dimensional column sum of the mixed
// Hessian block weighted by v.
template <typename Real>
std::vector<Real> mixed_hvp(const ScalarFn2<Real>& f,
                            const ModelParams<Real>& params,
                            const ModelParams<Real>& hyper,
                            std::span<const Real> v,
                            SecondOrderStats* stats = nullptr) {
  GradGraph<Real> g(f, params, &hyper);
  std::vector<Real> out = g.mixed_vp(v);
  if (stats) {
    stats->tape_nodes = g.tape_nodes();
    stats->aux_floats = v.size() + out.size() + size_t(g.theta_dim());
  }
  return out;
}

}  // namespace hyperaug
