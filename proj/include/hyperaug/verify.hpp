#pragma once

// Built-in oracle suite behind the `verify` CLI verb: closed-form and
// finite-difference cross-checks of the differentiation machinery, plus
// sanity checks on augmentation ranges, policy initialization, and config
// validation. Each check is independent; all must pass on a healthy build.

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "hyperaug/augment.hpp"
#include "hyperaug/config.hpp"
#include "hyperaug/hypergrad.hpp"
#include "hyperaug/models.hpp"
#include "hyperaug/policy.hpp"
#include "hyperaug/rng.hpp"

namespace hyperaug {

struct SelfCheck {
  std::string name;
  bool pass = false;
  std::string detail;
};

namespace detail {

// f(theta, phi) = 1/2 theta' A theta - theta' B phi with symmetric A, so the
// inner Hessian is exactly A and the mixed second derivative is -B. The
// hypergradient of g(theta) = 1/2 ||theta - t||^2 has the closed form
// B' A^{-1} (theta - t), which a dense solve reproduces independently.
template <typename Real>
struct QuadraticBilevel {
  int64_t m, n;
  std::vector<Real> a;       // m*m, symmetric positive definite
  std::vector<Real> b;       // m*n
  std::vector<Real> target;  // m
  ModelParams<Real> theta;   // single (1,m) entry
  ModelParams<Real> phi;     // single (1,n) entry

  static QuadraticBilevel random(int64_t m, int64_t n, Rng& rng) {
    QuadraticBilevel q;
    q.m = m;
    q.n = n;
    std::vector<Real> raw(size_t(m * m));
    for (auto& v : raw) v = Real(rng.normal());
    q.a.assign(size_t(m * m), Real(0));
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < m; ++j) {
        Real acc = (i == j) ? Real(0.5) : Real(0);
        for (int64_t k = 0; k < m; ++k)
          acc += raw[size_t(k * m + i)] * raw[size_t(k * m + j)] / Real(m);
        q.a[size_t(i * m + j)] = acc;
      }
    q.b.resize(size_t(m * n));
    for (auto& v : q.b) v = Real(rng.normal());
    q.target.resize(size_t(m));
    for (auto& v : q.target) v = Real(rng.normal());
    std::vector<Real> th(size_t(m), Real(0));
    for (auto& v : th) v = Real(rng.normal());
    std::vector<Real> ph(size_t(n), Real(0));
    for (auto& v : ph) v = Real(rng.normal());
    q.theta.add("theta", Tensor<Real>::constant({1, m}, std::move(th)));
    q.phi.add("phi", Tensor<Real>::constant({1, n}, std::move(ph)));
    return q;
  }

  // Gershgorin bound on the largest eigenvalue of A.
  Real lambda_max_bound() const {
    Real best = 0;
    for (int64_t i = 0; i < m; ++i) {
      Real row = 0;
      for (int64_t j = 0; j < m; ++j) row += std::abs(a[size_t(i * m + j)]);
      best = std::max(best, row);
    }
    return best;
  }

  ScalarFn2<Real> inner() const {
    Tensor<Real> ta = Tensor<Real>::constant({m, m}, std::vector<Real>(a));
    Tensor<Real> tb = Tensor<Real>::constant({m, n}, std::vector<Real>(b));
    return [ta, tb](Tape<Real>&, std::span<const Tensor<Real>> th,
                    std::span<const Tensor<Real>> ph) {
      Tensor<Real> quad =
          mul_scalar(sum_all(mul(matmul(th[0], ta), th[0])), Real(0.5));
      Tensor<Real> cross = sum_all(mul(matmul(th[0], tb), ph[0]));
      return sub(quad, cross);
    };
  }

  ScalarFn<Real> outer() const {
    Tensor<Real> tt =
        Tensor<Real>::constant({1, m}, std::vector<Real>(target));
    return [tt](Tape<Real>&, std::span<const Tensor<Real>> th) {
      Tensor<Real> d = sub(th[0], tt);
      return mul_scalar(sum_all(mul(d, d)), Real(0.5));
    };
  }

  // Dense-solve oracle for the exact hypergradient B' A^{-1} (theta - t).
  std::vector<double> exact_hypergradient() const {
    Eigen::MatrixXd A(m, m), B(m, n);
    Eigen::VectorXd r(m);
    auto th = theta.entries()[0].value.values();
    for (int64_t i = 0; i < m; ++i) {
      r(i) = double(th[size_t(i)]) - double(target[size_t(i)]);
      for (int64_t j = 0; j < m; ++j) A(i, j) = double(a[size_t(i * m + j)]);
      for (int64_t j = 0; j < n; ++j) B(i, j) = double(b[size_t(i * n + j)]);
    }
    Eigen::VectorXd u = A.ldlt().solve(r);
    Eigen::VectorXd hg = B.transpose() * u;
    return std::vector<double>(hg.data(), hg.data() + n);
  }
};

inline double rel_l2_error(std::span<const double> got,
                           std::span<const double> want) {
  double num = 0, den = 0;
  for (size_t i = 0; i < got.size(); ++i) {
    num += (got[i] - want[i]) * (got[i] - want[i]);
    den += want[i] * want[i];
  }
  return std::sqrt(num) / std::max(std::sqrt(den), 1e-300);
}

}  // namespace detail

// Scalar fixture: f = 1/2 a theta^2, inverse-Hessian-vector product of v=1.
// Truncated series alpha * sum_{j<=J} (1-alpha*a)^j has a geometric closed
// form; J=5 gives 0.368928 at a=2, alpha=0.1, and J=200 is 1/a to 1e-6.
inline SelfCheck check_neumann_closed_form() {
  SelfCheck c{"neumann_closed_form", false, ""};
  auto run = [](int terms) {
    ModelParams<double> theta;
    theta.add("theta", Tensor<double>::scalar(3.0));
    ModelParams<double> phi;
    phi.add("phi", Tensor<double>::scalar(0.0));
    ScalarFn2<double> f = [](Tape<double>&, std::span<const Tensor<double>> th,
                             std::span<const Tensor<double>>) {
      return mul_scalar(mul(th[0], th[0]), 1.0);  // 1/2 * 2 * theta^2
    };
    NeumannConfig<double> cfg;
    cfg.alpha = 0.1;
    cfg.terms = terms;
    std::vector<double> v{1.0};
    return neumann_inverse_hvp<double>(f, theta, phi, v, cfg).inverse_hvp[0];
  };
  double at5 = run(5), at200 = run(200);
  double err5 = std::abs(at5 - 0.368928), err200 = std::abs(at200 - 0.5);
  c.pass = err5 < 1e-9 && err200 < 1e-6;
  std::ostringstream ss;
  ss << "J=5 -> " << at5 << " (|err| " << err5 << "), J=200 -> " << at200
     << " (|err| " << err200 << ")";
  c.detail = ss.str();
  return c;
}

// Ten random 10-dimensional quadratic bilevel problems against the dense
// inverse oracle.
inline SelfCheck check_quadratic_bilevel(uint64_t seed = 0) {
  SelfCheck c{"quadratic_bilevel_exactness", false, ""};
  Rng rng(Rng::mix(seed, 0x7175616471ull));
  double worst = 0;
  for (int rep = 0; rep < 10; ++rep) {
    auto q = detail::QuadraticBilevel<double>::random(10, 6, rng);
    NeumannConfig<double> cfg;
    cfg.alpha = 0.9 / double(q.lambda_max_bound());
    cfg.terms = 200;
    auto res = hypergradient<double>(q.inner(), q.outer(), q.theta, q.phi, cfg);
    worst = std::max(
        worst, detail::rel_l2_error(res.grad_phi, q.exact_hypergradient()));
  }
  c.pass = worst < 1e-3;
  std::ostringstream ss;
  ss << "worst rel L2 error over 10 problems: " << worst;
  c.detail = ss.str();
  return c;
}

// Tape gradient of an MLP loss against central finite differences on
// sampled coordinates.
inline SelfCheck check_gradient_fd(uint64_t seed = 0) {
  SelfCheck c{"gradient_finite_difference", false, ""};
  ModelSpec spec;
  spec.kind = ModelKind::Mlp;
  spec.in_channels = 1;
  spec.height = 4;
  spec.width = 4;
  spec.hidden = 6;
  spec.classes = 3;
  ModelParams<double> params = init_model<double>(spec, seed + 17);
  Rng rng(Rng::mix(seed, 0x67726164ull));
  std::vector<double> px(2 * 16);
  for (auto& v : px) v = rng.uniform01();
  Tensor<double> x = Tensor<double>::constant({2, 1, 4, 4}, std::move(px));
  std::vector<int64_t> labels{0, 2};

  auto loss_at = [&](const std::vector<double>& flat) {
    ModelParams<double> p = params.clone();
    p.unflatten(flat);
    std::vector<Tensor<double>> th;
    for (const auto& e : p.entries()) th.push_back(e.value);
    return model_loss<double>(spec, th, x, labels).value();
  };

  Tape<double> tape;
  std::vector<Tensor<double>> th;
  for (const auto& e : params.entries()) th.push_back(tape.watch(e.value));
  auto grads = tape.backward(model_loss<double>(spec, th, x, labels), th);
  std::vector<double> flatg;
  for (const auto& g : grads) {
    auto v = g.values();
    flatg.insert(flatg.end(), v.begin(), v.end());
  }

  std::vector<double> flat = params.flatten();
  double worst = 0;
  const double eps = 1e-6;
  for (int probe = 0; probe < 12; ++probe) {
    size_t k = size_t(rng.below(flat.size()));
    std::vector<double> fp = flat, fm = flat;
    fp[k] += eps;
    fm[k] -= eps;
    double fd = (loss_at(fp) - loss_at(fm)) / (2 * eps);
    double denom = std::max({std::abs(fd), std::abs(flatg[k]), 1e-8});
    worst = std::max(worst, std::abs(fd - flatg[k]) / denom);
  }
  c.pass = worst < 1e-4;
  std::ostringstream ss;
  ss << "worst rel error over 12 coordinates: " << worst;
  c.detail = ss.str();
  return c;
}

// Hessian-vector products against finite differences of tape gradients.
inline SelfCheck check_hvp_fd(uint64_t seed = 0) {
  SelfCheck c{"hvp_finite_difference", false, ""};
  ModelSpec spec;
  spec.kind = ModelKind::Mlp;
  spec.in_channels = 1;
  spec.height = 4;
  spec.width = 4;
  spec.hidden = 6;
  spec.classes = 3;
  ModelParams<double> params = init_model<double>(spec, seed + 29);
  Rng rng(Rng::mix(seed, 0x687670ull));
  std::vector<double> px(2 * 16);
  for (auto& v : px) v = rng.uniform01();
  Tensor<double> x = Tensor<double>::constant({2, 1, 4, 4}, std::move(px));
  std::vector<int64_t> labels{1, 0};

  ScalarFn<double> f = [&](Tape<double>&, std::span<const Tensor<double>> th) {
    return model_loss<double>(spec, th, x, labels);
  };
  auto grad_at = [&](const std::vector<double>& flat) {
    ModelParams<double> p = params.clone();
    p.unflatten(flat);
    Tape<double> tape;
    std::vector<Tensor<double>> th;
    for (const auto& e : p.entries()) th.push_back(tape.watch(e.value));
    auto gs = tape.backward(f(tape, th), th);
    std::vector<double> out;
    for (const auto& g : gs) {
      auto v = g.values();
      out.insert(out.end(), v.begin(), v.end());
    }
    return out;
  };

  std::vector<double> flat = params.flatten();
  std::vector<double> v(flat.size());
  for (auto& u : v) u = rng.normal();
  auto hv = hvp<double>(f, params, v);

  const double eps = 1e-5;
  std::vector<double> fp = flat, fm = flat;
  for (size_t i = 0; i < flat.size(); ++i) {
    fp[i] += eps * v[i];
    fm[i] -= eps * v[i];
  }
  auto gp = grad_at(fp), gm = grad_at(fm);
  std::vector<double> fd(flat.size());
  for (size_t i = 0; i < flat.size(); ++i) fd[i] = (gp[i] - gm[i]) / (2 * eps);
  double err = detail::rel_l2_error(hv, fd);
  c.pass = err < 1e-3;
  std::ostringstream ss;
  ss << "rel L2 error vs gradient differences: " << err;
  c.detail = ss.str();
  return c;
}

// Magnitude ops are near-identity at mu=0; every op maps [0,1] into [0,1].
inline SelfCheck check_augment_ranges(uint64_t seed = 0) {
  SelfCheck c{"augment_identity_and_range", false, ""};
  Rng rng(Rng::mix(seed, 0x617567ull));
  double worst_id = 0, worst_range = 0;
  for (int rep = 0; rep < 3; ++rep) {
    std::vector<double> px(2 * 1 * 8 * 8);
    for (auto& v : px) v = rng.uniform01();
    Tensor<double> x = Tensor<double>::constant({2, 1, 8, 8}, px);
    for (int i = 0; i < kNumAugOps; ++i) {
      AugOp op = AugOp(i);
      if (aug_op_has_magnitude(op)) {
        auto y = apply_op(op, x, Tensor<double>::scalar(0.0));
        auto yv = y.values();
        for (size_t k = 0; k < px.size(); ++k)
          worst_id = std::max(worst_id, std::abs(yv[k] - px[k]));
      }
      auto z = apply_op(op, x, Tensor<double>::scalar(rng.uniform01()));
      for (double v : z.values())
        worst_range = std::max(worst_range, std::max(-v, v - 1.0));
    }
  }
  c.pass = worst_id < 1e-2 && worst_range < 1e-6;
  std::ostringstream ss;
  ss << "worst identity deviation " << worst_id << ", worst range excess "
     << worst_range;
  c.detail = ss.str();
  return c;
}

// Fresh policy: p = sigmoid(0.5), uniform op distribution, 39 parameters per
// stage (78 at two stages).
inline SelfCheck check_policy_init() {
  SelfCheck c{"policy_initialization", false, ""};
  auto pol = PolicyParams<double>::init(2, 0.05);
  auto snap = pol.snapshot();
  double p_err = 0, pi_err = 0, mu_err = 0;
  for (const auto& st : snap.stages) {
    for (double p : st.p) p_err = std::max(p_err, std::abs(p - 0.6224593312018546));
    for (double pi : st.pi) pi_err = std::max(pi_err, std::abs(pi - 1.0 / 14));
    for (double mu : st.mu) mu_err = std::max(mu_err, std::abs(mu - 0.6224593312018546));
  }
  bool count_ok = pol.param_count() == 78;
  c.pass = p_err < 1e-12 && pi_err < 1e-12 && mu_err < 1e-12 && count_ok;
  std::ostringstream ss;
  ss << "param_count " << pol.param_count() << ", max |p - sigmoid(0.5)| "
     << p_err << ", max |pi - 1/14| " << pi_err;
  c.detail = ss.str();
  return c;
}

// Invalid settings must be rejected before any compute.
inline SelfCheck check_config_rejection() {
  SelfCheck c{"config_validation", false, ""};
  int caught = 0;
  try {
    NeumannConfig<double> bad;
    bad.alpha = -1e-3;
    bad.validate();
  } catch (const ValueError&) {
    ++caught;
  }
  try {
    NeumannConfig<double> bad;
    bad.terms = 0;
    bad.validate();
  } catch (const ValueError&) {
    ++caught;
  }
  try {
    run_config_from_map(
        ConfigMap::parse_text("[train]\nnot_a_key = 3\n", "<inline>"));
  } catch (const ConfigError&) {
    ++caught;
  }
  c.pass = caught == 3;
  c.detail = std::to_string(caught) + "/3 invalid configurations rejected";
  return c;
}

inline std::vector<SelfCheck> run_self_checks(uint64_t seed = 0) {
  return {check_neumann_closed_form(), check_quadratic_bilevel(seed),
          check_gradient_fd(seed),     check_hvp_fd(seed),
          check_augment_ranges(seed),  check_policy_init(),
          check_config_rejection()};
}

}  // namespace hyperaug
