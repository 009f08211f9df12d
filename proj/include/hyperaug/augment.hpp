#pragma once

// Differentiable image augmentations. Images are (B,C,H,W) tensors with
// values in [0,1]; every op returns the same shape and range, and a
// magnitude of zero is the identity (exactly for warps and blends, within
// 1e-2 for the quantizing/thresholding ops, whose relaxations cannot be
// exact at the boundary).
//
// Magnitude handling: the knob mu in [0,1] maps affinely onto each op's
// native range; geometric ops realize it through differentiable coordinate
// grids fed to a bilinear warp, photometric ops through smooth blends. The
// four non-smooth ops (Posterize, Equalize, AutoContrast, Invert) use a
// straight-through estimator: the forward value is the exact op, the
// gradient is that of a smooth surrogate, composed as
// surrogate + stop_grad(exact - surrogate). Invert's surrogate (1 - x)
// coincides with the exact op, so it degenerates to a plain smooth op.
//
// Stochastic application multiplies a relaxed Bernoulli gate between the
// augmented and the original image: gate = sigmoid((logit(p) + L) / tau_b)
// with L standard logistic noise, so d(gate)/dp survives sampling.

#include <atomic>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "hyperaug/ops.hpp"
#include "hyperaug/rng.hpp"
#include "hyperaug/tensor.hpp"

namespace hyperaug {

enum class AugOp : int {
  ShearX = 0,
  ShearY,
  TranslateX,
  TranslateY,
  Rotate,
  Invert,
  AutoContrast,
  Equalize,
  Solarize,
  Color,
  Posterize,
  Contrast,
  Brightness,
  Sharpness,
};

inline constexpr int kNumAugOps = 14;

inline const char* aug_op_name(AugOp op) {
  static const char* names[kNumAugOps] = {
      "shear_x",  "shear_y",  "translate_x", "translate_y", "rotate",
      "invert",   "autocontrast", "equalize", "solarize",   "color",
      "posterize", "contrast", "brightness", "sharpness"};
  return names[int(op)];
}

inline AugOp aug_op_from_name(const std::string& name) {
  for (int i = 0; i < kNumAugOps; ++i)
    if (name == aug_op_name(AugOp(i))) return AugOp(i);
  throw ValueError("unknown augmentation op '" + name + "'");
}

// Invert, AutoContrast and Equalize take no magnitude.
inline bool aug_op_has_magnitude(AugOp op) {
  return op != AugOp::Invert && op != AugOp::AutoContrast &&
         op != AugOp::Equalize;
}

// Count of apply_op invocations since the last reset; lets callers assert
// that warm-up epochs never touch the policy pipeline.
inline std::atomic<uint64_t>& detail_aug_op_counter() {
  static std::atomic<uint64_t> c{0};
  return c;
}
inline uint64_t aug_op_invocations() { return detail_aug_op_counter().load(); }
inline void reset_aug_op_invocations() { detail_aug_op_counter().store(0); }

namespace detail {

template <typename Real>
void check_image(const Tensor<Real>& x, const char* op) {
  if (x.shape().size() != 4)
    throw ShapeError(std::string(op) + ": expected (B,C,H,W) image, got " +
                     shape_str(x.shape()));
  for (Real v : x.values()) {
    if (!(v >= Real(-1e-6) && v <= Real(1) + Real(1e-6)))
      throw ValueError(std::string(op) +
                       ": image values must lie in [0,1], found " +
                       std::to_string(double(v)));
  }
}

template <typename Real>
Real check_magnitude(const Tensor<Real>& mu, const char* op) {
  if (mu.numel() != 1)
    throw ShapeError(std::string(op) + ": magnitude must be scalar, got " +
                     shape_str(mu.shape()));
  Real m = mu.at(0);
  if (std::isnan(double(m)))
    throw ValueError(std::string(op) + ": magnitude is NaN");
  return m;
}

// Constant coordinate grids over (B,HO,WO).
template <typename Real, typename F>
Tensor<Real> coord_grid(int64_t B, int64_t H, int64_t W, F f) {
  std::vector<Real> vals(size_t(B * H * W));
  for (int64_t i = 0; i < H; ++i)
    for (int64_t j = 0; j < W; ++j) vals[size_t(i * W + j)] = f(i, j);
  for (int64_t b = 1; b < B; ++b)
    std::copy(vals.begin(), vals.begin() + size_t(H * W),
              vals.begin() + size_t(b * H * W));
  return Tensor<Real>::constant({B, H, W}, std::move(vals));
}

// Inverse-warp coordinate builders. src = (absolute x, absolute y) per
// destination pixel; all mu-dependence goes through tape ops so the warp is
// differentiable in the magnitude.
template <typename Real>
Tensor<Real> warp(const Tensor<Real>& x, const Tensor<Real>& sx,
                  const Tensor<Real>& sy) {
  return grid_sample_bilinear(x, sx, sy);
}

template <typename Real>
Tensor<Real> op_shear(const Tensor<Real>& x, const Tensor<Real>& mu, bool xaxis) {
  int64_t B = x.shape()[0], H = x.shape()[2], W = x.shape()[3];
  Real cy = Real(H - 1) / 2, cx = Real(W - 1) / 2;
  Tensor<Real> m = mul_scalar(mu, Real(0.3));
  if (xaxis) {
    Tensor<Real> J = coord_grid<Real>(B, H, W, [](int64_t, int64_t j) { return Real(j); });
    Tensor<Real> DYc =
        coord_grid<Real>(B, H, W, [cy](int64_t i, int64_t) { return Real(i) - cy; });
    return warp(x, sub(J, mul(m, DYc)),
                coord_grid<Real>(B, H, W, [](int64_t i, int64_t) { return Real(i); }));
  }
  Tensor<Real> I = coord_grid<Real>(B, H, W, [](int64_t i, int64_t) { return Real(i); });
  Tensor<Real> DXc =
      coord_grid<Real>(B, H, W, [cx](int64_t, int64_t j) { return Real(j) - cx; });
  return warp(x, coord_grid<Real>(B, H, W, [](int64_t, int64_t j) { return Real(j); }),
              sub(I, mul(m, DXc)));
}

template <typename Real>
Tensor<Real> op_translate(const Tensor<Real>& x, const Tensor<Real>& mu,
                          bool xaxis) {
  int64_t B = x.shape()[0], H = x.shape()[2], W = x.shape()[3];
  Tensor<Real> J = coord_grid<Real>(B, H, W, [](int64_t, int64_t j) { return Real(j); });
  Tensor<Real> I = coord_grid<Real>(B, H, W, [](int64_t i, int64_t) { return Real(i); });
  if (xaxis) {
    Tensor<Real> t = mul_scalar(mu, Real(0.45) * Real(W));
    return warp(x, sub(J, t), I);
  }
  Tensor<Real> t = mul_scalar(mu, Real(0.45) * Real(H));
  return warp(x, J, sub(I, t));
}

template <typename Real>
Tensor<Real> op_rotate(const Tensor<Real>& x, const Tensor<Real>& mu) {
  int64_t B = x.shape()[0], H = x.shape()[2], W = x.shape()[3];
  Real cy = Real(H - 1) / 2, cx = Real(W - 1) / 2;
  Tensor<Real> a = mul_scalar(mu, Real(30.0 * 3.14159265358979323846 / 180.0));
  Tensor<Real> ca = cos(a), sa = sin(a);
  Tensor<Real> DXc =
      coord_grid<Real>(B, H, W, [cx](int64_t, int64_t j) { return Real(j) - cx; });
  Tensor<Real> DYc =
      coord_grid<Real>(B, H, W, [cy](int64_t i, int64_t) { return Real(i) - cy; });
  Tensor<Real> sx = add_scalar(add(mul(ca, DXc), mul(sa, DYc)), cx);
  Tensor<Real> sy = add_scalar(sub(mul(ca, DYc), mul(sa, DXc)), cy);
  return warp(x, sx, sy);
}

// Channel-mean luminance, broadcast back over channels.
template <typename Real>
Tensor<Real> gray_of(const Tensor<Real>& x) {
  const Shape& s = x.shape();
  Tensor<Real> g = mul_scalar(sum_to(x, {s[0], 1, s[2], s[3]}),
                              Real(1) / Real(s[1]));
  return broadcast_to(g, s);
}

// Fixed 3x3 smoothing kernel (center-weighted, zero padding), applied
// depthwise by folding channels into the batch dim.
template <typename Real>
Tensor<Real> blur3(const Tensor<Real>& x) {
  const Shape& s = x.shape();
  Tensor<Real> flat = reshape(x, {s[0] * s[1], 1, s[2], s[3]});
  const Real k = Real(1) / Real(13);
  Tensor<Real> w = Tensor<Real>::constant(
      {1, 1, 3, 3}, {k, k, k, k, Real(5) * k, k, k, k, k});
  Tensor<Real> b = conv2d(flat, w, Tensor<Real>(), 1, 1);
  return reshape(b, s);
}

// Enhancement blends: out = clamp(x + m*(x - degenerate)), m = 2*mu, so the
// native strength range is [0,2] and m = 0 is the identity.
template <typename Real>
Tensor<Real> op_enhance(const Tensor<Real>& x, const Tensor<Real>& mu,
                        AugOp which) {
  Tensor<Real> m = mul_scalar(mu, Real(2));
  Tensor<Real> direction;  // x - degenerate
  switch (which) {
    case AugOp::Brightness:
      direction = x;  // degenerate: black
      break;
    case AugOp::Color:
      direction = sub(x, gray_of(x));  // degenerate: grayscale
      break;
    case AugOp::Contrast: {
      const Shape& s = x.shape();
      Tensor<Real> mean = mul_scalar(sum_to(x, {s[0], 1, 1, 1}),
                                     Real(1) / Real(s[1] * s[2] * s[3]));
      direction = sub(x, broadcast_to(mean, s));  // degenerate: flat mean
      break;
    }
    case AugOp::Sharpness:
      direction = sub(x, blur3(x));  // degenerate: smoothed
      break;
    default:
      throw ValueError("op_enhance: not an enhancement op");
  }
  return clamp(add(x, mul(m, direction)), Real(0), Real(1));
}

// Smooth solarize: a steep sigmoid gate moves pixels above the threshold
// toward their inverse. The threshold 1.2*(1-mu) starts above the value
// range, which keeps mu = 0 an identity to ~5e-5.
template <typename Real>
Tensor<Real> op_solarize(const Tensor<Real>& x, const Tensor<Real>& mu) {
  Tensor<Real> t = mul_scalar(scalar_sub(Real(1), mu), Real(1.2));
  Tensor<Real> gate = sigmoid(mul_scalar(sub(x, t), Real(50)));
  return add(mul(scalar_sub(Real(1), gate), x),
             mul(gate, scalar_sub(Real(1), x)));
}

// Exact posterize: keep b = 8 - round(4*mu) bits, i.e. L = 2^b uniform
// levels over [0,1] (16 at full strength).
template <typename Real>
std::vector<Real> posterize_exact(std::span<const Real> xs, Real muv) {
  int removed = int(std::lround(std::min(4.0, std::max(0.0, 4.0 * double(muv)))));
  int64_t L = int64_t(1) << (8 - removed);
  std::vector<Real> out(xs.size());
  for (size_t i = 0; i < xs.size(); ++i) {
    Real v = std::min(Real(1), std::max(Real(0), xs[i]));
    int64_t k = std::min(L - 1, int64_t(std::floor(double(v) * double(L))));
    out[i] = Real(k) / Real(L - 1);
  }
  return out;
}

// Forward = exact values, gradient = surrogate's.
template <typename Real>
Tensor<Real> straight_through(const Tensor<Real>& surrogate,
                              const std::vector<Real>& exact) {
  auto sv = surrogate.values();
  std::vector<Real> diff(exact.size());
  for (size_t i = 0; i < diff.size(); ++i) diff[i] = exact[i] - sv[i];
  return add(surrogate,
             Tensor<Real>::constant(surrogate.shape(), std::move(diff)));
}

template <typename Real>
Tensor<Real> op_posterize(const Tensor<Real>& x, const Tensor<Real>& mu) {
  // Surrogate: shift by half the continuous quantization step
  // 1/(2^(8-4mu)-1); smooth in mu and vanishing at mu = 0 up to 1/255.
  const Real ln2 = Real(0.69314718055994530942);
  Tensor<Real> e = exp(mul_scalar(add_scalar(mul_scalar(mu, Real(-4)), Real(8)), ln2));
  Tensor<Real> step = div(Tensor<Real>::scalar(Real(1)), add_scalar(e, Real(-1)));
  Tensor<Real> sur = sub(x, mul_scalar(step, Real(0.5)));
  std::vector<Real> exact = posterize_exact<Real>(x.values(), mu.at(0));
  return straight_through(sur, exact);
}

// PIL-style histogram equalization on the 256-bin quantization, per image
// and channel; identity surrogate for the gradient.
template <typename Real>
Tensor<Real> op_equalize(const Tensor<Real>& x) {
  const Shape& s = x.shape();
  int64_t B = s[0], C = s[1], HW = s[2] * s[3];
  auto xv = x.values();
  std::vector<Real> exact(xv.size());
  for (int64_t bc = 0; bc < B * C; ++bc) {
    int64_t off = bc * HW;
    int hist[256] = {0};
    for (int64_t i = 0; i < HW; ++i) {
      int q = int(std::lround(std::min(1.0, std::max(0.0, double(xv[size_t(off + i)]))) * 255.0));
      ++hist[q];
    }
    long long total = 0, last = 0;
    for (int v = 0; v < 256; ++v)
      if (hist[v]) {
        total += hist[v];
        last = hist[v];
      }
    long long step = (total - last) / 255;
    if (step <= 0) {
      // Degenerate histogram: the identity mapping, without requantizing.
      for (int64_t i = 0; i < HW; ++i)
        exact[size_t(off + i)] = xv[size_t(off + i)];
      continue;
    }
    int lut[256];
    long long n = step / 2;
    for (int v = 0; v < 256; ++v) {
      lut[v] = int(std::min(255LL, n / step));
      n += hist[v];
    }
    for (int64_t i = 0; i < HW; ++i) {
      int q = int(std::lround(std::min(1.0, std::max(0.0, double(xv[size_t(off + i)]))) * 255.0));
      exact[size_t(off + i)] = Real(lut[q]) / Real(255);
    }
  }
  return straight_through(x, exact);
}

// Per image and channel min-max rescale; identity when the channel is flat.
// Identity surrogate for the gradient.
template <typename Real>
Tensor<Real> op_autocontrast(const Tensor<Real>& x) {
  const Shape& s = x.shape();
  int64_t B = s[0], C = s[1], HW = s[2] * s[3];
  auto xv = x.values();
  std::vector<Real> exact(xv.size());
  for (int64_t bc = 0; bc < B * C; ++bc) {
    int64_t off = bc * HW;
    Real lo = xv[size_t(off)], hi = xv[size_t(off)];
    for (int64_t i = 1; i < HW; ++i) {
      lo = std::min(lo, xv[size_t(off + i)]);
      hi = std::max(hi, xv[size_t(off + i)]);
    }
    if (hi - lo < Real(1e-12)) {
      for (int64_t i = 0; i < HW; ++i) exact[size_t(off + i)] = xv[size_t(off + i)];
    } else {
      for (int64_t i = 0; i < HW; ++i)
        exact[size_t(off + i)] = (xv[size_t(off + i)] - lo) / (hi - lo);
    }
  }
  return straight_through(x, exact);
}

}  // namespace detail

// Applies one augmentation at magnitude mu (scalar tensor in [0,1];
// magnitude-free ops ignore it). Differentiable in both the image and the
// magnitude.
template <typename Real>
Tensor<Real> apply_op(AugOp op, const Tensor<Real>& x, const Tensor<Real>& mu) {
  detail_aug_op_counter().fetch_add(1, std::memory_order_relaxed);
  detail::check_image(x, aug_op_name(op));
  if (aug_op_has_magnitude(op)) detail::check_magnitude(mu, aug_op_name(op));
  switch (op) {
    case AugOp::ShearX:
      return detail::op_shear(x, mu, true);
    case AugOp::ShearY:
      return detail::op_shear(x, mu, false);
    case AugOp::TranslateX:
      return detail::op_translate(x, mu, true);
    case AugOp::TranslateY:
      return detail::op_translate(x, mu, false);
    case AugOp::Rotate:
      return detail::op_rotate(x, mu);
    case AugOp::Invert:
      return scalar_sub(Real(1), x);
    case AugOp::AutoContrast:
      return detail::op_autocontrast(x);
    case AugOp::Equalize:
      return detail::op_equalize(x);
    case AugOp::Solarize:
      return detail::op_solarize(x, mu);
    case AugOp::Color:
    case AugOp::Contrast:
    case AugOp::Brightness:
    case AugOp::Sharpness:
      return detail::op_enhance(x, mu, op);
    case AugOp::Posterize:
      return detail::op_posterize(x, mu);
  }
  throw ValueError("apply_op: unknown op id " + std::to_string(int(op)));
}

// Relaxed-Bernoulli application with explicit logistic noise:
// gate = sigmoid((logit(p) + noise)/tau_b), out = gate*op(x) + (1-gate)*x.
// p is a scalar tensor strictly inside (0,1); gradients flow to p, mu and x.
template <typename Real>
Tensor<Real> apply_with_probability_noise(AugOp op, const Tensor<Real>& x,
                                          const Tensor<Real>& mu,
                                          const Tensor<Real>& p, Real tau_b,
                                          Real noise) {
  if (p.numel() != 1)
    throw ShapeError("apply_with_probability: p must be scalar, got " +
                     shape_str(p.shape()));
  Real pv = p.at(0);
  if (!(pv > Real(0) && pv < Real(1)))
    throw ValueError("apply_with_probability: p must lie in (0,1), got " +
                     std::to_string(double(pv)));
  if (!(tau_b > Real(0)))
    throw ValueError("apply_with_probability: tau_b must be positive");
  Tensor<Real> logit_p = sub(log(p), log(scalar_sub(Real(1), p)));
  Tensor<Real> gate = sigmoid(
      mul_scalar(add_scalar(logit_p, noise), Real(1) / tau_b));
  Tensor<Real> aug = apply_op(op, x, mu);
  return add(mul(gate, aug), mul(scalar_sub(Real(1), gate), x));
}

template <typename Real>
Tensor<Real> apply_with_probability(AugOp op, const Tensor<Real>& x,
                                    const Tensor<Real>& mu,
                                    const Tensor<Real>& p, Real tau_b,
                                    Rng& rng) {
  return apply_with_probability_noise(op, x, mu, p, tau_b,
                                      Real(rng.logistic()));
}

}  // namespace hyperaug
