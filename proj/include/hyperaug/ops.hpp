#pragma once

// Primitive tensor operations. Every backward rule is itself written in
// terms of tape operations, so differentiating a gradient graph (built with
// create_graph=true) reuses the same rules; no op needs a hand-written
// second derivative. Ops whose backward pairs with another primitive
// (im2col/col2im, pool gather/scatter, slice/pad, class select/scatter,
// broadcast/sum_to) form closed loops under repeated differentiation.
//
// Linear algebra convention: matrices are row-major, matmul takes
// (m,k) x (k,n) -> (m,n). Images are rank-4 (B,C,H,W).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "hyperaug/tensor.hpp"

namespace hyperaug {

namespace detail {

template <typename Real>
bool same_shape(const Tensor<Real>& a, const Tensor<Real>& b) {
  return a.shape() == b.shape();
}

template <typename Real>
void check_binary_shapes(const Tensor<Real>& a, const Tensor<Real>& b,
                         const char* op) {
  if (!same_shape(a, b) && a.numel() != 1 && b.numel() != 1)
    throw ShapeError(std::string(op) + ": incompatible shapes " +
                     shape_str(a.shape()) + " and " + shape_str(b.shape()));
}

// Output shape of a binary elementwise op under scalar broadcast.
template <typename Real>
const Shape& binary_out_shape(const Tensor<Real>& a, const Tensor<Real>& b) {
  return a.numel() == 1 && b.numel() != 1 ? b.shape() : a.shape();
}

template <typename Real, typename F>
std::vector<Real> binary_values(const Tensor<Real>& a, const Tensor<Real>& b,
                                F f) {
  auto av = a.values();
  auto bv = b.values();
  size_t n = std::max(av.size(), bv.size());
  std::vector<Real> out(n);
  if (av.size() == bv.size()) {
    for (size_t i = 0; i < n; ++i) out[i] = f(av[i], bv[i]);
  } else if (av.size() == 1) {
    for (size_t i = 0; i < n; ++i) out[i] = f(av[0], bv[i]);
  } else {
    for (size_t i = 0; i < n; ++i) out[i] = f(av[i], bv[0]);
  }
  return out;
}

template <typename Real, typename F>
std::vector<Real> unary_values(const Tensor<Real>& a, F f) {
  auto av = a.values();
  std::vector<Real> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
  return out;
}

}  // namespace detail

// ---- forward declarations used inside backward rules ----

template <typename Real>
Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b);
template <typename Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b);
template <typename Real>
Tensor<Real> div(const Tensor<Real>& a, const Tensor<Real>& b);
template <typename Real>
Tensor<Real> neg(const Tensor<Real>& a);
template <typename Real>
Tensor<Real> mul_scalar(const Tensor<Real>& a, Real c);
template <typename Real>
Tensor<Real> scalar_sub(Real c, const Tensor<Real>& a);
template <typename Real>
Tensor<Real> sin(const Tensor<Real>& a);
template <typename Real>
Tensor<Real> cos(const Tensor<Real>& a);
template <typename Real>
Tensor<Real> reshape(const Tensor<Real>& a, Shape shape);
template <typename Real>
Tensor<Real> transpose2(const Tensor<Real>& a);
template <typename Real>
Tensor<Real> broadcast_to(const Tensor<Real>& a, Shape shape);
template <typename Real>
Tensor<Real> sum_to(const Tensor<Real>& a, Shape shape);
template <typename Real>
Tensor<Real> sum_all(const Tensor<Real>& a);
template <typename Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b);
template <typename Real>
Tensor<Real> slice_dim0(const Tensor<Real>& a, int64_t begin, int64_t len);
template <typename Real>
Tensor<Real> pad_dim0(const Tensor<Real>& a, int64_t total, int64_t begin);
template <typename Real>
Tensor<Real> im2col(const Tensor<Real>& x, int64_t kh, int64_t kw,
                    int64_t stride, int64_t pad);
template <typename Real>
Tensor<Real> col2im(const Tensor<Real>& cols, Shape img_shape, int64_t kh,
                    int64_t kw, int64_t stride, int64_t pad);
template <typename Real>
Tensor<Real> nhwc_to_nchw(const Tensor<Real>& a);
template <typename Real>
Tensor<Real> nchw_to_nhwc(const Tensor<Real>& a);
template <typename Real>
Tensor<Real> grid_sample_bilinear(const Tensor<Real>& x, const Tensor<Real>& sx,
                                  const Tensor<Real>& sy);

namespace detail {

// Collapses a broadcast gradient back to the shape of a (possibly scalar)
// operand.
template <typename Real>
Tensor<Real> reduce_like(const Tensor<Real>& g, const Tensor<Real>& ref) {
  if (g.shape() == ref.shape()) return g;
  return reshape(sum_all(g), ref.shape());
}

}  // namespace detail

// ---- elementwise binary ----

template <typename Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::check_binary_shapes(a, b, "add");
  std::vector<Real> vals =
      detail::binary_values(a, b, [](Real x, Real y) { return x + y; });
  Shape shape = detail::binary_out_shape(a, b);
  Tape<Real>* tape = detail::merge_tapes<Real>({&a, &b}, "add");
  if (!tape || !tape->recording())
    return Tensor<Real>::constant(std::move(shape), std::move(vals));
  std::array<Tensor<Real>, 2> in{a, b};
  return tape->emplace(
      "add", std::move(shape), std::move(vals), std::span<const Tensor<Real>>(in),
      [a, b](const Tensor<Real>& g, std::span<const bool> needs) {
        std::vector<Tensor<Real>> gr(2);
        if (needs[0]) gr[0] = detail::reduce_like(g, a);
        if (needs[1]) gr[1] = detail::reduce_like(g, b);
        return gr;
      });
}

template <typename Real>
Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::check_binary_shapes(a, b, "sub");
  std::vector<Real> vals =
      detail::binary_values(a, b, [](Real x, Real y) { return x - y; });
  Shape shape = detail::binary_out_shape(a, b);
  Tape<Real>* tape = detail::merge_tapes<Real>({&a, &b}, "sub");
  if (!tape || !tape->recording())
    return Tensor<Real>::constant(std::move(shape), std::move(vals));
  std::array<Tensor<Real>, 2> in{a, b};
  return tape->emplace(
      "sub", std::move(shape), std::move(vals), std::span<const Tensor<Real>>(in),
      [a, b](const Tensor<Real>& g, std::span<const bool> needs) {
        std::vector<Tensor<Real>> gr(2);
        if (needs[0]) gr[0] = detail::reduce_like(g, a);
        if (needs[1]) gr[1] = detail::reduce_like(neg(g), b);
        return gr;
      });
}

template <typename Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::check_binary_shapes(a, b, "mul");
  std::vector<Real> vals =
      detail::binary_values(a, b, [](Real x, Real y) { return x * y; });
  Shape shape = detail::binary_out_shape(a, b);
  Tape<Real>* tape = detail::merge_tapes<Real>({&a, &b}, "mul");
  if (!tape || !tape->recording())
    return Tensor<Real>::constant(std::move(shape), std::move(vals));
  std::array<Tensor<Real>, 2> in{a, b};
  return tape->emplace(
      "mul", std::move(shape), std::move(vals), std::span<const Tensor<Real>>(in),
      [a, b](const Tensor<Real>& g, std::span<const bool> needs) {
        std::vector<Tensor<Real>> gr(2);
        if (needs[0]) gr[0] = detail::reduce_like(mul(g, b), a);
        if (needs[1]) gr[1] = detail::reduce_like(mul(g, a), b);
        return gr;
      });
}

template <typename Real>
Tensor<Real> div(const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::check_binary_shapes(a, b, "div");
  std::vector<Real> vals =
      detail::binary_values(a, b, [](Real x, Real y) { return x / y; });
  Shape shape = detail::binary_out_shape(a, b);
  Tape<Real>* tape = detail::merge_tapes<Real>({&a, &b}, "div");
  if (!tape || !tape->recording())
    return Tensor<Real>::constant(std::move(shape), std::move(vals));
  std::array<Tensor<Real>, 2> in{a, b};
  return tape->emplace(
      "div", std::move(shape), std::move(vals), std::span<const Tensor<Real>>(in),
      [a, b](const Tensor<Real>& g, std::span<const bool> needs) {
        std::vector<Tensor<Real>> gr(2);
        if (needs[0]) gr[0] = detail::reduce_like(div(g, b), a);
        if (needs[1])
          gr[1] = detail::reduce_like(neg(div(mul(g, a), mul(b, b))), b);
        return gr;
      });
}

// ---- elementwise with a compile-time-constant scalar ----

template <typename Real>
Tensor<Real> add_scalar(const Tensor<Real>& a, Real c) {
  std::vector<Real> vals = detail::unary_values(a, [c](Real x) { return x + c; });
  Tape<Real>* tape = detail::merge_tapes<Real>({&a}, "add_scalar");
  if (!tape || !tape->recording())
    return Tensor<Real>::constant(a.shape(), std::move(vals));
  std::array<Tensor<Real>, 1> in{a};
  return tape->emplace("add_scalar", a.shape(), std::move(vals),
                       std::span<const Tensor<Real>>(in),
                       [](const Tensor<Real>& g, std::span<const bool>) {
                         return std::vector<Tensor<Real>>{g};
                       });
}

template <typename Real>
Tensor<Real> mul_scalar(const Tensor<Real>& a, Real c) {
  std::vector<Real> vals = detail::unary_values(a, [c](Real x) { return x * c; });
  Tape<Real>* tape = detail::merge_tapes<Real>({&a}, "mul_scalar");
  if (!tape || !tape->recording())
    return Tensor<Real>::constant(a.shape(), std::move(vals));
  std::array<Tensor<Real>, 1> in{a};
  return tape->emplace("mul_scalar", a.shape(), std::move(vals),
                       std::span<const Tensor<Real>>(in),
                       [c](const Tensor<Real>& g, std::span<const bool>) {
                         return std::vector<Tensor<Real>>{mul_scalar(g, c)};
                       });
}

template <typename Real>
Tensor<Real> scalar_sub(Real c, const Tensor<Real>& a) {
  std::vector<Real> vals = detail::unary_values(a, [c](Real x) { return c - x; });
  Tape<Real>* tape = detail::merge_tapes<Real>({&a}, "scalar_sub");
  if (!tape || !tape->recording())
    return Tensor<Real>::constant(a.shape(), std::move(vals));
  std::array<Tensor<Real>, 1> in{a};
  return tape->emplace("scalar_sub", a.shape(), std::move(vals),
                       std::span<const Tensor<Real>>(in),
                       [](const Tensor<Real>& g, std::span<const bool>) {
                         return std::vector<Tensor<Real>>{neg(g)};
                       });
}

template <typename Real>
Tensor<Real> neg(const Tensor<Real>& a) {
  return mul_scalar(a, Real(-1));
}

// ---- elementwise unary ----

template <typename Real>
Tensor<Real> relu(const Tensor<Real>& a) {
  std::vector<Real> vals =
      detail::unary_values(a, [](Real x) { return x > Real(0) ? x : Real(0); });
  Tape<Real>* tape = detail::merge_tapes<Real>({&a}, "relu");
  if (!tape || !tape->recording())
    return Tensor<Real>::constant(a.shape(), std::move(vals));
  Tensor<Real> mask = Tensor<Real>::constant(
      a.shape(), detail::unary_values(
                     a, [](Real x) { return x > Real(0) ? Real(1) : Real(0); }));
  std::array<Tensor<Real>, 1> in{a};
  return tape->emplace("relu", a.shape(), std::move(vals),
                       std::span<const Tensor<Real>>(in),
                       [mask](const Tensor<Real>& g, std::span<const bool>) {
                         return std::vector<Tensor<Real>>{mul(g, mask)};
                       });
}

// Pass-through inside (lo,hi), zero gradient outside; subgradient at the
// boundary is taken as zero.
template <typename Real>
Tensor<Real> clamp(const Tensor<Real>& a, Real lo, Real hi) {
  std::vector<Real> vals = detail::unary_values(
      a, [lo, hi](Real x) { return std::min(hi, std::max(lo, x)); });
  Tape<Real>* tape = detail::merge_tapes<Real>({&a}, "clamp");
  if (!tape || !tape->recording())
    return Tensor<Real>::constant(a.shape(), std::move(vals));
  Tensor<Real> mask = Tensor<Real>::constant(
      a.shape(), detail::unary_values(a, [lo, hi](Real x) {
        return (x > lo && x < hi) ? Real(1) : Real(0);
      }));
  std::array<Tensor<Real>, 1> in{a};
  return tape->emplace("clamp", a.shape(), std::move(vals),
                       std::span<const Tensor<Real>>(in),
                       [mask](const Tensor<Real>& g, std::span<const bool>) {
                         return std::vector<Tensor<Real>>{mul(g, mask)};
                       });
}

template <typename Real>
Tensor<Real> sigmoid(const Tensor<Real>& a) {
  std::vector<Real> vals = detail::unary_values(a, [](Real x) {
    return x >= Real(0) ? Real(1) / (Real(1) + std::exp(-x))
                        : std::exp(x) / (Real(1) + std::exp(x));
  });
  Tape<Real>* tape = detail::merge_tapes<Real>({&a}, "sigmoid");
  if (!tape || !tape->recording())
    return Tensor<Real>::constant(a.shape(), std::move(vals));
  std::array<Tensor<Real>, 1> in{a};
  // The rule reuses the recorded output (d sigmoid = y(1-y)); the cell is
  // filled right after the node exists.
  auto cell = std::make_shared<Tensor<Real>>();
  Tensor<Real> out = tape->emplace(
      "sigmoid", a.shape(), std::move(vals), std::span<const Tensor<Real>>(in),
      [cell](const Tensor<Real>& g, std::span<const bool>) {
        const Tensor<Real>& y = *cell;
        return std::vector<Tensor<Real>>{
            mul(g, mul(y, scalar_sub(Real(1), y)))};
      });
  *cell = out;
  return out;
}

template <typename Real>
Tensor<Real> tanh(const Tensor<Real>& a) {
  std::vector<Real> vals =
      detail::unary_values(a, [](Real x) { return std::tanh(x); });
  Tape<Real>* tape = detail::merge_tapes<Real>({&a}, "tanh");
  if (!tape || !tape->recording())
    return Tensor<Real>::constant(a.shape(), std::move(vals));
  std::array<Tensor<Real>, 1> in{a};
  return tape->emplace(
      "tanh", a.shape(), std::move(vals), std::span<const Tensor<Real>>(in),
      [a](const Tensor<Real>& g, std::span<const bool>) {
        Tensor<Real> y = tanh(a);
        return std::vector<Tensor<Real>>{mul(g, scalar_sub(Real(1), mul(y, y)))};
      });
}

template <typename Real>
Tensor<Real> exp(const Tensor<Real>& a) {
  std::vector<Real> vals =
      detail::unary_values(a, [](Real x) { return std::exp(x); });
  Tape<Real>* tape = detail::merge_tapes<Real>({&a}, "exp");
  if (!tape || !tape->recording())
    return Tensor<Real>::constant(a.shape(), std::move(vals));
  std::array<Tensor<Real>, 1> in{a};
  return tape->emplace("exp", a.shape(), std::move(vals),
                       std::span<const Tensor<Real>>(in),
                       [a](const Tensor<Real>& g, std::span<const bool>) {
                         return std::vector<Tensor<Real>>{mul(g, exp(a))};
                       });
}

template <typename Real>
Tensor<Real> log(const Tensor<Real>& a) {
  std::vector<Real> vals =
      detail::unary_values(a, [](Real x) { return std::log(x); });
  Tape<Real>* tape = detail::merge_tapes<Real>({&a}, "log");
  if (!tape || !tape->recording())
    return Tensor<Real>::constant(a.shape(), std::move(vals));
  std::array<Tensor<Real>, 1> in{a};
  return tape->emplace("log", a.shape(), std::move(vals),
                       std::span<const Tensor<Real>>(in),
                       [a](const Tensor<Real>& g, std::span<const bool>) {
                         return std::vector<Tensor<Real>>{div(g, a)};
                       });
}

template <typename Real>
Tensor<Real> sin(const Tensor<Real>& a) {
  std::vector<Real> vals =
      detail::unary_values(a, [](Real x) { return std::sin(x); });
  Tape<Real>* tape = detail::merge_tapes<Real>({&a}, "sin");
  if (!tape || !tape->recording())
    return Tensor<Real>::constant(a.shape(), std::move(vals));
  std::array<Tensor<Real>, 1> in{a};
  return tape->emplace("sin", a.shape(), std::move(vals),
                       std::span<const Tensor<Real>>(in),
                       [a](const Tensor<Real>& g, std::span<const bool>) {
                         return std::vector<Tensor<Real>>{mul(g, cos(a))};
                       });
}

template <typename Real>
Tensor<Real> cos(const Tensor<Real>& a) {
  std::vector<Real> vals =
      detail::unary_values(a, [](Real x) { return std::cos(x); });
  Tape<Real>* tape = detail::merge_tapes<Real>({&a}, "cos");
  if (!tape || !tape->recording())
    return Tensor<Real>::constant(a.shape(), std::move(vals));
  std::array<Tensor<Real>, 1> in{a};
  return tape->emplace("cos", a.shape(), std::move(vals),
                       std::span<const Tensor<Real>>(in),
                       [a](const Tensor<Real>& g, std::span<const bool>) {
                         return std::vector<Tensor<Real>>{neg(mul(g, sin(a)))};
                       });
}

template <typename Real>
Tensor<Real> stop_grad(const Tensor<Real>& a) {
  return a.detached();
}

// ---- shape ops ----

template <typename Real>
Tensor<Real> reshape(const Tensor<Real>& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                     shape_str(shape));
  if (shape == a.shape()) return a;
  std::vector<Real> vals(a.values().begin(), a.values().end());
  Tape<Real>* tape = detail::merge_tapes<Real>({&a}, "reshape");
  if (!tape || !tape->recording())
    return Tensor<Real>::constant(std::move(shape), std::move(vals));
  Shape from = a.shape();
  std::array<Tensor<Real>, 1> in{a};
  return tape->emplace("reshape", std::move(shape), std::move(vals),
                       std::span<const Tensor<Real>>(in),
                       [from](const Tensor<Real>& g, std::span<const bool>) {
                         return std::vector<Tensor<Real>>{reshape(g, from)};
                       });
}

template <typename Real>
Tensor<Real> transpose2(const Tensor<Real>& a) {
  if (a.shape().size() != 2)
    throw ShapeError("transpose2: expected rank-2, got " + shape_str(a.shape()));
  int64_t m = a.shape()[0], n = a.shape()[1];
  std::vector<Real> vals(size_t(m * n));
  auto av = a.values();
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) vals[size_t(j * m + i)] = av[size_t(i * n + j)];
  Shape shape{n, m};
  Tape<Real>* tape = detail::merge_tapes<Real>({&a}, "transpose2");
  if (!tape || !tape->recording())
    return Tensor<Real>::constant(std::move(shape), std::move(vals));
  std::array<Tensor<Real>, 1> in{a};
  return tape->emplace("transpose2", std::move(shape), std::move(vals),
                       std::span<const Tensor<Real>>(in),
                       [](const Tensor<Real>& g, std::span<const bool>) {
                         return std::vector<Tensor<Real>>{transpose2(g)};
                       });
}

namespace detail {

// Strides of `small` viewed against `big`, 0 where small is broadcast.
inline std::vector<int64_t> broadcast_strides(const Shape& small,
                                              const Shape& big,
                                              const char* op) {
  if (small.size() != big.size())
    throw ShapeError(std::string(op) + ": rank mismatch " + shape_str(small) +
                     " vs " + shape_str(big));
  std::vector<int64_t> strides(small.size());
  int64_t acc = 1;
  for (size_t i = small.size(); i-- > 0;) {
    if (small[i] != big[i] && small[i] != 1)
      throw ShapeError(std::string(op) + ": dim " + std::to_string(i) +
                       " of " + shape_str(small) + " incompatible with " +
                       shape_str(big));
    strides[i] = small[i] == 1 ? 0 : acc;
    acc *= small[i];
  }
  return strides;
}

// Iterates big's index space, reporting the matching flat index in small.
template <typename F>
void for_broadcast(const Shape& big, const std::vector<int64_t>& strides,
                   F body) {
  int64_t n = shape_numel(big);
  size_t rank = big.size();
  std::vector<int64_t> idx(rank, 0);
  int64_t small_flat = 0;
  for (int64_t big_flat = 0; big_flat < n; ++big_flat) {
    body(big_flat, small_flat);
    for (size_t d = rank; d-- > 0;) {
      idx[d] += 1;
      small_flat += strides[d];
      if (idx[d] < big[d]) break;
      small_flat -= strides[d] * big[d];
      idx[d] = 0;
    }
  }
}

}  // namespace detail

// Expands a to `shape`: a scalar to any shape, otherwise same rank with each
// dim equal or 1.
template <typename Real>
Tensor<Real> broadcast_to(const Tensor<Real>& a, Shape shape) {
  if (a.shape() == shape) return a;
  std::vector<Real> vals(size_t(shape_numel(shape)));
  if (a.numel() == 1) {
    std::fill(vals.begin(), vals.end(), a.at(0));
  } else {
    auto strides = detail::broadcast_strides(a.shape(), shape, "broadcast_to");
    auto av = a.values();
    detail::for_broadcast(shape, strides, [&](int64_t big, int64_t small) {
      vals[size_t(big)] = av[size_t(small)];
    });
  }
  Tape<Real>* tape = detail::merge_tapes<Real>({&a}, "broadcast_to");
  if (!tape || !tape->recording())
    return Tensor<Real>::constant(std::move(shape), std::move(vals));
  Shape from = a.shape();
  std::array<Tensor<Real>, 1> in{a};
  return tape->emplace("broadcast_to", std::move(shape), std::move(vals),
                       std::span<const Tensor<Real>>(in),
                       [from](const Tensor<Real>& g, std::span<const bool>) {
                         return std::vector<Tensor<Real>>{sum_to(g, from)};
                       });
}

// Reduces a to `shape` by summing broadcast dims; {1} sums everything.
template <typename Real>
Tensor<Real> sum_to(const Tensor<Real>& a, Shape shape) {
  if (a.shape() == shape) return a;
  std::vector<Real> vals(size_t(shape_numel(shape)), Real(0));
  auto av = a.values();
  if (shape_numel(shape) == 1) {
    Real acc = 0;
    for (Real v : av) acc += v;
    vals[0] = acc;
  } else {
    auto strides = detail::broadcast_strides(shape, a.shape(), "sum_to");
    detail::for_broadcast(a.shape(), strides, [&](int64_t big, int64_t small) {
      vals[size_t(small)] += av[size_t(big)];
    });
  }
  Tape<Real>* tape = detail::merge_tapes<Real>({&a}, "sum_to");
  if (!tape || !tape->recording())
    return Tensor<Real>::constant(std::move(shape), std::move(vals));
  Shape from = a.shape();
  std::array<Tensor<Real>, 1> in{a};
  return tape->emplace("sum_to", std::move(shape), std::move(vals),
                       std::span<const Tensor<Real>>(in),
                       [from](const Tensor<Real>& g, std::span<const bool>) {
                         return std::vector<Tensor<Real>>{broadcast_to(g, from)};
                       });
}

template <typename Real>
Tensor<Real> sum_all(const Tensor<Real>& a) {
  return sum_to(a, Shape{1});
}

template <typename Real>
Tensor<Real> mean_all(const Tensor<Real>& a) {
  return mul_scalar(sum_all(a), Real(1) / Real(a.numel()));
}

// ---- slicing along the leading dim ----

template <typename Real>
Tensor<Real> slice_dim0(const Tensor<Real>& a, int64_t begin, int64_t len) {
  if (a.shape().empty())
    throw ShapeError("slice_dim0: scalar input");
  int64_t d0 = a.shape()[0];
  if (begin < 0 || len < 0 || begin + len > d0)
    throw ShapeError("slice_dim0: range [" + std::to_string(begin) + "," +
                     std::to_string(begin + len) + ") out of bounds for dim " +
                     std::to_string(d0));
  int64_t inner = a.numel() / d0;
  Shape shape = a.shape();
  shape[0] = len;
  auto av = a.values();
  std::vector<Real> vals(av.begin() + size_t(begin * inner),
                         av.begin() + size_t((begin + len) * inner));
  Tape<Real>* tape = detail::merge_tapes<Real>({&a}, "slice_dim0");
  if (!tape || !tape->recording())
    return Tensor<Real>::constant(std::move(shape), std::move(vals));
  std::array<Tensor<Real>, 1> in{a};
  return tape->emplace("slice_dim0", std::move(shape), std::move(vals),
                       std::span<const Tensor<Real>>(in),
                       [d0, begin](const Tensor<Real>& g, std::span<const bool>) {
                         return std::vector<Tensor<Real>>{pad_dim0(g, d0, begin)};
                       });
}

// Embeds a into a larger leading dim at offset `begin`, zero elsewhere.
template <typename Real>
Tensor<Real> pad_dim0(const Tensor<Real>& a, int64_t total, int64_t begin) {
  if (a.shape().empty()) throw ShapeError("pad_dim0: scalar input");
  int64_t d0 = a.shape()[0];
  if (begin < 0 || begin + d0 > total)
    throw ShapeError("pad_dim0: slice does not fit");
  int64_t inner = a.numel() / d0;
  Shape shape = a.shape();
  shape[0] = total;
  std::vector<Real> vals(size_t(total * inner), Real(0));
  auto av = a.values();
  std::copy(av.begin(), av.end(), vals.begin() + size_t(begin * inner));
  Tape<Real>* tape = detail::merge_tapes<Real>({&a}, "pad_dim0");
  if (!tape || !tape->recording())
    return Tensor<Real>::constant(std::move(shape), std::move(vals));
  std::array<Tensor<Real>, 1> in{a};
  return tape->emplace("pad_dim0", std::move(shape), std::move(vals),
                       std::span<const Tensor<Real>>(in),
                       [begin, d0](const Tensor<Real>& g, std::span<const bool>) {
                         return std::vector<Tensor<Real>>{
                             slice_dim0(g, begin, d0)};
                       });
}

template <typename Real>
Tensor<Real> concat_dim0(std::span<const Tensor<Real>> xs) {
  if (xs.empty()) throw ShapeError("concat_dim0: empty input list");
  Shape shape = xs[0].shape();
  if (shape.empty()) throw ShapeError("concat_dim0: scalar inputs");
  int64_t total = 0;
  for (const auto& x : xs) {
    Shape s = x.shape();
    if (s.size() != shape.size() ||
        !std::equal(s.begin() + 1, s.end(), shape.begin() + 1))
      throw ShapeError("concat_dim0: mismatched trailing dims " +
                       shape_str(shape) + " vs " + shape_str(s));
    total += s[0];
  }
  shape[0] = total;
  std::vector<Real> vals;
  vals.reserve(size_t(shape_numel(shape)));
  for (const auto& x : xs) {
    auto v = x.values();
    vals.insert(vals.end(), v.begin(), v.end());
  }
  Tape<Real>* tape = nullptr;
  for (const auto& x : xs) {
    Tape<Real>* t = detail::merge_tapes<Real>({&x}, "concat_dim0");
    if (t && tape && t != tape)
      throw TapeError("concat_dim0: operands live on different tapes");
    if (t) tape = t;
  }
  if (!tape || !tape->recording())
    return Tensor<Real>::constant(std::move(shape), std::move(vals));
  std::vector<int64_t> sizes;
  for (const auto& x : xs) sizes.push_back(x.shape()[0]);
  return tape->emplace(
      "concat_dim0", std::move(shape), std::move(vals), xs,
      [sizes](const Tensor<Real>& g, std::span<const bool> needs) {
        std::vector<Tensor<Real>> gr(sizes.size());
        int64_t off = 0;
        for (size_t k = 0; k < sizes.size(); ++k) {
          if (needs[k]) gr[k] = slice_dim0(g, off, sizes[k]);
          off += sizes[k];
        }
        return gr;
      });
}

// ---- dense matmul ----

template <typename Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 ||
      a.shape()[1] != b.shape()[0])
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) +
                     " and " + shape_str(b.shape()));
  int64_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  std::vector<Real> vals(size_t(m * n));
  using Mat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Eigen::Map<const Mat> ma(a.values().data(), m, k);
  Eigen::Map<const Mat> mb(b.values().data(), k, n);
  Eigen::Map<Mat> mo(vals.data(), m, n);
  mo.noalias() = ma * mb;
  Shape shape{m, n};
  Tape<Real>* tape = detail::merge_tapes<Real>({&a, &b}, "matmul");
  if (!tape || !tape->recording())
    return Tensor<Real>::constant(std::move(shape), std::move(vals));
  std::array<Tensor<Real>, 2> in{a, b};
  return tape->emplace(
      "matmul", std::move(shape), std::move(vals),
      std::span<const Tensor<Real>>(in),
      [a, b](const Tensor<Real>& g, std::span<const bool> needs) {
        std::vector<Tensor<Real>> gr(2);
        if (needs[0]) gr[0] = matmul(g, transpose2(b));
        if (needs[1]) gr[1] = matmul(transpose2(a), g);
        return gr;
      });
}

// ---- convolution building blocks ----

namespace detail {

struct ConvGeom {
  int64_t B, C, H, W, kh, kw, stride, pad, OH, OW;
};

inline ConvGeom conv_geom(const Shape& img, int64_t kh, int64_t kw,
                          int64_t stride, int64_t pad, const char* op) {
  if (img.size() != 4)
    throw ShapeError(std::string(op) + ": expected rank-4 image, got " +
                     shape_str(img));
  ConvGeom g{img[0], img[1], img[2], img[3], kh, kw, stride, pad, 0, 0};
  int64_t oh = (g.H + 2 * pad - kh);
  int64_t ow = (g.W + 2 * pad - kw);
  if (oh < 0 || ow < 0 || oh % stride != 0 || ow % stride != 0)
    throw ShapeError(std::string(op) + ": kernel " + std::to_string(kh) + "x" +
                     std::to_string(kw) + " stride " + std::to_string(stride) +
                     " pad " + std::to_string(pad) + " does not tile " +
                     shape_str(img));
  g.OH = oh / stride + 1;
  g.OW = ow / stride + 1;
  return g;
}

}  // namespace detail

// Unfolds conv patches into rows: (B,C,H,W) -> (B*OH*OW, C*kh*kw), zero
// padding outside. Linear; col2im is its adjoint and its backward.
template <typename Real>
Tensor<Real> im2col(const Tensor<Real>& x, int64_t kh, int64_t kw,
                    int64_t stride, int64_t pad) {
  detail::ConvGeom ge = detail::conv_geom(x.shape(), kh, kw, stride, pad, "im2col");
  int64_t rows = ge.B * ge.OH * ge.OW, cols = ge.C * kh * kw;
  std::vector<Real> vals(size_t(rows * cols), Real(0));
  auto xv = x.values();
  for (int64_t b = 0; b < ge.B; ++b)
    for (int64_t oy = 0; oy < ge.OH; ++oy)
      for (int64_t ox = 0; ox < ge.OW; ++ox) {
        int64_t r = (b * ge.OH + oy) * ge.OW + ox;
        for (int64_t c = 0; c < ge.C; ++c)
          for (int64_t ky = 0; ky < kh; ++ky) {
            int64_t iy = oy * stride + ky - pad;
            if (iy < 0 || iy >= ge.H) continue;
            for (int64_t kx = 0; kx < kw; ++kx) {
              int64_t ix = ox * stride + kx - pad;
              if (ix < 0 || ix >= ge.W) continue;
              vals[size_t(r * cols + (c * kh + ky) * kw + kx)] =
                  xv[size_t(((b * ge.C + c) * ge.H + iy) * ge.W + ix)];
            }
          }
      }
  Shape shape{rows, cols};
  Tape<Real>* tape = detail::merge_tapes<Real>({&x}, "im2col");
  if (!tape || !tape->recording())
    return Tensor<Real>::constant(std::move(shape), std::move(vals));
  Shape img = x.shape();
  std::array<Tensor<Real>, 1> in{x};
  return tape->emplace(
      "im2col", std::move(shape), std::move(vals),
      std::span<const Tensor<Real>>(in),
      [img, kh, kw, stride, pad](const Tensor<Real>& g, std::span<const bool>) {
        return std::vector<Tensor<Real>>{col2im(g, img, kh, kw, stride, pad)};
      });
}

// Folds patch rows back into an image by scatter-add; adjoint of im2col.
template <typename Real>
Tensor<Real> col2im(const Tensor<Real>& colsT, Shape img_shape, int64_t kh,
                    int64_t kw, int64_t stride, int64_t pad) {
  detail::ConvGeom ge =
      detail::conv_geom(img_shape, kh, kw, stride, pad, "col2im");
  int64_t rows = ge.B * ge.OH * ge.OW, cols = ge.C * kh * kw;
  if (colsT.shape() != Shape{rows, cols})
    throw ShapeError("col2im: expected " + shape_str({rows, cols}) + ", got " +
                     shape_str(colsT.shape()));
  std::vector<Real> vals(size_t(shape_numel(img_shape)), Real(0));
  auto cv = colsT.values();
  for (int64_t b = 0; b < ge.B; ++b)
    for (int64_t oy = 0; oy < ge.OH; ++oy)
      for (int64_t ox = 0; ox < ge.OW; ++ox) {
        int64_t r = (b * ge.OH + oy) * ge.OW + ox;
        for (int64_t c = 0; c < ge.C; ++c)
          for (int64_t ky = 0; ky < kh; ++ky) {
            int64_t iy = oy * stride + ky - pad;
            if (iy < 0 || iy >= ge.H) continue;
            for (int64_t kx = 0; kx < kw; ++kx) {
              int64_t ix = ox * stride + kx - pad;
              if (ix < 0 || ix >= ge.W) continue;
              vals[size_t(((b * ge.C + c) * ge.H + iy) * ge.W + ix)] +=
                  cv[size_t(r * cols + (c * kh + ky) * kw + kx)];
            }
          }
      }
  Tape<Real>* tape = detail::merge_tapes<Real>({&colsT}, "col2im");
  if (!tape || !tape->recording())
    return Tensor<Real>::constant(std::move(img_shape), std::move(vals));
  std::array<Tensor<Real>, 1> in{colsT};
  return tape->emplace(
      "col2im", std::move(img_shape), std::move(vals),
      std::span<const Tensor<Real>>(in),
      [kh, kw, stride, pad](const Tensor<Real>& g, std::span<const bool>) {
        return std::vector<Tensor<Real>>{im2col(g, kh, kw, stride, pad)};
      });
}

template <typename Real>
Tensor<Real> nhwc_to_nchw(const Tensor<Real>& a) {
  if (a.shape().size() != 4)
    throw ShapeError("nhwc_to_nchw: expected rank-4, got " + shape_str(a.shape()));
  int64_t B = a.shape()[0], H = a.shape()[1], W = a.shape()[2], C = a.shape()[3];
  std::vector<Real> vals(size_t(a.numel()));
  auto av = a.values();
  for (int64_t b = 0; b < B; ++b)
    for (int64_t y = 0; y < H; ++y)
      for (int64_t x = 0; x < W; ++x)
        for (int64_t c = 0; c < C; ++c)
          vals[size_t(((b * C + c) * H + y) * W + x)] =
              av[size_t(((b * H + y) * W + x) * C + c)];
  Shape shape{B, C, H, W};
  Tape<Real>* tape = detail::merge_tapes<Real>({&a}, "nhwc_to_nchw");
  if (!tape || !tape->recording())
    return Tensor<Real>::constant(std::move(shape), std::move(vals));
  std::array<Tensor<Real>, 1> in{a};
  return tape->emplace("nhwc_to_nchw", std::move(shape), std::move(vals),
                       std::span<const Tensor<Real>>(in),
                       [](const Tensor<Real>& g, std::span<const bool>) {
                         return std::vector<Tensor<Real>>{nchw_to_nhwc(g)};
                       });
}

template <typename Real>
Tensor<Real> nchw_to_nhwc(const Tensor<Real>& a) {
  if (a.shape().size() != 4)
    throw ShapeError("nchw_to_nhwc: expected rank-4, got " + shape_str(a.shape()));
  int64_t B = a.shape()[0], C = a.shape()[1], H = a.shape()[2], W = a.shape()[3];
  std::vector<Real> vals(size_t(a.numel()));
  auto av = a.values();
  for (int64_t b = 0; b < B; ++b)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t y = 0; y < H; ++y)
        for (int64_t x = 0; x < W; ++x)
          vals[size_t(((b * H + y) * W + x) * C + c)] =
              av[size_t(((b * C + c) * H + y) * W + x)];
  Shape shape{B, H, W, C};
  Tape<Real>* tape = detail::merge_tapes<Real>({&a}, "nchw_to_nhwc");
  if (!tape || !tape->recording())
    return Tensor<Real>::constant(std::move(shape), std::move(vals));
  std::array<Tensor<Real>, 1> in{a};
  return tape->emplace("nchw_to_nhwc", std::move(shape), std::move(vals),
                       std::span<const Tensor<Real>>(in),
                       [](const Tensor<Real>& g, std::span<const bool>) {
                         return std::vector<Tensor<Real>>{nhwc_to_nchw(g)};
                       });
}

// conv2d(x (B,C,H,W), w (O,C,kh,kw), bias (O)) -> (B,O,OH,OW), composed from
// im2col + matmul so every derivative order falls out of the primitive pairs.
template <typename Real>
Tensor<Real> conv2d(const Tensor<Real>& x, const Tensor<Real>& w,
                    const Tensor<Real>& bias, int64_t stride, int64_t pad) {
  if (w.shape().size() != 4)
    throw ShapeError("conv2d: expected rank-4 weight, got " + shape_str(w.shape()));
  if (x.shape().size() != 4)
    throw ShapeError("conv2d: expected rank-4 input, got " + shape_str(x.shape()));
  int64_t O = w.shape()[0], C = w.shape()[1], kh = w.shape()[2], kw = w.shape()[3];
  if (x.shape()[1] != C)
    throw ShapeError("conv2d: input channels " + std::to_string(x.shape()[1]) +
                     " != weight channels " + std::to_string(C));
  detail::ConvGeom ge = detail::conv_geom(x.shape(), kh, kw, stride, pad, "conv2d");
  Tensor<Real> cols = im2col(x, kh, kw, stride, pad);
  Tensor<Real> wt = transpose2(reshape(w, {O, C * kh * kw}));
  Tensor<Real> y = matmul(cols, wt);
  if (bias.defined()) {
    if (bias.shape() != Shape{O})
      throw ShapeError("conv2d: bias shape " + shape_str(bias.shape()) +
                       " != (" + std::to_string(O) + ")");
    y = add(y, broadcast_to(reshape(bias, {1, O}), y.shape()));
  }
  return nhwc_to_nchw(reshape(y, {ge.B, ge.OH, ge.OW, O}));
}

// ---- pooling ----

template <typename Real>
Tensor<Real> pool_scatter(const Tensor<Real>& g,
                          std::shared_ptr<const std::vector<int64_t>> idx,
                          Shape img_shape);

template <typename Real>
Tensor<Real> pool_gather(const Tensor<Real>& x,
                         std::shared_ptr<const std::vector<int64_t>> idx,
                         Shape pooled_shape);

// 2x2 max pooling, stride 2. Ties resolve to the lowest flat index (scan
// order) so the subgradient is deterministic.
template <typename Real>
Tensor<Real> maxpool2(const Tensor<Real>& x) {
  if (x.shape().size() != 4)
    throw ShapeError("maxpool2: expected rank-4, got " + shape_str(x.shape()));
  int64_t B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  if (H % 2 || W % 2)
    throw ShapeError("maxpool2: spatial dims must be even, got " +
                     shape_str(x.shape()));
  int64_t OH = H / 2, OW = W / 2;
  std::vector<Real> vals(size_t(B * C * OH * OW));
  auto idx = std::make_shared<std::vector<int64_t>>(size_t(B * C * OH * OW));
  auto xv = x.values();
  for (int64_t bc = 0; bc < B * C; ++bc)
    for (int64_t oy = 0; oy < OH; ++oy)
      for (int64_t ox = 0; ox < OW; ++ox) {
        int64_t base = bc * H * W + (2 * oy) * W + 2 * ox;
        int64_t best = base;
        Real bv = xv[size_t(base)];
        for (int64_t k = 1; k < 4; ++k) {
          int64_t cand = base + (k >> 1) * W + (k & 1);
          if (xv[size_t(cand)] > bv) {
            bv = xv[size_t(cand)];
            best = cand;
          }
        }
        int64_t o = bc * OH * OW + oy * OW + ox;
        vals[size_t(o)] = bv;
        (*idx)[size_t(o)] = best;
      }
  Shape shape{B, C, OH, OW};
  Tape<Real>* tape = detail::merge_tapes<Real>({&x}, "maxpool2");
  if (!tape || !tape->recording())
    return Tensor<Real>::constant(std::move(shape), std::move(vals));
  Shape img = x.shape();
  std::array<Tensor<Real>, 1> in{x};
  std::shared_ptr<const std::vector<int64_t>> cidx = idx;
  return tape->emplace(
      "maxpool2", std::move(shape), std::move(vals),
      std::span<const Tensor<Real>>(in),
      [cidx, img](const Tensor<Real>& g, std::span<const bool>) {
        return std::vector<Tensor<Real>>{pool_scatter(g, cidx, img)};
      });
}

// Routes pooled-shape values to saved argmax positions; zero elsewhere.
template <typename Real>
Tensor<Real> pool_scatter(const Tensor<Real>& g,
                          std::shared_ptr<const std::vector<int64_t>> idx,
                          Shape img_shape) {
  if (size_t(g.numel()) != idx->size())
    throw ShapeError("pool_scatter: index/gradient size mismatch");
  std::vector<Real> vals(size_t(shape_numel(img_shape)), Real(0));
  auto gv = g.values();
  for (size_t i = 0; i < gv.size(); ++i) vals[size_t((*idx)[i])] += gv[i];
  Tape<Real>* tape = detail::merge_tapes<Real>({&g}, "pool_scatter");
  if (!tape || !tape->recording())
    return Tensor<Real>::constant(std::move(img_shape), std::move(vals));
  Shape pooled = g.shape();
  std::array<Tensor<Real>, 1> in{g};
  return tape->emplace(
      "pool_scatter", std::move(img_shape), std::move(vals),
      std::span<const Tensor<Real>>(in),
      [idx, pooled](const Tensor<Real>& g2, std::span<const bool>) {
        return std::vector<Tensor<Real>>{pool_gather(g2, idx, pooled)};
      });
}

template <typename Real>
Tensor<Real> pool_gather(const Tensor<Real>& x,
                         std::shared_ptr<const std::vector<int64_t>> idx,
                         Shape pooled_shape) {
  if (shape_numel(pooled_shape) != int64_t(idx->size()))
    throw ShapeError("pool_gather: index/shape size mismatch");
  std::vector<Real> vals(idx->size());
  auto xv = x.values();
  for (size_t i = 0; i < vals.size(); ++i) vals[i] = xv[size_t((*idx)[i])];
  Tape<Real>* tape = detail::merge_tapes<Real>({&x}, "pool_gather");
  if (!tape || !tape->recording())
    return Tensor<Real>::constant(std::move(pooled_shape), std::move(vals));
  Shape img = x.shape();
  std::array<Tensor<Real>, 1> in{x};
  return tape->emplace(
      "pool_gather", std::move(pooled_shape), std::move(vals),
      std::span<const Tensor<Real>>(in),
      [idx, img](const Tensor<Real>& g, std::span<const bool>) {
        return std::vector<Tensor<Real>>{pool_scatter(g, idx, img)};
      });
}

template <typename Real>
Tensor<Real> upsample2(const Tensor<Real>& a);

// 2x2 average pooling, stride 2.
template <typename Real>
Tensor<Real> avgpool2(const Tensor<Real>& x) {
  if (x.shape().size() != 4)
    throw ShapeError("avgpool2: expected rank-4, got " + shape_str(x.shape()));
  int64_t B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  if (H % 2 || W % 2)
    throw ShapeError("avgpool2: spatial dims must be even, got " +
                     shape_str(x.shape()));
  int64_t OH = H / 2, OW = W / 2;
  std::vector<Real> vals(size_t(B * C * OH * OW));
  auto xv = x.values();
  for (int64_t bc = 0; bc < B * C; ++bc)
    for (int64_t oy = 0; oy < OH; ++oy)
      for (int64_t ox = 0; ox < OW; ++ox) {
        int64_t base = bc * H * W + (2 * oy) * W + 2 * ox;
        vals[size_t(bc * OH * OW + oy * OW + ox)] =
            (xv[size_t(base)] + xv[size_t(base + 1)] + xv[size_t(base + W)] +
             xv[size_t(base + W + 1)]) /
            Real(4);
      }
  Shape shape{B, C, OH, OW};
  Tape<Real>* tape = detail::merge_tapes<Real>({&x}, "avgpool2");
  if (!tape || !tape->recording())
    return Tensor<Real>::constant(std::move(shape), std::move(vals));
  std::array<Tensor<Real>, 1> in{x};
  return tape->emplace(
      "avgpool2", std::move(shape), std::move(vals),
      std::span<const Tensor<Real>>(in),
      [](const Tensor<Real>& g, std::span<const bool>) {
        return std::vector<Tensor<Real>>{mul_scalar(upsample2(g), Real(0.25))};
      });
}

// Nearest-neighbour 2x upsampling.
template <typename Real>
Tensor<Real> upsample2(const Tensor<Real>& x) {
  if (x.shape().size() != 4)
    throw ShapeError("upsample2: expected rank-4, got " + shape_str(x.shape()));
  int64_t B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  int64_t OH = H * 2, OW = W * 2;
  std::vector<Real> vals(size_t(B * C * OH * OW));
  auto xv = x.values();
  for (int64_t bc = 0; bc < B * C; ++bc)
    for (int64_t y = 0; y < OH; ++y)
      for (int64_t x2 = 0; x2 < OW; ++x2)
        vals[size_t(bc * OH * OW + y * OW + x2)] =
            xv[size_t(bc * H * W + (y / 2) * W + x2 / 2)];
  Shape shape{B, C, OH, OW};
  Tape<Real>* tape = detail::merge_tapes<Real>({&x}, "upsample2");
  if (!tape || !tape->recording())
    return Tensor<Real>::constant(std::move(shape), std::move(vals));
  std::array<Tensor<Real>, 1> in{x};
  return tape->emplace(
      "upsample2", std::move(shape), std::move(vals),
      std::span<const Tensor<Real>>(in),
      [](const Tensor<Real>& g, std::span<const bool>) {
        return std::vector<Tensor<Real>>{mul_scalar(avgpool2(g), Real(4))};
      });
}

// ---- softmax / classification losses ----

namespace detail {

// Per-row max as an off-tape constant; subtracting it is the standard
// stabilization and contributes no gradient.
template <typename Real>
Tensor<Real> rowmax_const(const Tensor<Real>& x) {
  int64_t B = x.shape()[0], N = x.shape()[1];
  std::vector<Real> m(static_cast<size_t>(B), Real(0));
  auto xv = x.values();
  for (int64_t b = 0; b < B; ++b) {
    Real best = xv[size_t(b * N)];
    for (int64_t j = 1; j < N; ++j)
      best = std::max(best, xv[size_t(b * N + j)]);
    m[size_t(b)] = best;
  }
  return Tensor<Real>::constant({B, 1}, std::move(m));
}

template <typename Real>
void check_rank2(const Tensor<Real>& x, const char* op) {
  if (x.shape().size() != 2)
    throw ShapeError(std::string(op) + ": expected rank-2, got " +
                     shape_str(x.shape()));
}

}  // namespace detail

template <typename Real>
Tensor<Real> softmax_rows(const Tensor<Real>& x) {
  detail::check_rank2(x, "softmax_rows");
  Shape s = x.shape();
  Tensor<Real> e = exp(sub(x, broadcast_to(detail::rowmax_const(x), s)));
  return div(e, broadcast_to(sum_to(e, {s[0], 1}), s));
}

template <typename Real>
Tensor<Real> log_softmax_rows(const Tensor<Real>& x) {
  detail::check_rank2(x, "log_softmax_rows");
  Shape s = x.shape();
  Tensor<Real> m = detail::rowmax_const(x);
  Tensor<Real> lse =
      add(log(sum_to(exp(sub(x, broadcast_to(m, s))), {s[0], 1})), m);
  return sub(x, broadcast_to(lse, s));
}

template <typename Real>
Tensor<Real> scatter_class(const Tensor<Real>& x,
                           std::shared_ptr<const std::vector<int64_t>> labels,
                           int64_t num_classes);

// Picks x[b, labels[b]] -> (B,1).
template <typename Real>
Tensor<Real> select_class(const Tensor<Real>& x,
                          std::shared_ptr<const std::vector<int64_t>> labels) {
  detail::check_rank2(x, "select_class");
  int64_t B = x.shape()[0], C = x.shape()[1];
  if (int64_t(labels->size()) != B)
    throw ShapeError("select_class: " + std::to_string(labels->size()) +
                     " labels for batch " + std::to_string(B));
  std::vector<Real> vals(static_cast<size_t>(B), Real(0));
  auto xv = x.values();
  for (int64_t b = 0; b < B; ++b) {
    int64_t y = (*labels)[size_t(b)];
    if (y < 0 || y >= C)
      throw ValueError("select_class: label " + std::to_string(y) +
                       " at row " + std::to_string(b) + " outside [0," +
                       std::to_string(C) + ")");
    vals[size_t(b)] = xv[size_t(b * C + y)];
  }
  Shape shape{B, 1};
  Tape<Real>* tape = detail::merge_tapes<Real>({&x}, "select_class");
  if (!tape || !tape->recording())
    return Tensor<Real>::constant(std::move(shape), std::move(vals));
  std::array<Tensor<Real>, 1> in{x};
  return tape->emplace(
      "select_class", std::move(shape), std::move(vals),
      std::span<const Tensor<Real>>(in),
      [labels, C](const Tensor<Real>& g, std::span<const bool>) {
        return std::vector<Tensor<Real>>{scatter_class(g, labels, C)};
      });
}

// Spreads (B,1) values into a zero (B,C) matrix at the label columns.
template <typename Real>
Tensor<Real> scatter_class(const Tensor<Real>& x,
                           std::shared_ptr<const std::vector<int64_t>> labels,
                           int64_t num_classes) {
  int64_t B = int64_t(labels->size());
  if (x.numel() != B)
    throw ShapeError("scatter_class: expected " + std::to_string(B) +
                     " values, got " + std::to_string(x.numel()));
  std::vector<Real> vals(size_t(B * num_classes), Real(0));
  auto xv = x.values();
  for (int64_t b = 0; b < B; ++b)
    vals[size_t(b * num_classes + (*labels)[size_t(b)])] = xv[size_t(b)];
  Shape shape{B, num_classes};
  Tape<Real>* tape = detail::merge_tapes<Real>({&x}, "scatter_class");
  if (!tape || !tape->recording())
    return Tensor<Real>::constant(std::move(shape), std::move(vals));
  std::array<Tensor<Real>, 1> in{x};
  return tape->emplace(
      "scatter_class", std::move(shape), std::move(vals),
      std::span<const Tensor<Real>>(in),
      [labels](const Tensor<Real>& g, std::span<const bool>) {
        return std::vector<Tensor<Real>>{select_class(g, labels)};
      });
}

// Mean negative log-likelihood of log-probabilities at the labels.
template <typename Real>
Tensor<Real> nll_loss(const Tensor<Real>& logp,
                      const std::vector<int64_t>& labels) {
  auto l = std::make_shared<const std::vector<int64_t>>(labels);
  return neg(mean_all(select_class(logp, l)));
}

template <typename Real>
Tensor<Real> cross_entropy(const Tensor<Real>& logits,
                           const std::vector<int64_t>& labels) {
  return nll_loss(log_softmax_rows(logits), labels);
}

// ---- bilinear warp ----

namespace detail {

// Shared corner arithmetic for the bilinear kernel and its gradients.
// Coordinates are absolute pixel positions; samples outside [0,H)x[0,W) read
// zero, which makes the interpolated field continuous piecewise-linear.
template <typename Real>
struct BilinearTap {
  int64_t x0, y0;
  Real ax, ay;
  explicit BilinearTap(Real fx, Real fy) {
    x0 = int64_t(std::floor(fx));
    y0 = int64_t(std::floor(fy));
    ax = fx - Real(x0);
    ay = fy - Real(y0);
  }
};

template <typename Real>
inline Real at_or_zero(std::span<const Real> plane, int64_t H, int64_t W,
                       int64_t y, int64_t x) {
  if (y < 0 || y >= H || x < 0 || x >= W) return Real(0);
  return plane[size_t(y * W + x)];
}

template <typename Real>
void check_grid_shapes(const Tensor<Real>& x, const Tensor<Real>& sx,
                       const Tensor<Real>& sy, const char* op) {
  if (x.shape().size() != 4)
    throw ShapeError(std::string(op) + ": expected rank-4 image, got " +
                     shape_str(x.shape()));
  if (sx.shape().size() != 3 || sy.shape() != sx.shape())
    throw ShapeError(std::string(op) + ": coordinate grids must be rank-3 and "
                     "equal, got " + shape_str(sx.shape()) + " and " +
                     shape_str(sy.shape()));
  if (sx.shape()[0] != x.shape()[0])
    throw ShapeError(std::string(op) + ": batch mismatch " +
                     shape_str(x.shape()) + " vs " + shape_str(sx.shape()));
}

}  // namespace detail

template <typename Real>
Tensor<Real> gs_grad_input(const Tensor<Real>& g, const Tensor<Real>& sx,
                           const Tensor<Real>& sy, Shape img_shape);
template <typename Real>
Tensor<Real> gs_grad_coord(const Tensor<Real>& g, const Tensor<Real>& x,
                           const Tensor<Real>& sx, const Tensor<Real>& sy,
                           bool wrt_x);

// Samples x at per-pixel source coordinates (sx,sy), bilinear with zero
// padding: out[b,c,i,j] = interp(x[b,c], sy[b,i,j], sx[b,i,j]). First-order
// gradients flow to the image and to both coordinate grids; second-order
// gradients through the warp are not supported.
template <typename Real>
Tensor<Real> grid_sample_bilinear(const Tensor<Real>& x, const Tensor<Real>& sx,
                                  const Tensor<Real>& sy) {
  detail::check_grid_shapes(x, sx, sy, "grid_sample_bilinear");
  int64_t B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  int64_t HO = sx.shape()[1], WO = sx.shape()[2];
  std::vector<Real> vals(size_t(B * C * HO * WO));
  auto xv = x.values();
  auto sxv = sx.values();
  auto syv = sy.values();
  for (int64_t b = 0; b < B; ++b)
    for (int64_t i = 0; i < HO; ++i)
      for (int64_t j = 0; j < WO; ++j) {
        int64_t p = (b * HO + i) * WO + j;
        detail::BilinearTap<Real> t(sxv[size_t(p)], syv[size_t(p)]);
        for (int64_t c = 0; c < C; ++c) {
          std::span<const Real> plane = xv.subspan(size_t((b * C + c) * H * W),
                                                   size_t(H * W));
          Real v00 = detail::at_or_zero(plane, H, W, t.y0, t.x0);
          Real v01 = detail::at_or_zero(plane, H, W, t.y0, t.x0 + 1);
          Real v10 = detail::at_or_zero(plane, H, W, t.y0 + 1, t.x0);
          Real v11 = detail::at_or_zero(plane, H, W, t.y0 + 1, t.x0 + 1);
          vals[size_t(((b * C + c) * HO + i) * WO + j)] =
              (Real(1) - t.ay) * ((Real(1) - t.ax) * v00 + t.ax * v01) +
              t.ay * ((Real(1) - t.ax) * v10 + t.ax * v11);
        }
      }
  Shape shape{B, C, HO, WO};
  Tape<Real>* tape = detail::merge_tapes<Real>({&x, &sx, &sy}, "grid_sample_bilinear");
  if (!tape || !tape->recording())
    return Tensor<Real>::constant(std::move(shape), std::move(vals));
  Shape img = x.shape();
  std::array<Tensor<Real>, 3> in{x, sx, sy};
  return tape->emplace(
      "grid_sample_bilinear", std::move(shape), std::move(vals),
      std::span<const Tensor<Real>>(in),
      [x, sx, sy, img](const Tensor<Real>& g, std::span<const bool> needs) {
        std::vector<Tensor<Real>> gr(3);
        if (needs[0]) gr[0] = gs_grad_input(g, sx, sy, img);
        if (needs[1]) gr[1] = gs_grad_coord(g, x, sx, sy, true);
        if (needs[2]) gr[2] = gs_grad_coord(g, x, sx, sy, false);
        return gr;
      });
}

// Adjoint of the warp w.r.t. the image: scatter g by the bilinear weights.
// Linear in g, so its own backward w.r.t. g is the forward gather; gradients
// w.r.t. the coordinate grids of this node are not supported.
template <typename Real>
Tensor<Real> gs_grad_input(const Tensor<Real>& g, const Tensor<Real>& sx,
                           const Tensor<Real>& sy, Shape img_shape) {
  if (img_shape.size() != 4 || sx.shape().size() != 3 ||
      sy.shape() != sx.shape() || sx.shape()[0] != img_shape[0])
    throw ShapeError("gs_grad_input: bad shapes " + shape_str(img_shape) +
                     ", " + shape_str(sx.shape()) + ", " +
                     shape_str(sy.shape()));
  int64_t B = img_shape[0], C = img_shape[1], H = img_shape[2], W = img_shape[3];
  int64_t HO = sx.shape()[1], WO = sx.shape()[2];
  std::vector<Real> vals(size_t(shape_numel(img_shape)), Real(0));
  auto gv = g.values();
  auto sxv = sx.values();
  auto syv = sy.values();
  auto put = [&](int64_t b, int64_t c, int64_t y, int64_t x2, Real v) {
    if (y < 0 || y >= H || x2 < 0 || x2 >= W) return;
    vals[size_t(((b * C + c) * H + y) * W + x2)] += v;
  };
  for (int64_t b = 0; b < B; ++b)
    for (int64_t i = 0; i < HO; ++i)
      for (int64_t j = 0; j < WO; ++j) {
        int64_t p = (b * HO + i) * WO + j;
        detail::BilinearTap<Real> t(sxv[size_t(p)], syv[size_t(p)]);
        for (int64_t c = 0; c < C; ++c) {
          Real gg = gv[size_t(((b * C + c) * HO + i) * WO + j)];
          put(b, c, t.y0, t.x0, gg * (Real(1) - t.ax) * (Real(1) - t.ay));
          put(b, c, t.y0, t.x0 + 1, gg * t.ax * (Real(1) - t.ay));
          put(b, c, t.y0 + 1, t.x0, gg * (Real(1) - t.ax) * t.ay);
          put(b, c, t.y0 + 1, t.x0 + 1, gg * t.ax * t.ay);
        }
      }
  Tape<Real>* tape = detail::merge_tapes<Real>({&g, &sx, &sy}, "gs_grad_input");
  if (!tape || !tape->recording())
    return Tensor<Real>::constant(std::move(img_shape), std::move(vals));
  std::array<Tensor<Real>, 3> in{g, sx, sy};
  return tape->emplace(
      "gs_grad_input", std::move(img_shape), std::move(vals),
      std::span<const Tensor<Real>>(in),
      [sx, sy](const Tensor<Real>& g2, std::span<const bool> needs) {
        if (needs[1] || needs[2])
          throw TapeError(
              "gs_grad_input: second-order gradients through warp "
              "coordinates are not supported");
        std::vector<Tensor<Real>> gr(3);
        if (needs[0]) gr[0] = grid_sample_bilinear(g2, sx, sy);
        return gr;
      });
}

// d(warp)/d(coordinate grid), one grid at a time; not differentiable further.
template <typename Real>
Tensor<Real> gs_grad_coord(const Tensor<Real>& g, const Tensor<Real>& x,
                           const Tensor<Real>& sx, const Tensor<Real>& sy,
                           bool wrt_x) {
  detail::check_grid_shapes(x, sx, sy, "gs_grad_coord");
  int64_t B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  int64_t HO = sx.shape()[1], WO = sx.shape()[2];
  std::vector<Real> vals(size_t(B * HO * WO), Real(0));
  auto gv = g.values();
  auto xv = x.values();
  auto sxv = sx.values();
  auto syv = sy.values();
  for (int64_t b = 0; b < B; ++b)
    for (int64_t i = 0; i < HO; ++i)
      for (int64_t j = 0; j < WO; ++j) {
        int64_t p = (b * HO + i) * WO + j;
        detail::BilinearTap<Real> t(sxv[size_t(p)], syv[size_t(p)]);
        Real acc = 0;
        for (int64_t c = 0; c < C; ++c) {
          std::span<const Real> plane = xv.subspan(size_t((b * C + c) * H * W),
                                                   size_t(H * W));
          Real v00 = detail::at_or_zero(plane, H, W, t.y0, t.x0);
          Real v01 = detail::at_or_zero(plane, H, W, t.y0, t.x0 + 1);
          Real v10 = detail::at_or_zero(plane, H, W, t.y0 + 1, t.x0);
          Real v11 = detail::at_or_zero(plane, H, W, t.y0 + 1, t.x0 + 1);
          Real gg = gv[size_t(((b * C + c) * HO + i) * WO + j)];
          if (wrt_x)
            acc += gg * ((Real(1) - t.ay) * (v01 - v00) + t.ay * (v11 - v10));
          else
            acc += gg * ((Real(1) - t.ax) * (v10 - v00) + t.ax * (v11 - v01));
        }
        vals[size_t(p)] = acc;
      }
  Shape shape = sx.shape();
  Tape<Real>* tape = detail::merge_tapes<Real>({&g, &x, &sx, &sy}, "gs_grad_coord");
  if (!tape || !tape->recording())
    return Tensor<Real>::constant(std::move(shape), std::move(vals));
  std::array<Tensor<Real>, 4> in{g, x, sx, sy};
  return tape->emplace(
      "gs_grad_coord", std::move(shape), std::move(vals),
      std::span<const Tensor<Real>>(in),
      [](const Tensor<Real>&, std::span<const bool>) -> std::vector<Tensor<Real>> {
        throw TapeError(
            "gs_grad_coord: second-order gradients through warp coordinates "
            "are not supported");
      });
}

}  // namespace hyperaug
