#include "hyperaug/ops.hpp"

#include <cmath>
#include <functional>
#include <vector>

#include <Eigen/Dense>
#include <gtest/gtest.h>

#include "hyperaug/rng.hpp"
#include "hyperaug/tensor.hpp"
#include "testutil.hpp"

using namespace hyperaug;
using T = Tensor<double>;

namespace {

std::vector<double> random_values(size_t n, Rng& rng, double lo = -1.0,
                                  double hi = 1.0) {
  std::vector<double> v(n, 0.0);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return v;
}

// Tape gradient of scalar = sum(expr(x) * w) versus central differences.
// w is fixed random so every output component is exercised.
void expect_matches_fd(
    const std::function<T(const T&)>& expr, const Shape& shape, Rng& rng,
    double tol = 1e-7, double lo = -1.0, double hi = 1.0) {
  size_t n = size_t(shape_numel(shape));
  std::vector<double> x0 = random_values(n, rng, lo, hi);
  std::vector<double> w;
  {
    T probe = expr(T::constant(shape, x0));
    w = random_values(size_t(probe.numel()), rng);
  }

  Tape<double> tape;
  T x = tape.watch(T::constant(shape, x0));
  T y = expr(x);
  T s = sum_all(mul(y, T::constant(y.shape(), w)));
  std::vector<T> wrt{x};
  auto g = tape.backward(s, wrt);

  auto f = [&](std::span<const double> v) {
    T out = expr(T::constant(shape, std::vector<double>(v.begin(), v.end())));
    double acc = 0;
    auto ov = out.values();
    for (size_t i = 0; i < ov.size(); ++i) acc += ov[i] * w[i];
    return acc;
  };
  auto fd = testutil::fd_gradient(f, x0, 1e-6);
  auto gv = g[0].values();
  std::vector<double> got(gv.begin(), gv.end());
  EXPECT_LT(testutil::rel_l2(got, fd), tol)
      << "gradient mismatch on shape " << shape_str(shape);
}

}  // namespace

TEST(Ops, ArithmeticForwardValues) {
  T a = T::constant({2, 2}, {1, 2, 3, 4});
  T b = T::constant({2, 2}, {5, 6, 7, 8});
  EXPECT_EQ(add(a, b).values()[3], 12.0);
  EXPECT_EQ(sub(a, b).values()[0], -4.0);
  EXPECT_EQ(mul(a, b).values()[2], 21.0);
  EXPECT_EQ(div(b, a).values()[1], 3.0);
  EXPECT_EQ(neg(a).values()[0], -1.0);
  EXPECT_EQ(add_scalar(a, 10.0).values()[0], 11.0);
  EXPECT_EQ(mul_scalar(a, 3.0).values()[3], 12.0);
  EXPECT_EQ(scalar_sub(1.0, a).values()[1], -1.0);
}

TEST(Ops, ShapeMismatchThrows) {
  T a = T::constant({2}, {1, 2});
  T b = T::constant({3}, {1, 2, 3});
  EXPECT_THROW(add(a, b), ShapeError);
  EXPECT_THROW(mul(a, b), ShapeError);
  EXPECT_THROW(matmul(a, b), ShapeError);
}

TEST(Ops, ElementwiseGradientsMatchFiniteDifferences) {
  Rng rng(101);
  Shape s{2, 3};
  expect_matches_fd([](const T& x) { return sigmoid(x); }, s, rng);
  expect_matches_fd([](const T& x) { return tanh(x); }, s, rng);
  expect_matches_fd([](const T& x) { return exp(x); }, s, rng);
  expect_matches_fd([](const T& x) { return sin(x); }, s, rng);
  expect_matches_fd([](const T& x) { return cos(x); }, s, rng);
  expect_matches_fd([](const T& x) { return log(x); }, s, rng, 1e-7, 0.2, 2.0);
  expect_matches_fd([](const T& x) { return mul(x, sigmoid(x)); }, s, rng);
  expect_matches_fd([](const T& x) { return div(T::full({2, 3}, 1.0), x); }, s,
                    rng, 1e-6, 0.5, 2.0);
}

TEST(Ops, ReluGradientAwayFromKink) {
  Rng rng(7);
  // Sample twice, once strictly positive and once strictly negative.
  expect_matches_fd([](const T& x) { return relu(x); }, {2, 2}, rng, 1e-8, 0.5,
                    2.0);
  expect_matches_fd([](const T& x) { return relu(x); }, {2, 2}, rng, 1e-8,
                    -2.0, -0.5);
}

TEST(Ops, ClampForwardAndGradient) {
  T x = T::constant({4}, {-2.0, 0.3, 0.8, 1.7});
  T y = clamp(x, 0.0, 1.0);
  EXPECT_EQ(y.values()[0], 0.0);
  EXPECT_EQ(y.values()[1], 0.3);
  EXPECT_EQ(y.values()[3], 1.0);
  Tape<double> tape;
  T xv = tape.watch(x);
  std::vector<T> wrt{xv};
  auto g = tape.backward(sum_all(clamp(xv, 0.0, 1.0)), wrt);
  EXPECT_EQ(g[0].at(0), 0.0);  // below range: flat
  EXPECT_EQ(g[0].at(1), 1.0);
  EXPECT_EQ(g[0].at(3), 0.0);  // above range: flat
}

TEST(Ops, MatmulMatchesEigenAndFd) {
  Rng rng(17);
  auto av = random_values(6, rng), bv = random_values(12, rng);
  T a = T::constant({2, 3}, av), b = T::constant({3, 4}, bv);
  T c = matmul(a, b);
  Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                           Eigen::RowMajor>>
      ea(av.data(), 2, 3), eb(bv.data(), 3, 4);
  Eigen::MatrixXd ec = ea * eb;
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 4; ++j)
      EXPECT_NEAR(c.values()[size_t(i * 4 + j)], ec(i, j), 1e-12);

  T bc = T::constant({3, 4}, bv);
  expect_matches_fd([&](const T& x) { return matmul(x, bc); }, {2, 3}, rng);
  T ac = T::constant({2, 3}, av);
  expect_matches_fd([&](const T& x) { return matmul(ac, x); }, {3, 4}, rng);
}

TEST(Ops, ReshapeTransposeRoundtrip) {
  Rng rng(23);
  auto v = random_values(6, rng);
  T a = T::constant({2, 3}, v);
  T t = transpose2(a);
  EXPECT_EQ(t.shape(), (Shape{3, 2}));
  EXPECT_EQ(t.values()[1], v[3]);
  T back = transpose2(t);
  for (size_t i = 0; i < 6; ++i) EXPECT_EQ(back.values()[i], v[i]);
  EXPECT_THROW(reshape(a, {4, 2}), ShapeError);
  expect_matches_fd(
      [](const T& x) { return transpose2(reshape(x, {3, 2})); }, {6}, rng);
}

TEST(Ops, BroadcastAndSumToAreAdjoint) {
  Rng rng(29);
  expect_matches_fd(
      [](const T& x) { return broadcast_to(x, {4, 3}); }, {1, 3}, rng);
  expect_matches_fd([](const T& x) { return sum_to(x, {1, 3}); }, {4, 3}, rng);
  expect_matches_fd([](const T& x) { return mean_all(x); }, {5}, rng);

  T row = T::constant({1, 3}, {1, 2, 3});
  T big = broadcast_to(row, {2, 3});
  EXPECT_EQ(big.values()[4], 2.0);
  T back = sum_to(big, {1, 3});
  EXPECT_EQ(back.values()[0], 2.0);
}

TEST(Ops, SlicePadConcat) {
  Rng rng(31);
  T a = T::constant({4, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
  T s = slice_dim0(a, 1, 2);
  EXPECT_EQ(s.shape(), (Shape{2, 2}));
  EXPECT_EQ(s.values()[0], 3.0);
  EXPECT_THROW(slice_dim0(a, 3, 2), ShapeError);

  T p = pad_dim0(s, 4, 1);
  EXPECT_EQ(p.shape(), (Shape{4, 2}));
  EXPECT_EQ(p.values()[0], 0.0);
  EXPECT_EQ(p.values()[2], 3.0);

  std::vector<T> parts{slice_dim0(a, 0, 1), slice_dim0(a, 1, 3)};
  T cat = concat_dim0(std::span<const T>(parts));
  for (size_t i = 0; i < 8; ++i) EXPECT_EQ(cat.values()[i], a.values()[i]);

  expect_matches_fd([](const T& x) { return slice_dim0(x, 1, 2); }, {4, 2}, rng);
  expect_matches_fd([](const T& x) { return pad_dim0(x, 5, 2); }, {2, 3}, rng);
  expect_matches_fd(
      [](const T& x) {
        std::vector<T> ps{slice_dim0(x, 2, 2), slice_dim0(x, 0, 2)};
        return concat_dim0(std::span<const T>(ps));
      },
      {4, 2}, rng);
}

TEST(Ops, Conv2dMatchesDirectLoop) {
  Rng rng(37);
  const int64_t B = 2, C = 2, H = 5, W = 4, O = 3, K = 3, pad = 1, stride = 1;
  auto xv = random_values(size_t(B * C * H * W), rng);
  auto wv = random_values(size_t(O * C * K * K), rng);
  auto bv = random_values(size_t(O), rng);
  T x = T::constant({B, C, H, W}, xv);
  T w = T::constant({O, C, K, K}, wv);
  T b = T::constant({O}, bv);
  T y = conv2d(x, w, b, stride, pad);
  ASSERT_EQ(y.shape(), (Shape{B, O, H, W}));

  auto at = [&](const std::vector<double>& v, int64_t b_, int64_t c, int64_t i,
                int64_t j, int64_t CC, int64_t HH, int64_t WW) {
    if (i < 0 || i >= HH || j < 0 || j >= WW) return 0.0;
    return v[size_t(((b_ * CC + c) * HH + i) * WW + j)];
  };
  for (int64_t b_ = 0; b_ < B; ++b_)
    for (int64_t o = 0; o < O; ++o)
      for (int64_t i = 0; i < H; ++i)
        for (int64_t j = 0; j < W; ++j) {
          double acc = bv[size_t(o)];
          for (int64_t c = 0; c < C; ++c)
            for (int64_t ki = 0; ki < K; ++ki)
              for (int64_t kj = 0; kj < K; ++kj)
                acc += at(xv, b_, c, i + ki - pad, j + kj - pad, C, H, W) *
                       wv[size_t(((o * C + c) * K + ki) * K + kj)];
          EXPECT_NEAR(y.values()[size_t(((b_ * O + o) * H + i) * W + j)], acc,
                      1e-12);
        }
}

TEST(Ops, Conv2dGradientsMatchFd) {
  Rng rng(41);
  auto wv = random_values(2 * 1 * 3 * 3, rng);
  auto xv = random_values(1 * 1 * 4 * 4, rng);
  T wc = T::constant({2, 1, 3, 3}, wv);
  T xc = T::constant({1, 1, 4, 4}, xv);
  T bz = T::constant({2}, {0.1, -0.2});
  expect_matches_fd(
      [&](const T& x) { return conv2d(x, wc, bz, 1, 1); }, {1, 1, 4, 4}, rng,
      1e-6);
  expect_matches_fd(
      [&](const T& w) { return conv2d(xc, w, bz, 1, 1); }, {2, 1, 3, 3}, rng,
      1e-6);
  expect_matches_fd(
      [&](const T& b) { return conv2d(xc, wc, b, 1, 1); }, {2}, rng, 1e-6);
}

TEST(Ops, MaxpoolForwardAndRouting) {
  T x = T::constant({1, 1, 2, 4}, {1, 5, 2, 2, 3, 0, 2, 9});
  T y = maxpool2(x);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1, 2}));
  EXPECT_EQ(y.values()[0], 5.0);
  EXPECT_EQ(y.values()[1], 9.0);

  Tape<double> tape;
  T xw = tape.watch(x);
  std::vector<T> wrt{xw};
  auto g = tape.backward(sum_all(maxpool2(xw)), wrt);
  std::vector<double> want{0, 1, 0, 0, 0, 0, 0, 1};
  for (size_t i = 0; i < 8; ++i) EXPECT_EQ(g[0].values()[i], want[i]);

  // Ties route to the first element in scan order.
  T t = T::constant({1, 1, 2, 2}, {7, 7, 7, 7});
  Tape<double> tape2;
  T tw = tape2.watch(t);
  std::vector<T> wrt2{tw};
  auto g2 = tape2.backward(sum_all(maxpool2(tw)), wrt2);
  EXPECT_EQ(g2[0].values()[0], 1.0);
  EXPECT_EQ(g2[0].values()[1], 0.0);

  EXPECT_THROW(maxpool2(T::zeros({1, 1, 3, 4})), ShapeError);
}

TEST(Ops, AvgpoolAndUpsample) {
  Rng rng(43);
  T x = T::constant({1, 1, 2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(avgpool2(x).values()[0], 2.5);
  T u = upsample2(x);
  ASSERT_EQ(u.shape(), (Shape{1, 1, 4, 4}));
  // Each source pixel becomes a 2x2 block: row 0 is {1,1,2,2}.
  EXPECT_EQ(u.values()[0], 1.0);
  EXPECT_EQ(u.values()[1], 1.0);
  EXPECT_EQ(u.values()[2], 2.0);
  EXPECT_EQ(u.values()[5], 1.0);
  EXPECT_EQ(u.values()[10], 4.0);
  expect_matches_fd([](const T& v) { return avgpool2(v); }, {1, 2, 4, 4}, rng);
  expect_matches_fd([](const T& v) { return upsample2(v); }, {1, 2, 2, 2}, rng);
}

TEST(Ops, SoftmaxRowsSumToOneAndMatchFd) {
  Rng rng(47);
  T x = T::constant({2, 3}, {1, 2, 3, -1, 0, 1});
  T s = softmax_rows(x);
  for (int r = 0; r < 2; ++r) {
    double sum = 0;
    for (int c = 0; c < 3; ++c) sum += s.values()[size_t(r * 3 + c)];
    EXPECT_NEAR(sum, 1.0, 1e-12);
  }
  // Shift invariance.
  T s2 = softmax_rows(add_scalar(x, 100.0));
  for (size_t i = 0; i < 6; ++i)
    EXPECT_NEAR(s2.values()[i], s.values()[i], 1e-12);

  expect_matches_fd([](const T& v) { return softmax_rows(v); }, {2, 4}, rng,
                    1e-6);
  expect_matches_fd([](const T& v) { return log_softmax_rows(v); }, {2, 4},
                    rng, 1e-6);
}

TEST(Ops, CrossEntropyMatchesManualValue) {
  T logits = T::constant({2, 3}, {2.0, 1.0, 0.0, 0.0, 3.0, 1.0});
  std::vector<int64_t> labels{0, 1};
  T loss = cross_entropy(logits, labels);
  auto logp = [&](int r, int c) {
    double mx = 0, z = 0;
    for (int j = 0; j < 3; ++j)
      mx = std::max(mx, logits.values()[size_t(r * 3 + j)]);
    for (int j = 0; j < 3; ++j)
      z += std::exp(logits.values()[size_t(r * 3 + j)] - mx);
    return logits.values()[size_t(r * 3 + c)] - mx - std::log(z);
  };
  double want = -(logp(0, 0) + logp(1, 1)) / 2.0;
  EXPECT_NEAR(loss.at(0), want, 1e-12);

  Rng rng(53);
  expect_matches_fd(
      [&](const T& v) { return cross_entropy(v, labels); }, {2, 3}, rng, 1e-6);
  EXPECT_THROW(cross_entropy(logits, {0, 5}), ValueError);
}

TEST(Ops, SelectScatterClassRoundtrip) {
  auto labels = std::make_shared<const std::vector<int64_t>>(
      std::vector<int64_t>{2, 0});
  T x = T::constant({2, 3}, {1, 2, 3, 4, 5, 6});
  T sel = select_class(x, labels);
  EXPECT_EQ(sel.values()[0], 3.0);
  EXPECT_EQ(sel.values()[1], 4.0);
  T sc = scatter_class(sel, labels, 3);
  EXPECT_EQ(sc.values()[2], 3.0);
  EXPECT_EQ(sc.values()[3], 4.0);
  EXPECT_EQ(sc.values()[0], 0.0);
}

TEST(Ops, NchwNhwcRoundtrip) {
  Rng rng(59);
  auto v = random_values(2 * 3 * 2 * 2, rng);
  T x = T::constant({2, 3, 2, 2}, v);
  T r = nhwc_to_nchw(nchw_to_nhwc(x));
  for (size_t i = 0; i < v.size(); ++i) EXPECT_EQ(r.values()[i], v[i]);
  expect_matches_fd([](const T& t) { return nchw_to_nhwc(t); }, {2, 2, 2, 3},
                    rng);
}

TEST(Ops, Im2colColReconstruction) {
  Rng rng(61);
  expect_matches_fd([](const T& t) { return im2col(t, 3, 3, 1, 1); },
                    {1, 2, 4, 4}, rng);
}

TEST(Ops, GridSampleMatchesManualBilinear) {
  T x = T::constant({1, 1, 2, 2}, {0.0, 1.0, 2.0, 3.0});
  // Sample the exact center: average of all four corners.
  T sx = T::constant({1, 1, 1}, {0.5});
  T sy = T::constant({1, 1, 1}, {0.5});
  T y = grid_sample_bilinear(x, sx, sy);
  EXPECT_NEAR(y.at(0), 1.5, 1e-12);

  // Integer coordinates reproduce the pixel.
  T y2 = grid_sample_bilinear(x, T::constant({1, 1, 1}, {1.0}),
                              T::constant({1, 1, 1}, {0.0}));
  EXPECT_NEAR(y2.at(0), 1.0, 1e-12);

  // Outside the image everything reads zero.
  T y3 = grid_sample_bilinear(x, T::constant({1, 1, 1}, {-3.0}),
                              T::constant({1, 1, 1}, {0.0}));
  EXPECT_NEAR(y3.at(0), 0.0, 1e-12);
}

TEST(Ops, GridSampleGradientsMatchFd) {
  Rng rng(67);
  const Shape img{1, 1, 4, 4};
  auto xv = random_values(16, rng, 0.0, 1.0);
  T xc = T::constant(img, xv);
  // Coordinates strictly inside pixel cells so FD stays on one linear piece.
  auto cv = std::vector<double>{0.3, 1.4, 2.2, 0.7, 1.9, 2.6};
  auto cy = std::vector<double>{0.6, 2.3, 1.1, 2.7, 0.4, 1.5};
  T sxc = T::constant({1, 2, 3}, cv);
  T syc = T::constant({1, 2, 3}, cy);

  expect_matches_fd(
      [&](const T& t) { return grid_sample_bilinear(t, sxc, syc); }, img, rng,
      1e-6, 0.0, 1.0);
  // Gradient in the sampling coordinates.
  expect_matches_fd(
      [&](const T& t) {
        return grid_sample_bilinear(
            xc, add(sxc, mul_scalar(t, 1e-2)),
            add(syc, mul_scalar(t, -1e-2)));
      },
      {1, 2, 3}, rng, 1e-5);
}
