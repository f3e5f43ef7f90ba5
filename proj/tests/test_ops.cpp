#include <gtest/gtest.h>

#include <cmath>

#include "conmat/ops.hpp"

using namespace conmat;
using D = double;

namespace {

Tensor<D> randn(Shape s, Rng& r, double scale = 1.0) {
  Tensor<D> t(std::move(s));
  for (auto& v : t.data()) v = scale * r.normal();
  return t;
}

Tensor<D> T1(std::vector<D> v) {
  const auto n = v.size();
  return Tensor<D>({n}, std::move(v));
}

// Random projection to a scalar so every output element gets a distinct adjoint.
Var<D> project(Tape<D>& tape, const Var<D>& y, std::uint64_t seed = 99) {
  Rng r(seed);
  return sum(mul(y, tape.constant(randn(y.shape(), r))));
}

}  // namespace

TEST(Matmul, Identity) {
  Tape<D> t;
  auto a = t.constant(Tensor<D>({2, 2}, {1, 2, 3, 4}));
  auto i = t.constant(Tensor<D>({2, 2}, {1, 0, 0, 1}));
  EXPECT_EQ(matmul(a, i).value(), a.value());
}

TEST(Matmul, HandCase) {
  Tape<D> t;
  auto y = matmul(t.constant(Tensor<D>({2, 2}, {1, 2, 3, 4})), t.constant(Tensor<D>({2, 1}, {1, 1})));
  EXPECT_EQ(y.value(), Tensor<D>({2, 1}, {3, 7}));
  EXPECT_THROW(matmul(t.constant(Tensor<D>({2, 3})), t.constant(Tensor<D>({2, 3}))), ShapeError);
}

TEST(Matmul, GradientOfSumIsOnesTimesBt) {
  Rng r(1);
  auto a = randn({3, 4}, r), b = randn({4, 2}, r);
  Tape<D> t;
  auto av = t.leaf(a);
  t.backward(sum(matmul(av, t.constant(b))));
  auto g = t.grad(av);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(g.at(i, k), b.at(k, 0) + b.at(k, 1), 1e-12);
  double err = grad_check([&](Tape<D>& tp, Var<D> x) { return sum(matmul(x, tp.constant(b))); }, a);
  EXPECT_LT(err, 1e-6);
}

TEST(Conv2d, IdentityKernel) {
  Rng r(2);
  auto x = randn({1, 4, 5}, r);
  Tape<D> t;
  auto y = conv2d(t.constant(x), t.constant(Tensor<D>({1, 1, 1, 1}, 1.0)), std::nullopt, ConvSpec{});
  EXPECT_EQ(y.value(), x);
}

TEST(Conv2d, HandCase) {
  Tape<D> t;
  auto y = conv2d(t.constant(Tensor<D>({1, 2, 2}, {1, 2, 3, 4})), t.constant(Tensor<D>({1, 1, 2, 2}, 1.0)),
                  std::nullopt, ConvSpec{});
  EXPECT_EQ(y.shape(), (Shape{1, 1, 1}));
  EXPECT_EQ(y.value()[0], 10.0);
}

TEST(Conv2d, DepthwiseChannelsIndependent) {
  Rng r(3);
  auto x = randn({2, 5, 5}, r);
  auto w = randn({2, 1, 3, 3}, r);
  Tape<D> t;
  auto y0 = conv2d(t.constant(x), t.constant(w), std::nullopt, ConvSpec{1, 1, 2});
  for (std::size_t i = 25; i < 50; ++i) x[i] = 0;
  auto y1 = conv2d(t.constant(x), t.constant(w), std::nullopt, ConvSpec{1, 1, 2});
  for (std::size_t i = 0; i < 25; ++i) EXPECT_EQ(y0.value()[i], y1.value()[i]);
  for (std::size_t i = 25; i < 50; ++i) EXPECT_EQ(y1.value()[i], 0.0);
}

TEST(Conv2d, OutputSizeAndErrors) {
  Tape<D> t;
  auto x = t.constant(Tensor<D>({4, 9, 7}));
  auto y = conv2d(x, t.constant(Tensor<D>({6, 2, 3, 3})), std::nullopt, ConvSpec{2, 1, 2});
  EXPECT_EQ(y.shape(), (Shape{6, 5, 4}));
  EXPECT_THROW(conv2d(x, t.constant(Tensor<D>({6, 3, 3, 3})), std::nullopt, ConvSpec{1, 0, 3}), ShapeError);
  EXPECT_THROW(conv2d(x, t.constant(Tensor<D>({1, 4, 11, 3})), std::nullopt, ConvSpec{}), ShapeError);
}

TEST(Conv2d, GradCheckRandomConfigs) {
  Rng r(4);
  const ConvSpec specs[] = {{1, 0, 1}, {1, 1, 1}, {2, 1, 1}, {1, 3, 2}, {2, 0, 2}, {1, 1, 4}};
  const std::size_t ks[] = {3, 3, 2, 7, 2, 3};
  for (int i = 0; i < 6; ++i) {
    const auto& s = specs[i];
    const std::size_t cin = 4, cout = 4, k = ks[i];
    auto x = randn({cin, 6, 5}, r);
    auto w = randn({cout, cin / s.groups, k, k}, r);
    auto b = randn({cout}, r);
    auto fx = [&](Tape<D>& t, Var<D> v) {
      return project(t, conv2d(v, t.constant(w), std::optional{t.constant(b)}, s));
    };
    auto fw = [&](Tape<D>& t, Var<D> v) {
      return project(t, conv2d(t.constant(x), v, std::optional{t.constant(b)}, s));
    };
    auto fb = [&](Tape<D>& t, Var<D> v) { return project(t, conv2d(t.constant(x), t.constant(w), std::optional{v}, s)); };
    EXPECT_LT(grad_check(fx, x), 1e-6) << i;
    EXPECT_LT(grad_check(fw, w), 1e-6) << i;
    EXPECT_LT(grad_check(fb, b), 1e-6) << i;
  }
}

TEST(Linear, IdentityAndHandCase) {
  Tape<D> t;
  auto x = t.constant(Tensor<D>({2, 2}, {1, 2, 3, 4}));
  auto eye = t.constant(Tensor<D>({2, 2}, {1, 0, 0, 1}));
  EXPECT_EQ(linear(x, eye, std::optional{t.constant(Tensor<D>({2}))}).value(), x.value());
  auto y = linear(t.constant(Tensor<D>({1, 2}, {1, 1})), t.constant(Tensor<D>({2, 1}, {2, 3})),
                  std::optional{t.constant(T1({-5}))});
  EXPECT_EQ(y.value()[0], 0.0);
  EXPECT_THROW(linear(x, t.constant(Tensor<D>({3, 1}))), ShapeError);
}

TEST(Linear, GradCheck) {
  Rng r(5);
  auto x = randn({3, 2, 4}, r), w = randn({4, 5}, r), b = randn({5}, r);
  EXPECT_LT(grad_check([&](Tape<D>& t, Var<D> v) {
              return project(t, linear(v, t.constant(w), std::optional{t.constant(b)}));
            }, x), 1e-6);
  EXPECT_LT(grad_check([&](Tape<D>& t, Var<D> v) {
              return project(t, linear(t.constant(x), v, std::optional{t.constant(b)}));
            }, w), 1e-6);
  EXPECT_LT(grad_check([&](Tape<D>& t, Var<D> v) {
              return project(t, linear(t.constant(x), t.constant(w), std::optional{v}));
            }, b), 1e-6);
}

TEST(LayerNorm, HandCases) {
  Tape<D> t;
  auto ones = t.constant(Tensor<D>({2}, 1.0)), zeros = t.constant(Tensor<D>({2}));
  auto y = layer_norm(t.constant(T1({1, 3})), 0, ones, zeros, 1e-12);
  EXPECT_NEAR(y.value()[0], -1.0, 1e-9);
  EXPECT_NEAR(y.value()[1], 1.0, 1e-9);
  auto c = layer_norm(t.constant(T1({5, 5})), 0, ones, zeros);
  EXPECT_EQ(c.value()[0], 0.0);
  EXPECT_EQ(c.value()[1], 0.0);
  EXPECT_THROW(layer_norm(t.constant(T1({1, 3})), 0, ones, zeros, 0.0), ValueError);
}

TEST(LayerNorm, MomentsAndAffineInvariance) {
  Rng r(6);
  auto x = randn({8, 3, 3}, r, 3.0);
  Tape<D> t;
  auto g = t.constant(Tensor<D>({8}, 1.0)), b = t.constant(Tensor<D>({8}));
  auto y = layer_norm(t.constant(x), 0, g, b).value();
  for (std::size_t p = 0; p < 9; ++p) {
    double m = 0, v = 0;
    for (std::size_t c = 0; c < 8; ++c) m += y[c * 9 + p];
    m /= 8;
    for (std::size_t c = 0; c < 8; ++c) v += (y[c * 9 + p] - m) * (y[c * 9 + p] - m);
    EXPECT_NEAR(m, 0.0, 1e-5);
    EXPECT_NEAR(v / 8, 1.0, 1e-5);
  }
  Tensor<D> x2 = x;
  for (auto& v : x2.data()) v = 2.5 * v + 7.0;
  auto y2 = layer_norm(t.constant(x2), 0, g, b).value();
  EXPECT_LT(max_abs_diff(y, y2), 1e-5);
}

TEST(LayerNorm, GradCheckBothAxes) {
  Rng r(7);
  for (std::size_t axis : {0u, 1u}) {
    auto x = randn({4, 5}, r);
    const auto d = x.dim(axis);
    auto g = randn({d}, r), b = randn({d}, r);
    EXPECT_LT(grad_check([&](Tape<D>& t, Var<D> v) {
                return project(t, layer_norm(v, axis, t.constant(g), t.constant(b)));
              }, x), 1e-6);
    EXPECT_LT(grad_check([&](Tape<D>& t, Var<D> v) {
                return project(t, layer_norm(t.constant(x), axis, v, t.constant(b)));
              }, g), 1e-6);
  }
}

TEST(Softmax, HandCasesAndShift) {
  Tape<D> t;
  auto a = softmax(t.constant(T1({0, 0})), 0).value();
  EXPECT_EQ(a[0], 0.5);
  auto b = softmax(t.constant(T1({std::log(2.0), 0})), 0).value();
  EXPECT_NEAR(b[0], 2.0 / 3.0, 1e-12);
  EXPECT_NEAR(b[1], 1.0 / 3.0, 1e-12);
  Rng r(8);
  auto x = randn({3, 6}, r);
  Tensor<D> xs = x;
  for (auto& v : xs.data()) v += 123.0;
  auto y = softmax(t.constant(x), 1).value();
  EXPECT_LT(max_abs_diff(y, softmax(t.constant(xs), 1).value()), 1e-7);
  for (std::size_t i = 0; i < 3; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < 6; ++j) {
      EXPECT_GT(y.at(i, j), 0.0);
      s += y.at(i, j);
    }
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(Softmax, GradCheck) {
  Rng r(9);
  for (std::size_t axis : {0u, 1u, 2u}) {
    auto x = randn({3, 2, 4}, r);
    EXPECT_LT(grad_check([&](Tape<D>& t, Var<D> v) { return project(t, softmax(v, axis)); }, x), 1e-6);
  }
}

TEST(Activations, Values) {
  Tape<D> t;
  auto x = t.constant(T1({0, 3, -5, 5}));
  auto g = gelu(x).value(), s = sigmoid(x).value(), re = relu(x).value();
  EXPECT_EQ(g[0], 0.0);
  EXPECT_EQ(s[0], 0.5);
  EXPECT_EQ(re[0], 0.0);
  EXPECT_NEAR(g[1], 3.0 * 0.5 * (1.0 + std::erf(3.0 / std::sqrt(2.0))), 1e-12);
  EXPECT_NEAR(g[1], 2.9960, 5e-5);
  EXPECT_EQ(re[2], 0.0);
  EXPECT_EQ(re[3], 5.0);
}

TEST(Activations, GradCheck) {
  Rng r(10);
  auto x = randn({12}, r, 2.0);
  // keep relu away from its kink
  for (auto& v : x.data())
    if (std::abs(v) < 0.05) v = 0.3;
  EXPECT_LT(grad_check([&](Tape<D>& t, Var<D> v) { return project(t, gelu(v)); }, x), 1e-6);
  EXPECT_LT(grad_check([&](Tape<D>& t, Var<D> v) { return project(t, sigmoid(v)); }, x), 1e-6);
  EXPECT_LT(grad_check([&](Tape<D>& t, Var<D> v) { return project(t, relu(v)); }, x), 1e-6);
}

TEST(Pool, HandCases) {
  Tape<D> t;
  auto c = global_pool(t.constant(Tensor<D>({2, 3, 3}, 4.0)), PoolKind::avg).value();
  EXPECT_EQ(c.shape(), (Shape{2}));
  EXPECT_EQ(c[1], 4.0);
  EXPECT_EQ(global_pool(t.constant(Tensor<D>({1, 2, 2}, {1, 2, 3, 4})), PoolKind::max).value()[0], 4.0);
  auto ch = channel_pool(t.constant(Tensor<D>({2, 1, 1}, {2, 4})), PoolKind::avg).value();
  EXPECT_EQ(ch.shape(), (Shape{1, 1, 1}));
  EXPECT_EQ(ch[0], 3.0);
  EXPECT_THROW(pool2d(t.constant(Tensor<D>({1, 2, 2})), PoolKind::avg, 3, 1), ShapeError);
}

TEST(Pool, MeanSubtractionIsZeroMean) {
  Rng r(11);
  auto x = randn({3, 4, 4}, r);
  Tape<D> t;
  auto m = global_pool(t.constant(x), PoolKind::avg).value();
  for (std::size_t c = 0; c < 3; ++c) {
    double s = 0;
    for (std::size_t i = 0; i < 16; ++i) s += x[c * 16 + i] - m[c];
    EXPECT_NEAR(s / 16, 0.0, 1e-6);
  }
}

TEST(Pool, GradCheck) {
  Rng r(12);
  auto x = randn({3, 4, 4}, r);
  for (auto kind : {PoolKind::avg, PoolKind::max}) {
    EXPECT_LT(grad_check([&](Tape<D>& t, Var<D> v) { return project(t, global_pool(v, kind)); }, x), 1e-6);
    EXPECT_LT(grad_check([&](Tape<D>& t, Var<D> v) { return project(t, channel_pool(v, kind)); }, x), 1e-6);
    EXPECT_LT(grad_check([&](Tape<D>& t, Var<D> v) { return project(t, pool2d(v, kind, 2, 2)); }, x), 1e-6);
  }
}

TEST(Dropout, IdentityCasesAndMean) {
  Rng r(13);
  Tape<D> t;
  auto x = t.constant(Tensor<D>({100000}, 1.0));
  EXPECT_EQ(dropout(x, 0.0, true, r).id, x.id);
  EXPECT_EQ(dropout(x, 0.7, false, r).id, x.id);
  auto y = dropout(x, 0.5, true, r).value();
  double m = 0;
  for (auto v : y.data()) m += v;
  EXPECT_NEAR(m / 100000, 1.0, 0.02);
  EXPECT_THROW(dropout(x, 1.0, true, r), ValueError);
}

TEST(Grn, GradCheck) {
  Rng r(14);
  auto x = randn({5, 6}, r), g = randn({6}, r), b = randn({6}, r);
  EXPECT_LT(grad_check([&](Tape<D>& t, Var<D> v) {
              return project(t, grn(v, t.constant(g), t.constant(b)));
            }, x), 1e-6);
  EXPECT_LT(grad_check([&](Tape<D>& t, Var<D> v) {
              return project(t, grn(t.constant(x), v, t.constant(b)));
            }, g), 1e-6);
}

TEST(ShapeOps, GradCheck) {
  Rng r(15);
  auto x = randn({3, 4}, r), y = randn({3, 4}, r);
  EXPECT_LT(grad_check([&](Tape<D>& t, Var<D> v) { return project(t, transpose(v)); }, x), 1e-8);
  EXPECT_LT(grad_check([&](Tape<D>& t, Var<D> v) { return project(t, slice_cols(v, 1, 2)); }, x), 1e-8);
  EXPECT_LT(grad_check([&](Tape<D>& t, Var<D> v) {
              return project(t, concat_cols(std::vector{v, t.constant(y), v}));
            }, x), 1e-8);
  EXPECT_LT(grad_check([&](Tape<D>& t, Var<D> v) {
              return project(t, stack(std::vector{t.constant(y), v}));
            }, x), 1e-8);
  EXPECT_LT(grad_check([&](Tape<D>& t, Var<D> v) { return project(t, sub(mul(v, v), scale(v, 3.0))); }, x), 1e-6);
}

TEST(ShapeOps, GatesGradCheck) {
  Rng r(16);
  auto x = randn({3, 2, 2}, r), g = randn({3}, r), m = randn({1, 2, 2}, r), s = randn({1}, r);
  EXPECT_LT(grad_check([&](Tape<D>& t, Var<D> v) { return project(t, mul_channels(v, t.constant(g))); }, x), 1e-6);
  EXPECT_LT(grad_check([&](Tape<D>& t, Var<D> v) { return project(t, mul_channels(t.constant(x), v)); }, g), 1e-6);
  EXPECT_LT(grad_check([&](Tape<D>& t, Var<D> v) { return project(t, mul_spatial(t.constant(x), v)); }, m), 1e-6);
  EXPECT_LT(grad_check([&](Tape<D>& t, Var<D> v) { return project(t, mul_spatial(v, t.constant(m))); }, x), 1e-6);
  EXPECT_LT(grad_check([&](Tape<D>& t, Var<D> v) { return project(t, scale_by(t.constant(x), v)); }, s), 1e-6);
}

TEST(CrossEntropy, ValuesAndGradient) {
  Tape<D> t;
  auto u = cross_entropy(t.constant(Tensor<D>({2, 4})), {0, 3});
  EXPECT_NEAR(u.value()[0], std::log(4.0), 1e-12);
  auto s = cross_entropy(t.constant(Tensor<D>({1, 2}, {20, -1})), {0});
  EXPECT_LT(s.value()[0], 1e-8);
  EXPECT_THROW(cross_entropy(t.constant(Tensor<D>({1, 2})), {2}), ValueError);

  Rng r(17);
  auto z = randn({3, 4}, r);
  std::vector<std::size_t> labels{1, 0, 3};
  Tape<D> t2;
  auto zv = t2.leaf(z);
  t2.backward(cross_entropy(zv, labels));
  auto g = t2.grad(zv);
  for (std::size_t i = 0; i < 3; ++i) {
    auto p = softmax_values<D>(std::span<const D>(z.ptr() + i * 4, 4));
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(g.at(i, j), (p[j] - (j == labels[i])) / 3.0, 1e-12);
  }
  EXPECT_LT(grad_check([&](Tape<D>&, Var<D> v) { return cross_entropy(v, labels); }, z), 1e-6);
}

// Property sweep: every differentiable op over random shapes and seeds.
TEST(GradCheckSweep, RandomShapes) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng r(1000 + seed);
    const std::size_t c = 1 + r.index(3), h = 2 + r.index(4), w = 2 + r.index(4);
    auto x = randn({c, h, w}, r);
    auto k = randn({c, 1, 3, 3}, r);
    auto lg = randn({c}, r), lb = randn({c}, r);
    auto f = [&](Tape<D>& t, Var<D> v) {
      auto y = conv2d(v, t.constant(k), std::nullopt, ConvSpec{1, 1, c});
      y = layer_norm(y, 0, t.constant(lg), t.constant(lb));
      y = gelu(y);
      y = softmax(y, 2);
      return project(t, y, seed);
    };
    EXPECT_LT(grad_check(f, x), 1e-4) << "seed " << seed;
  }
}

TEST(Determinism, SameInputsSameBits) {
  auto run = [] {
    Rng r(21);
    auto x = randn({4, 6, 6}, r);
    auto w = randn({8, 4, 3, 3}, r);
    Tape<float> t;
    auto y = conv2d(t.constant(x.cast<float>()), t.constant(w.cast<float>()), std::nullopt, ConvSpec{1, 1, 1});
    return softmax(gelu(y), 0).value();
  };
  EXPECT_EQ(run(), run());
}
