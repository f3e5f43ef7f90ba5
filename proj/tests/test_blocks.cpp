#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "conmat/blocks.hpp"

using namespace conmat;
using D = double;

namespace {

Tensor<D> randn(Shape s, Rng& r, double scale = 1.0) {
  Tensor<D> t(std::move(s));
  for (auto& v : t.data()) v = scale * r.normal();
  return t;
}

Var<D> project(Tape<D>& tape, const Var<D>& y, std::uint64_t seed = 77) {
  Rng r(seed);
  return sum(mul(y, tape.constant(randn(y.shape(), r))));
}

// Randomizes every parameter so zero-initialized gains do not hide gradients.
void scramble(const ParamList<D>& ps, Rng& r, double scale = 0.5) {
  for (auto& p : ps)
    for (auto& v : p.param->value.data()) v = scale * r.normal();
}

// Largest relative error over a sample of entries of every parameter plus the input.
template <typename F>
double block_grad_error(F&& fwd, ParamList<D> ps, const Tensor<D>& x) {
  double worst = grad_check([&](Tape<D>& t, Var<D> v) { return project(t, fwd(t, v)); }, x);
  for (auto& p : ps) {
    std::vector<std::size_t> idx;
    const auto n = p.param->numel();
    for (std::size_t i = 0; i < n; i += std::max<std::size_t>(1, n / 7)) idx.push_back(i);
    auto loss = [&](Tape<D>& t) { return project(t, fwd(t, t.constant(x))); };
    worst = std::max(worst, grad_check_param(loss, *p.param, 1e-5, idx));
  }
  return worst;
}

void set_identity_1x1(Parameter<D>& w) {
  w.value.fill(0.0);
  const auto c = w.value.dim(0);
  for (std::size_t i = 0; i < c; ++i) w.value[i * c + i] = 1.0;
}

}  // namespace

// ---------------------------------------------------------------------------
// CBAM

TEST(Cbam, ZeroWeightsGiveQuarterGain) {
  Rng r(1);
  Cbam<D> cb(8, 4, r);
  ParamList<D> ps;
  cb.collect(ps, "cbam");
  for (auto& p : ps) p.param->value.fill(0.0);
  auto f = randn({8, 5, 5}, r);
  Tape<D> t;
  Context<D> ctx{t};
  auto mc = cb.channel_attention(ctx, t.constant(f)).value();
  EXPECT_EQ(mc.shape(), (Shape{8, 1, 1}));
  for (auto v : mc.data()) EXPECT_EQ(v, 0.5);
  auto ms = cb.spatial_attention(ctx, t.constant(f)).value();
  EXPECT_EQ(ms.shape(), (Shape{1, 5, 5}));
  for (auto v : ms.data()) EXPECT_EQ(v, 0.5);
  auto y = cb.forward(ctx, t.constant(f)).value();
  for (std::size_t i = 0; i < f.numel(); ++i) EXPECT_DOUBLE_EQ(y[i], 0.25 * f[i]);
}

TEST(Cbam, ConstantChannelsPoolAlike) {
  Rng r(2);
  Cbam<D> cb(4, 2, r);
  Tensor<D> f({4, 3, 3});
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t i = 0; i < 9; ++i) f[c * 9 + i] = 0.3 * static_cast<double>(c) - 0.4;
  Tape<D> t;
  Context<D> ctx{t};
  auto mc = cb.channel_attention(ctx, t.constant(f)).value();
  Tensor<D> desc({4});
  for (std::size_t c = 0; c < 4; ++c) desc[c] = f[c * 9];
  auto m = cb.mlp(ctx, t.constant(desc)).value();
  for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(mc[c], 1.0 / (1.0 + std::exp(-2.0 * m[c])), 1e-12);
}

TEST(Cbam, GatesInsideUnitIntervalAndDamp) {
  Rng r(3);
  Cbam<D> cb(96, 16, r);
  auto f = randn({96, 4, 4}, r);
  Tape<D> t;
  Context<D> ctx{t};
  auto mc = cb.channel_attention(ctx, t.constant(f)).value();
  EXPECT_EQ(mc.shape(), (Shape{96, 1, 1}));
  for (auto v : mc.data()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
  auto y = cb.forward(ctx, t.constant(f)).value();
  for (std::size_t i = 0; i < f.numel(); ++i) EXPECT_LE(std::abs(y[i]), std::abs(f[i]));
  EXPECT_THROW(Cbam<D>(10, 4, r), ShapeError);
}

TEST(Cbam, ShapePreservedAtStageTwoSize) {
  Rng r(4);
  Cbam<float> cb(192, 8, r);
  Tape<float> t(false);
  Context<float> ctx{t};
  auto y = cb.forward(ctx, t.constant(Tensor<float>({192, 28, 28}, 0.1f)));
  EXPECT_EQ(y.shape(), (Shape{192, 28, 28}));
  auto ms = cb.spatial_attention(ctx, t.constant(Tensor<float>({96, 56, 56}, 0.1f)));
  EXPECT_EQ(ms.shape(), (Shape{1, 56, 56}));
}

TEST(Cbam, GradCheck) {
  Rng r(5);
  Cbam<D> cb(8, 2, r);
  ParamList<D> ps;
  cb.collect(ps, "cbam");
  scramble(ps, r);
  auto x = randn({8, 4, 4}, r);
  auto fwd = [&](Tape<D>& t, Var<D> v) {
    Context<D> ctx{t};
    return cb.forward(ctx, v);
  };
  EXPECT_LT(block_grad_error(fwd, ps, x), 1e-4);
  auto sp = [&](Tape<D>& t, Var<D> v) {
    Context<D> ctx{t};
    return cb.spatial_attention(ctx, v);
  };
  EXPECT_LT(grad_check([&](Tape<D>& t, Var<D> v) { return project(t, sp(t, v)); }, x), 1e-4);
}

// ---------------------------------------------------------------------------
// DANet

namespace {

// E_j = alpha * sum_i softmax_i(B_i . C_j) D_i + A_j with B = C = D = A.
Tensor<D> pam_brute(const Tensor<D>& a, double alpha) {
  const auto c = a.dim(0), n = a.dim(1) * a.dim(2);
  Tensor<D> out = a;
  for (std::size_t j = 0; j < n; ++j) {
    std::vector<double> e(n);
    double mx = -1e300, s = 0;
    for (std::size_t i = 0; i < n; ++i) {
      double dot = 0;
      for (std::size_t k = 0; k < c; ++k) dot += a[k * n + i] * a[k * n + j];
      e[i] = dot;
      mx = std::max(mx, dot);
    }
    for (auto& v : e) s += (v = std::exp(v - mx));
    for (std::size_t k = 0; k < c; ++k) {
      double acc = 0;
      for (std::size_t i = 0; i < n; ++i) acc += e[i] / s * a[k * n + i];
      out[k * n + j] += alpha * acc;
    }
  }
  return out;
}

Tensor<D> cam_brute(const Tensor<D>& a, double beta) {
  const auto c = a.dim(0), n = a.dim(1) * a.dim(2);
  Tensor<D> out = a;
  for (std::size_t j = 0; j < c; ++j) {
    std::vector<double> e(c);
    double mx = -1e300, s = 0;
    for (std::size_t i = 0; i < c; ++i) {
      double dot = 0;
      for (std::size_t p = 0; p < n; ++p) dot += a[i * n + p] * a[j * n + p];
      e[i] = dot;
      mx = std::max(mx, dot);
    }
    for (auto& v : e) s += (v = std::exp(v - mx));
    for (std::size_t p = 0; p < n; ++p) {
      double acc = 0;
      for (std::size_t i = 0; i < c; ++i) acc += e[i] / s * a[i * n + p];
      out[j * n + p] += beta * acc;
    }
  }
  return out;
}

}  // namespace

TEST(Danet, PamMatchesBruteForce) {
  Rng r(6);
  Danet<D> dn(2, r);
  set_identity_1x1(dn.conv_b);
  set_identity_1x1(dn.conv_c);
  set_identity_1x1(dn.conv_d);
  dn.alpha.value[0] = 0.7;
  auto a = randn({2, 2, 2}, r);
  Tape<D> t;
  Context<D> ctx{t};
  auto e = dn.pam(ctx, t.constant(a)).value();
  EXPECT_LT(max_abs_diff(e, pam_brute(a, 0.7)), 1e-6);
  auto s = dn.position_attention_map(ctx, t.constant(a)).value();
  for (std::size_t j = 0; j < 4; ++j) {
    double rs = 0;
    for (std::size_t i = 0; i < 4; ++i) rs += s.at(j, i);
    EXPECT_NEAR(rs, 1.0, 1e-6);
  }
}

TEST(Danet, CamMatchesBruteForce) {
  Rng r(7);
  Danet<D> dn(3, r);
  dn.beta.value[0] = -1.3;
  auto a = randn({3, 2, 2}, r);
  Tape<D> t;
  Context<D> ctx{t};
  EXPECT_LT(max_abs_diff(dn.cam(ctx, t.constant(a)).value(), cam_brute(a, -1.3)), 1e-6);
  auto x = dn.channel_attention_map(t.constant(a)).value();
  for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(x.at(j, 0) + x.at(j, 1) + x.at(j, 2), 1.0, 1e-6);
}

TEST(Danet, SinglePositionAndSingleChannel) {
  Rng r(8);
  Danet<D> dn(3, r);
  dn.alpha.value[0] = 0.5;
  auto a = randn({3, 1, 1}, r);
  Tape<D> t;
  Context<D> ctx{t};
  auto e = dn.pam(ctx, t.constant(a)).value();
  auto d = dn.pointwise(ctx, t.constant(a), dn.conv_d, dn.bias_d).value();
  for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(e[k], 0.5 * d[k] + a[k], 1e-12);

  Danet<D> one(1, r);
  one.beta.value[0] = 0.25;
  auto a1 = randn({1, 2, 3}, r);
  auto e1 = one.cam(ctx, t.constant(a1)).value();
  for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(e1[i], 1.25 * a1[i], 1e-12);
}

TEST(Danet, ZeroGainsAreExactIdentities) {
  Rng r(9);
  Danet<D> dn(4, r);
  auto a = randn({4, 3, 3}, r, 5.0);
  Tape<D> t;
  Context<D> ctx{t};
  EXPECT_EQ(dn.pam(ctx, t.constant(a)).value(), a);
  EXPECT_EQ(dn.cam(ctx, t.constant(a)).value(), a);
  auto sum_fused = dn.forward(ctx, t.constant(a)).value();
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(sum_fused[i], 2.0 * a[i]);
}

TEST(Danet, ShapeAtStageFour) {
  Rng r(10);
  Danet<float> dn(768, r);
  Tape<float> t(false);
  Context<float> ctx{t};
  EXPECT_EQ(dn.forward(ctx, t.constant(Tensor<float>({768, 7, 7}, 0.01f))).shape(), (Shape{768, 7, 7}));
}

TEST(Danet, GradCheck) {
  Rng r(11);
  Danet<D> dn(2, r);
  ParamList<D> ps;
  dn.collect(ps, "danet");
  scramble(ps, r);
  auto x = randn({2, 3, 3}, r);
  auto fwd = [&](Tape<D>& t, Var<D> v) {
    Context<D> ctx{t};
    return dn.forward(ctx, v);
  };
  EXPECT_LT(block_grad_error(fwd, ps, x), 1e-4);
  auto pam = [&](Tape<D>& t, Var<D> v) {
    Context<D> ctx{t};
    return dn.pam(ctx, v);
  };
  auto cam = [&](Tape<D>& t, Var<D> v) {
    Context<D> ctx{t};
    return dn.cam(ctx, v);
  };
  EXPECT_LT(block_grad_error(pam, ps, x), 1e-4);
  EXPECT_LT(block_grad_error(cam, ps, x), 1e-4);
}

// ---------------------------------------------------------------------------
// ConvNeXt block

TEST(ConvNext, DeadBranchIsIdentity) {
  Rng r(12);
  for (bool grn_on : {false, true}) {
    ConvNextBlock<D> b(4, grn_on, r);
    b.layer_scale.value.fill(0.8);
    b.w1.value.fill(0.0);
    b.w2.value.fill(0.0);
    b.b1.value.fill(0.0);
    b.b2.value.fill(0.0);
    auto x = randn({4, 5, 5}, r);
    Tape<D> t;
    Context<D> ctx{t};
    EXPECT_EQ(b.forward(ctx, t.constant(x)).value(), x);
  }
}

TEST(ConvNext, ZeroLayerScaleIsIdentity) {
  Rng r(13);
  ConvNextBlock<D> b(4, false, r);
  b.layer_scale.value.fill(0.0);
  auto x = randn({4, 5, 5}, r);
  Tape<D> t;
  Context<D> ctx{t};
  EXPECT_EQ(b.forward(ctx, t.constant(x)).value(), x);
}

TEST(ConvNext, LayerScaleStartsAtOneMicro) {
  Rng r(14);
  ConvNextBlock<D> b(6, false, r);
  for (auto v : b.layer_scale.value.data()) EXPECT_EQ(v, 1e-6);
}

TEST(ConvNext, GradCheckWithAndWithoutGrn) {
  for (bool grn_on : {false, true}) {
    Rng r(15);
    ConvNextBlock<D> b(4, grn_on, r);
    ParamList<D> ps;
    b.collect(ps, "blk");
    scramble(ps, r, 0.4);
    auto x = randn({4, 5, 5}, r);
    auto fwd = [&](Tape<D>& t, Var<D> v) {
      Context<D> ctx{t};
      return b.forward(ctx, v);
    };
    EXPECT_LT(block_grad_error(fwd, ps, x), 1e-4) << "grn=" << grn_on;
  }
}

TEST(ConvNext, ChannelPermutationEquivariance) {
  Rng r(16);
  const std::size_t c = 3;
  ConvNextBlock<D> b(c, false, r);
  ParamList<D> ps;
  b.collect(ps, "blk");
  scramble(ps, r, 0.4);
  const std::size_t perm[c] = {2, 0, 1};
  ConvNextBlock<D> pb = b;
  for (std::size_t k = 0; k < c; ++k) {
    const auto src = perm[k];
    for (std::size_t i = 0; i < 49; ++i) pb.dw_kernel.value[k * 49 + i] = b.dw_kernel.value[src * 49 + i];
    pb.dw_bias.value[k] = b.dw_bias.value[src];
    pb.norm.gamma.value[k] = b.norm.gamma.value[src];
    pb.norm.beta.value[k] = b.norm.beta.value[src];
    for (std::size_t j = 0; j < 4 * c; ++j) {
      pb.w1.value.at(k, j) = b.w1.value.at(src, j);
      pb.w2.value.at(j, k) = b.w2.value.at(j, src);
    }
    pb.b2.value[k] = b.b2.value[src];
    pb.layer_scale.value[k] = b.layer_scale.value[src];
  }
  auto x = randn({c, 4, 4}, r);
  Tensor<D> px({c, 4, 4});
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t i = 0; i < 16; ++i) px[k * 16 + i] = x[perm[k] * 16 + i];
  Tape<D> t;
  Context<D> ctx{t};
  auto y = b.forward(ctx, t.constant(x)).value();
  auto py = pb.forward(ctx, t.constant(px)).value();
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t i = 0; i < 16; ++i) EXPECT_NEAR(py[k * 16 + i], y[perm[k] * 16 + i], 1e-12);
}

// ---------------------------------------------------------------------------
// Transformer block

TEST(Transformer, ParameterCountsAt768) {
  Rng r(17);
  TransformerBlock<float> tb(768, 8, 49, 0.1, false, r);
  EXPECT_EQ(tb.attention_params(), 2362368u);
  EXPECT_EQ(tb.mlp_params(), 4722432u);
  EXPECT_THROW(TransformerBlock<float>(768, 7, 49, 0.1, false, r), ShapeError);
}

TEST(Transformer, ZeroProjectionsAreIdentity) {
  Rng r(18);
  TransformerBlock<D> tb(8, 2, 9, 0.1, false, r);
  for (auto* p : {&tb.w_out, &tb.b_out, &tb.w_fc2, &tb.b_fc2}) p->value.fill(0.0);
  auto x = randn({8, 3, 3}, r);
  Tape<D> t;
  Context<D> ctx{t, false};
  EXPECT_EQ(tb.forward(ctx, t.constant(x)).value(), x);
}

TEST(Transformer, SingleTokenAttentionIsValueProjection) {
  Rng r(19);
  TransformerBlock<D> tb(4, 2, 1, 0.0, false, r);
  ParamList<D> ps;
  tb.collect(ps, "tb");
  scramble(ps, r);
  auto x = randn({1, 4}, r);
  Tape<D> t;
  Context<D> ctx{t};
  auto att = tb.attention(ctx, t.constant(x)).value();
  // softmax over one score is 1, so each head returns its value slice.
  std::vector<double> v(4);
  for (std::size_t j = 0; j < 4; ++j) {
    v[j] = tb.b_qkv.value[8 + j];
    for (std::size_t k = 0; k < 4; ++k) v[j] += x[k] * tb.w_qkv.value.at(k, 8 + j);
  }
  for (std::size_t o = 0; o < 4; ++o) {
    double ref = tb.b_out.value[o];
    for (std::size_t j = 0; j < 4; ++j) ref += v[j] * tb.w_out.value.at(j, o);
    EXPECT_NEAR(att[o], ref, 1e-12);
  }
}

TEST(Transformer, GradCheck) {
  Rng r(20);
  TransformerBlock<D> tb(8, 2, 4, 0.1, true, r);
  ParamList<D> ps;
  tb.collect(ps, "tb");
  scramble(ps, r, 0.3);
  auto x = randn({8, 2, 2}, r);
  auto fwd = [&](Tape<D>& t, Var<D> v) {
    Context<D> ctx{t, false};
    return tb.forward(ctx, v);
  };
  EXPECT_LT(block_grad_error(fwd, ps, x), 1e-4);
}

TEST(Transformer, DropoutOnlyWhenTraining) {
  Rng r(21);
  TransformerBlock<D> tb(4, 1, 4, 0.5, false, r);
  auto x = randn({4, 2, 2}, r);
  Tape<D> t;
  Rng d1(5);
  Context<D> eval{t, false, &d1};
  auto a = tb.forward(eval, t.constant(x)).value();
  auto b = tb.forward(eval, t.constant(x)).value();
  EXPECT_EQ(a, b);
  Context<D> train{t, true, &d1};
  EXPECT_NE(tb.forward(train, t.constant(x)).value(), a);
}

// ---------------------------------------------------------------------------
// Stem and downsample

TEST(Stem, ShapesAndCounts) {
  Rng r(22);
  Stem<float> s(3, 96, r);
  EXPECT_EQ(s.kernel.numel() + s.bias.numel(), 4704u);
  EXPECT_EQ(s.norm.gamma.numel() + s.norm.beta.numel(), 192u);
  Tape<float> t(false);
  Context<float> ctx{t};
  EXPECT_EQ(s.forward(ctx, t.constant(Tensor<float>({3, 224, 224}, 0.5f))).shape(), (Shape{96, 56, 56}));
  EXPECT_THROW(s.forward(ctx, t.constant(Tensor<float>({3, 30, 30}))), ShapeError);
  auto pre = s.conv(ctx, t.constant(Tensor<float>({3, 8, 8})));
  for (auto v : pre.value().data()) EXPECT_EQ(v, 0.0f);
}

TEST(Downsample, ShapesAndGradCheck) {
  Rng r(23);
  Downsample<float> d1(96, 192, r), d3(384, 768, r);
  Tape<float> t(false);
  Context<float> ctx{t};
  EXPECT_EQ(d1.forward(ctx, t.constant(Tensor<float>({96, 56, 56}, 0.1f))).shape(), (Shape{192, 28, 28}));
  EXPECT_EQ(d3.forward(ctx, t.constant(Tensor<float>({384, 14, 14}, 0.1f))).shape(), (Shape{768, 7, 7}));
  EXPECT_THROW(d1.forward(ctx, t.constant(Tensor<float>({96, 5, 5}))), ShapeError);

  Downsample<D> dd(4, 8, r);
  ParamList<D> ps;
  dd.collect(ps, "ds");
  auto x = randn({4, 4, 4}, r);
  auto fwd = [&](Tape<D>& tp, Var<D> v) {
    Context<D> c{tp};
    return dd.forward(c, v);
  };
  EXPECT_LT(block_grad_error(fwd, ps, x), 1e-4);
}
