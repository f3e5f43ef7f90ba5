#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "conmat/ops.hpp"

namespace conmat {

template <Real T>
struct NamedParam {
  std::string name;
  Parameter<T>* param;
};

template <Real T>
using ParamList = std::vector<NamedParam<T>>;

// Per-forward state shared by every block.
template <Real T>
struct Context {
  Tape<T>& tape;
  bool training = false;
  Rng* rng = nullptr;

  // Dropout source; eval-mode contexts may leave rng unset.
  Rng& random() {
    static thread_local Rng fallback(0);
    return rng ? *rng : fallback;
  }
};

namespace init {

template <Real T>
Parameter<T> trunc_normal(Shape s, Rng& rng, double std = 0.02) {
  Tensor<T> t(std::move(s));
  for (auto& v : t.data()) v = static_cast<T>(rng.truncated_normal(std));
  return Parameter<T>(std::move(t));
}

template <Real T>
Parameter<T> constant(Shape s, double v) {
  return Parameter<T>(Tensor<T>(std::move(s), static_cast<T>(v)));
}

}  // namespace init

// Channel LayerNorm parameters (gamma = 1, beta = 0).
template <Real T>
struct NormParams {
  Parameter<T> gamma, beta;

  NormParams() = default;
  explicit NormParams(std::size_t dim) : gamma(init::constant<T>({dim}, 1.0)), beta(init::constant<T>({dim}, 0.0)) {}

  Var<T> apply(Context<T>& ctx, const Var<T>& x, std::size_t axis) {
    return layer_norm(x, axis, ctx.tape.param(gamma), ctx.tape.param(beta));
  }
  void collect(ParamList<T>& out, const std::string& prefix) {
    out.push_back({prefix + ".gamma", &gamma});
    out.push_back({prefix + ".beta", &beta});
  }
};

// ---------------------------------------------------------------------------
// CBAM: channel gate from a shared MLP over avg/max pooled descriptors,
// then a spatial gate from a 7x7 conv over the channel-pooled [avg; max].

template <Real T>
struct Cbam {
  std::size_t channels = 0, reduction = 8;
  Parameter<T> mlp_w0, mlp_b0, mlp_w1, mlp_b1;
  Parameter<T> spatial_kernel;  // [1, 2, 7, 7]

  Cbam() = default;
  Cbam(std::size_t c, std::size_t r, Rng& rng) : channels(c), reduction(r) {
    if (r == 0 || c % r != 0)
      throw ShapeError("cbam: channels " + std::to_string(c) + " not divisible by reduction " + std::to_string(r));
    const auto hidden = c / r;
    mlp_w0 = init::trunc_normal<T>({c, hidden}, rng);
    mlp_b0 = init::constant<T>({hidden}, 0.0);
    mlp_w1 = init::trunc_normal<T>({hidden, c}, rng);
    mlp_b1 = init::constant<T>({c}, 0.0);
    spatial_kernel = init::trunc_normal<T>({1, 2, 7, 7}, rng);
  }

  Var<T> mlp(Context<T>& ctx, const Var<T>& v) {
    auto row = reshape(v, {1, channels});
    auto h = relu(linear(row, ctx.tape.param(mlp_w0), std::optional{ctx.tape.param(mlp_b0)}));
    return linear(h, ctx.tape.param(mlp_w1), std::optional{ctx.tape.param(mlp_b1)});
  }

  // [C, H, W] -> [C, 1, 1]
  Var<T> channel_attention(Context<T>& ctx, const Var<T>& f) {
    if (f.shape().at(0) != channels) throw ShapeError("cbam: channel count mismatch");
    auto a = mlp(ctx, global_pool(f, PoolKind::avg));
    auto m = mlp(ctx, global_pool(f, PoolKind::max));
    return reshape(sigmoid(add(a, m)), {channels, 1, 1});
  }

  // [C, H, W] -> [1, H, W]
  Var<T> spatial_attention(Context<T>& ctx, const Var<T>& f) {
    auto stacked = concat<T>({channel_pool(f, PoolKind::avg), channel_pool(f, PoolKind::max)});
    auto s = conv2d(stacked, ctx.tape.param(spatial_kernel), std::nullopt, ConvSpec{1, 3, 1});
    return sigmoid(s);
  }

  Var<T> forward(Context<T>& ctx, const Var<T>& f) {
    auto mc = channel_attention(ctx, f);
    auto refined = mul_channels(f, reshape(mc, {channels}));
    auto ms = spatial_attention(ctx, refined);
    return mul_spatial(refined, ms);
  }

  void collect(ParamList<T>& out, const std::string& prefix) {
    out.push_back({prefix + ".mlp_w0", &mlp_w0});
    out.push_back({prefix + ".mlp_b0", &mlp_b0});
    out.push_back({prefix + ".mlp_w1", &mlp_w1});
    out.push_back({prefix + ".mlp_b1", &mlp_b1});
    out.push_back({prefix + ".spatial_kernel", &spatial_kernel});
  }
};

// ---------------------------------------------------------------------------
// DANet: position attention (pixel-pair softmax) and channel attention
// (channel-pair softmax), run in parallel on the same input and summed.

template <Real T>
struct Danet {
  std::size_t channels = 0;
  Parameter<T> conv_b, bias_b, conv_c, bias_c, conv_d, bias_d;
  Parameter<T> alpha, beta;  // residual gains, zero at init

  Danet() = default;
  Danet(std::size_t c, Rng& rng) : channels(c) {
    conv_b = init::trunc_normal<T>({c, c, 1, 1}, rng);
    bias_b = init::constant<T>({c}, 0.0);
    conv_c = init::trunc_normal<T>({c, c, 1, 1}, rng);
    bias_c = init::constant<T>({c}, 0.0);
    conv_d = init::trunc_normal<T>({c, c, 1, 1}, rng);
    bias_d = init::constant<T>({c}, 0.0);
    alpha = init::constant<T>({1}, 0.0);
    beta = init::constant<T>({1}, 0.0);
  }

  Var<T> pointwise(Context<T>& ctx, const Var<T>& a, Parameter<T>& w, Parameter<T>& b) {
    return conv2d(a, ctx.tape.param(w), std::optional{ctx.tape.param(b)}, ConvSpec{});
  }

  // S[j, i] = softmax_i(B_i . C_j); every row j sums to one.
  Var<T> position_attention_map(Context<T>& ctx, const Var<T>& a) {
    const auto c = a.shape().at(0), n = a.shape()[1] * a.shape()[2];
    auto b = reshape(pointwise(ctx, a, conv_b, bias_b), {c, n});
    auto cc = reshape(pointwise(ctx, a, conv_c, bias_c), {c, n});
    return softmax(matmul(transpose(cc), b), 1);
  }

  // E_j = alpha * sum_i S[j, i] D_i + A_j
  Var<T> pam(Context<T>& ctx, const Var<T>& a) {
    const auto c = a.shape().at(0), n = a.shape()[1] * a.shape()[2];
    auto s = position_attention_map(ctx, a);
    auto d = reshape(pointwise(ctx, a, conv_d, bias_d), {c, n});
    auto ctxt = reshape(matmul(d, transpose(s)), a.shape());
    return add(scale_by(ctxt, ctx.tape.param(alpha)), a);
  }

  // X[j, i] = softmax_i(A_i . A_j)
  Var<T> channel_attention_map(const Var<T>& a) {
    const auto c = a.shape().at(0), n = a.shape()[1] * a.shape()[2];
    auto flat = reshape(a, {c, n});
    return softmax(matmul(flat, transpose(flat)), 1);
  }

  // E_j = beta * sum_i X[j, i] A_i + A_j
  Var<T> cam(Context<T>& ctx, const Var<T>& a) {
    const auto c = a.shape().at(0), n = a.shape()[1] * a.shape()[2];
    auto x = channel_attention_map(a);
    auto ctxt = reshape(matmul(x, reshape(a, {c, n})), a.shape());
    return add(scale_by(ctxt, ctx.tape.param(beta)), a);
  }

  Var<T> forward(Context<T>& ctx, const Var<T>& a) {
    if (a.shape().size() != 3 || a.shape()[0] != channels) throw ShapeError("danet: expects [C,H,W]");
    return add(pam(ctx, a), cam(ctx, a));
  }

  void collect(ParamList<T>& out, const std::string& prefix) {
    out.push_back({prefix + ".conv_b", &conv_b});
    out.push_back({prefix + ".bias_b", &bias_b});
    out.push_back({prefix + ".conv_c", &conv_c});
    out.push_back({prefix + ".bias_c", &bias_c});
    out.push_back({prefix + ".conv_d", &conv_d});
    out.push_back({prefix + ".bias_d", &bias_d});
    out.push_back({prefix + ".alpha", &alpha});
    out.push_back({prefix + ".beta", &beta});
  }
};

// ---------------------------------------------------------------------------
// ConvNeXt block:
//   Y = X + scale * W2 . GELU(W1 . LN(DWConv7x7(X)))
// with an optional GRN after the GELU.

template <Real T>
struct ConvNextBlock {
  std::size_t channels = 0;
  bool use_grn = false;
  Parameter<T> dw_kernel, dw_bias;
  NormParams<T> norm;
  Parameter<T> w1, b1, w2, b2;
  Parameter<T> layer_scale;
  Parameter<T> grn_gamma, grn_beta;

  ConvNextBlock() = default;
  ConvNextBlock(std::size_t c, bool grn_on, Rng& rng, double layer_scale_init = 1e-6)
      : channels(c), use_grn(grn_on), norm(c) {
    dw_kernel = init::trunc_normal<T>({c, 1, 7, 7}, rng);
    dw_bias = init::constant<T>({c}, 0.0);
    w1 = init::trunc_normal<T>({c, 4 * c}, rng);
    b1 = init::constant<T>({4 * c}, 0.0);
    w2 = init::trunc_normal<T>({4 * c, c}, rng);
    b2 = init::constant<T>({c}, 0.0);
    layer_scale = init::constant<T>({c}, layer_scale_init);
    if (use_grn) {
      grn_gamma = init::constant<T>({4 * c}, 0.0);
      grn_beta = init::constant<T>({4 * c}, 0.0);
    }
  }

  Var<T> forward(Context<T>& ctx, const Var<T>& x) {
    if (x.shape().size() != 3 || x.shape()[0] != channels) throw ShapeError("convnext: expects [C,H,W]");
    const auto c = channels, n = x.shape()[1] * x.shape()[2];
    auto& tp = ctx.tape;
    auto y = conv2d(x, tp.param(dw_kernel), std::optional{tp.param(dw_bias)}, ConvSpec{1, 3, c});
    auto tokens = transpose(reshape(y, {c, n}));  // [N, C]
    tokens = norm.apply(ctx, tokens, 1);
    auto h = gelu(linear(tokens, tp.param(w1), std::optional{tp.param(b1)}));
    if (use_grn) h = grn(h, tp.param(grn_gamma), tp.param(grn_beta));
    auto z = linear(h, tp.param(w2), std::optional{tp.param(b2)});
    auto branch = reshape(transpose(z), x.shape());
    return add(x, mul_channels(branch, tp.param(layer_scale)));
  }

  void collect(ParamList<T>& out, const std::string& prefix) {
    out.push_back({prefix + ".dw_kernel", &dw_kernel});
    out.push_back({prefix + ".dw_bias", &dw_bias});
    norm.collect(out, prefix + ".norm");
    out.push_back({prefix + ".w1", &w1});
    out.push_back({prefix + ".b1", &b1});
    out.push_back({prefix + ".w2", &w2});
    out.push_back({prefix + ".b2", &b2});
    out.push_back({prefix + ".layer_scale", &layer_scale});
    if (use_grn) {
      out.push_back({prefix + ".grn_gamma", &grn_gamma});
      out.push_back({prefix + ".grn_beta", &grn_beta});
    }
  }
};

// ---------------------------------------------------------------------------
// Pre-LN transformer block over the flattened spatial tokens.

template <Real T>
struct TransformerBlock {
  std::size_t dim = 0, heads = 1, tokens = 0;
  double drop = 0.1;
  bool use_pos_embed = false;
  NormParams<T> norm1, norm2;
  Parameter<T> w_qkv, b_qkv, w_out, b_out;
  Parameter<T> w_fc1, b_fc1, w_fc2, b_fc2;
  Parameter<T> pos_embed;  // [tokens, dim], only with use_pos_embed

  TransformerBlock() = default;
  TransformerBlock(std::size_t d, std::size_t h, std::size_t n_tokens, double p, bool pos, Rng& rng)
      : dim(d), heads(h), tokens(n_tokens), drop(p), use_pos_embed(pos), norm1(d), norm2(d) {
    if (h == 0 || d % h != 0)
      throw ShapeError("transformer: dim " + std::to_string(d) + " not divisible by " + std::to_string(h) + " heads");
    w_qkv = init::trunc_normal<T>({d, 3 * d}, rng);
    b_qkv = init::constant<T>({3 * d}, 0.0);
    w_out = init::trunc_normal<T>({d, d}, rng);
    b_out = init::constant<T>({d}, 0.0);
    w_fc1 = init::trunc_normal<T>({d, 4 * d}, rng);
    b_fc1 = init::constant<T>({4 * d}, 0.0);
    w_fc2 = init::trunc_normal<T>({4 * d, d}, rng);
    b_fc2 = init::constant<T>({d}, 0.0);
    if (use_pos_embed) pos_embed = init::trunc_normal<T>({n_tokens, d}, rng);
  }

  std::size_t attention_params() const { return w_qkv.numel() + b_qkv.numel() + w_out.numel() + b_out.numel(); }
  std::size_t mlp_params() const { return w_fc1.numel() + b_fc1.numel() + w_fc2.numel() + b_fc2.numel(); }

  // Multi-head scaled dot-product self-attention on [N, d] tokens.
  Var<T> attention(Context<T>& ctx, const Var<T>& x) {
    auto& tp = ctx.tape;
    const auto hd = dim / heads;
    auto qkv = linear(x, tp.param(w_qkv), std::optional{tp.param(b_qkv)});
    const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));
    std::vector<Var<T>> outs;
    for (std::size_t h = 0; h < heads; ++h) {
      auto q = slice_cols(qkv, h * hd, hd);
      auto k = slice_cols(qkv, dim + h * hd, hd);
      auto v = slice_cols(qkv, 2 * dim + h * hd, hd);
      auto att = softmax(scale(matmul(q, transpose(k)), inv_sqrt), 1);
      outs.push_back(matmul(att, v));
    }
    auto merged = heads == 1 ? outs[0] : concat_cols(outs);
    return linear(merged, tp.param(w_out), std::optional{tp.param(b_out)});
  }

  Var<T> mlp(Context<T>& ctx, const Var<T>& x) {
    auto& tp = ctx.tape;
    auto h = gelu(linear(x, tp.param(w_fc1), std::optional{tp.param(b_fc1)}));
    return linear(h, tp.param(w_fc2), std::optional{tp.param(b_fc2)});
  }

  // [N, d] -> [N, d]
  Var<T> forward_tokens(Context<T>& ctx, Var<T> x) {
    if (x.shape().size() != 2 || x.shape()[1] != dim) throw ShapeError("transformer: token width mismatch");
    if (use_pos_embed) x = add(x, ctx.tape.param(pos_embed));
    auto a = attention(ctx, norm1.apply(ctx, x, 1));
    x = add(x, dropout(a, drop, ctx.training, ctx.random()));
    auto m = mlp(ctx, norm2.apply(ctx, x, 1));
    return add(x, dropout(m, drop, ctx.training, ctx.random()));
  }

  // [d, H, W] -> [d, H, W]
  Var<T> forward(Context<T>& ctx, const Var<T>& x) {
    if (x.shape().size() != 3 || x.shape()[0] != dim) throw ShapeError("transformer: expects [d,H,W]");
    const auto n = x.shape()[1] * x.shape()[2];
    auto t = forward_tokens(ctx, transpose(reshape(x, {dim, n})));
    return reshape(transpose(t), x.shape());
  }

  void collect(ParamList<T>& out, const std::string& prefix) {
    norm1.collect(out, prefix + ".norm1");
    out.push_back({prefix + ".attn.w_qkv", &w_qkv});
    out.push_back({prefix + ".attn.b_qkv", &b_qkv});
    out.push_back({prefix + ".attn.w_out", &w_out});
    out.push_back({prefix + ".attn.b_out", &b_out});
    norm2.collect(out, prefix + ".norm2");
    out.push_back({prefix + ".mlp.w_fc1", &w_fc1});
    out.push_back({prefix + ".mlp.b_fc1", &b_fc1});
    out.push_back({prefix + ".mlp.w_fc2", &w_fc2});
    out.push_back({prefix + ".mlp.b_fc2", &b_fc2});
    if (use_pos_embed) out.push_back({prefix + ".pos_embed", &pos_embed});
  }
};

// ---------------------------------------------------------------------------
// Stem: 4x4 stride-4 patchify conv, then channel LayerNorm.

template <Real T>
struct Stem {
  std::size_t in_channels = 3, out_channels = 0;
  Parameter<T> kernel, bias;
  NormParams<T> norm;

  Stem() = default;
  Stem(std::size_t cin, std::size_t cout, Rng& rng) : in_channels(cin), out_channels(cout), norm(cout) {
    kernel = init::trunc_normal<T>({cout, cin, 4, 4}, rng);
    bias = init::constant<T>({cout}, 0.0);
  }

  Var<T> conv(Context<T>& ctx, const Var<T>& x) {
    if (x.shape().size() != 3 || x.shape()[0] != in_channels) throw ShapeError("stem: expects [3,H,W]");
    if (x.shape()[1] % 4 != 0 || x.shape()[2] % 4 != 0)
      throw ShapeError("stem: spatial size " + shape_str(x.shape()) + " not divisible by 4");
    return conv2d(x, ctx.tape.param(kernel), std::optional{ctx.tape.param(bias)}, ConvSpec{4, 0, 1});
  }

  Var<T> forward(Context<T>& ctx, const Var<T>& x) { return norm.apply(ctx, conv(ctx, x), 0); }

  void collect(ParamList<T>& out, const std::string& prefix) {
    out.push_back({prefix + ".kernel", &kernel});
    out.push_back({prefix + ".bias", &bias});
    norm.collect(out, prefix + ".norm");
  }
};

// Downsample: channel LayerNorm, then 2x2 stride-2 conv doubling channels.
template <Real T>
struct Downsample {
  std::size_t in_channels = 0, out_channels = 0;
  NormParams<T> norm;
  Parameter<T> kernel, bias;

  Downsample() = default;
  Downsample(std::size_t cin, std::size_t cout, Rng& rng) : in_channels(cin), out_channels(cout), norm(cin) {
    kernel = init::trunc_normal<T>({cout, cin, 2, 2}, rng);
    bias = init::constant<T>({cout}, 0.0);
  }

  Var<T> forward(Context<T>& ctx, const Var<T>& x) {
    if (x.shape().size() != 3 || x.shape()[0] != in_channels) throw ShapeError("downsample: channel mismatch");
    if (x.shape()[1] % 2 != 0 || x.shape()[2] % 2 != 0)
      throw ShapeError("downsample: odd spatial size " + shape_str(x.shape()));
    auto y = norm.apply(ctx, x, 0);
    return conv2d(y, ctx.tape.param(kernel), std::optional{ctx.tape.param(bias)}, ConvSpec{2, 0, 1});
  }

  void collect(ParamList<T>& out, const std::string& prefix) {
    norm.collect(out, prefix + ".norm");
    out.push_back({prefix + ".kernel", &kernel});
    out.push_back({prefix + ".bias", &bias});
  }
};

template <Real T>
std::size_t count_params(const ParamList<T>& ps) {
  std::size_t n = 0;
  for (const auto& p : ps) n += p.param->numel();
  return n;
}

}  // namespace conmat
