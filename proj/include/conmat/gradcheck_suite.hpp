#pragma once

// 64-bit finite-difference checks of every op and block, plus one
// end-to-end check of a whole model.

#include <chrono>
#include <string>
#include <vector>

#include "conmat/model.hpp"

namespace conmat {

struct GradCheckRow {
  std::string name;
  double error = 0;
  double tolerance = 0;
  double seconds = 0;
  bool pass() const { return error < tolerance; }
};

namespace detail {

using D = double;

inline Tensor<D> gc_randn(Shape s, Rng& r, double scale = 1.0) {
  Tensor<D> t(std::move(s));
  for (auto& v : t.data()) v = scale * r.normal();
  return t;
}

// Random linear functional, so every output entry carries a distinct weight.
inline Var<D> gc_project(const Var<D>& y) {
  Rng r(77);
  return sum(mul(y, y.tape->constant(gc_randn(y.shape(), r))));
}

inline void gc_scramble(const ParamList<D>& ps, Rng& r, double scale) {
  for (auto& p : ps)
    for (auto& v : p.param->value.data()) v = scale * r.normal();
}

inline std::vector<std::size_t> gc_indices(std::size_t n, std::size_t count) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < n; i += std::max<std::size_t>(1, n / count)) idx.push_back(i);
  if (idx.back() != n - 1) idx.push_back(n - 1);
  return idx;
}

// Worst error over the input and a spread of entries of each parameter.
template <typename F>
double gc_block(F&& fwd, const ParamList<D>& ps, const Tensor<D>& x, std::size_t per_param = 7) {
  double worst = grad_check([&](Tape<D>& t, Var<D> v) { return gc_project(fwd(t, v)); }, x);
  for (auto& p : ps) {
    auto loss = [&](Tape<D>& t) { return gc_project(fwd(t, t.constant(x))); };
    worst = std::max(worst, grad_check_param(loss, *p.param, 1e-5, gc_indices(p.param->numel(), per_param)));
  }
  return worst;
}

}  // namespace detail

inline constexpr double kBlockTolerance = 1e-4;
inline constexpr double kEndToEndTolerance = 1e-3;

// `model_cfg` is the configuration of the end-to-end check (dropout is
// switched off there).
inline std::vector<GradCheckRow> run_gradcheck_suite(const ModelConfig& model_cfg, std::uint64_t seed = 1) {
  using namespace detail;
  std::vector<GradCheckRow> rows;
  auto timed = [&](std::string name, double tol, auto&& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    const double err = fn();
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    rows.push_back({std::move(name), err, tol, s});
  };
  Rng r(seed);

  timed("conv2d", kBlockTolerance, [&] {
    auto x = gc_randn({4, 6, 6}, r), w = gc_randn({4, 2, 3, 3}, r), b = gc_randn({4}, r);
    const ConvSpec spec{2, 1, 2};
    double e = grad_check([&](Tape<D>& t, Var<D> v) {
      return gc_project(conv2d(v, t.constant(w), std::optional{t.constant(b)}, spec));
    }, x);
    e = std::max(e, grad_check([&](Tape<D>& t, Var<D> v) {
      return gc_project(conv2d(t.constant(x), v, std::optional{t.constant(b)}, spec));
    }, w));
    return e;
  });
  timed("depthwise_conv7", kBlockTolerance, [&] {
    auto x = gc_randn({3, 8, 8}, r), w = gc_randn({3, 1, 7, 7}, r);
    const ConvSpec spec{1, 3, 3};
    return std::max(grad_check([&](Tape<D>& t, Var<D> v) { return gc_project(conv2d(v, t.constant(w), std::nullopt, spec)); }, x),
                    grad_check([&](Tape<D>& t, Var<D> v) { return gc_project(conv2d(t.constant(x), v, std::nullopt, spec)); }, w));
  });
  timed("layer_norm", kBlockTolerance, [&] {
    auto x = gc_randn({4, 3, 3}, r), g = gc_randn({4}, r), b = gc_randn({4}, r);
    return grad_check([&](Tape<D>& t, Var<D> v) {
      return gc_project(layer_norm(v, 0, t.constant(g), t.constant(b)));
    }, x);
  });
  timed("gelu", kBlockTolerance, [&] {
    auto x = gc_randn({3, 5}, r, 2.0);
    return grad_check([&](Tape<D>&, Var<D> v) { return gc_project(gelu(v)); }, x);
  });
  timed("softmax", kBlockTolerance, [&] {
    auto x = gc_randn({3, 5}, r);
    return std::max(grad_check([&](Tape<D>&, Var<D> v) { return gc_project(softmax(v, 1)); }, x),
                    grad_check([&](Tape<D>&, Var<D> v) { return gc_project(softmax(v, 0)); }, x));
  });
  timed("cross_entropy", kBlockTolerance, [&] {
    auto x = gc_randn({3, 4}, r);
    return grad_check([&](Tape<D>&, Var<D> v) { return cross_entropy(v, {0, 3, 1}); }, x);
  });
  timed("cbam", kBlockTolerance, [&] {
    Cbam<D> cb(8, 2, r);
    ParamList<D> ps;
    cb.collect(ps, "cbam");
    gc_scramble(ps, r, 0.5);
    auto x = gc_randn({8, 4, 4}, r);
    return gc_block([&](Tape<D>& t, Var<D> v) { Context<D> ctx{t}; return cb.forward(ctx, v); }, ps, x);
  });
  {
    Danet<D> dn(4, r);
    ParamList<D> ps;
    dn.collect(ps, "danet");
    gc_scramble(ps, r, 0.5);
    auto x = gc_randn({4, 3, 3}, r);
    timed("pam", kBlockTolerance, [&] {
      return gc_block([&](Tape<D>& t, Var<D> v) { Context<D> ctx{t}; return dn.pam(ctx, v); }, ps, x);
    });
    timed("cam", kBlockTolerance, [&] {
      return gc_block([&](Tape<D>& t, Var<D> v) { Context<D> ctx{t}; return dn.cam(ctx, v); }, ps, x);
    });
    timed("danet", kBlockTolerance, [&] {
      return gc_block([&](Tape<D>& t, Var<D> v) { Context<D> ctx{t}; return dn.forward(ctx, v); }, ps, x);
    });
  }
  for (bool grn_on : {false, true}) {
    timed(grn_on ? "convnext_block_grn" : "convnext_block", kBlockTolerance, [&] {
      ConvNextBlock<D> b(4, grn_on, r);
      ParamList<D> ps;
      b.collect(ps, "blk");
      gc_scramble(ps, r, 0.4);
      auto x = gc_randn({4, 5, 5}, r);
      return gc_block([&](Tape<D>& t, Var<D> v) { Context<D> ctx{t}; return b.forward(ctx, v); }, ps, x);
    });
  }
  timed("transformer_block", kBlockTolerance, [&] {
    TransformerBlock<D> tb(8, 2, 4, 0.1, true, r);
    ParamList<D> ps;
    tb.collect(ps, "tb");
    gc_scramble(ps, r, 0.3);
    auto x = gc_randn({8, 2, 2}, r);
    return gc_block([&](Tape<D>& t, Var<D> v) { Context<D> ctx{t, false}; return tb.forward(ctx, v); }, ps, x);
  });
  timed("stem_downsample", kBlockTolerance, [&] {
    Stem<D> st(3, 4, r);
    Downsample<D> ds(4, 8, r);
    ParamList<D> ps;
    st.collect(ps, "stem");
    ds.collect(ps, "down");
    gc_scramble(ps, r, 0.4);
    auto x = gc_randn({3, 16, 16}, r);
    return gc_block([&](Tape<D>& t, Var<D> v) {
      Context<D> ctx{t};
      return ds.forward(ctx, st.forward(ctx, v));
    }, ps, x, 4);
  });

  timed("model_end_to_end", kEndToEndTolerance, [&] {
    auto cfg = model_cfg;
    cfg.dropout = 0.0;
    ConMatFormer<D> m(cfg, r);
    auto params = m.parameters();
    // Zero-initialized gains would block gradients to everything behind them.
    for (auto& p : params)
      if (p.name.ends_with("alpha") || p.name.ends_with("beta") || p.name.ends_with("layer_scale"))
        for (auto& v : p.param->value.data()) v = 0.3 + 0.1 * r.normal();
    Tensor<D> x({cfg.in_channels, cfg.input_size, cfg.input_size});
    for (auto& v : x.data()) v = r.uniform();
    const std::vector<std::size_t> labels{cfg.num_classes - 1};
    auto loss = [&](Tape<D>& t) {
      Context<D> ctx{t, false};
      auto z = m.forward_one(ctx, t.constant(x));
      return cross_entropy(reshape(z, {1, cfg.num_classes}), labels);
    };
    double worst = 0;
    for (auto& p : params)
      worst = std::max(worst, grad_check_param(loss, *p.param, 1e-5, gc_indices(p.param->numel(), 2)));
    return worst;
  });
  return rows;
}

}  // namespace conmat
