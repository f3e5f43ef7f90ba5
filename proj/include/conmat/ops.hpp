#pragma once

#include <cmath>
#include <optional>
#include <type_traits>
#include <string>
#include <vector>

#include "conmat/autograd.hpp"
#include "conmat/kernels.hpp"
#include "conmat/rng.hpp"

namespace conmat {

namespace detail {

template <Real T>
void same_tape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.tape != b.tape) throw ValueError(std::string(op) + ": operands live on different tapes");
}

// outer x axis x inner decomposition of a shape around `axis`.
struct AxisSplit {
  std::size_t outer = 1, dim = 1, inner = 1;
};

inline AxisSplit split_axis(const Shape& s, std::size_t axis) {
  if (axis >= s.size()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.dim = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

template <Real T, typename Fwd, typename Deriv>
Var<T> unary(const Var<T>& x, Fwd fwd, Deriv deriv, const char* op) {
  Tensor<T> out(x.shape());
  const auto& xv = x.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = fwd(xv[i]);
  const auto xid = x.id;
  return x.tape->record(
      std::move(out), {x},
      [xid, deriv](Tape<T>& t, std::size_t self) {
        auto gx = t.grad_buffer(xid);
        if (gx.empty()) return;
        const auto& xv = t.value(xid);
        const auto& yv = t.value(self);
        auto gy = t.out_grad(self);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i] * deriv(xv[i], yv[i]);
      },
      op);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic on equal shapes.

template <Real T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::same_tape(a, b, "add");
  if (a.shape() != b.shape()) throw ShapeError("add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += bv[i];
  const auto ai = a.id, bi = b.id;
  return a.tape->record(
      std::move(out), {a, b},
      [ai, bi](Tape<T>& t, std::size_t self) {
        auto gy = t.out_grad(self);
        for (auto id : {ai, bi}) {
          auto g = t.grad_buffer(id);
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i];
        }
      },
      "add");
}

template <Real T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::same_tape(a, b, "sub");
  if (a.shape() != b.shape()) throw ShapeError("sub: shape mismatch");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= bv[i];
  const auto ai = a.id, bi = b.id;
  return a.tape->record(
      std::move(out), {a, b},
      [ai, bi](Tape<T>& t, std::size_t self) {
        auto gy = t.out_grad(self);
        auto ga = t.grad_buffer(ai);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gy[i];
        auto gb = t.grad_buffer(bi);
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= gy[i];
      },
      "sub");
}

template <Real T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::same_tape(a, b, "mul");
  if (a.shape() != b.shape()) throw ShapeError("mul: shape mismatch");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
  const auto ai = a.id, bi = b.id;
  return a.tape->record(
      std::move(out), {a, b},
      [ai, bi](Tape<T>& t, std::size_t self) {
        auto gy = t.out_grad(self);
        const auto& av = t.value(ai);
        const auto& bv = t.value(bi);
        auto ga = t.grad_buffer(ai);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gy[i] * bv[i];
        auto gb = t.grad_buffer(bi);
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += gy[i] * av[i];
      },
      "mul");
}

template <Real T>
Var<T> scale(const Var<T>& x, T c) {
  return detail::unary(x, [c](T v) { return c * v; }, [c](T, T) { return c; }, "scale");
}

// x * s for a learnable one-element s (DANet alpha/beta).
template <Real T>
Var<T> scale_by(const Var<T>& x, const Var<T>& s) {
  detail::same_tape(x, s, "scale_by");
  if (s.numel() != 1) throw ShapeError("scale_by: scale must have one element");
  const T sv = s.value()[0];
  Tensor<T> out = x.value();
  for (auto& v : out.data()) v *= sv;
  const auto xi = x.id, si = s.id;
  return x.tape->record(
      std::move(out), {x, s},
      [xi, si](Tape<T>& t, std::size_t self) {
        auto gy = t.out_grad(self);
        const T sv = t.value(si)[0];
        auto gx = t.grad_buffer(xi);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i] * sv;
        auto gs = t.grad_buffer(si);
        if (!gs.empty()) {
          const auto& xv = t.value(xi);
          T acc{0};
          for (std::size_t i = 0; i < gy.size(); ++i) acc += gy[i] * xv[i];
          gs[0] += acc;
        }
      },
      "scale_by");
}

// x[c, ...] * g[c]: per-channel gate over a channel-first tensor.
template <Real T>
Var<T> mul_channels(const Var<T>& x, const Var<T>& g) {
  detail::same_tape(x, g, "mul_channels");
  const auto c = x.shape().at(0);
  if (g.numel() != c) throw ShapeError("mul_channels: gate has " + std::to_string(g.numel()) + " entries for " +
                                       std::to_string(c) + " channels");
  const std::size_t inner = x.numel() / c;
  Tensor<T> out = x.value();
  const auto& gv = g.value();
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t i = 0; i < inner; ++i) out[k * inner + i] *= gv[k];
  const auto xi = x.id, gi = g.id;
  return x.tape->record(
      std::move(out), {x, g},
      [xi, gi, c, inner](Tape<T>& t, std::size_t self) {
        auto gy = t.out_grad(self);
        const auto& gv = t.value(gi);
        const auto& xv = t.value(xi);
        auto gx = t.grad_buffer(xi);
        if (!gx.empty())
          for (std::size_t k = 0; k < c; ++k)
            for (std::size_t i = 0; i < inner; ++i) gx[k * inner + i] += gy[k * inner + i] * gv[k];
        auto gg = t.grad_buffer(gi);
        if (!gg.empty())
          for (std::size_t k = 0; k < c; ++k) {
            T acc{0};
            for (std::size_t i = 0; i < inner; ++i) acc += gy[k * inner + i] * xv[k * inner + i];
            gg[k] += acc;
          }
      },
      "mul_channels");
}

// x[c, h, w] * m[0, h, w]: spatial gate broadcast over channels.
template <Real T>
Var<T> mul_spatial(const Var<T>& x, const Var<T>& m) {
  detail::same_tape(x, m, "mul_spatial");
  const auto c = x.shape().at(0);
  const std::size_t inner = x.numel() / c;
  if (m.numel() != inner) throw ShapeError("mul_spatial: map size mismatch");
  Tensor<T> out = x.value();
  const auto& mv = m.value();
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t i = 0; i < inner; ++i) out[k * inner + i] *= mv[i];
  const auto xi = x.id, mi = m.id;
  return x.tape->record(
      std::move(out), {x, m},
      [xi, mi, c, inner](Tape<T>& t, std::size_t self) {
        auto gy = t.out_grad(self);
        const auto& mv = t.value(mi);
        const auto& xv = t.value(xi);
        auto gx = t.grad_buffer(xi);
        if (!gx.empty())
          for (std::size_t k = 0; k < c; ++k)
            for (std::size_t i = 0; i < inner; ++i) gx[k * inner + i] += gy[k * inner + i] * mv[i];
        auto gm = t.grad_buffer(mi);
        if (!gm.empty())
          for (std::size_t k = 0; k < c; ++k)
            for (std::size_t i = 0; i < inner; ++i) gm[i] += gy[k * inner + i] * xv[k * inner + i];
      },
      "mul_spatial");
}

// ---------------------------------------------------------------------------
// Shape manipulation.

template <Real T>
Var<T> reshape(const Var<T>& x, Shape s) {
  auto out = x.value().reshaped(std::move(s));
  const auto xi = x.id;
  return x.tape->record(
      std::move(out), {x},
      [xi](Tape<T>& t, std::size_t self) {
        auto gx = t.grad_buffer(xi);
        auto gy = t.out_grad(self);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i];
      },
      "reshape");
}

template <Real T>
Var<T> transpose(const Var<T>& x) {
  if (x.shape().size() != 2) throw ShapeError("transpose: expects a matrix");
  const auto r = x.shape()[0], c = x.shape()[1];
  Tensor<T> out({c, r});
  const auto& xv = x.value();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = xv[i * c + j];
  const auto xi = x.id;
  return x.tape->record(
      std::move(out), {x},
      [xi, r, c](Tape<T>& t, std::size_t self) {
        auto gx = t.grad_buffer(xi);
        auto gy = t.out_grad(self);
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += gy[j * r + i];
      },
      "transpose");
}

// Concatenation along axis 0.
template <Real T>
Var<T> concat(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
  std::size_t rows = 0;
  for (const auto& p : parts) {
    detail::same_tape(p, parts[0], "concat");
    if (Shape(p.shape().begin() + 1, p.shape().end()) != tail) throw ShapeError("concat: trailing shapes differ");
    rows += p.shape()[0];
  }
  Shape s{rows};
  s.insert(s.end(), tail.begin(), tail.end());
  Tensor<T> out(s);
  std::vector<std::size_t> ids, offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.value().data().begin(), p.value().data().end(), out.ptr() + off);
    ids.push_back(p.id);
    offsets.push_back(off);
    off += p.numel();
  }
  return parts[0].tape->record(
      std::move(out), std::span<const Var<T>>(parts),
      [ids, offsets](Tape<T>& t, std::size_t self) {
        auto gy = t.out_grad(self);
        for (std::size_t k = 0; k < ids.size(); ++k) {
          auto g = t.grad_buffer(ids[k]);
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[offsets[k] + i];
        }
      },
      "concat");
}

// Stacks equally shaped tensors along a new leading axis.
template <Real T>
Var<T> stack(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("stack: no inputs");
  std::vector<Var<T>> rows;
  rows.reserve(parts.size());
  for (const auto& p : parts) {
    Shape s{1};
    s.insert(s.end(), p.shape().begin(), p.shape().end());
    rows.push_back(reshape(p, s));
  }
  return concat(rows);
}

// Columns [start, start+len) of a matrix.
template <Real T>
Var<T> slice_cols(const Var<T>& x, std::size_t start, std::size_t len) {
  if (x.shape().size() != 2 || start + len > x.shape()[1]) throw ShapeError("slice_cols: out of range");
  const auto r = x.shape()[0], c = x.shape()[1];
  Tensor<T> out({r, len});
  const auto& xv = x.value();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < len; ++j) out[i * len + j] = xv[i * c + start + j];
  const auto xi = x.id;
  return x.tape->record(
      std::move(out), {x},
      [xi, r, c, start, len](Tape<T>& t, std::size_t self) {
        auto gx = t.grad_buffer(xi);
        auto gy = t.out_grad(self);
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < len; ++j) gx[i * c + start + j] += gy[i * len + j];
      },
      "slice_cols");
}

template <Real T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const auto r = parts[0].shape().at(0);
  std::vector<Var<T>> ts;
  for (const auto& p : parts) {
    if (p.shape().size() != 2 || p.shape()[0] != r) throw ShapeError("concat_cols: row counts differ");
    ts.push_back(transpose(p));
  }
  return transpose(concat(ts));
}

// ---------------------------------------------------------------------------
// Linear algebra.

template <Real T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  detail::same_tape(a, b, "matmul");
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0])
    throw ShapeError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const auto m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  Tensor<T> out({m, n});
  kernels::gemm_nn(m, n, k, a.value().ptr(), b.value().ptr(), out.ptr(), false);
  const auto ai = a.id, bi = b.id;
  return a.tape->record(
      std::move(out), {a, b},
      [ai, bi, m, n, k](Tape<T>& t, std::size_t self) {
        const T* gy = t.out_grad(self).data();
        auto ga = t.grad_buffer(ai);
        if (!ga.empty()) kernels::gemm_nt(m, k, n, gy, t.value(bi).ptr(), ga.data(), true);
        auto gb = t.grad_buffer(bi);
        if (!gb.empty()) kernels::gemm_tn(k, n, m, t.value(ai).ptr(), gy, gb.data(), true);
      },
      "matmul");
}

// Affine map over the trailing axis: x[..., d_in] * W[d_in, d_out] + b.
template <Real T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const std::type_identity_t<std::optional<Var<T>>>& b = std::nullopt) {
  detail::same_tape(x, w, "linear");
  if (w.shape().size() != 2) throw ShapeError("linear: weight must be a matrix");
  const auto din = w.shape()[0], dout = w.shape()[1];
  if (x.shape().empty() || x.shape().back() != din)
    throw ShapeError("linear: input " + shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
  if (b && b->numel() != dout) throw ShapeError("linear: bias size mismatch");
  const auto rows = x.numel() / din;
  Shape os = x.shape();
  os.back() = dout;
  Tensor<T> out(os);
  kernels::gemm_nn(rows, dout, din, x.value().ptr(), w.value().ptr(), out.ptr(), false);
  if (b) {
    const auto& bv = b->value();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < dout; ++j) out[r * dout + j] += bv[j];
  }
  const auto xi = x.id, wi = w.id;
  const std::optional<std::size_t> bi = b ? std::optional<std::size_t>(b->id) : std::nullopt;
  auto fn = [xi, wi, bi, rows, din, dout](Tape<T>& t, std::size_t self) {
    const T* gy = t.out_grad(self).data();
    auto gx = t.grad_buffer(xi);
    if (!gx.empty()) kernels::gemm_nt(rows, din, dout, gy, t.value(wi).ptr(), gx.data(), true);
    auto gw = t.grad_buffer(wi);
    if (!gw.empty()) kernels::gemm_tn(din, dout, rows, t.value(xi).ptr(), gy, gw.data(), true);
    if (bi) {
      auto gb = t.grad_buffer(*bi);
      if (!gb.empty())
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < dout; ++j) gb[j] += gy[r * dout + j];
    }
  };
  return b ? x.tape->record(std::move(out), {x, w, *b}, fn, "linear")
           : x.tape->record(std::move(out), {x, w}, fn, "linear");
}

struct ConvSpec {
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t groups = 1;
};

inline std::size_t conv_out_size(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
  if (in + 2 * pad < k) throw ShapeError("conv2d: kernel larger than padded input");
  return (in + 2 * pad - k) / stride + 1;
}

// x: [C_in, H, W], w: [C_out, C_in/groups, kh, kw], optional bias [C_out].
template <Real T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const std::type_identity_t<std::optional<Var<T>>>& b, ConvSpec spec) {
  detail::same_tape(x, w, "conv2d");
  if (x.shape().size() != 3 || w.shape().size() != 4) throw ShapeError("conv2d: expects [C,H,W] and 4-d kernel");
  if (spec.stride == 0 || spec.groups == 0) throw ValueError("conv2d: stride and groups must be positive");
  const auto cin = x.shape()[0], h = x.shape()[1], wd = x.shape()[2];
  const auto cout = w.shape()[0], cin_g = w.shape()[1], kh = w.shape()[2], kw = w.shape()[3];
  const auto g = spec.groups;
  if (cin % g != 0 || cout % g != 0) throw ShapeError("conv2d: channels not divisible by groups");
  if (cin / g != cin_g) throw ShapeError("conv2d: kernel expects " + std::to_string(cin_g * g) + " input channels");
  if (b && b->numel() != cout) throw ShapeError("conv2d: bias size mismatch");
  const auto ho = conv_out_size(h, kh, spec.stride, spec.padding);
  const auto wo = conv_out_size(wd, kw, spec.stride, spec.padding);
  const auto cout_g = cout / g, kc = cin_g * kh * kw, p = ho * wo;

  Tensor<T> out({cout, ho, wo});
  std::vector<T> cols(kc * p);
  const bool pointwise = kh == 1 && kw == 1 && spec.stride == 1 && spec.padding == 0;
  for (std::size_t gi = 0; gi < g; ++gi) {
    const T* xg = x.value().ptr() + gi * cin_g * h * wd;
    const T* src = xg;
    if (!pointwise) {
      kernels::im2col(xg, cin_g, h, wd, kh, kw, spec.stride, spec.padding, ho, wo, cols.data());
      src = cols.data();
    }
    kernels::gemm_nn(cout_g, p, kc, w.value().ptr() + gi * cout_g * kc, src, out.ptr() + gi * cout_g * p, false);
  }
  if (b) {
    const auto& bv = b->value();
    for (std::size_t c = 0; c < cout; ++c)
      for (std::size_t i = 0; i < p; ++i) out[c * p + i] += bv[c];
  }
  const auto xi = x.id, wi = w.id;
  const std::optional<std::size_t> bi = b ? std::optional<std::size_t>(b->id) : std::nullopt;
  auto fn = [=](Tape<T>& t, std::size_t self) {
    const T* gy = t.out_grad(self).data();
    auto gx = t.grad_buffer(xi);
    auto gw = t.grad_buffer(wi);
    std::vector<T> cols(kc * p), dcols(kc * p);
    for (std::size_t gi = 0; gi < g; ++gi) {
      const T* xg = t.value(xi).ptr() + gi * cin_g * h * wd;
      const T* gyg = gy + gi * cout_g * p;
      if (!gw.empty()) {
        const T* src = xg;
        if (!pointwise) {
          kernels::im2col(xg, cin_g, h, wd, kh, kw, spec.stride, spec.padding, ho, wo, cols.data());
          src = cols.data();
        }
        kernels::gemm_nt(cout_g, kc, p, gyg, src, gw.data() + gi * cout_g * kc, true);
      }
      if (!gx.empty()) {
        const T* wg = t.value(wi).ptr() + gi * cout_g * kc;
        if (pointwise) {
          kernels::gemm_tn(kc, p, cout_g, wg, gyg, gx.data() + gi * cin_g * h * wd, true);
        } else {
          kernels::gemm_tn(kc, p, cout_g, wg, gyg, dcols.data(), false);
          kernels::col2im(dcols.data(), cin_g, h, wd, kh, kw, spec.stride, spec.padding, ho, wo,
                          gx.data() + gi * cin_g * h * wd);
        }
      }
    }
    if (bi) {
      auto gb = t.grad_buffer(*bi);
      if (!gb.empty())
        for (std::size_t c = 0; c < cout; ++c)
          for (std::size_t i = 0; i < p; ++i) gb[c] += gy[c * p + i];
    }
  };
  return b ? x.tape->record(std::move(out), {x, w, *b}, fn, "conv2d")
           : x.tape->record(std::move(out), {x, w}, fn, "conv2d");
}

// ---------------------------------------------------------------------------
// Normalization and softmax over an arbitrary axis.

inline constexpr double kLayerNormEps = 1e-6;

// Normalizes over `axis` with population variance, then applies gamma/beta
// (both sized to that axis). For a channel-first [C,H,W] map, axis 0 gives
// the per-position channel LayerNorm.
template <Real T>
Var<T> layer_norm(const Var<T>& x, std::size_t axis, const Var<T>& gamma, const Var<T>& beta,
                  double eps = kLayerNormEps) {
  if (!(eps > 0)) throw ValueError("layer_norm: eps must be positive");
  const auto sp = detail::split_axis(x.shape(), axis);
  if (gamma.numel() != sp.dim || beta.numel() != sp.dim) throw ShapeError("layer_norm: gamma/beta size mismatch");
  const auto& xv = x.value();
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  Tensor<T> out(x.shape());
  Tensor<T> xhat(x.shape());
  std::vector<T> rstd(sp.outer * sp.inner);
  const auto D = sp.dim, inner = sp.inner;
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * D * inner + in;
      T mean{0};
      for (std::size_t k = 0; k < D; ++k) mean += xv[base + k * inner];
      mean /= static_cast<T>(D);
      T var{0};
      for (std::size_t k = 0; k < D; ++k) {
        const T d = xv[base + k * inner] - mean;
        var += d * d;
      }
      var /= static_cast<T>(D);
      const T r = T{1} / std::sqrt(var + static_cast<T>(eps));
      rstd[o * inner + in] = r;
      for (std::size_t k = 0; k < D; ++k) {
        const std::size_t i = base + k * inner;
        xhat[i] = (xv[i] - mean) * r;
        out[i] = xhat[i] * gv[k] + bv[k];
      }
    }
  const auto xi = x.id, gi = gamma.id, bi = beta.id;
  const auto outer = sp.outer;
  return x.tape->record(
      std::move(out), {x, gamma, beta},
      [xi, gi, bi, outer, D, inner, xhat = std::move(xhat), rstd = std::move(rstd)](Tape<T>& t, std::size_t self) {
        auto gy = t.out_grad(self);
        const auto& gv = t.value(gi);
        auto gx = t.grad_buffer(xi);
        auto gg = t.grad_buffer(gi);
        auto gb = t.grad_buffer(bi);
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * D * inner + in;
            T m1{0}, m2{0};
            for (std::size_t k = 0; k < D; ++k) {
              const std::size_t i = base + k * inner;
              const T dxh = gy[i] * gv[k];
              m1 += dxh;
              m2 += dxh * xhat[i];
              if (!gg.empty()) gg[k] += gy[i] * xhat[i];
              if (!gb.empty()) gb[k] += gy[i];
            }
            if (gx.empty()) continue;
            m1 /= static_cast<T>(D);
            m2 /= static_cast<T>(D);
            const T r = rstd[o * inner + in];
            for (std::size_t k = 0; k < D; ++k) {
              const std::size_t i = base + k * inner;
              gx[i] += r * (gy[i] * gv[k] - m1 - xhat[i] * m2);
            }
          }
      },
      "layer_norm");
}

// Max-subtracted softmax along `axis`.
template <Real T>
Var<T> softmax(const Var<T>& x, std::size_t axis) {
  const auto sp = detail::split_axis(x.shape(), axis);
  const auto& xv = x.value();
  Tensor<T> out(x.shape());
  const auto D = sp.dim, inner = sp.inner;
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * D * inner + in;
      T mx = xv[base];
      for (std::size_t k = 1; k < D; ++k) mx = std::max(mx, xv[base + k * inner]);
      T s{0};
      for (std::size_t k = 0; k < D; ++k) {
        const T e = std::exp(xv[base + k * inner] - mx);
        out[base + k * inner] = e;
        s += e;
      }
      for (std::size_t k = 0; k < D; ++k) out[base + k * inner] /= s;
    }
  const auto xi = x.id, outer = sp.outer;
  return x.tape->record(
      std::move(out), {x},
      [xi, outer, D, inner](Tape<T>& t, std::size_t self) {
        auto gx = t.grad_buffer(xi);
        auto gy = t.out_grad(self);
        const auto& y = t.value(self);
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * D * inner + in;
            T dot{0};
            for (std::size_t k = 0; k < D; ++k) dot += gy[base + k * inner] * y[base + k * inner];
            for (std::size_t k = 0; k < D; ++k) {
              const std::size_t i = base + k * inner;
              gx[i] += y[i] * (gy[i] - dot);
            }
          }
      },
      "softmax");
}

// ---------------------------------------------------------------------------
// Activations.

template <Real T>
T gelu_value(T v) {
  return static_cast<T>(0.5) * v * (T{1} + std::erf(v / std::sqrt(T{2})));
}

template <Real T>
Var<T> gelu(const Var<T>& x) {
  return detail::unary(
      x, [](T v) { return gelu_value(v); },
      [](T v, T) {
        const T cdf = static_cast<T>(0.5) * (T{1} + std::erf(v / std::sqrt(T{2})));
        const T pdf = std::exp(static_cast<T>(-0.5) * v * v) / std::sqrt(static_cast<T>(2.0 * M_PI));
        return cdf + v * pdf;
      },
      "gelu");
}

template <Real T>
Var<T> sigmoid(const Var<T>& x) {
  return detail::unary(
      x, [](T v) { return v >= 0 ? T{1} / (T{1} + std::exp(-v)) : std::exp(v) / (T{1} + std::exp(v)); },
      [](T, T y) { return y * (T{1} - y); }, "sigmoid");
}

template <Real T>
Var<T> relu(const Var<T>& x) {
  return detail::unary(
      x, [](T v) { return v > 0 ? v : T{0}; }, [](T v, T) { return v > 0 ? T{1} : T{0}; }, "relu");
}

// ---------------------------------------------------------------------------
// Pooling.

enum class PoolKind { avg, max };

// [C, H, W] -> [C]
template <Real T>
Var<T> global_pool(const Var<T>& x, PoolKind kind) {
  if (x.shape().size() != 3) throw ShapeError("global_pool: expects [C,H,W]");
  const auto c = x.shape()[0], n = x.shape()[1] * x.shape()[2];
  Tensor<T> out({c});
  std::vector<std::size_t> arg(c, 0);
  const auto& xv = x.value();
  for (std::size_t k = 0; k < c; ++k) {
    const T* row = xv.ptr() + k * n;
    if (kind == PoolKind::avg) {
      T s{0};
      for (std::size_t i = 0; i < n; ++i) s += row[i];
      out[k] = s / static_cast<T>(n);
    } else {
      std::size_t best = 0;
      for (std::size_t i = 1; i < n; ++i)
        if (row[i] > row[best]) best = i;
      arg[k] = best;
      out[k] = row[best];
    }
  }
  const auto xi = x.id;
  return x.tape->record(
      std::move(out), {x},
      [xi, c, n, kind, arg = std::move(arg)](Tape<T>& t, std::size_t self) {
        auto gx = t.grad_buffer(xi);
        auto gy = t.out_grad(self);
        for (std::size_t k = 0; k < c; ++k) {
          if (kind == PoolKind::avg) {
            const T g = gy[k] / static_cast<T>(n);
            for (std::size_t i = 0; i < n; ++i) gx[k * n + i] += g;
          } else {
            gx[k * n + arg[k]] += gy[k];
          }
        }
      },
      "global_pool");
}

// Pooling across the channel axis: [C, H, W] -> [1, H, W].
template <Real T>
Var<T> channel_pool(const Var<T>& x, PoolKind kind) {
  if (x.shape().size() != 3) throw ShapeError("channel_pool: expects [C,H,W]");
  const auto c = x.shape()[0], n = x.shape()[1] * x.shape()[2];
  Tensor<T> out({1, x.shape()[1], x.shape()[2]});
  std::vector<std::size_t> arg(n, 0);
  const auto& xv = x.value();
  for (std::size_t i = 0; i < n; ++i) {
    if (kind == PoolKind::avg) {
      T s{0};
      for (std::size_t k = 0; k < c; ++k) s += xv[k * n + i];
      out[i] = s / static_cast<T>(c);
    } else {
      std::size_t best = 0;
      for (std::size_t k = 1; k < c; ++k)
        if (xv[k * n + i] > xv[best * n + i]) best = k;
      arg[i] = best;
      out[i] = xv[best * n + i];
    }
  }
  const auto xi = x.id;
  return x.tape->record(
      std::move(out), {x},
      [xi, c, n, kind, arg = std::move(arg)](Tape<T>& t, std::size_t self) {
        auto gx = t.grad_buffer(xi);
        auto gy = t.out_grad(self);
        for (std::size_t i = 0; i < n; ++i) {
          if (kind == PoolKind::avg) {
            const T g = gy[i] / static_cast<T>(c);
            for (std::size_t k = 0; k < c; ++k) gx[k * n + i] += g;
          } else {
            gx[arg[i] * n + i] += gy[i];
          }
        }
      },
      "channel_pool");
}

// Windowed pooling without padding: [C, H, W] -> [C, H', W'].
template <Real T>
Var<T> pool2d(const Var<T>& x, PoolKind kind, std::size_t window, std::size_t stride) {
  if (x.shape().size() != 3) throw ShapeError("pool2d: expects [C,H,W]");
  if (window == 0 || stride == 0) throw ValueError("pool2d: window and stride must be positive");
  const auto c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  if (window > h || window > w) throw ShapeError("pool2d: window larger than input");
  const auto ho = (h - window) / stride + 1, wo = (w - window) / stride + 1;
  Tensor<T> out({c, ho, wo});
  std::vector<std::size_t> arg(out.numel());
  const auto& xv = x.value();
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t oy = 0; oy < ho; ++oy)
      for (std::size_t ox = 0; ox < wo; ++ox) {
        const std::size_t o = (k * ho + oy) * wo + ox;
        T acc = kind == PoolKind::avg ? T{0} : -std::numeric_limits<T>::infinity();
        for (std::size_t dy = 0; dy < window; ++dy)
          for (std::size_t dx = 0; dx < window; ++dx) {
            const std::size_t i = (k * h + oy * stride + dy) * w + ox * stride + dx;
            if (kind == PoolKind::avg) acc += xv[i];
            else if (xv[i] > acc) {
              acc = xv[i];
              arg[o] = i;
            }
          }
        out[o] = kind == PoolKind::avg ? acc / static_cast<T>(window * window) : acc;
      }
  const auto xi = x.id;
  return x.tape->record(
      std::move(out), {x},
      [=, arg = std::move(arg)](Tape<T>& t, std::size_t self) {
        auto gx = t.grad_buffer(xi);
        auto gy = t.out_grad(self);
        for (std::size_t k = 0; k < c; ++k)
          for (std::size_t oy = 0; oy < ho; ++oy)
            for (std::size_t ox = 0; ox < wo; ++ox) {
              const std::size_t o = (k * ho + oy) * wo + ox;
              if (kind == PoolKind::max) {
                gx[arg[o]] += gy[o];
                continue;
              }
              const T g = gy[o] / static_cast<T>(window * window);
              for (std::size_t dy = 0; dy < window; ++dy)
                for (std::size_t dx = 0; dx < window; ++dx) gx[(k * h + oy * stride + dy) * w + ox * stride + dx] += g;
            }
      },
      "pool2d");
}

// ---------------------------------------------------------------------------
// Regularization.

// Inverted dropout. Identity when not training or p == 0.
template <Real T>
Var<T> dropout(const Var<T>& x, double p, bool training, Rng& rng) {
  if (!(p >= 0.0 && p < 1.0)) throw ValueError("dropout: p must lie in [0, 1)");
  if (!training || p == 0.0) return x;
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  std::vector<T> mask(x.numel());
  for (auto& m : mask) m = rng.bernoulli(p) ? T{0} : keep_scale;
  Tensor<T> out = x.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= mask[i];
  const auto xi = x.id;
  return x.tape->record(
      std::move(out), {x},
      [xi, mask = std::move(mask)](Tape<T>& t, std::size_t self) {
        auto gx = t.grad_buffer(xi);
        auto gy = t.out_grad(self);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i] * mask[i];
      },
      "dropout");
}

// Global response normalization over tokens: x[N, D], gamma/beta [D].
// y = gamma * (x * Nx) + beta + x with Nx = ||x_d|| / (mean_d ||x_d|| + 1e-6).
template <Real T>
Var<T> grn(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta) {
  if (x.shape().size() != 2) throw ShapeError("grn: expects [N, D]");
  const auto n = x.shape()[0], d = x.shape()[1];
  if (gamma.numel() != d || beta.numel() != d) throw ShapeError("grn: gamma/beta size mismatch");
  const auto& xv = x.value();
  std::vector<T> g(d, T{0});
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t k = 0; k < d; ++k) g[k] += xv[r * d + k] * xv[r * d + k];
  T mean{0};
  for (auto& v : g) {
    v = std::sqrt(v);
    mean += v;
  }
  mean /= static_cast<T>(d);
  const T denom = mean + static_cast<T>(1e-6);
  std::vector<T> nx(d);
  for (std::size_t k = 0; k < d; ++k) nx[k] = g[k] / denom;
  Tensor<T> out(x.shape());
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t k = 0; k < d; ++k) {
      const T v = xv[r * d + k];
      out[r * d + k] = gv[k] * v * nx[k] + bv[k] + v;
    }
  const auto xi = x.id, gi = gamma.id, bi = beta.id;
  return x.tape->record(
      std::move(out), {x, gamma, beta},
      [=, g = std::move(g), nx = std::move(nx)](Tape<T>& t, std::size_t self) {
        auto gy = t.out_grad(self);
        const auto& xv = t.value(xi);
        const auto& gv = t.value(gi);
        auto ggam = t.grad_buffer(gi);
        auto gbet = t.grad_buffer(bi);
        std::vector<T> u(d, T{0});
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t k = 0; k < d; ++k) {
            const T gyv = gy[r * d + k], v = xv[r * d + k];
            u[k] += gyv * gv[k] * v;
            if (!ggam.empty()) ggam[k] += gyv * v * nx[k];
            if (!gbet.empty()) gbet[k] += gyv;
          }
        auto gx = t.grad_buffer(xi);
        if (gx.empty()) return;
        T ug{0};
        for (std::size_t k = 0; k < d; ++k) ug += u[k] * g[k];
        std::vector<T> dg(d);
        for (std::size_t k = 0; k < d; ++k)
          dg[k] = u[k] / denom - ug / (static_cast<T>(d) * denom * denom);
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t k = 0; k < d; ++k) {
            const std::size_t i = r * d + k;
            gx[i] += gy[i] * (T{1} + gv[k] * nx[k]);
            if (g[k] > 0) gx[i] += dg[k] * xv[i] / g[k];
          }
      },
      "grn");
}

// ---------------------------------------------------------------------------
// Reductions and losses.

template <Real T>
Var<T> sum(const Var<T>& x) {
  T s{0};
  for (auto v : x.value().data()) s += v;
  const auto xi = x.id;
  return x.tape->record(
      Tensor<T>::scalar(s), {x},
      [xi](Tape<T>& t, std::size_t self) {
        auto gx = t.grad_buffer(xi);
        const T g = t.out_grad(self)[0];
        for (auto& v : gx) v += g;
      },
      "sum");
}

template <Real T>
Var<T> mean(const Var<T>& x) {
  return scale(sum(x), T{1} / static_cast<T>(x.numel()));
}

// Single element x[index] as a one-element tensor.
template <Real T>
Var<T> select(const Var<T>& x, std::size_t index) {
  if (index >= x.numel()) throw ShapeError("select: index out of range");
  const auto xi = x.id;
  return x.tape->record(
      Tensor<T>::scalar(x.value()[index]), {x},
      [xi, index](Tape<T>& t, std::size_t self) { t.grad_buffer(xi)[index] += t.out_grad(self)[0]; }, "select");
}

// Mean over the batch of -log softmax(logits)[label]. logits: [B, K].
template <Real T>
Var<T> cross_entropy(const Var<T>& logits, const std::vector<std::size_t>& labels) {
  if (logits.shape().size() != 2) throw ShapeError("cross_entropy: logits must be [B, K]");
  const auto b = logits.shape()[0], k = logits.shape()[1];
  if (labels.size() != b) throw ShapeError("cross_entropy: label count mismatch");
  for (auto l : labels)
    if (l >= k) throw ValueError("cross_entropy: label " + std::to_string(l) + " out of range");
  const auto& z = logits.value();
  std::vector<T> probs(b * k);
  T loss{0};
  for (std::size_t r = 0; r < b; ++r) {
    const T* row = z.ptr() + r * k;
    T mx = row[0];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    T s{0};
    for (std::size_t j = 0; j < k; ++j) s += std::exp(row[j] - mx);
    const T lse = mx + std::log(s);
    loss += lse - row[labels[r]];
    for (std::size_t j = 0; j < k; ++j) probs[r * k + j] = std::exp(row[j] - lse);
  }
  loss /= static_cast<T>(b);
  const auto li = logits.id;
  return logits.tape->record(
      Tensor<T>::scalar(loss), {logits},
      [li, b, k, labels, probs = std::move(probs)](Tape<T>& t, std::size_t self) {
        auto gx = t.grad_buffer(li);
        const T g = t.out_grad(self)[0] / static_cast<T>(b);
        for (std::size_t r = 0; r < b; ++r)
          for (std::size_t j = 0; j < k; ++j)
            gx[r * k + j] += g * (probs[r * k + j] - (j == labels[r] ? T{1} : T{0}));
      },
      "cross_entropy");
}

// Plain-tensor softmax over a vector, used outside the tape.
template <Real T>
std::vector<T> softmax_values(std::span<const T> z) {
  std::vector<T> out(z.size());
  if (z.empty()) return out;
  const T mx = *std::max_element(z.begin(), z.end());
  T s{0};
  for (std::size_t i = 0; i < z.size(); ++i) s += (out[i] = std::exp(z[i] - mx));
  for (auto& v : out) v /= s;
  return out;
}

}  // namespace conmat
