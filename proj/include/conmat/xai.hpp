#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "conmat/image.hpp"
#include "conmat/model.hpp"

namespace conmat {

enum class XaiMethod { gradcam, gradcampp, lime };

inline const char* xai_method_name(XaiMethod m) {
  switch (m) {
    case XaiMethod::gradcam: return "gradcam";
    case XaiMethod::gradcampp: return "gradcampp";
    default: return "lime";
  }
}

inline XaiMethod parse_xai_method(const std::string& s) {
  if (s == "gradcam") return XaiMethod::gradcam;
  if (s == "gradcampp") return XaiMethod::gradcampp;
  if (s == "lime") return XaiMethod::lime;
  throw ConfigError("unknown explanation method '" + s + "' (gradcam, gradcampp, lime)");
}

struct Saliency {
  Tensor<double> map;        // [Hf, Wf], before normalization
  Tensor<double> upsampled;  // [H, W], min-max normalized to [0, 1]
  std::size_t target_class = 0;
  XaiMethod method = XaiMethod::gradcam;
};

// ReLU(sum_k alpha_k A_k) with alpha_k the spatial mean of dy/dA_k.
inline Tensor<double> grad_cam_from(const Tensor<double>& A, const Tensor<double>& G) {
  if (A.rank() != 3) throw ShapeError("grad-cam: tap layer has no spatial extent (" + shape_str(A.shape()) + ")");
  if (G.shape() != A.shape()) throw ShapeError("grad-cam: gradient shape mismatch");
  const auto c = A.dim(0), hw = A.dim(1) * A.dim(2);
  Tensor<double> map({A.dim(1), A.dim(2)});
  for (std::size_t k = 0; k < c; ++k) {
    double alpha = 0;
    for (std::size_t i = 0; i < hw; ++i) alpha += G[k * hw + i];
    alpha /= static_cast<double>(hw);
    if (alpha == 0) continue;
    for (std::size_t i = 0; i < hw; ++i) map[i] += alpha * A[k * hw + i];
  }
  for (auto& v : map.data()) v = std::max(v, 0.0);
  return map;
}

// Grad-CAM++ with the exponential outer derivative: the higher-order terms
// reduce to powers of G, and the positive exp(y) scale on the weights is
// dropped since maps are normalized afterwards.
inline Tensor<double> grad_cam_pp_from(const Tensor<double>& A, const Tensor<double>& G) {
  if (A.rank() != 3) throw ShapeError("grad-cam++: tap layer has no spatial extent (" + shape_str(A.shape()) + ")");
  if (G.shape() != A.shape()) throw ShapeError("grad-cam++: gradient shape mismatch");
  const auto c = A.dim(0), hw = A.dim(1) * A.dim(2);
  Tensor<double> map({A.dim(1), A.dim(2)});
  for (std::size_t k = 0; k < c; ++k) {
    double a_sum = 0;
    for (std::size_t i = 0; i < hw; ++i) a_sum += A[k * hw + i];
    double w = 0;
    for (std::size_t i = 0; i < hw; ++i) {
      const double g = G[k * hw + i], g2 = g * g, g3 = g2 * g;
      const double denom = 2 * g2 + a_sum * g3;
      const double alpha = denom != 0 ? g2 / denom : 0.0;
      w += alpha * std::max(g, 0.0);
    }
    if (w == 0) continue;
    for (std::size_t i = 0; i < hw; ++i) map[i] += w * A[k * hw + i];
  }
  for (auto& v : map.data()) v = std::max(v, 0.0);
  return map;
}

// Min-max to [0, 1]; a constant map becomes all zeros.
inline Tensor<double> normalize01(Tensor<double> m) {
  if (m.numel() == 0) return m;
  const auto [lo, hi] = std::minmax_element(m.data().begin(), m.data().end());
  const double a = *lo, span = *hi - *lo;
  for (auto& v : m.data()) v = span > 0 ? (v - a) / span : 0.0;
  return m;
}

inline Tensor<double> upsample_map(const Tensor<double>& m, std::size_t h, std::size_t w) {
  Image one({1, m.dim(0), m.dim(1)});
  for (std::size_t i = 0; i < m.numel(); ++i) one[i] = static_cast<float>(m[i]);
  auto up = resize_bilinear(one, h, w);
  Tensor<double> out({h, w});
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = up[i];
  return out;
}

// Gradient saliency of logit `target` w.r.t. the named tap. Parameter
// gradients stay on the local tape, so the model is not touched.
template <Real T>
Saliency gradient_saliency(ConMatFormer<T>& model, const Tensor<T>& image, std::size_t target, XaiMethod method,
                           const std::string& tap_name = "stage4") {
  if (method == XaiMethod::lime) throw ConfigError("gradient_saliency: lime is not a gradient method");
  if (target >= model.config().num_classes) throw ValueError("explain: class " + std::to_string(target) + " out of range");
  Tape<T> tape(true, true);
  Context<T> ctx{tape, false};
  Taps<T> taps;
  auto x = tape.leaf(image);
  auto z = model.forward_one(ctx, x, &taps);
  const auto& a = find_tap(taps, tap_name);
  tape.backward(select(z, target));
  const auto A = a.value().template cast<double>();
  const auto G = tape.grad(a).template cast<double>();
  Saliency s;
  s.target_class = target;
  s.method = method;
  s.map = method == XaiMethod::gradcam ? grad_cam_from(A, G) : grad_cam_pp_from(A, G);
  s.upsampled = normalize01(upsample_map(s.map, image.dim(1), image.dim(2)));
  return s;
}

// ---------------------------------------------------------------------------
// LIME

struct Segmentation {
  std::size_t height = 0, width = 0, count = 0;
  std::vector<std::size_t> labels;  // row-major, one per pixel

  std::size_t at(std::size_t i, std::size_t j) const { return labels[i * width + j]; }
};

// k x k grid; cell (r, c) is segment r * k + c.
inline Segmentation segment_grid(std::size_t height, std::size_t width, std::size_t k) {
  if (k == 0) throw ConfigError("segment_grid: k must be >= 1");
  if (k > height || k > width) throw ConfigError("segment_grid: more cells than pixels along an axis");
  Segmentation s{height, width, k * k, std::vector<std::size_t>(height * width)};
  for (std::size_t i = 0; i < height; ++i)
    for (std::size_t j = 0; j < width; ++j) s.labels[i * width + j] = (i * k / height) * k + (j * k / width);
  return s;
}

struct LinearFit {
  std::vector<double> coef;
  double intercept = 0;
  double r2 = 0;
};

// Solves A x = b in place (Gaussian elimination, partial pivoting).
inline std::vector<double> solve_linear(std::vector<std::vector<double>> a, std::vector<double> b) {
  const auto n = b.size();
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < n; ++r)
      if (std::abs(a[r][c]) > std::abs(a[piv][c])) piv = r;
    if (std::abs(a[piv][c]) < 1e-300) throw NumericError("lime: singular normal equations");
    std::swap(a[c], a[piv]);
    std::swap(b[c], b[piv]);
    for (std::size_t r = c + 1; r < n; ++r) {
      const double f = a[r][c] / a[c][c];
      if (f == 0) continue;
      for (std::size_t k = c; k < n; ++k) a[r][k] -= f * a[c][k];
      b[r] -= f * b[c];
    }
  }
  std::vector<double> x(n);
  for (std::size_t i = n; i-- > 0;) {
    double s = b[i];
    for (std::size_t k = i + 1; k < n; ++k) s -= a[i][k] * x[k];
    x[i] = s / a[i][i];
  }
  return x;
}

// Weighted ridge: min sum_i w_i (y_i - b - z_i.c)^2 + lambda |c|^2. The
// intercept is not penalized.
inline LinearFit weighted_ridge(const std::vector<std::vector<double>>& Z, const std::vector<double>& y,
                                const std::vector<double>& w, double lambda) {
  if (Z.empty() || Z.size() != y.size() || y.size() != w.size()) throw ValueError("ridge: size mismatch");
  if (lambda < 0) throw ConfigError("ridge: lambda must be non-negative");
  const auto m = Z.front().size(), d = m + 1;
  std::vector<std::vector<double>> A(d, std::vector<double>(d, 0.0));
  std::vector<double> rhs(d, 0.0);
  std::vector<double> row(d);
  for (std::size_t i = 0; i < Z.size(); ++i) {
    row[0] = 1;
    std::copy(Z[i].begin(), Z[i].end(), row.begin() + 1);
    for (std::size_t a = 0; a < d; ++a) {
      rhs[a] += w[i] * row[a] * y[i];
      for (std::size_t b = 0; b < d; ++b) A[a][b] += w[i] * row[a] * row[b];
    }
  }
  for (std::size_t a = 1; a < d; ++a) A[a][a] += lambda;
  const auto x = solve_linear(A, rhs);
  LinearFit fit;
  fit.intercept = x[0];
  fit.coef.assign(x.begin() + 1, x.end());
  double sw = 0, ybar = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    sw += w[i];
    ybar += w[i] * y[i];
  }
  ybar /= sw;
  double ss_res = 0, ss_tot = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    double pred = fit.intercept;
    for (std::size_t k = 0; k < m; ++k) pred += fit.coef[k] * Z[i][k];
    ss_res += w[i] * (y[i] - pred) * (y[i] - pred);
    ss_tot += w[i] * (y[i] - ybar) * (y[i] - ybar);
  }
  fit.r2 = ss_tot > 0 ? 1 - ss_res / ss_tot : (ss_res < 1e-24 ? 1.0 : 0.0);
  return fit;
}

struct LimeConfig {
  std::size_t grid = 7;
  std::size_t samples = 500;
  double kernel_width = 0.25;
  double lambda = 1e-3;
  std::size_t top_segments = 5;
};

// Cosine distance between a mask and the all-ones mask; the empty mask is 1.
inline double lime_distance(const std::vector<double>& z) {
  const double on = std::accumulate(z.begin(), z.end(), 0.0);
  if (on == 0) return 1.0;
  return 1.0 - on / (std::sqrt(on) * std::sqrt(static_cast<double>(z.size())));
}

// Draws masks (the first keeps every segment), scores them with f and fits
// the local surrogate. f is evaluated for all masks before the fit; callers
// may evaluate in parallel.
inline LinearFit lime_fit(std::size_t segments,
                          const std::function<std::vector<double>(const std::vector<std::vector<double>>&)>& f,
                          std::size_t n_samples, double kernel_width, double lambda, Rng& rng) {
  if (segments == 0) throw ConfigError("lime: no segments");
  if (n_samples < segments + 1) throw ConfigError("lime: need at least segments + 1 samples");
  if (!(kernel_width > 0)) throw ConfigError("lime: kernel width must be positive");
  std::vector<std::vector<double>> Z(n_samples, std::vector<double>(segments, 1.0));
  for (std::size_t i = 1; i < n_samples; ++i)
    for (auto& v : Z[i]) v = rng.bernoulli(0.5) ? 1.0 : 0.0;
  const auto y = f(Z);
  if (y.size() != n_samples) throw ValueError("lime: black box returned wrong number of scores");
  std::vector<double> w(n_samples);
  for (std::size_t i = 0; i < n_samples; ++i) {
    const double d = lime_distance(Z[i]);
    w[i] = std::exp(-d * d / (kernel_width * kernel_width));
  }
  return weighted_ridge(Z, y, w, lambda);
}

struct LimeExplanation {
  Segmentation segments;
  std::vector<double> coefficients;
  double intercept = 0;
  double fit_r2 = 0;
  std::size_t target_class = 0;
};

// Segments switched off take the per-channel image mean.
inline Image lime_perturb(const Image& img, const Segmentation& seg, const std::vector<double>& z,
                          const std::vector<float>& fill) {
  Image out = img;
  const auto hw = seg.height * seg.width;
  for (std::size_t p = 0; p < hw; ++p)
    if (z[seg.labels[p]] == 0.0)
      for (std::size_t c = 0; c < img.dim(0); ++c) out[c * hw + p] = fill[c];
  return out;
}

inline std::vector<float> channel_means(const Image& img) {
  const auto hw = img.dim(1) * img.dim(2);
  std::vector<float> m(img.dim(0));
  for (std::size_t c = 0; c < img.dim(0); ++c) {
    double s = 0;
    for (std::size_t p = 0; p < hw; ++p) s += img[c * hw + p];
    m[c] = static_cast<float>(s / static_cast<double>(hw));
  }
  return m;
}

// Black box score: softmax probability of the target class.
template <Real T>
LimeExplanation lime_explain(ConMatFormer<T>& model, const Image& image, std::size_t target, const LimeConfig& cfg,
                             std::uint64_t seed) {
  if (target >= model.config().num_classes) throw ValueError("explain: class " + std::to_string(target) + " out of range");
  LimeExplanation ex;
  ex.target_class = target;
  ex.segments = segment_grid(image.dim(1), image.dim(2), cfg.grid);
  const auto fill = channel_means(image);
  auto score = [&](const std::vector<std::vector<double>>& Z) {
    std::vector<double> y(Z.size());
    parallel_for(Z.size(), [&](std::size_t i) {
      auto img = lime_perturb(image, ex.segments, Z[i], fill);
      std::vector<T> z;
      if constexpr (std::is_same_v<T, float>) z = predict_logits(model, img);
      else z = predict_logits(model, img.template cast<T>());
      y[i] = static_cast<double>(softmax_values<T>(z)[target]);
    });
    return y;
  };
  Rng rng(seed);
  auto fit = lime_fit(ex.segments.count, score, cfg.samples, cfg.kernel_width, cfg.lambda, rng);
  ex.coefficients = std::move(fit.coef);
  ex.intercept = fit.intercept;
  ex.fit_r2 = fit.r2;
  return ex;
}

// Saliency from the top-q positive segments, weighted by coefficient.
inline Tensor<double> lime_saliency(const LimeExplanation& ex, std::size_t top_q) {
  std::vector<std::size_t> order(ex.coefficients.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](auto a, auto b) { return ex.coefficients[a] > ex.coefficients[b]; });
  std::vector<double> weight(order.size(), 0.0);
  const double top = order.empty() ? 0.0 : ex.coefficients[order[0]];
  for (std::size_t r = 0; r < std::min(top_q, order.size()); ++r) {
    const double c = ex.coefficients[order[r]];
    if (c <= 0 || top <= 0) break;
    weight[order[r]] = c / top;
  }
  Tensor<double> m({ex.segments.height, ex.segments.width});
  for (std::size_t p = 0; p < m.numel(); ++p) m[p] = weight[ex.segments.labels[p]];
  return m;
}

// ---------------------------------------------------------------------------
// Rendering

inline std::array<float, 3> jet(double v) {
  v = std::clamp(v, 0.0, 1.0);
  auto ch = [&](double center) { return static_cast<float>(std::clamp(1.5 - std::abs(4 * v - center), 0.0, 1.0)); };
  return {ch(3), ch(2), ch(1)};
}

inline constexpr double kOverlayAlpha = 0.4;

// Per pixel: (1 - a s) * image + a s * jet(s), a = 0.4. Zero saliency
// leaves the input untouched.
inline Image render_overlay(const Image& img, const Tensor<double>& sal, double alpha = kOverlayAlpha) {
  if (img.rank() != 3 || img.dim(0) != 3) throw ShapeError("overlay: image must be [3,H,W]");
  if (sal.shape() != Shape{img.dim(1), img.dim(2)}) throw ShapeError("overlay: saliency size differs from image");
  Image out = img;
  const auto hw = img.dim(1) * img.dim(2);
  for (std::size_t p = 0; p < hw; ++p) {
    const double s = std::clamp(sal[p], 0.0, 1.0);
    if (s == 0) continue;
    const auto col = jet(s);
    const double a = alpha * s;
    for (std::size_t c = 0; c < 3; ++c)
      out[c * hw + p] = static_cast<float>((1 - a) * img[c * hw + p] + a * col[c]);
  }
  return out;
}

}  // namespace conmat
