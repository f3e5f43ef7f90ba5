#pragma once

#include <cstddef>

namespace conmat::kernels {

// Row-major GEMM variants: C (+)= op(A) * op(B), C is m x n, inner size k.
// Summation order is fixed so results are reproducible.

// A: m x k, B: k x n
template <typename T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c, bool accumulate) {
  if (!accumulate)
    for (std::size_t i = 0; i < m * n; ++i) c[i] = T{0};
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      if (av == T{0}) continue;
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// A: m x k, B: n x k (B transposed)
template <typename T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const T* brow = b + j * k;
      T acc{0};
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      if (accumulate) c[i * n + j] += acc;
      else c[i * n + j] = acc;
    }
  }
}

// A: k x m (A transposed), B: k x n
template <typename T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c, bool accumulate) {
  if (!accumulate)
    for (std::size_t i = 0; i < m * n; ++i) c[i] = T{0};
  for (std::size_t p = 0; p < k; ++p) {
    const T* arow = a + p * m;
    const T* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T av = arow[i];
      if (av == T{0}) continue;
      T* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// Unfolds one group of a [C x H x W] image into a [C_g*kh*kw x Ho*Wo] matrix.
template <typename T>
void im2col(const T* x, std::size_t channels, std::size_t h, std::size_t w, std::size_t kh, std::size_t kw,
            std::size_t stride, std::size_t pad, std::size_t ho, std::size_t wo, T* cols) {
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t ky = 0; ky < kh; ++ky)
      for (std::size_t kx = 0; kx < kw; ++kx) {
        T* row = cols + ((c * kh + ky) * kw + kx) * ho * wo;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
            row[oy * wo + ox] = (iy >= 0 && iy < static_cast<long>(h) && ix >= 0 && ix < static_cast<long>(w))
                                    ? x[(c * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)]
                                    : T{0};
          }
        }
      }
}

template <typename T>
void col2im(const T* cols, std::size_t channels, std::size_t h, std::size_t w, std::size_t kh, std::size_t kw,
            std::size_t stride, std::size_t pad, std::size_t ho, std::size_t wo, T* dx) {
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t ky = 0; ky < kh; ++ky)
      for (std::size_t kx = 0; kx < kw; ++kx) {
        const T* row = cols + ((c * kh + ky) * kw + kx) * ho * wo;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
          if (iy < 0 || iy >= static_cast<long>(h)) continue;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
            if (ix < 0 || ix >= static_cast<long>(w)) continue;
            dx[(c * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)] += row[oy * wo + ox];
          }
        }
      }
}

}  // namespace conmat::kernels
