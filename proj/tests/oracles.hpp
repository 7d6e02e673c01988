#pragma once

// Test-only reference implementations. These stay deliberately naive and
// independent of the BLAS-backed library path they are used to check.

#include <cmath>
#include <vector>

#include "g2c/random.hpp"
#include "g2c/tensor.hpp"

namespace g2c::test {

// Direct quadruple-loop convolution sum.
inline Tensor naive_conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride,
                           int pad) {
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int k = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const int h2 = (h + 2 * pad - kh) / stride + 1;
  const int w2 = (wd + 2 * pad - kw) / stride + 1;
  Tensor y({n, k, h2, w2});
  auto* out = y.mut();
  for (int in = 0; in < n; ++in)
    for (int ik = 0; ik < k; ++ik)
      for (int oh = 0; oh < h2; ++oh)
        for (int ow = 0; ow < w2; ++ow) {
          double acc = b[ik];
          for (int ic = 0; ic < c; ++ic)
            for (int i = 0; i < kh; ++i)
              for (int j = 0; j < kw; ++j) {
                const int ih = oh * stride - pad + i;
                const int iw = ow * stride - pad + j;
                if (ih < 0 || ih >= h || iw < 0 || iw >= wd) continue;
                acc += static_cast<double>(x[((static_cast<std::int64_t>(in) * c + ic) * h + ih) * wd + iw]) *
                       w[((static_cast<std::int64_t>(ik) * c + ic) * kh + i) * kw + j];
              }
          (*out)[((static_cast<std::size_t>(in) * k + ik) * h2 + oh) * w2 + ow] =
              static_cast<float>(acc);
        }
  return y;
}

// Adjoint-of-convolution by its defining scatter: every input pixel spreads a
// copy of the kernel into the output.
inline Tensor naive_conv2d_transpose(const Tensor& x, const Tensor& w, const Tensor& b, int stride,
                                     int pad) {
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int k = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  const int h2 = (h - 1) * stride - 2 * pad + kh;
  const int w2 = (wd - 1) * stride - 2 * pad + kw;
  Tensor y({n, k, h2, w2});
  auto* out = y.mut();
  for (int in = 0; in < n; ++in) {
    for (int ik = 0; ik < k; ++ik)
      for (int q = 0; q < h2 * w2; ++q)
        (*out)[(static_cast<std::size_t>(in) * k + ik) * h2 * w2 + q] = b[ik];
    for (int ic = 0; ic < c; ++ic)
      for (int ih = 0; ih < h; ++ih)
        for (int iw = 0; iw < wd; ++iw) {
          const float v = x[((static_cast<std::int64_t>(in) * c + ic) * h + ih) * wd + iw];
          for (int ik = 0; ik < k; ++ik)
            for (int i = 0; i < kh; ++i)
              for (int j = 0; j < kw; ++j) {
                const int oh = ih * stride - pad + i;
                const int ow = iw * stride - pad + j;
                if (oh < 0 || oh >= h2 || ow < 0 || ow >= w2) continue;
                (*out)[((static_cast<std::size_t>(in) * k + ik) * h2 + oh) * w2 + ow] +=
                    v * w[((static_cast<std::int64_t>(ic) * k + ik) * kh + i) * kw + j];
              }
        }
  }
  return y;
}

inline double dot(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) s += static_cast<double>(a[i]) * b[i];
  return s;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i)
    m = std::max(m, std::fabs(static_cast<double>(a[i]) - b[i]));
  return m;
}

inline Tensor random_tensor(std::vector<int> shape, Rng& rng, float lo = -1.0f, float hi = 1.0f) {
  Tensor t(std::move(shape));
  for (float& v : *t.mut()) v = static_cast<float>(rng.uniform(lo, hi));
  return t;
}

}  // namespace g2c::test
