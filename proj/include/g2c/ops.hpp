#pragma once

// Neural-network primitives over Tensor with reverse-mode rules.
//
// Convolutions and dense layers lower to im2col + cblas_sgemm; everything else
// is written out directly. Hand-written reductions accumulate in double.
// Every op takes an optional Tape*; a node is recorded only when at least one
// input is live on that tape, so frozen parameter sets cost nothing.

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

#include "g2c/tensor.hpp"

extern "C" void openblas_set_num_threads(int);

namespace g2c {

namespace detail {

// Single-threaded BLAS keeps full runs bitwise reproducible on any host.
inline void blas_single_thread() {
  static const bool done = [] {
    openblas_set_num_threads(1);
    return true;
  }();
  (void)done;
}

inline void sgemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha, const float* a,
                  int lda, const float* b, int ldb, float beta, float* c, int ldc) {
  blas_single_thread();
  cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

inline std::vector<float>& scratch(int slot) {
  thread_local std::vector<float> bufs[4];
  return bufs[slot];
}

// Sliding-window geometry shared by both convolution directions.
// col has one row per (c, i, j) kernel tap and one column per grid cell
// (hg, wg); the tap (c, i, j) at cell (hg, wg) addresses image pixel
// (c, hg*stride - pad + i, wg*stride - pad + j). Out-of-image taps read zero.
inline void im2col(const float* img, int channels, int img_h, int img_w, int kh, int kw,
                   int stride, int pad, int grid_h, int grid_w, float* col) {
  const int cols = grid_h * grid_w;
  for (int c = 0; c < channels; ++c) {
    for (int i = 0; i < kh; ++i) {
      for (int j = 0; j < kw; ++j) {
        float* row = col + ((c * kh + i) * kw + j) * static_cast<std::ptrdiff_t>(cols);
        for (int hg = 0; hg < grid_h; ++hg) {
          const int ih = hg * stride - pad + i;
          float* dst = row + hg * grid_w;
          if (ih < 0 || ih >= img_h) {
            std::memset(dst, 0, sizeof(float) * static_cast<std::size_t>(grid_w));
            continue;
          }
          const float* src = img + (c * img_h + ih) * static_cast<std::ptrdiff_t>(img_w);
          for (int wg = 0; wg < grid_w; ++wg) {
            const int iw = wg * stride - pad + j;
            dst[wg] = (iw >= 0 && iw < img_w) ? src[iw] : 0.0f;
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatter-adds col entries back into the image.
inline void col2im_add(const float* col, int channels, int img_h, int img_w, int kh, int kw,
                       int stride, int pad, int grid_h, int grid_w, float* img) {
  const int cols = grid_h * grid_w;
  for (int c = 0; c < channels; ++c) {
    for (int i = 0; i < kh; ++i) {
      for (int j = 0; j < kw; ++j) {
        const float* row = col + ((c * kh + i) * kw + j) * static_cast<std::ptrdiff_t>(cols);
        for (int hg = 0; hg < grid_h; ++hg) {
          const int ih = hg * stride - pad + i;
          if (ih < 0 || ih >= img_h) continue;
          float* dst = img + (c * img_h + ih) * static_cast<std::ptrdiff_t>(img_w);
          const float* src = row + hg * grid_w;
          for (int wg = 0; wg < grid_w; ++wg) {
            const int iw = wg * stride - pad + j;
            if (iw >= 0 && iw < img_w) dst[iw] += src[wg];
          }
        }
      }
    }
  }
}

inline bool any_live(Tape* tape, std::initializer_list<const Tensor*> ts) {
  if (!tape) return false;
  for (const Tensor* t : ts)
    if (tape->on_tape(*t)) return true;
  return false;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Convolution family
// ---------------------------------------------------------------------------

inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int padding,
                     Tape* tape = nullptr) {
  check_arg(x.rank() == 4, "conv2d input must be NCHW, got " + shape_str(x.shape()));
  check_arg(w.rank() == 4, "conv2d weight must be [K,C,kh,kw], got " + shape_str(w.shape()));
  check_arg(stride >= 1 && padding >= 0, "conv2d stride must be >=1 and padding >=0");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), wdt = x.dim(3);
  const int k = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  check_arg(w.dim(1) == c, "conv2d channel mismatch: input " + shape_str(x.shape()) +
                               " vs weight " + shape_str(w.shape()));
  check_arg(b.rank() == 1 && b.dim(0) == k,
            "conv2d bias must be [" + std::to_string(k) + "], got " + shape_str(b.shape()));
  check_arg(kh <= h + 2 * padding && kw <= wdt + 2 * padding,
            "conv2d kernel larger than padded input");
  const int h2 = (h + 2 * padding - kh) / stride + 1;
  const int w2 = (wdt + 2 * padding - kw) / stride + 1;
  const int ckk = c * kh * kw;
  const int cells = h2 * w2;

  Tensor y({n, k, h2, w2});
  float* out = y.mut()->data();
  auto& col = detail::scratch(0);
  col.resize(static_cast<std::size_t>(ckk) * cells);
  for (int i = 0; i < n; ++i) {
    detail::im2col(x.data() + static_cast<std::ptrdiff_t>(i) * c * h * wdt, c, h, wdt, kh, kw,
                   stride, padding, h2, w2, col.data());
    float* yi = out + static_cast<std::ptrdiff_t>(i) * k * cells;
    detail::sgemm(false, false, k, cells, ckk, 1.0f, w.data(), ckk, col.data(), cells, 0.0f, yi,
                  cells);
    for (int kk = 0; kk < k; ++kk) {
      const float bv = b[kk];
      float* row = yi + static_cast<std::ptrdiff_t>(kk) * cells;
      for (int p = 0; p < cells; ++p) row[p] += bv;
    }
  }
  assert_finite(y, "conv2d");

  if (detail::any_live(tape, {&x, &w, &b})) {
    const TapeId xid = tape->id_of(x), wid = tape->id_of(w), bid = tape->id_of(b);
    Tensor xc = x, wc = w;
    tape->record(
        "conv2d", {xid, wid, bid}, y,
        [=](Tape& t, std::span<const float> g) {
          auto& colb = detail::scratch(1);
          colb.resize(static_cast<std::size_t>(ckk) * cells);
          float* gx = (xid != kOffTape) ? t.grad_buffer(xid).data() : nullptr;
          float* gw = (wid != kOffTape) ? t.grad_buffer(wid).data() : nullptr;
          float* gb = (bid != kOffTape) ? t.grad_buffer(bid).data() : nullptr;
          for (int i = 0; i < n; ++i) {
            const float* gi = g.data() + static_cast<std::ptrdiff_t>(i) * k * cells;
            if (gx) {
              detail::sgemm(true, false, ckk, cells, k, 1.0f, wc.data(), ckk, gi, cells, 0.0f,
                            colb.data(), cells);
              detail::col2im_add(colb.data(), c, h, wdt, kh, kw, stride, padding, h2, w2,
                                 gx + static_cast<std::ptrdiff_t>(i) * c * h * wdt);
            }
            if (gw) {
              detail::im2col(xc.data() + static_cast<std::ptrdiff_t>(i) * c * h * wdt, c, h, wdt,
                             kh, kw, stride, padding, h2, w2, colb.data());
              detail::sgemm(false, true, k, ckk, cells, 1.0f, gi, cells, colb.data(), cells, 1.0f,
                            gw, ckk);
            }
            if (gb) {
              for (int kk = 0; kk < k; ++kk) {
                double s = 0.0;
                const float* row = gi + static_cast<std::ptrdiff_t>(kk) * cells;
                for (int p = 0; p < cells; ++p) s += row[p];
                gb[kk] += static_cast<float>(s);
              }
            }
          }
        });
  }
  return y;
}

inline Tensor conv2d_transpose(const Tensor& x, const Tensor& w, const Tensor& b, int stride,
                               int padding, Tape* tape = nullptr) {
  check_arg(x.rank() == 4, "conv2d_transpose input must be NCHW, got " + shape_str(x.shape()));
  check_arg(w.rank() == 4, "conv2d_transpose weight must be [C,K,kh,kw], got " + shape_str(w.shape()));
  check_arg(stride >= 1 && padding >= 0, "conv2d_transpose stride must be >=1 and padding >=0");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), wdt = x.dim(3);
  const int k = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  check_arg(w.dim(0) == c, "conv2d_transpose channel mismatch: input " + shape_str(x.shape()) +
                               " vs weight " + shape_str(w.shape()));
  check_arg(b.rank() == 1 && b.dim(0) == k,
            "conv2d_transpose bias must be [" + std::to_string(k) + "], got " + shape_str(b.shape()));
  const int h2 = (h - 1) * stride - 2 * padding + kh;
  const int w2 = (wdt - 1) * stride - 2 * padding + kw;
  check_arg(h2 >= 1 && w2 >= 1, "conv2d_transpose output would be empty");
  const int kkk = k * kh * kw;
  const int cells = h * wdt;

  Tensor y({n, k, h2, w2});
  float* out = y.mut()->data();
  auto& col = detail::scratch(0);
  col.resize(static_cast<std::size_t>(kkk) * cells);
  for (int i = 0; i < n; ++i) {
    const float* xi = x.data() + static_cast<std::ptrdiff_t>(i) * c * cells;
    detail::sgemm(true, false, kkk, cells, c, 1.0f, w.data(), kkk, xi, cells, 0.0f, col.data(),
                  cells);
    float* yi = out + static_cast<std::ptrdiff_t>(i) * k * h2 * w2;
    detail::col2im_add(col.data(), k, h2, w2, kh, kw, stride, padding, h, wdt, yi);
    for (int kk = 0; kk < k; ++kk) {
      const float bv = b[kk];
      float* row = yi + static_cast<std::ptrdiff_t>(kk) * h2 * w2;
      for (int p = 0; p < h2 * w2; ++p) row[p] += bv;
    }
  }
  assert_finite(y, "conv2d_transpose");

  if (detail::any_live(tape, {&x, &w, &b})) {
    const TapeId xid = tape->id_of(x), wid = tape->id_of(w), bid = tape->id_of(b);
    Tensor xc = x, wc = w;
    tape->record(
        "conv2d_transpose", {xid, wid, bid}, y,
        [=](Tape& t, std::span<const float> g) {
          auto& colb = detail::scratch(1);
          colb.resize(static_cast<std::size_t>(kkk) * cells);
          float* gx = (xid != kOffTape) ? t.grad_buffer(xid).data() : nullptr;
          float* gw = (wid != kOffTape) ? t.grad_buffer(wid).data() : nullptr;
          float* gb = (bid != kOffTape) ? t.grad_buffer(bid).data() : nullptr;
          for (int i = 0; i < n; ++i) {
            const float* gi = g.data() + static_cast<std::ptrdiff_t>(i) * k * h2 * w2;
            if (gx || gw)
              detail::im2col(gi, k, h2, w2, kh, kw, stride, padding, h, wdt, colb.data());
            if (gx)
              detail::sgemm(false, false, c, cells, kkk, 1.0f, wc.data(), kkk, colb.data(), cells,
                            1.0f, gx + static_cast<std::ptrdiff_t>(i) * c * cells, cells);
            if (gw)
              detail::sgemm(false, true, c, kkk, cells, 1.0f,
                            xc.data() + static_cast<std::ptrdiff_t>(i) * c * cells, cells,
                            colb.data(), cells, 1.0f, gw, kkk);
            if (gb) {
              for (int kk = 0; kk < k; ++kk) {
                double s = 0.0;
                const float* row = gi + static_cast<std::ptrdiff_t>(kk) * h2 * w2;
                for (int p = 0; p < h2 * w2; ++p) s += row[p];
                gb[kk] += static_cast<float>(s);
              }
            }
          }
        });
  }
  return y;
}

inline Tensor reflect_pad2d(const Tensor& x, int pad, Tape* tape = nullptr) {
  check_arg(x.rank() == 4, "reflect_pad2d input must be NCHW");
  check_arg(pad >= 1, "reflect_pad2d pad must be >= 1");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  check_arg(pad <= h - 1 && pad <= w - 1, "reflect_pad2d pad exceeds input size - 1");
  const int h2 = h + 2 * pad, w2 = w + 2 * pad;
  auto mirror = [](int i, int size) {
    if (i < 0) i = -i;
    if (i >= size) i = 2 * size - 2 - i;
    return i;
  };
  Tensor y({n, c, h2, w2});
  float* out = y.mut()->data();
  for (int i = 0; i < n; ++i)
    for (int cc = 0; cc < c; ++cc) {
      const float* plane = x.data() + (static_cast<std::ptrdiff_t>(i) * c + cc) * h * w;
      float* oplane = out + (static_cast<std::ptrdiff_t>(i) * c + cc) * h2 * w2;
      for (int hh = 0; hh < h2; ++hh) {
        const int sh = mirror(hh - pad, h);
        for (int ww = 0; ww < w2; ++ww) oplane[hh * w2 + ww] = plane[sh * w + mirror(ww - pad, w)];
      }
    }
  if (detail::any_live(tape, {&x})) {
    const TapeId xid = x.tape_id;
    tape->record("reflect_pad2d", {xid}, y, [=](Tape& t, std::span<const float> g) {
      float* gx = t.grad_buffer(xid).data();
      for (int i = 0; i < n; ++i)
        for (int cc = 0; cc < c; ++cc) {
          float* gplane = gx + (static_cast<std::ptrdiff_t>(i) * c + cc) * h * w;
          const float* go = g.data() + (static_cast<std::ptrdiff_t>(i) * c + cc) * h2 * w2;
          for (int hh = 0; hh < h2; ++hh) {
            const int sh = mirror(hh - pad, h);
            for (int ww = 0; ww < w2; ++ww) gplane[sh * w + mirror(ww - pad, w)] += go[hh * w2 + ww];
          }
        }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Normalization and pooling
// ---------------------------------------------------------------------------

inline Tensor instance_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                            float eps = 1e-5f, Tape* tape = nullptr) {
  check_arg(x.rank() == 4, "instance_norm input must be NCHW");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int plane = h * w;
  check_arg(plane >= 2, "instance_norm needs H*W >= 2");
  check_arg(eps > 0.0f, "instance_norm eps must be positive");
  check_arg(gamma.rank() == 1 && gamma.dim(0) == c && beta.rank() == 1 && beta.dim(0) == c,
            "instance_norm affine params must be [C]");

  Tensor y(x.shape());
  float* out = y.mut()->data();
  // Per-plane statistics saved for the backward pass.
  std::vector<float> mean_buf(static_cast<std::size_t>(n) * c);
  std::vector<float> istd_buf(static_cast<std::size_t>(n) * c);
  for (int i = 0; i < n; ++i)
    for (int cc = 0; cc < c; ++cc) {
      const float* p = x.data() + (static_cast<std::ptrdiff_t>(i) * c + cc) * plane;
      double s = 0.0, s2 = 0.0;
      for (int q = 0; q < plane; ++q) {
        s += p[q];
        s2 += static_cast<double>(p[q]) * p[q];
      }
      const double mu = s / plane;
      const double var = std::max(0.0, s2 / plane - mu * mu);
      const float istd = static_cast<float>(1.0 / std::sqrt(var + eps));
      mean_buf[static_cast<std::size_t>(i) * c + cc] = static_cast<float>(mu);
      istd_buf[static_cast<std::size_t>(i) * c + cc] = istd;
      const float gm = gamma[cc], bt = beta[cc];
      float* o = out + (static_cast<std::ptrdiff_t>(i) * c + cc) * plane;
      for (int q = 0; q < plane; ++q)
        o[q] = (p[q] - static_cast<float>(mu)) * istd * gm + bt;
    }
  assert_finite(y, "instance_norm");

  if (detail::any_live(tape, {&x, &gamma, &beta})) {
    const TapeId xid = tape->id_of(x), gid = tape->id_of(gamma), bid = tape->id_of(beta);
    Tensor xc = x, gc = gamma;
    tape->record(
        "instance_norm", {xid, gid, bid}, y,
        [=, mean = std::move(mean_buf), istd = std::move(istd_buf)](Tape& t,
                                                                    std::span<const float> g) {
          float* gx = (xid != kOffTape) ? t.grad_buffer(xid).data() : nullptr;
          float* gg = (gid != kOffTape) ? t.grad_buffer(gid).data() : nullptr;
          float* gb = (bid != kOffTape) ? t.grad_buffer(bid).data() : nullptr;
          for (int i = 0; i < n; ++i)
            for (int cc = 0; cc < c; ++cc) {
              const std::size_t pc = static_cast<std::size_t>(i) * c + cc;
              const float mu = mean[pc], is = istd[pc], gm = gc[cc];
              const float* p = xc.data() + (static_cast<std::ptrdiff_t>(i) * c + cc) * plane;
              const float* go = g.data() + (static_cast<std::ptrdiff_t>(i) * c + cc) * plane;
              double sg = 0.0, sgx = 0.0;
              for (int q = 0; q < plane; ++q) {
                const float xh = (p[q] - mu) * is;
                sg += go[q];
                sgx += static_cast<double>(go[q]) * xh;
              }
              if (gg) gg[cc] += static_cast<float>(sgx);
              if (gb) gb[cc] += static_cast<float>(sg);
              if (gx) {
                const float m1 = static_cast<float>(sg / plane) * gm;
                const float m2 = static_cast<float>(sgx / plane) * gm;
                float* gxp = gx + (static_cast<std::ptrdiff_t>(i) * c + cc) * plane;
                for (int q = 0; q < plane; ++q) {
                  const float xh = (p[q] - mu) * is;
                  gxp[q] += is * (go[q] * gm - m1 - xh * m2);
                }
              }
            }
        });
  }
  return y;
}

inline Tensor max_pool2d(const Tensor& x, int kernel = 2, int stride = 2, Tape* tape = nullptr) {
  check_arg(x.rank() == 4, "max_pool2d input must be NCHW");
  check_arg(kernel >= 1 && stride >= 1, "max_pool2d kernel/stride must be >= 1");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  check_arg(kernel <= h && kernel <= w, "max_pool2d kernel larger than input");
  const int h2 = (h - kernel) / stride + 1;
  const int w2 = (w - kernel) / stride + 1;
  Tensor y({n, c, h2, w2});
  float* out = y.mut()->data();
  std::vector<std::int32_t> argmax(static_cast<std::size_t>(y.numel()));
  std::int64_t oi = 0;
  for (int i = 0; i < n; ++i)
    for (int cc = 0; cc < c; ++cc) {
      const std::ptrdiff_t base = (static_cast<std::ptrdiff_t>(i) * c + cc) * h * w;
      const float* p = x.data() + base;
      for (int hh = 0; hh < h2; ++hh)
        for (int ww = 0; ww < w2; ++ww, ++oi) {
          float best = -std::numeric_limits<float>::infinity();
          std::int32_t besti = 0;
          for (int a = 0; a < kernel; ++a)
            for (int bcol = 0; bcol < kernel; ++bcol) {
              const int idx = (hh * stride + a) * w + ww * stride + bcol;
              if (p[idx] > best) {
                best = p[idx];
                besti = static_cast<std::int32_t>(base + idx);
              }
            }
          out[oi] = best;
          argmax[static_cast<std::size_t>(oi)] = besti;
        }
    }
  if (detail::any_live(tape, {&x})) {
    const TapeId xid = x.tape_id;
    tape->record("max_pool2d", {xid}, y,
                 [xid, am = std::move(argmax)](Tape& t, std::span<const float> g) {
                   float* gx = t.grad_buffer(xid).data();
                   for (std::size_t i = 0; i < g.size(); ++i) gx[am[i]] += g[i];
                 });
  }
  return y;
}

inline Tensor global_avg_pool(const Tensor& x, Tape* tape = nullptr) {
  check_arg(x.rank() == 4, "global_avg_pool input must be NCHW");
  const int n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  Tensor y({n, c});
  float* out = y.mut()->data();
  for (int i = 0; i < n * c; ++i) {
    const float* p = x.data() + static_cast<std::ptrdiff_t>(i) * plane;
    double s = 0.0;
    for (int q = 0; q < plane; ++q) s += p[q];
    out[i] = static_cast<float>(s / plane);
  }
  if (detail::any_live(tape, {&x})) {
    const TapeId xid = x.tape_id;
    tape->record("global_avg_pool", {xid}, y, [=](Tape& t, std::span<const float> g) {
      float* gx = t.grad_buffer(xid).data();
      const float inv = 1.0f / static_cast<float>(plane);
      for (int i = 0; i < n * c; ++i) {
        const float gv = g[static_cast<std::size_t>(i)] * inv;
        float* gp = gx + static_cast<std::ptrdiff_t>(i) * plane;
        for (int q = 0; q < plane; ++q) gp[q] += gv;
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Dense layer and elementwise ops
// ---------------------------------------------------------------------------

inline Tensor fully_connected(const Tensor& x, const Tensor& w, const Tensor& b,
                              Tape* tape = nullptr) {
  check_arg(x.rank() == 2, "fully_connected input must be [N,D], got " + shape_str(x.shape()));
  check_arg(w.rank() == 2, "fully_connected weight must be [O,D], got " + shape_str(w.shape()));
  const int n = x.dim(0), d = x.dim(1), o = w.dim(0);
  check_arg(w.dim(1) == d, "fully_connected dimension mismatch: input " + shape_str(x.shape()) +
                               " vs weight " + shape_str(w.shape()));
  check_arg(b.rank() == 1 && b.dim(0) == o, "fully_connected bias must be [O]");
  Tensor y({n, o});
  float* out = y.mut()->data();
  detail::sgemm(false, true, n, o, d, 1.0f, x.data(), d, w.data(), d, 0.0f, out, o);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < o; ++j) out[i * o + j] += b[j];
  assert_finite(y, "fully_connected");

  if (detail::any_live(tape, {&x, &w, &b})) {
    const TapeId xid = tape->id_of(x), wid = tape->id_of(w), bid = tape->id_of(b);
    Tensor xc = x, wc = w;
    tape->record("fully_connected", {xid, wid, bid}, y, [=](Tape& t, std::span<const float> g) {
      if (xid != kOffTape)
        detail::sgemm(false, false, n, d, o, 1.0f, g.data(), o, wc.data(), d, 1.0f,
                      t.grad_buffer(xid).data(), d);
      if (wid != kOffTape)
        detail::sgemm(true, false, o, d, n, 1.0f, g.data(), o, xc.data(), d, 1.0f,
                      t.grad_buffer(wid).data(), d);
      if (bid != kOffTape) {
        float* gb = t.grad_buffer(bid).data();
        for (int j = 0; j < o; ++j) {
          double s = 0.0;
          for (int i = 0; i < n; ++i) s += g[static_cast<std::size_t>(i) * o + j];
          gb[j] += static_cast<float>(s);
        }
      }
    });
  }
  return y;
}

namespace detail {

template <typename Fwd, typename Bwd>
Tensor unary_op(const char* name, const Tensor& x, Tape* tape, Fwd fwd, Bwd make_backward) {
  Tensor y(x.shape());
  float* out = y.mut()->data();
  const float* px = x.data();
  const std::int64_t m = x.numel();
  for (std::int64_t i = 0; i < m; ++i) out[i] = fwd(px[i]);
  assert_finite(y, name);
  if (any_live(tape, {&x})) tape->record(name, {x.tape_id}, y, make_backward(x, y));
  return y;
}

}  // namespace detail

inline Tensor relu(const Tensor& x, Tape* tape = nullptr) {
  return detail::unary_op(
      "relu", x, tape, [](float v) { return v > 0.0f ? v : 0.0f; },
      [](const Tensor& xc, const Tensor&) {
        return [xc, xid = xc.tape_id](Tape& t, std::span<const float> g) {
          float* gx = t.grad_buffer(xid).data();
          const float* p = xc.data();
          for (std::size_t i = 0; i < g.size(); ++i)
            if (p[i] > 0.0f) gx[i] += g[i];
        };
      });
}

inline Tensor leaky_relu(const Tensor& x, float slope, Tape* tape = nullptr) {
  return detail::unary_op(
      "leaky_relu", x, tape, [slope](float v) { return v > 0.0f ? v : slope * v; },
      [slope](const Tensor& xc, const Tensor&) {
        return [xc, slope, xid = xc.tape_id](Tape& t, std::span<const float> g) {
          float* gx = t.grad_buffer(xid).data();
          const float* p = xc.data();
          for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (p[i] > 0.0f ? 1.0f : slope);
        };
      });
}

inline Tensor sigmoid(const Tensor& x, Tape* tape = nullptr) {
  return detail::unary_op(
      "sigmoid", x, tape, [](float v) { return 1.0f / (1.0f + std::exp(-v)); },
      [](const Tensor& xc, const Tensor& yc) {
        return [yc, xid = xc.tape_id](Tape& t, std::span<const float> g) {
          float* gx = t.grad_buffer(xid).data();
          const float* y = yc.data();
          for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * y[i] * (1.0f - y[i]);
        };
      });
}

inline Tensor tanh(const Tensor& x, Tape* tape = nullptr) {
  return detail::unary_op(
      "tanh", x, tape, [](float v) { return std::tanh(v); },
      [](const Tensor& xc, const Tensor& yc) {
        return [yc, xid = xc.tape_id](Tape& t, std::span<const float> g) {
          float* gx = t.grad_buffer(xid).data();
          const float* y = yc.data();
          for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (1.0f - y[i] * y[i]);
        };
      });
}

inline Tensor exp(const Tensor& x, Tape* tape = nullptr) {
  return detail::unary_op(
      "exp", x, tape, [](float v) { return std::exp(v); },
      [](const Tensor& xc, const Tensor& yc) {
        return [yc, xid = xc.tape_id](Tape& t, std::span<const float> g) {
          float* gx = t.grad_buffer(xid).data();
          const float* y = yc.data();
          for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * y[i];
        };
      });
}

inline Tensor abs(const Tensor& x, Tape* tape = nullptr) {
  return detail::unary_op(
      "abs", x, tape, [](float v) { return std::fabs(v); },
      [](const Tensor& xc, const Tensor&) {
        return [xc, xid = xc.tape_id](Tape& t, std::span<const float> g) {
          float* gx = t.grad_buffer(xid).data();
          const float* p = xc.data();
          for (std::size_t i = 0; i < g.size(); ++i)
            gx[i] += g[i] * (p[i] > 0.0f ? 1.0f : (p[i] < 0.0f ? -1.0f : 0.0f));
        };
      });
}

// y = scale * x + shift, elementwise with scalar coefficients.
inline Tensor affine(const Tensor& x, float scale, float shift, Tape* tape = nullptr) {
  return detail::unary_op(
      "affine", x, tape, [=](float v) { return scale * v + shift; },
      [scale](const Tensor& xc, const Tensor&) {
        return [scale, xid = xc.tape_id](Tape& t, std::span<const float> g) {
          float* gx = t.grad_buffer(xid).data();
          for (std::size_t i = 0; i < g.size(); ++i) gx[i] += scale * g[i];
        };
      });
}

// y = x^p for x >= 0; p == 0 gives the constant 1.
inline Tensor pow_const(const Tensor& x, float p, Tape* tape = nullptr) {
  return detail::unary_op(
      "pow_const", x, tape,
      [p](float v) { return p == 0.0f ? 1.0f : std::pow(v, p); },
      [p](const Tensor& xc, const Tensor&) {
        return [xc, p, xid = xc.tape_id](Tape& t, std::span<const float> g) {
          if (p == 0.0f) return;
          float* gx = t.grad_buffer(xid).data();
          const float* v = xc.data();
          for (std::size_t i = 0; i < g.size(); ++i)
            gx[i] += g[i] * p * std::pow(std::max(v[i], 1e-12f), p - 1.0f);
        };
      });
}

namespace detail {

template <typename Combine>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, Tape* tape, Combine f,
                 void (*backward)(Tape&, std::span<const float>, const Tensor&, const Tensor&,
                                  TapeId, TapeId)) {
  check_arg(a.shape() == b.shape(), std::string(name) + " shape mismatch: " + shape_str(a.shape()) +
                                        " vs " + shape_str(b.shape()));
  Tensor y(a.shape());
  float* out = y.mut()->data();
  const float* pa = a.data();
  const float* pb = b.data();
  const std::int64_t m = a.numel();
  for (std::int64_t i = 0; i < m; ++i) out[i] = f(pa[i], pb[i]);
  assert_finite(y, name);
  if (any_live(tape, {&a, &b})) {
    const TapeId aid = tape->id_of(a), bid = tape->id_of(b);
    Tensor ac = a, bc = b;
    tape->record(name, {aid, bid}, y, [=](Tape& t, std::span<const float> g) {
      backward(t, g, ac, bc, aid, bid);
    });
  }
  return y;
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b, Tape* tape = nullptr) {
  return detail::binary_op(
      "add", a, b, tape, [](float x, float y) { return x + y; },
      [](Tape& t, std::span<const float> g, const Tensor&, const Tensor&, TapeId aid, TapeId bid) {
        if (aid != kOffTape) {
          float* ga = t.grad_buffer(aid).data();
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (bid != kOffTape) {
          float* gb = t.grad_buffer(bid).data();
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
        }
      });
}

inline Tensor sub(const Tensor& a, const Tensor& b, Tape* tape = nullptr) {
  return detail::binary_op(
      "sub", a, b, tape, [](float x, float y) { return x - y; },
      [](Tape& t, std::span<const float> g, const Tensor&, const Tensor&, TapeId aid, TapeId bid) {
        if (aid != kOffTape) {
          float* ga = t.grad_buffer(aid).data();
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (bid != kOffTape) {
          float* gb = t.grad_buffer(bid).data();
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
        }
      });
}

inline Tensor mul(const Tensor& a, const Tensor& b, Tape* tape = nullptr) {
  return detail::binary_op(
      "mul", a, b, tape, [](float x, float y) { return x * y; },
      [](Tape& t, std::span<const float> g, const Tensor& ac, const Tensor& bc, TapeId aid,
         TapeId bid) {
        if (aid != kOffTape) {
          float* ga = t.grad_buffer(aid).data();
          const float* pb = bc.data();
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * pb[i];
        }
        if (bid != kOffTape) {
          float* gb = t.grad_buffer(bid).data();
          const float* pa = ac.data();
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * pa[i];
        }
      });
}

inline Tensor square(const Tensor& x, Tape* tape = nullptr) { return mul(x, x, tape); }

// Multiplies every (n, c) plane of x by the scalar s[n, c].
inline Tensor scale_channels(const Tensor& x, const Tensor& s, Tape* tape = nullptr) {
  check_arg(x.rank() == 4 && s.rank() == 2, "scale_channels expects NCHW and [N,C]");
  const int n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  check_arg(s.dim(0) == n && s.dim(1) == c, "scale_channels shape mismatch: " +
                                                shape_str(x.shape()) + " vs " + shape_str(s.shape()));
  Tensor y(x.shape());
  float* out = y.mut()->data();
  for (int i = 0; i < n * c; ++i) {
    const float sv = s[i];
    const float* p = x.data() + static_cast<std::ptrdiff_t>(i) * plane;
    float* o = out + static_cast<std::ptrdiff_t>(i) * plane;
    for (int q = 0; q < plane; ++q) o[q] = p[q] * sv;
  }
  if (detail::any_live(tape, {&x, &s})) {
    const TapeId xid = tape->id_of(x), sid = tape->id_of(s);
    Tensor xc = x, sc = s;
    tape->record("scale_channels", {xid, sid}, y, [=](Tape& t, std::span<const float> g) {
      if (xid != kOffTape) {
        float* gx = t.grad_buffer(xid).data();
        for (int i = 0; i < n * c; ++i) {
          const float sv = sc[i];
          const float* gp = g.data() + static_cast<std::ptrdiff_t>(i) * plane;
          float* gxp = gx + static_cast<std::ptrdiff_t>(i) * plane;
          for (int q = 0; q < plane; ++q) gxp[q] += gp[q] * sv;
        }
      }
      if (sid != kOffTape) {
        float* gs = t.grad_buffer(sid).data();
        for (int i = 0; i < n * c; ++i) {
          const float* gp = g.data() + static_cast<std::ptrdiff_t>(i) * plane;
          const float* p = xc.data() + static_cast<std::ptrdiff_t>(i) * plane;
          double acc = 0.0;
          for (int q = 0; q < plane; ++q) acc += static_cast<double>(gp[q]) * p[q];
          gs[i] += static_cast<float>(acc);
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

inline Tensor concat(const std::vector<Tensor>& parts, int axis, Tape* tape = nullptr) {
  check_arg(!parts.empty(), "concat needs at least one input");
  const int rank = parts[0].rank();
  check_arg(axis >= 0 && axis < rank, "concat axis " + std::to_string(axis) + " out of range for rank " +
                                          std::to_string(rank));
  std::vector<int> out_shape = parts[0].shape();
  for (std::size_t i = 1; i < parts.size(); ++i) {
    check_arg(parts[i].rank() == rank, "concat rank mismatch");
    for (int d = 0; d < rank; ++d)
      if (d != axis)
        check_arg(parts[i].dim(d) == out_shape[static_cast<std::size_t>(d)],
                  "concat ragged shapes: " + shape_str(parts[0].shape()) + " vs " +
                      shape_str(parts[i].shape()));
    out_shape[static_cast<std::size_t>(axis)] += parts[i].dim(axis);
  }
  std::int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= out_shape[static_cast<std::size_t>(d)];
  for (int d = axis + 1; d < rank; ++d) inner *= out_shape[static_cast<std::size_t>(d)];
  const std::int64_t out_row = out_shape[static_cast<std::size_t>(axis)] * inner;

  Tensor y(out_shape);
  float* out = y.mut()->data();
  std::int64_t offset = 0;
  for (const Tensor& p : parts) {
    const std::int64_t row = p.dim(axis) * inner;
    for (std::int64_t r = 0; r < outer; ++r)
      std::memcpy(out + r * out_row + offset, p.data() + r * row,
                  sizeof(float) * static_cast<std::size_t>(row));
    offset += row;
  }
  bool live = false;
  if (tape)
    for (const Tensor& p : parts) live = live || tape->on_tape(p);
  if (live) {
    std::vector<TapeId> ids(parts.size());
    std::vector<std::int64_t> rows(parts.size());
    for (std::size_t i = 0; i < parts.size(); ++i) {
      ids[i] = tape->id_of(parts[i]);
      rows[i] = parts[i].dim(axis) * inner;
    }
    tape->record("concat", std::vector<TapeId>(ids.begin(), ids.end()), y,
                 [=](Tape& t, std::span<const float> g) {
                   std::int64_t off = 0;
                   for (std::size_t i = 0; i < ids.size(); ++i) {
                     if (ids[i] != kOffTape) {
                       float* gp = t.grad_buffer(ids[i]).data();
                       for (std::int64_t r = 0; r < outer; ++r) {
                         const float* src = g.data() + r * out_row + off;
                         float* dst = gp + r * rows[i];
                         for (std::int64_t q = 0; q < rows[i]; ++q) dst[q] += src[q];
                       }
                     }
                     off += rows[i];
                   }
                 });
  }
  return y;
}

inline Tensor narrow(const Tensor& x, int axis, int start, int length, Tape* tape = nullptr) {
  const int rank = x.rank();
  check_arg(axis >= 0 && axis < rank, "narrow axis out of range");
  check_arg(start >= 0 && length >= 1 && start + length <= x.dim(axis), "narrow range out of bounds");
  std::vector<int> out_shape = x.shape();
  out_shape[static_cast<std::size_t>(axis)] = length;
  std::int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= x.dim(d);
  for (int d = axis + 1; d < rank; ++d) inner *= x.dim(d);
  const std::int64_t in_row = x.dim(axis) * inner;
  const std::int64_t out_row = length * inner;
  Tensor y(out_shape);
  float* out = y.mut()->data();
  for (std::int64_t r = 0; r < outer; ++r)
    std::memcpy(out + r * out_row, x.data() + r * in_row + start * inner,
                sizeof(float) * static_cast<std::size_t>(out_row));
  if (detail::any_live(tape, {&x})) {
    const TapeId xid = x.tape_id;
    tape->record("narrow", {xid}, y, [=](Tape& t, std::span<const float> g) {
      float* gx = t.grad_buffer(xid).data();
      for (std::int64_t r = 0; r < outer; ++r) {
        float* dst = gx + r * in_row + start * inner;
        const float* src = g.data() + r * out_row;
        for (std::int64_t q = 0; q < out_row; ++q) dst[q] += src[q];
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Reductions and classification head pieces
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& x, Tape* tape = nullptr) {
  double s = 0.0;
  for (float v : x.span()) s += v;
  Tensor y = Tensor::scalar(static_cast<float>(s));
  if (detail::any_live(tape, {&x})) {
    const TapeId xid = x.tape_id;
    tape->record("sum", {xid}, y, [xid](Tape& t, std::span<const float> g) {
      auto buf = t.grad_buffer(xid);
      for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[0];
    });
  }
  return y;
}

inline Tensor mean(const Tensor& x, Tape* tape = nullptr) {
  double s = 0.0;
  for (float v : x.span()) s += v;
  const std::int64_t m = x.numel();
  Tensor y = Tensor::scalar(static_cast<float>(s / static_cast<double>(m)));
  if (detail::any_live(tape, {&x})) {
    const TapeId xid = x.tape_id;
    tape->record("mean", {xid}, y, [xid, m](Tape& t, std::span<const float> g) {
      auto buf = t.grad_buffer(xid);
      const float gv = g[0] / static_cast<float>(m);
      for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += gv;
    });
  }
  return y;
}

// Row-wise log softmax with the usual max-shift stabilization.
inline Tensor log_softmax(const Tensor& x, Tape* tape = nullptr) {
  check_arg(x.rank() == 2, "log_softmax input must be [N,K]");
  const int n = x.dim(0), k = x.dim(1);
  Tensor y(x.shape());
  float* out = y.mut()->data();
  for (int i = 0; i < n; ++i) {
    const float* row = x.data() + static_cast<std::ptrdiff_t>(i) * k;
    float mx = row[0];
    for (int j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    double lse = 0.0;
    for (int j = 0; j < k; ++j) lse += std::exp(static_cast<double>(row[j]) - mx);
    const float shift = mx + static_cast<float>(std::log(lse));
    float* orow = out + static_cast<std::ptrdiff_t>(i) * k;
    for (int j = 0; j < k; ++j) orow[j] = row[j] - shift;
  }
  assert_finite(y, "log_softmax");
  if (detail::any_live(tape, {&x})) {
    const TapeId xid = x.tape_id;
    Tensor yc = y;
    tape->record("log_softmax", {xid}, y, [=](Tape& t, std::span<const float> g) {
      float* gx = t.grad_buffer(xid).data();
      for (int i = 0; i < n; ++i) {
        double s = 0.0;
        for (int j = 0; j < k; ++j) s += g[static_cast<std::size_t>(i) * k + j];
        const float* yrow = yc.data() + static_cast<std::ptrdiff_t>(i) * k;
        for (int j = 0; j < k; ++j)
          gx[static_cast<std::ptrdiff_t>(i) * k + j] +=
              g[static_cast<std::size_t>(i) * k + j] -
              std::exp(yrow[j]) * static_cast<float>(s);
      }
    });
  }
  return y;
}

// Picks x[n, labels[n]] for each row; labels are checked against K.
inline Tensor gather_rows(const Tensor& x, const std::vector<int>& labels, Tape* tape = nullptr) {
  check_arg(x.rank() == 2, "gather_rows input must be [N,K]");
  const int n = x.dim(0), k = x.dim(1);
  check_arg(static_cast<int>(labels.size()) == n, "gather_rows label count mismatch");
  for (int l : labels)
    check_arg(l >= 0 && l < k, "label " + std::to_string(l) + " out of range [0," + std::to_string(k) + ")");
  Tensor y({n});
  float* out = y.mut()->data();
  for (int i = 0; i < n; ++i) out[i] = x[static_cast<std::int64_t>(i) * k + labels[static_cast<std::size_t>(i)]];
  if (detail::any_live(tape, {&x})) {
    const TapeId xid = x.tape_id;
    tape->record("gather_rows", {xid}, y, [xid, k, labels](Tape& t, std::span<const float> g) {
      float* gx = t.grad_buffer(xid).data();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i * static_cast<std::size_t>(k) + labels[i]] += g[i];
    });
  }
  return y;
}

// Convention helpers between the [0,1] corpus range and the [-1,1] GAN range.
inline Tensor to_signed_range(const Tensor& x, Tape* tape = nullptr) { return affine(x, 2.0f, -1.0f, tape); }
inline Tensor to_unit_range(const Tensor& x, Tape* tape = nullptr) { return affine(x, 0.5f, 0.5f, tape); }

}  // namespace g2c
