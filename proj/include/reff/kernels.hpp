#pragma once

// Raw numeric kernels behind the differentiable operations. Everything here
// works on plain spans; no tape interaction.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

namespace reff::kernels {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using CMapMat = Eigen::Map<const RowMat<T>>;

struct ConvGeom {
  std::size_t batch, in_ch, in_h, in_w;
  std::size_t out_ch, kh, kw;
  std::size_t stride, pad;

  std::size_t out_h() const { return (in_h + 2 * pad - kh) / stride + 1; }
  std::size_t out_w() const { return (in_w + 2 * pad - kw) / stride + 1; }
  std::size_t patch() const { return in_ch * kh * kw; }
};

// col: (in_ch*kh*kw) x (out_h*out_w)
template <class T>
void im2col(const T* img, const ConvGeom& g, T* col) {
  const std::size_t oh = g.out_h(), ow = g.out_w();
  const auto ih = static_cast<std::ptrdiff_t>(g.in_h), iw = static_cast<std::ptrdiff_t>(g.in_w);
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.in_ch; ++c)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj, ++row) {
        T* dst = col + row * oh * ow;
        const T* src = img + c * g.in_h * g.in_w;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const auto y = static_cast<std::ptrdiff_t>(oy * g.stride + ki) - static_cast<std::ptrdiff_t>(g.pad);
          T* drow = dst + oy * ow;
          if (y < 0 || y >= ih) {
            std::fill(drow, drow + ow, T(0));
            continue;
          }
          const T* srow = src + y * iw;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const auto x = static_cast<std::ptrdiff_t>(ox * g.stride + kj) - static_cast<std::ptrdiff_t>(g.pad);
            drow[ox] = (x < 0 || x >= iw) ? T(0) : srow[x];
          }
        }
      }
}

template <class T>
void col2im_add(const T* col, const ConvGeom& g, T* img) {
  const std::size_t oh = g.out_h(), ow = g.out_w();
  const auto ih = static_cast<std::ptrdiff_t>(g.in_h), iw = static_cast<std::ptrdiff_t>(g.in_w);
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.in_ch; ++c)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj, ++row) {
        const T* src = col + row * oh * ow;
        T* dst = img + c * g.in_h * g.in_w;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const auto y = static_cast<std::ptrdiff_t>(oy * g.stride + ki) - static_cast<std::ptrdiff_t>(g.pad);
          if (y < 0 || y >= ih) continue;
          const T* srow = src + oy * ow;
          T* drow = dst + y * iw;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const auto x = static_cast<std::ptrdiff_t>(ox * g.stride + kj) - static_cast<std::ptrdiff_t>(g.pad);
            if (x >= 0 && x < iw) drow[x] += srow[ox];
          }
        }
      }
}

template <class T>
void conv2d_forward(std::span<const T> x, std::span<const T> w, const ConvGeom& g, std::span<T> y) {
  const std::size_t P = g.patch(), HW = g.out_h() * g.out_w();
  std::vector<T> col(P * HW);
  CMapMat<T> W(w.data(), static_cast<Eigen::Index>(g.out_ch), static_cast<Eigen::Index>(P));
  for (std::size_t b = 0; b < g.batch; ++b) {
    im2col(x.data() + b * g.in_ch * g.in_h * g.in_w, g, col.data());
    CMapMat<T> C(col.data(), static_cast<Eigen::Index>(P), static_cast<Eigen::Index>(HW));
    MapMat<T> Y(y.data() + b * g.out_ch * HW, static_cast<Eigen::Index>(g.out_ch), static_cast<Eigen::Index>(HW));
    Y.noalias() = W * C;
  }
}

// gx = conv2d^T(gy; w)
template <class T>
void conv2d_input_grad(std::span<const T> gy, std::span<const T> w, const ConvGeom& g, std::span<T> gx) {
  const std::size_t P = g.patch(), HW = g.out_h() * g.out_w();
  std::vector<T> col(P * HW);
  std::fill(gx.begin(), gx.end(), T(0));
  CMapMat<T> W(w.data(), static_cast<Eigen::Index>(g.out_ch), static_cast<Eigen::Index>(P));
  for (std::size_t b = 0; b < g.batch; ++b) {
    CMapMat<T> G(gy.data() + b * g.out_ch * HW, static_cast<Eigen::Index>(g.out_ch), static_cast<Eigen::Index>(HW));
    MapMat<T> C(col.data(), static_cast<Eigen::Index>(P), static_cast<Eigen::Index>(HW));
    C.noalias() = W.transpose() * G;
    col2im_add(col.data(), g, gx.data() + b * g.in_ch * g.in_h * g.in_w);
  }
}

// gw = sum_b gy_b * col(x_b)^T
template <class T>
void conv2d_weight_grad(std::span<const T> x, std::span<const T> gy, const ConvGeom& g, std::span<T> gw) {
  const std::size_t P = g.patch(), HW = g.out_h() * g.out_w();
  std::vector<T> col(P * HW);
  MapMat<T> GW(gw.data(), static_cast<Eigen::Index>(g.out_ch), static_cast<Eigen::Index>(P));
  GW.setZero();
  for (std::size_t b = 0; b < g.batch; ++b) {
    im2col(x.data() + b * g.in_ch * g.in_h * g.in_w, g, col.data());
    CMapMat<T> C(col.data(), static_cast<Eigen::Index>(P), static_cast<Eigen::Index>(HW));
    CMapMat<T> G(gy.data() + b * g.out_ch * HW, static_cast<Eigen::Index>(g.out_ch), static_cast<Eigen::Index>(HW));
    GW.noalias() += G * C.transpose();
  }
}

template <class T>
void matmul(std::span<const T> a, std::span<const T> b, std::size_t m, std::size_t k, std::size_t n,
            std::span<T> c) {
  CMapMat<T> A(a.data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(k));
  CMapMat<T> B(b.data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n));
  MapMat<T> C(c.data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
  C.noalias() = A * B;
}

/// One axis of a half-pixel-center linear interpolation: output index i reads
/// lo[i] and hi[i] with weights (1 - frac[i], frac[i]).
struct LinearTaps {
  std::vector<std::size_t> lo, hi;
  std::vector<double> frac;
};

inline LinearTaps linear_taps(std::size_t in, std::size_t out) {
  LinearTaps t;
  t.lo.resize(out);
  t.hi.resize(out);
  t.frac.resize(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t i = 0; i < out; ++i) {
    double src = (static_cast<double>(i) + 0.5) * scale - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const auto i0 = static_cast<std::size_t>(std::floor(src));
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    t.lo[i] = i0;
    t.hi[i] = i1;
    t.frac[i] = src - static_cast<double>(i0);
  }
  return t;
}

// planes x (h,w) -> planes x (H,W)
template <class T>
void bilinear_resize(std::span<const T> x, std::size_t planes, std::size_t h, std::size_t w, std::size_t H,
                     std::size_t W, std::span<T> y) {
  const LinearTaps ty = linear_taps(h, H), tx = linear_taps(w, W);
  std::vector<T> tmp(h * W);
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = x.data() + p * h * w;
    for (std::size_t r = 0; r < h; ++r)
      for (std::size_t c = 0; c < W; ++c) {
        const auto f = static_cast<T>(tx.frac[c]);
        tmp[r * W + c] = (T(1) - f) * src[r * w + tx.lo[c]] + f * src[r * w + tx.hi[c]];
      }
    T* dst = y.data() + p * H * W;
    for (std::size_t r = 0; r < H; ++r) {
      const auto f = static_cast<T>(ty.frac[r]);
      const T* a = tmp.data() + ty.lo[r] * W;
      const T* b = tmp.data() + ty.hi[r] * W;
      for (std::size_t c = 0; c < W; ++c) dst[r * W + c] = (T(1) - f) * a[c] + f * b[c];
    }
  }
}

// Transpose of bilinear_resize: planes x (H,W) -> planes x (h,w).
template <class T>
void bilinear_resize_adjoint(std::span<const T> gy, std::size_t planes, std::size_t h, std::size_t w,
                             std::size_t H, std::size_t W, std::span<T> gx) {
  const LinearTaps ty = linear_taps(h, H), tx = linear_taps(w, W);
  std::vector<T> tmp(h * W);
  std::fill(gx.begin(), gx.end(), T(0));
  for (std::size_t p = 0; p < planes; ++p) {
    std::fill(tmp.begin(), tmp.end(), T(0));
    const T* src = gy.data() + p * H * W;
    for (std::size_t r = 0; r < H; ++r) {
      const auto f = static_cast<T>(ty.frac[r]);
      T* a = tmp.data() + ty.lo[r] * W;
      T* b = tmp.data() + ty.hi[r] * W;
      for (std::size_t c = 0; c < W; ++c) {
        a[c] += (T(1) - f) * src[r * W + c];
        b[c] += f * src[r * W + c];
      }
    }
    T* dst = gx.data() + p * h * w;
    for (std::size_t r = 0; r < h; ++r)
      for (std::size_t c = 0; c < W; ++c) {
        const auto f = static_cast<T>(tx.frac[c]);
        dst[r * w + tx.lo[c]] += (T(1) - f) * tmp[r * W + c];
        dst[r * w + tx.hi[c]] += f * tmp[r * W + c];
      }
  }
}

}  // namespace reff::kernels
