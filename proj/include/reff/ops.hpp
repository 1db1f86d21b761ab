#pragma once

// Differentiable primitive operations. Every backward rule is written in terms
// of these same operations, so when a HigherOrder tape records the backward
// pass the resulting gradients are differentiable again.

#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "reff/kernels.hpp"
#include "reff/tensor.hpp"

namespace reff {

/// Activation-pattern fingerprint. While active, every relu mask and every
/// max-pool argmax is hashed in, so finite-difference checks can detect that a
/// perturbation crossed a kink.
struct KinkMonitor {
  bool active = false;
  std::uint64_t hash = 1469598103934665603ull;

  void mix(std::uint64_t v) noexcept {
    hash ^= v + 0x9e3779b97f4a7c15ull + (hash << 6) + (hash >> 2);
  }
  static KinkMonitor& current() {
    thread_local KinkMonitor m;
    return m;
  }
};

namespace detail {

template <class T>
Tape<T>* tape_of(std::initializer_list<const Tensor<T>*> ins) {
  for (const Tensor<T>* t : ins)
    if (t->tracked()) return t->tape();
  return nullptr;
}

template <class T, class Fn>
Tensor<T> finish(std::string_view op, Tensor<T> out, std::initializer_list<const Tensor<T>*> ins, Fn&& backward) {
  Tape<T>* tape = tape_of(ins);
  if (tape == nullptr || !tape->recording()) return out;
  return tape->record(op, std::move(out), ins, typename Tape<T>::BackwardFn(std::forward<Fn>(backward)));
}

inline void require_same(std::string_view op, const Shape& a, const Shape& b) {
  if (a != b) throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
}

inline void require_rank(std::string_view op, const Shape& a, std::size_t r) {
  if (a.size() != r)
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " + to_string(a));
}

template <class T, class F>
Tensor<T> map(const Tensor<T>& a, F f) {
  Tensor<T> out(a.shape());
  auto o = out.mutable_data();
  auto d = a.data();
  for (std::size_t i = 0; i < d.size(); ++i) o[i] = f(d[i]);
  return out;
}

template <class T, class F>
Tensor<T> zip(std::string_view op, const Tensor<T>& a, const Tensor<T>& b, F f) {
  require_same(op, a.shape(), b.shape());
  Tensor<T> out(a.shape());
  auto o = out.mutable_data();
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < x.size(); ++i) o[i] = f(x[i], y[i]);
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <class T>
Tensor<T> neg(const Tensor<T>& a);

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  auto out = detail::zip("add", a, b, [](T x, T y) { return x + y; });
  return detail::finish("add", std::move(out), {&a, &b},
                        [](const Tensor<T>& g) { return std::vector<Tensor<T>>{g, g}; });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  auto out = detail::zip("sub", a, b, [](T x, T y) { return x - y; });
  return detail::finish("sub", std::move(out), {&a, &b},
                        [](const Tensor<T>& g) { return std::vector<Tensor<T>>{g, neg(g)}; });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  auto out = detail::zip("mul", a, b, [](T x, T y) { return x * y; });
  return detail::finish("mul", std::move(out), {&a, &b}, [a, b](const Tensor<T>& g) {
    return std::vector<Tensor<T>>{mul(g, b), mul(g, a)};
  });
}

template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  auto out = detail::zip("div", a, b, [](T x, T y) { return x / y; });
  return detail::finish("div", std::move(out), {&a, &b}, [a, b](const Tensor<T>& g) {
    Tensor<T> ga = div(g, b);
    Tensor<T> gb = neg(div(mul(ga, a), b));
    return std::vector<Tensor<T>>{ga, gb};
  });
}

template <class T>
Tensor<T> neg(const Tensor<T>& a) {
  auto out = detail::map(a, [](T x) { return -x; });
  return detail::finish("neg", std::move(out), {&a},
                        [](const Tensor<T>& g) { return std::vector<Tensor<T>>{neg(g)}; });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  auto out = detail::map(a, [c](T x) { return c * x; });
  return detail::finish("scale", std::move(out), {&a},
                        [c](const Tensor<T>& g) { return std::vector<Tensor<T>>{scale(g, c)}; });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
  auto out = detail::map(a, [c](T x) { return x + c; });
  return detail::finish("add_scalar", std::move(out), {&a},
                        [](const Tensor<T>& g) { return std::vector<Tensor<T>>{g}; });
}

template <class T>
Tensor<T> square(const Tensor<T>& a) {
  auto out = detail::map(a, [](T x) { return x * x; });
  return detail::finish("square", std::move(out), {&a}, [a](const Tensor<T>& g) {
    return std::vector<Tensor<T>>{scale(mul(g, a), T(2))};
  });
}

template <class T>
Tensor<T> exp(const Tensor<T>& a) {
  auto out = detail::map(a, [](T x) { return std::exp(x); });
  return detail::finish("exp", std::move(out), {&a},
                        [a](const Tensor<T>& g) { return std::vector<Tensor<T>>{mul(g, exp(a))}; });
}

template <class T>
Tensor<T> log(const Tensor<T>& a) {
  for (T v : a.data())
    if (!(v > T(0))) throw ValueError("log: non-positive or non-finite input " + std::to_string(v));
  auto out = detail::map(a, [](T x) { return std::log(x); });
  return detail::finish("log", std::move(out), {&a},
                        [a](const Tensor<T>& g) { return std::vector<Tensor<T>>{div(g, a)}; });
}

/// relu'(0) is 0.
template <class T>
Tensor<T> relu(const Tensor<T>& a) {
  Tensor<T> mask(a.shape());
  auto m = mask.mutable_data();
  auto d = a.data();
  auto& km = KinkMonitor::current();
  for (std::size_t i = 0; i < d.size(); ++i) {
    m[i] = d[i] > T(0) ? T(1) : T(0);
    if (km.active) km.mix(static_cast<std::uint64_t>(m[i] > 0) + 2 * i);
  }
  auto out = detail::map(a, [](T x) { return x > T(0) ? x : T(0); });
  return detail::finish("relu", std::move(out), {&a},
                        [mask](const Tensor<T>& g) { return std::vector<Tensor<T>>{mul(g, mask)}; });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  auto out = detail::map(a, [](T x) {
    return x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
  });
  return detail::finish("sigmoid", std::move(out), {&a}, [a](const Tensor<T>& g) {
    Tensor<T> s = sigmoid(a);
    Tensor<T> ds = mul(s, add_scalar(neg(s), T(1)));
    return std::vector<Tensor<T>>{mul(g, ds)};
  });
}

// ---------------------------------------------------------------- shape ops

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel(shape) != a.size())
    throw ShapeError("reshape: cannot view " + to_string(a.shape()) + " as " + to_string(shape));
  Tensor<T> out(shape, std::vector<T>(a.data().begin(), a.data().end()));
  const Shape from = a.shape();
  return detail::finish("reshape", std::move(out), {&a},
                        [from](const Tensor<T>& g) { return std::vector<Tensor<T>>{reshape(g, from)}; });
}

template <class T>
Tensor<T> expand(const Tensor<T>& a, const Shape& shape);

/// Sum over `axes`, keeping them as extent-1 dimensions.
template <class T>
Tensor<T> sum_axes(const Tensor<T>& a, const std::vector<std::size_t>& axes) {
  Shape os = a.shape();
  for (auto ax : axes) {
    if (ax >= os.size()) throw ShapeError("sum_axes: axis " + std::to_string(ax) + " out of range for " + to_string(a.shape()));
    os[ax] = 1;
  }
  Tensor<T> out(os);
  const Shape& is = a.shape();
  const std::size_t r = is.size();
  std::vector<std::size_t> istride(r, 1), ostride(r, 1);
  for (std::size_t i = r; i-- > 1;) {
    istride[i - 1] = istride[i] * is[i];
    ostride[i - 1] = ostride[i] * os[i];
  }
  auto src = a.data();
  auto dst = out.mutable_data();
  for (std::size_t flat = 0; flat < src.size(); ++flat) {
    std::size_t rem = flat, o = 0;
    for (std::size_t d = 0; d < r; ++d) {
      const std::size_t idx = rem / istride[d];
      rem %= istride[d];
      if (os[d] != 1) o += idx * ostride[d];
    }
    dst[o] += src[flat];
  }
  const Shape from = a.shape();
  return detail::finish("sum_axes", std::move(out), {&a},
                        [from](const Tensor<T>& g) { return std::vector<Tensor<T>>{expand(g, from)}; });
}

/// Broadcast extent-1 dimensions of `a` (same rank) up to `shape`.
template <class T>
Tensor<T> expand(const Tensor<T>& a, const Shape& shape) {
  const Shape& is = a.shape();
  if (is.size() != shape.size()) throw ShapeError("expand: rank mismatch " + to_string(is) + " -> " + to_string(shape));
  std::vector<std::size_t> axes;
  for (std::size_t d = 0; d < is.size(); ++d) {
    if (is[d] == shape[d]) continue;
    if (is[d] != 1) throw ShapeError("expand: cannot broadcast " + to_string(is) + " to " + to_string(shape));
    axes.push_back(d);
  }
  Tensor<T> out(shape);
  const std::size_t r = shape.size();
  std::vector<std::size_t> ostride(r, 1), istride(r, 1);
  for (std::size_t i = r; i-- > 1;) {
    ostride[i - 1] = ostride[i] * shape[i];
    istride[i - 1] = istride[i] * is[i];
  }
  auto src = a.data();
  auto dst = out.mutable_data();
  for (std::size_t flat = 0; flat < dst.size(); ++flat) {
    std::size_t rem = flat, s = 0;
    for (std::size_t d = 0; d < r; ++d) {
      const std::size_t idx = rem / ostride[d];
      rem %= ostride[d];
      if (is[d] != 1) s += idx * istride[d];
    }
    dst[flat] = src[s];
  }
  return detail::finish("expand", std::move(out), {&a},
                        [axes](const Tensor<T>& g) { return std::vector<Tensor<T>>{sum_axes(g, axes)}; });
}

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  T s = T(0);
  for (T v : a.data()) s += v;
  const Shape from = a.shape();
  return detail::finish("sum", Tensor<T>::scalar(s), {&a}, [from](const Tensor<T>& g) {
    return std::vector<Tensor<T>>{expand(reshape(g, Shape(from.size(), 1)), from)};
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
  if (a.size() == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(a), T(1) / static_cast<T>(a.size()));
}

template <class T>
Tensor<T> transpose2d(const Tensor<T>& a) {
  detail::require_rank("transpose2d", a.shape(), 2);
  const std::size_t m = a.dim(0), n = a.dim(1);
  Tensor<T> out({n, m});
  auto s = a.data();
  auto d = out.mutable_data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) d[j * m + i] = s[i * n + j];
  return detail::finish("transpose2d", std::move(out), {&a},
                        [](const Tensor<T>& g) { return std::vector<Tensor<T>>{transpose2d(g)}; });
}

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank("matmul", a.shape(), 2);
  detail::require_rank("matmul", b.shape(), 2);
  if (a.dim(1) != b.dim(0))
    throw ShapeError("matmul: inner dimensions differ " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  Tensor<T> out({a.dim(0), b.dim(1)});
  kernels::matmul<T>(a.data(), b.data(), a.dim(0), a.dim(1), b.dim(1), out.mutable_data());
  return detail::finish("matmul", std::move(out), {&a, &b}, [a, b](const Tensor<T>& g) {
    return std::vector<Tensor<T>>{matmul(g, transpose2d(b)), matmul(transpose2d(a), g)};
  });
}

namespace detail {
inline void outer_inner(const Shape& s, std::size_t axis, std::size_t& outer, std::size_t& inner) {
  outer = 1;
  inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= s[d];
  for (std::size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
}
}  // namespace detail

template <class T>
Tensor<T> pad_slice(const Tensor<T>& a, std::size_t axis, std::size_t start, std::size_t full);

/// Elements [start, start+len) along `axis`.
template <class T>
Tensor<T> slice(const Tensor<T>& a, std::size_t axis, std::size_t start, std::size_t len) {
  if (axis >= a.rank() || start + len > a.dim(axis))
    throw ShapeError("slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                     ") invalid for axis " + std::to_string(axis) + " of " + to_string(a.shape()));
  Shape os = a.shape();
  os[axis] = len;
  std::size_t outer, inner;
  detail::outer_inner(a.shape(), axis, outer, inner);
  Tensor<T> out(os);
  auto s = a.data();
  auto d = out.mutable_data();
  const std::size_t n = a.dim(axis);
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(s.begin() + static_cast<std::ptrdiff_t>((o * n + start) * inner), len * inner,
                d.begin() + static_cast<std::ptrdiff_t>(o * len * inner));
  return detail::finish("slice", std::move(out), {&a}, [axis, start, n](const Tensor<T>& g) {
    return std::vector<Tensor<T>>{pad_slice(g, axis, start, n)};
  });
}

/// Adjoint of slice: embed `a` at offset `start` of a zero tensor with extent `full` along `axis`.
template <class T>
Tensor<T> pad_slice(const Tensor<T>& a, std::size_t axis, std::size_t start, std::size_t full) {
  if (axis >= a.rank() || start + a.dim(axis) > full)
    throw ShapeError("pad_slice: cannot embed " + to_string(a.shape()) + " at " + std::to_string(start));
  Shape os = a.shape();
  const std::size_t len = a.dim(axis);
  os[axis] = full;
  std::size_t outer, inner;
  detail::outer_inner(a.shape(), axis, outer, inner);
  Tensor<T> out(os);
  auto s = a.data();
  auto d = out.mutable_data();
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(s.begin() + static_cast<std::ptrdiff_t>(o * len * inner), len * inner,
                d.begin() + static_cast<std::ptrdiff_t>((o * full + start) * inner));
  return detail::finish("pad_slice", std::move(out), {&a}, [axis, start, len](const Tensor<T>& g) {
    return std::vector<Tensor<T>>{slice(g, axis, start, len)};
  });
}

template <class T>
Tensor<T> concat(const Tensor<T>& a, const Tensor<T>& b, std::size_t axis) {
  Shape sa = a.shape(), sb = b.shape();
  if (sa.size() != sb.size() || axis >= sa.size())
    throw ShapeError("concat: incompatible " + to_string(sa) + " and " + to_string(sb));
  const std::size_t na = sa[axis], nb = sb[axis];
  sa[axis] = sb[axis] = 0;
  if (sa != sb) throw ShapeError("concat: incompatible " + to_string(a.shape()) + " and " + to_string(b.shape()));
  Shape os = a.shape();
  os[axis] = na + nb;
  std::size_t outer, inner;
  detail::outer_inner(os, axis, outer, inner);
  Tensor<T> out(os);
  auto d = out.mutable_data();
  auto x = a.data();
  auto y = b.data();
  for (std::size_t o = 0; o < outer; ++o) {
    auto dst = d.begin() + static_cast<std::ptrdiff_t>(o * (na + nb) * inner);
    std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(o * na * inner), na * inner, dst);
    std::copy_n(y.begin() + static_cast<std::ptrdiff_t>(o * nb * inner), nb * inner,
                dst + static_cast<std::ptrdiff_t>(na * inner));
  }
  return detail::finish("concat", std::move(out), {&a, &b}, [axis, na, nb](const Tensor<T>& g) {
    return std::vector<Tensor<T>>{slice(g, axis, 0, na), slice(g, axis, na, nb)};
  });
}

// ---------------------------------------------------------------- indexed ops

using IndexList = std::shared_ptr<const std::vector<std::size_t>>;

template <class T>
Tensor<T> scatter_flat(const Tensor<T>& a, const IndexList& idx, const Shape& out_shape);

/// out[i] = a[idx[i]]
template <class T>
Tensor<T> gather_flat(const Tensor<T>& a, const IndexList& idx, const Shape& out_shape) {
  if (idx->size() != numel(out_shape)) throw ShapeError("gather_flat: index count does not match output shape");
  Tensor<T> out(out_shape);
  auto s = a.data();
  auto d = out.mutable_data();
  for (std::size_t i = 0; i < idx->size(); ++i) {
    const std::size_t j = (*idx)[i];
    if (j >= s.size()) throw ShapeError("gather_flat: index out of range");
    d[i] = s[j];
  }
  const Shape from = a.shape();
  return detail::finish("gather_flat", std::move(out), {&a}, [idx, from](const Tensor<T>& g) {
    return std::vector<Tensor<T>>{scatter_flat(g, idx, from)};
  });
}

/// out[idx[i]] += a[i]; adjoint of gather_flat.
template <class T>
Tensor<T> scatter_flat(const Tensor<T>& a, const IndexList& idx, const Shape& out_shape) {
  if (idx->size() != a.size()) throw ShapeError("scatter_flat: index count does not match input");
  Tensor<T> out(out_shape);
  auto s = a.data();
  auto d = out.mutable_data();
  for (std::size_t i = 0; i < idx->size(); ++i) d[(*idx)[i]] += s[i];
  const Shape from = a.shape();
  return detail::finish("scatter_flat", std::move(out), {&a}, [idx, from](const Tensor<T>& g) {
    return std::vector<Tensor<T>>{gather_flat(g, idx, from)};
  });
}

/// rows[b] = a[b, labels[b]] for a of shape (B, C).
template <class T>
Tensor<T> pick(const Tensor<T>& a, std::span<const int> labels) {
  detail::require_rank("pick", a.shape(), 2);
  if (labels.size() != a.dim(0)) throw ShapeError("pick: label count does not match batch");
  auto idx = std::make_shared<std::vector<std::size_t>>(labels.size());
  for (std::size_t b = 0; b < labels.size(); ++b) {
    if (labels[b] < 0 || static_cast<std::size_t>(labels[b]) >= a.dim(1))
      throw ValueError("pick: label " + std::to_string(labels[b]) + " out of range [0," + std::to_string(a.dim(1)) + ")");
    (*idx)[b] = b * a.dim(1) + static_cast<std::size_t>(labels[b]);
  }
  return gather_flat(a, IndexList(idx), Shape{labels.size()});
}

// ---------------------------------------------------------------- convolution

struct Conv2dParams {
  std::size_t stride = 1;
  std::size_t pad = 0;
};

namespace detail {
template <class T>
kernels::ConvGeom conv_geom(const Shape& x, const Shape& w, Conv2dParams p) {
  return kernels::ConvGeom{x[0], x[1], x[2], x[3], w[0], w[2], w[3], p.stride, p.pad};
}
}  // namespace detail

template <class T>
Tensor<T> conv2d_input_grad(const Tensor<T>& gy, const Tensor<T>& w, const Shape& x_shape, Conv2dParams p);
template <class T>
Tensor<T> conv2d_weight_grad(const Tensor<T>& x, const Tensor<T>& gy, const Shape& w_shape, Conv2dParams p);

/// x: (B, Cin, H, W), w: (Cout, Cin, kh, kw) -> (B, Cout, Ho, Wo). No bias.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, Conv2dParams p = {}) {
  detail::require_rank("conv2d", x.shape(), 4);
  detail::require_rank("conv2d", w.shape(), 4);
  if (x.dim(1) != w.dim(1))
    throw ShapeError("conv2d: input " + to_string(x.shape()) + " channels differ from weight " + to_string(w.shape()));
  if (x.dim(2) + 2 * p.pad < w.dim(2) || x.dim(3) + 2 * p.pad < w.dim(3) || p.stride == 0)
    throw ShapeError("conv2d: kernel " + to_string(w.shape()) + " larger than padded input " + to_string(x.shape()));
  const auto g = detail::conv_geom<T>(x.shape(), w.shape(), p);
  Tensor<T> out({g.batch, g.out_ch, g.out_h(), g.out_w()});
  kernels::conv2d_forward<T>(x.data(), w.data(), g, out.mutable_data());
  const Shape xs = x.shape(), ws = w.shape();
  return detail::finish("conv2d", std::move(out), {&x, &w}, [x, w, xs, ws, p](const Tensor<T>& gy) {
    return std::vector<Tensor<T>>{conv2d_input_grad(gy, w, xs, p), conv2d_weight_grad(x, gy, ws, p)};
  });
}

template <class T>
Tensor<T> conv2d_input_grad(const Tensor<T>& gy, const Tensor<T>& w, const Shape& x_shape, Conv2dParams p) {
  const auto g = detail::conv_geom<T>(x_shape, w.shape(), p);
  detail::require_same("conv2d_input_grad", gy.shape(), Shape{g.batch, g.out_ch, g.out_h(), g.out_w()});
  Tensor<T> out(x_shape);
  kernels::conv2d_input_grad<T>(gy.data(), w.data(), g, out.mutable_data());
  return detail::finish("conv2d_input_grad", std::move(out), {&gy, &w}, [gy, w, x_shape, p](const Tensor<T>& gz) {
    // <gz, Ct(gy, w)> = <conv(gz, w), gy>
    return std::vector<Tensor<T>>{conv2d(gz, w, p), conv2d_weight_grad(gz, gy, w.shape(), p)};
  });
}

template <class T>
Tensor<T> conv2d_weight_grad(const Tensor<T>& x, const Tensor<T>& gy, const Shape& w_shape, Conv2dParams p) {
  const auto g = detail::conv_geom<T>(x.shape(), w_shape, p);
  detail::require_same("conv2d_weight_grad", gy.shape(), Shape{g.batch, g.out_ch, g.out_h(), g.out_w()});
  Tensor<T> out(w_shape);
  kernels::conv2d_weight_grad<T>(x.data(), gy.data(), g, out.mutable_data());
  const Shape xs = x.shape();
  return detail::finish("conv2d_weight_grad", std::move(out), {&x, &gy}, [x, gy, xs, p](const Tensor<T>& gw) {
    // <gw, Cw(x, gy)> = <conv(x, gw), gy>
    return std::vector<Tensor<T>>{conv2d_input_grad(gy, gw, xs, p), conv2d(x, gw, p)};
  });
}

/// Adds a per-channel bias b (C) to x (B, C, ...) or (B, C).
template <class T>
Tensor<T> add_channel_bias(const Tensor<T>& x, const Tensor<T>& b) {
  if (x.rank() < 2 || b.rank() != 1 || b.dim(0) != x.dim(1))
    throw ShapeError("add_channel_bias: bias " + to_string(b.shape()) + " does not match " + to_string(x.shape()));
  Shape bs(x.rank(), 1);
  bs[1] = b.dim(0);
  return add(x, expand(reshape(b, bs), x.shape()));
}

// ---------------------------------------------------------------- pooling / resampling

template <class T>
Tensor<T> upsample_nearest2d(const Tensor<T>& a, std::size_t k);

/// Non-overlapping k x k window sums over (B, C, H, W).
template <class T>
Tensor<T> sum_pool2d(const Tensor<T>& a, std::size_t k) {
  detail::require_rank("sum_pool2d", a.shape(), 4);
  if (k == 0 || a.dim(2) % k || a.dim(3) % k)
    throw ShapeError("sum_pool2d: extent " + to_string(a.shape()) + " not divisible by " + std::to_string(k));
  const std::size_t P = a.dim(0) * a.dim(1), H = a.dim(2), W = a.dim(3), h = H / k, w = W / k;
  Tensor<T> out({a.dim(0), a.dim(1), h, w});
  auto s = a.data();
  auto d = out.mutable_data();
  for (std::size_t p = 0; p < P; ++p)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) d[p * h * w + (y / k) * w + x / k] += s[p * H * W + y * W + x];
  return detail::finish("sum_pool2d", std::move(out), {&a},
                        [k](const Tensor<T>& g) { return std::vector<Tensor<T>>{upsample_nearest2d(g, k)}; });
}

/// Nearest-neighbour upsampling by integer factor k; adjoint of sum_pool2d.
template <class T>
Tensor<T> upsample_nearest2d(const Tensor<T>& a, std::size_t k) {
  detail::require_rank("upsample_nearest2d", a.shape(), 4);
  const std::size_t P = a.dim(0) * a.dim(1), h = a.dim(2), w = a.dim(3), H = h * k, W = w * k;
  Tensor<T> out({a.dim(0), a.dim(1), H, W});
  auto s = a.data();
  auto d = out.mutable_data();
  for (std::size_t p = 0; p < P; ++p)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) d[p * H * W + y * W + x] = s[p * h * w + (y / k) * w + x / k];
  return detail::finish("upsample_nearest2d", std::move(out), {&a},
                        [k](const Tensor<T>& g) { return std::vector<Tensor<T>>{sum_pool2d(g, k)}; });
}

template <class T>
Tensor<T> avg_pool2d(const Tensor<T>& a, std::size_t k) {
  return scale(sum_pool2d(a, k), T(1) / static_cast<T>(k * k));
}

/// k x k max pooling with stride k. Ties resolve to the first window element in row-major order.
template <class T>
Tensor<T> max_pool2d(const Tensor<T>& a, std::size_t k) {
  detail::require_rank("max_pool2d", a.shape(), 4);
  if (k == 0 || a.dim(2) % k || a.dim(3) % k)
    throw ShapeError("max_pool2d: extent " + to_string(a.shape()) + " not divisible by " + std::to_string(k));
  const std::size_t P = a.dim(0) * a.dim(1), H = a.dim(2), W = a.dim(3), h = H / k, w = W / k;
  auto idx = std::make_shared<std::vector<std::size_t>>(P * h * w);
  auto s = a.data();
  auto& km = KinkMonitor::current();
  for (std::size_t p = 0; p < P; ++p)
    for (std::size_t oy = 0; oy < h; ++oy)
      for (std::size_t ox = 0; ox < w; ++ox) {
        std::size_t best = p * H * W + oy * k * W + ox * k;
        for (std::size_t dy = 0; dy < k; ++dy)
          for (std::size_t dx = 0; dx < k; ++dx) {
            const std::size_t j = p * H * W + (oy * k + dy) * W + ox * k + dx;
            if (s[j] > s[best]) best = j;
          }
        (*idx)[p * h * w + oy * w + ox] = best;
        if (km.active) km.mix(best);
      }
  return gather_flat(a, IndexList(idx), Shape{a.dim(0), a.dim(1), h, w});
}

template <class T>
Tensor<T> bilinear_resize2d_adjoint(const Tensor<T>& g, std::size_t h, std::size_t w);

/// Bilinear resampling of (B, C, h, w) to (B, C, H, W) with half-pixel centers:
/// source coordinate (i + 0.5) * in/out - 0.5, clamped to the valid range.
template <class T>
Tensor<T> bilinear_resize2d(const Tensor<T>& a, std::size_t H, std::size_t W) {
  detail::require_rank("bilinear_resize2d", a.shape(), 4);
  if (H == 0 || W == 0) throw ShapeError("bilinear_resize2d: zero-size target");
  if (a.dim(2) == 0 || a.dim(3) == 0) throw ShapeError("bilinear_resize2d: empty source " + to_string(a.shape()));
  const std::size_t h = a.dim(2), w = a.dim(3);
  Tensor<T> out({a.dim(0), a.dim(1), H, W});
  kernels::bilinear_resize<T>(a.data(), a.dim(0) * a.dim(1), h, w, H, W, out.mutable_data());
  return detail::finish("bilinear_resize2d", std::move(out), {&a}, [h, w](const Tensor<T>& g) {
    return std::vector<Tensor<T>>{bilinear_resize2d_adjoint(g, h, w)};
  });
}

template <class T>
Tensor<T> bilinear_resize2d_adjoint(const Tensor<T>& g, std::size_t h, std::size_t w) {
  detail::require_rank("bilinear_resize2d_adjoint", g.shape(), 4);
  const std::size_t H = g.dim(2), W = g.dim(3);
  Tensor<T> out({g.dim(0), g.dim(1), h, w});
  kernels::bilinear_resize_adjoint<T>(g.data(), g.dim(0) * g.dim(1), h, w, H, W, out.mutable_data());
  return detail::finish("bilinear_resize2d_adjoint", std::move(out), {&g}, [H, W](const Tensor<T>& gz) {
    return std::vector<Tensor<T>>{bilinear_resize2d(gz, H, W)};
  });
}

// ---------------------------------------------------------------- softmax family

/// Row-wise log-softmax of a (N, C) tensor.
template <class T>
Tensor<T> log_softmax(const Tensor<T>& a) {
  detail::require_rank("log_softmax", a.shape(), 2);
  const std::size_t n = a.dim(0), c = a.dim(1);
  Tensor<T> out(a.shape());
  auto s = a.data();
  auto d = out.mutable_data();
  for (std::size_t i = 0; i < n; ++i) {
    T mx = s[i * c];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, s[i * c + j]);
    T z = T(0);
    for (std::size_t j = 0; j < c; ++j) z += std::exp(s[i * c + j] - mx);
    const T lse = mx + std::log(z);
    for (std::size_t j = 0; j < c; ++j) d[i * c + j] = s[i * c + j] - lse;
  }
  return detail::finish("log_softmax", std::move(out), {&a}, [a](const Tensor<T>& g) {
    Tensor<T> p = exp(log_softmax(a));
    Tensor<T> gs = expand(sum_axes(g, {1}), g.shape());
    return std::vector<Tensor<T>>{sub(g, mul(p, gs))};
  });
}

template <class T>
Tensor<T> softmax(const Tensor<T>& a) {
  return exp(log_softmax(a));
}

// ---------------------------------------------------------------- convenience

template <class T>
Tensor<T> constant_like(const Tensor<T>& a, T v) {
  return Tensor<T>(a.shape(), v);
}

}  // namespace reff
