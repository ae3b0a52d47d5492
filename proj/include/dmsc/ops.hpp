#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "dmsc/tensor.hpp"

namespace dmsc {

namespace detail {

template <typename F, typename... Ts>
void record(Tensor& out, F&& adjoint, const Ts&... inputs) {
  Tape* tape = Tape::active();
  if (tape == nullptr || !(inputs.requires_grad() || ...)) return;
  out.set_requires_grad(true);
  tape->record(out.node(), std::forward<F>(adjoint));
}

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1)
      throw ShapeError("cannot broadcast " + to_string(a) + " with " + to_string(b));
    out[i] = std::max(da, db);
  }
  return out;
}

// Strides of `s` viewed in an output of rank `r`; broadcast axes get stride 0.
inline std::vector<std::size_t> broadcast_strides(const Shape& s, const Shape& out) {
  const std::size_t r = out.size();
  std::vector<std::size_t> st(r, 0);
  std::size_t acc = 1;
  for (std::size_t k = s.size(); k-- > 0;) {
    const std::size_t i = k + (r - s.size());
    st[i] = s[k] == 1 ? 0 : acc;
    acc *= s[k];
  }
  return st;
}

// Calls f(out_index, a_index, b_index) for every output element.
template <typename F>
void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa,
                        const std::vector<std::size_t>& sb, F&& f) {
  const std::size_t r = out.size();
  const std::size_t total = numel(out);
  if (total == 0) return;
  if (r == 0) {
    f(0, 0, 0);
    return;
  }
  const std::size_t inner = out[r - 1];
  const std::size_t ia_step = sa[r - 1], ib_step = sb[r - 1];
  std::vector<std::size_t> idx(r, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t o = 0; o < total; o += inner) {
    for (std::size_t j = 0; j < inner; ++j) f(o + j, ia + j * ia_step, ib + j * ib_step);
    for (std::size_t k = r - 1; k-- > 0;) {
      ++idx[k];
      ia += sa[k];
      ib += sb[k];
      if (idx[k] < out[k]) break;
      ia -= sa[k] * idx[k];
      ib -= sb[k] * idx[k];
      idx[k] = 0;
    }
  }
}

template <typename Fwd, typename Bwd>
Tensor binary(const Tensor& a, const Tensor& b, Fwd fwd, Bwd bwd) {
  const Shape out_shape = a.shape() == b.shape() ? a.shape() : broadcast_shape(a.shape(), b.shape());
  Tensor out(out_shape);
  const auto sa = broadcast_strides(a.shape(), out_shape);
  const auto sb = broadcast_strides(b.shape(), out_shape);
  {
    const double* pa = a.ptr();
    const double* pb = b.ptr();
    double* po = out.ptr();
    if (a.shape() == b.shape()) {
      for (std::size_t i = 0; i < out.size(); ++i) po[i] = fwd(pa[i], pb[i]);
    } else {
      for_each_broadcast(out_shape, sa, sb,
                         [&](std::size_t o, std::size_t i, std::size_t j) { po[o] = fwd(pa[i], pb[j]); });
    }
  }
  record(
      out,
      [an = a.node(), bn = b.node(), on = out.node(), sa, sb, bwd] {
        const bool ga = an->requires_grad, gb = bn->requires_grad;
        if (ga) an->ensure_grad();
        if (gb) bn->ensure_grad();
        const double* g = on->grad.data();
        const double* pa = an->data.data();
        const double* pb = bn->data.data();
        for_each_broadcast(on->shape, sa, sb, [&](std::size_t o, std::size_t i, std::size_t j) {
          const auto [da, db] = bwd(pa[i], pb[j], g[o]);
          if (ga) an->grad[i] += da;
          if (gb) bn->grad[j] += db;
        });
      },
      a, b);
  return out;
}

// dfdx receives (x, y) where y = f(x).
template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& x, Fwd fwd, Deriv dfdx) {
  Tensor out(x.shape());
  const double* px = x.ptr();
  double* po = out.ptr();
  for (std::size_t i = 0; i < out.size(); ++i) po[i] = fwd(px[i]);
  record(
      out,
      [xn = x.node(), on = out.node(), dfdx] {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (std::size_t i = 0; i < on->data.size(); ++i)
          xn->grad[i] += on->grad[i] * dfdx(xn->data[i], on->data[i]);
      },
      x);
  return out;
}

struct AxisSplit {
  std::size_t outer, n, inner;
};

inline AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit r{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

}  // namespace detail

// ---- elementwise ---------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary(
      a, b, [](double x, double y) { return x + y; },
      [](double, double, double g) { return std::pair{g, g}; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary(
      a, b, [](double x, double y) { return x - y; },
      [](double, double, double g) { return std::pair{g, -g}; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary(
      a, b, [](double x, double y) { return x * y; },
      [](double x, double y, double g) { return std::pair{g * y, g * x}; });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  return detail::binary(
      a, b, [](double x, double y) { return x / y; },
      [](double x, double y, double g) { return std::pair{g / y, -g * x / (y * y)}; });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }

inline Tensor scale(const Tensor& x, double s) {
  return detail::unary(
      x, [s](double v) { return s * v; }, [s](double, double) { return s; });
}

inline Tensor add_scalar(const Tensor& x, double s) {
  return detail::unary(
      x, [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}

inline Tensor neg(const Tensor& x) { return scale(x, -1.0); }

inline Tensor exp(const Tensor& x) {
  return detail::unary(
      x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& x) {
  return detail::unary(
      x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

inline Tensor sqrt(const Tensor& x) {
  return detail::unary(
      x, [](double v) { return std::sqrt(v); }, [](double, double y) { return 0.5 / y; });
}

inline Tensor square(const Tensor& x) {
  return detail::unary(
      x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

inline Tensor abs(const Tensor& x) {
  return detail::unary(
      x, [](double v) { return std::abs(v); },
      [](double v, double) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); });
}

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary(
      x,
      [](double v) {
        if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

inline Tensor tanh(const Tensor& x) {
  return detail::unary(
      x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

inline Tensor relu(const Tensor& x) {
  return detail::unary(
      x, [](double v) { return v > 0 ? v : 0.0; }, [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

// Exact (erf) GELU.
inline Tensor gelu(const Tensor& x) {
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  constexpr double inv_sqrt2pi = 0.3989422804014326779;
  return detail::unary(
      x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
      [](double v, double) { return 0.5 * (1.0 + std::erf(v * inv_sqrt2)) + v * inv_sqrt2pi * std::exp(-0.5 * v * v); });
}

inline Tensor clamp_min(const Tensor& x, double lo) {
  return detail::unary(
      x, [lo](double v) { return v > lo ? v : lo; }, [lo](double v, double) { return v > lo ? 1.0 : 0.0; });
}

// ---- reductions ----------------------------------------------------------

/// Sum over `axes`. With keepdim the reduced axes stay as size 1.
inline Tensor sum(const Tensor& x, std::vector<int> axes, bool keepdim = false) {
  const std::size_t r = x.rank();
  std::vector<bool> reduced(r, false);
  for (int a : axes) reduced[normalize_axis(a, r)] = true;
  Shape kept(r);
  for (std::size_t i = 0; i < r; ++i) kept[i] = reduced[i] ? 1 : x.shape()[i];
  for (std::size_t i = 0; i < r; ++i)
    if (reduced[i] && x.shape()[i] == 0) throw ShapeError("reduction over empty axis");
  Shape out_shape;
  if (keepdim) {
    out_shape = kept;
  } else {
    for (std::size_t i = 0; i < r; ++i)
      if (!reduced[i]) out_shape.push_back(x.shape()[i]);
    if (out_shape.empty()) out_shape = {1};
  }
  Tensor out(out_shape);
  // Map input -> output through the keepdim view.
  const auto so = detail::broadcast_strides(kept, x.shape());
  const std::vector<std::size_t> unit(r, 0);
  {
    const double* px = x.ptr();
    double* po = out.ptr();
    detail::for_each_broadcast(x.shape(), so, unit, [&](std::size_t i, std::size_t o, std::size_t) { po[o] += px[i]; });
  }
  detail::record(
      out,
      [xn = x.node(), on = out.node(), so, unit] {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        detail::for_each_broadcast(xn->shape, so, unit,
                                   [&](std::size_t i, std::size_t o, std::size_t) { xn->grad[i] += on->grad[o]; });
      },
      x);
  return out;
}

inline Tensor mean(const Tensor& x, std::vector<int> axes, bool keepdim = false) {
  std::size_t count = 1;
  for (int a : axes) count *= x.shape()[normalize_axis(a, x.rank())];
  return scale(sum(x, std::move(axes), keepdim), 1.0 / static_cast<double>(count));
}

inline Tensor sum_all(const Tensor& x) {
  std::vector<int> axes(x.rank());
  std::iota(axes.begin(), axes.end(), 0);
  return sum(x, axes);
}

inline Tensor mean_all(const Tensor& x) { return scale(sum_all(x), 1.0 / static_cast<double>(x.size())); }

/// Max along one axis; the adjoint routes to the first maximal element.
inline Tensor max(const Tensor& x, int axis, bool keepdim = false) {
  const std::size_t ax = normalize_axis(axis, x.rank());
  const auto sp = detail::split_at(x.shape(), ax);
  if (sp.n == 0) throw ShapeError("max over empty axis");
  Shape out_shape = x.shape();
  if (keepdim) {
    out_shape[ax] = 1;
  } else {
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(ax));
    if (out_shape.empty()) out_shape = {1};
  }
  Tensor out(out_shape);
  std::vector<std::size_t> arg(sp.outer * sp.inner);
  const double* px = x.ptr();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      std::size_t best = o * sp.n * sp.inner + i;
      for (std::size_t k = 1; k < sp.n; ++k) {
        const std::size_t idx = (o * sp.n + k) * sp.inner + i;
        if (px[idx] > px[best]) best = idx;
      }
      arg[o * sp.inner + i] = best;
      out[o * sp.inner + i] = px[best];
    }
  detail::record(
      out,
      [xn = x.node(), on = out.node(), arg = std::move(arg)] {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (std::size_t j = 0; j < arg.size(); ++j) xn->grad[arg[j]] += on->grad[j];
      },
      x);
  return out;
}

// ---- shape manipulation --------------------------------------------------

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size())
    throw ShapeError("cannot reshape " + to_string(x.shape()) + " to " + to_string(shape));
  Tensor out(std::move(shape), std::vector<double>(x.data().begin(), x.data().end()));
  detail::record(
      out,
      [xn = x.node(), on = out.node()] {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (std::size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i];
      },
      x);
  return out;
}

inline Tensor permute(const Tensor& x, const std::vector<std::size_t>& dims) {
  const std::size_t r = x.rank();
  if (dims.size() != r) throw ShapeError("permute rank mismatch for " + to_string(x.shape()));
  Shape out_shape(r);
  Shape in_strides(r);
  std::size_t acc = 1;
  for (std::size_t k = r; k-- > 0;) {
    in_strides[k] = acc;
    acc *= x.shape()[k];
  }
  std::vector<std::size_t> src_strides(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = x.shape()[dims[i]];
    src_strides[i] = in_strides[dims[i]];
  }
  Tensor out(out_shape);
  const std::vector<std::size_t> unit(r, 0);
  {
    const double* px = x.ptr();
    double* po = out.ptr();
    detail::for_each_broadcast(out_shape, src_strides, unit,
                               [&](std::size_t o, std::size_t s, std::size_t) { po[o] = px[s]; });
  }
  detail::record(
      out,
      [xn = x.node(), on = out.node(), src_strides, unit] {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        detail::for_each_broadcast(on->shape, src_strides, unit,
                                   [&](std::size_t o, std::size_t s, std::size_t) { xn->grad[s] += on->grad[o]; });
      },
      x);
  return out;
}

/// Elements [start, start+len) along `axis`.
inline Tensor slice(const Tensor& x, int axis, std::size_t start, std::size_t len) {
  const std::size_t ax = normalize_axis(axis, x.rank());
  const auto sp = detail::split_at(x.shape(), ax);
  if (start + len > sp.n)
    throw ShapeError("slice [" + std::to_string(start) + "," + std::to_string(start + len) + ") out of range for " +
                     to_string(x.shape()));
  Shape out_shape = x.shape();
  out_shape[ax] = len;
  Tensor out(out_shape);
  const double* px = x.ptr();
  for (std::size_t o = 0; o < sp.outer; ++o)
    std::copy_n(px + (o * sp.n + start) * sp.inner, len * sp.inner, out.ptr() + o * len * sp.inner);
  detail::record(
      out,
      [xn = x.node(), on = out.node(), sp, start, len] {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (std::size_t o = 0; o < sp.outer; ++o)
          for (std::size_t j = 0; j < len * sp.inner; ++j)
            xn->grad[(o * sp.n + start) * sp.inner + j] += on->grad[o * len * sp.inner + j];
      },
      x);
  return out;
}

inline Tensor concat(const std::vector<Tensor>& xs, int axis) {
  if (xs.empty()) throw ShapeError("concat of zero tensors");
  const std::size_t ax = normalize_axis(axis, xs[0].rank());
  Shape out_shape = xs[0].shape();
  out_shape[ax] = 0;
  for (const auto& x : xs) {
    Shape a = x.shape(), b = xs[0].shape();
    a[ax] = b[ax] = 0;
    if (a != b) throw ShapeError("concat shape mismatch: " + to_string(x.shape()) + " vs " + to_string(xs[0].shape()));
    out_shape[ax] += x.shape()[ax];
  }
  Tensor out(out_shape);
  const auto osp = detail::split_at(out_shape, ax);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& x : xs) {
    offsets.push_back(off);
    const auto sp = detail::split_at(x.shape(), ax);
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::copy_n(x.ptr() + o * sp.n * sp.inner, sp.n * sp.inner, out.ptr() + (o * osp.n + off) * osp.inner);
    off += sp.n;
  }
  Tape* tape = Tape::active();
  bool any = false;
  for (const auto& x : xs) any = any || x.requires_grad();
  if (tape != nullptr && any) {
    out.set_requires_grad(true);
    std::vector<std::shared_ptr<TensorNode>> nodes;
    for (const auto& x : xs) nodes.push_back(x.node());
    tape->record(out.node(), [nodes, on = out.node(), offsets, osp, ax] {
      for (std::size_t t = 0; t < nodes.size(); ++t) {
        auto& xn = nodes[t];
        if (!xn->requires_grad) continue;
        xn->ensure_grad();
        const std::size_t n = xn->shape[ax];
        for (std::size_t o = 0; o < osp.outer; ++o)
          for (std::size_t j = 0; j < n * osp.inner; ++j)
            xn->grad[o * n * osp.inner + j] += on->grad[(o * osp.n + offsets[t]) * osp.inner + j];
      }
    });
  }
  return out;
}

/// Rows of `x` (axis 0) at `idx`.
inline Tensor index_select(const Tensor& x, const std::vector<std::size_t>& idx) {
  const std::size_t rows = x.shape()[0];
  const std::size_t row = rows == 0 ? 0 : x.size() / rows;
  Shape out_shape = x.shape();
  out_shape[0] = idx.size();
  Tensor out(out_shape);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= rows) throw ShapeError("index_select index " + std::to_string(idx[i]) + " out of range");
    std::copy_n(x.ptr() + idx[i] * row, row, out.ptr() + i * row);
  }
  detail::record(
      out,
      [xn = x.node(), on = out.node(), idx, row] {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (std::size_t i = 0; i < idx.size(); ++i)
          for (std::size_t j = 0; j < row; ++j) xn->grad[idx[i] * row + j] += on->grad[i * row + j];
      },
      x);
  return out;
}

/// Adjoint of index_select: a zero tensor with `rows` rows where row idx[i]
/// accumulates src row i.
inline Tensor scatter_rows(const Tensor& src, const std::vector<std::size_t>& idx, std::size_t rows) {
  if (src.shape()[0] != idx.size()) throw ShapeError("scatter_rows index count mismatch");
  const std::size_t row = idx.empty() ? 0 : src.size() / idx.size();
  Shape out_shape = src.shape();
  out_shape[0] = rows;
  Tensor out(out_shape);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= rows) throw ShapeError("scatter_rows index out of range");
    for (std::size_t j = 0; j < row; ++j) out[idx[i] * row + j] += src[i * row + j];
  }
  detail::record(
      out,
      [sn = src.node(), on = out.node(), idx, row] {
        if (!sn->requires_grad) return;
        sn->ensure_grad();
        for (std::size_t i = 0; i < idx.size(); ++i)
          for (std::size_t j = 0; j < row; ++j) sn->grad[i * row + j] += on->grad[idx[i] * row + j];
      },
      src);
  return out;
}

/// Repeats the final element of the last axis `n` more times.
inline Tensor replication_pad_right(const Tensor& x, std::size_t n) {
  const std::size_t len = x.shape().back();
  if (len == 0) throw ShapeError("replication_pad_right on empty axis");
  const std::size_t rows = x.size() / len;
  Shape out_shape = x.shape();
  out_shape.back() = len + n;
  Tensor out(out_shape);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* src = x.ptr() + r * len;
    double* dst = out.ptr() + r * (len + n);
    std::copy_n(src, len, dst);
    std::fill_n(dst + len, n, src[len - 1]);
  }
  detail::record(
      out,
      [xn = x.node(), on = out.node(), len, n, rows] {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
          const double* g = on->grad.data() + r * (len + n);
          double* gx = xn->grad.data() + r * len;
          for (std::size_t j = 0; j < len; ++j) gx[j] += g[j];
          for (std::size_t j = 0; j < n; ++j) gx[len - 1] += g[len + j];
        }
      },
      x);
  return out;
}

inline std::size_t unfold_count(std::size_t len, std::size_t patch, std::size_t stride) {
  return (len - patch + stride - 1) / stride + 1;
}

/// Sliding windows of length `patch` every `stride` steps along the last axis:
/// [..., L] -> [..., N, patch]. The input must already be padded so that the
/// last window ends exactly at L.
inline Tensor unfold(const Tensor& x, std::size_t patch, std::size_t stride) {
  const std::size_t len = x.shape().back();
  if (patch < 1 || stride < 1) throw ShapeError("unfold needs patch >= 1 and stride >= 1");
  if (patch > len)
    throw ShapeError("unfold patch " + std::to_string(patch) + " longer than input " + std::to_string(len) +
                     "; pad first");
  const std::size_t n = unfold_count(len, patch, stride);
  if ((n - 1) * stride + patch != len)
    throw ShapeError("unfold of length " + std::to_string(len) + " with patch " + std::to_string(patch) +
                     " stride " + std::to_string(stride) + " leaves a partial window; pad first");
  const std::size_t rows = x.size() / len;
  Shape out_shape = x.shape();
  out_shape.back() = n;
  out_shape.push_back(patch);
  Tensor out(out_shape);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t i = 0; i < n; ++i)
      std::copy_n(x.ptr() + r * len + i * stride, patch, out.ptr() + (r * n + i) * patch);
  detail::record(
      out,
      [xn = x.node(), on = out.node(), len, patch, stride, n, rows] {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < patch; ++j)
              xn->grad[r * len + i * stride + j] += on->grad[(r * n + i) * patch + j];
      },
      x);
  return out;
}

// ---- linear algebra ------------------------------------------------------

namespace detail {
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using MapM = Eigen::Map<RowMat>;
}  // namespace detail

/// Batched matrix product [..., m, k] x [..., k, n] -> [..., m, n] with
/// broadcast batch dimensions.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2)
    throw ShapeError("matmul needs rank >= 2, got " + to_string(a.shape()) + " and " + to_string(b.shape()));
  const std::size_t m = a.dim(-2), k = a.dim(-1), k2 = b.dim(-2), n = b.dim(-1);
  if (k != k2) throw ShapeError("matmul inner dimension mismatch: " + to_string(a.shape()) + " x " + to_string(b.shape()));
  const Shape abatch(a.shape().begin(), a.shape().end() - 2);
  const Shape bbatch(b.shape().begin(), b.shape().end() - 2);
  Shape out_shape;
  std::vector<std::size_t> aoff, boff;
  if (bbatch.empty()) {
    // Common weight case: fold every batch dim of a into rows.
    out_shape = abatch;
    out_shape.push_back(m);
    out_shape.push_back(n);
    const std::size_t rows = a.size() / k;
    Tensor out(out_shape);
    detail::MapM(out.ptr(), rows, n).noalias() = detail::MapC(a.ptr(), rows, k) * detail::MapC(b.ptr(), k, n);
    detail::record(
        out,
        [an = a.node(), bn = b.node(), on = out.node(), rows, k, n] {
          detail::MapC g(on->grad.data(), rows, n);
          if (an->requires_grad) {
            an->ensure_grad();
            detail::MapM(an->grad.data(), rows, k).noalias() += g * detail::MapC(bn->data.data(), k, n).transpose();
          }
          if (bn->requires_grad) {
            bn->ensure_grad();
            detail::MapM(bn->grad.data(), k, n).noalias() += detail::MapC(an->data.data(), rows, k).transpose() * g;
          }
        },
        a, b);
    return out;
  }
  const Shape batch = detail::broadcast_shape(abatch, bbatch);
  const auto sa = detail::broadcast_strides(abatch, batch);
  const auto sb = detail::broadcast_strides(bbatch, batch);
  const std::size_t nb = numel(batch);
  aoff.reserve(nb);
  boff.reserve(nb);
  if (batch.empty()) {
    aoff.push_back(0);
    boff.push_back(0);
  } else {
    detail::for_each_broadcast(batch, sa, sb, [&](std::size_t, std::size_t i, std::size_t j) {
      aoff.push_back(i * m * k);
      boff.push_back(j * k * n);
    });
  }
  out_shape = batch;
  out_shape.push_back(m);
  out_shape.push_back(n);
  Tensor out(out_shape);
  for (std::size_t t = 0; t < aoff.size(); ++t)
    detail::MapM(out.ptr() + t * m * n, m, n).noalias() =
        detail::MapC(a.ptr() + aoff[t], m, k) * detail::MapC(b.ptr() + boff[t], k, n);
  detail::record(
      out,
      [an = a.node(), bn = b.node(), on = out.node(), aoff, boff, m, k, n] {
        if (an->requires_grad) an->ensure_grad();
        if (bn->requires_grad) bn->ensure_grad();
        for (std::size_t t = 0; t < aoff.size(); ++t) {
          detail::MapC g(on->grad.data() + t * m * n, m, n);
          if (an->requires_grad)
            detail::MapM(an->grad.data() + aoff[t], m, k).noalias() +=
                g * detail::MapC(bn->data.data() + boff[t], k, n).transpose();
          if (bn->requires_grad)
            detail::MapM(bn->grad.data() + boff[t], k, n).noalias() +=
                detail::MapC(an->data.data() + aoff[t], m, k).transpose() * g;
        }
      },
      a, b);
  return out;
}

/// x[..., in] * W[in, out] + b[out]. `bias` may be undefined.
inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias = {}) {
  if (x.dim(-1) != weight.dim(0))
    throw ShapeError("linear input width " + std::to_string(x.dim(-1)) + " does not match weight " +
                     to_string(weight.shape()));
  Tensor y = matmul(x, weight);
  return bias.defined() ? add(y, bias) : y;
}

// ---- convolution ---------------------------------------------------------

struct Conv1dOptions {
  std::size_t stride = 1;
  std::size_t dilation = 1;
  std::size_t pad_left = 0;
  std::size_t pad_right = 0;
  std::size_t groups = 1;

  // Zero padding that keeps the length unchanged at stride 1.
  static Conv1dOptions same(std::size_t kernel, std::size_t dilation = 1, std::size_t groups = 1) {
    const std::size_t total = dilation * (kernel - 1);
    return {1, dilation, total / 2, total - total / 2, groups};
  }
};

/// x[B, Cin, L] (*) w[Cout, Cin/groups, K] with zero padding.
inline Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& bias = {}, Conv1dOptions opt = {}) {
  if (x.rank() != 3 || w.rank() != 3)
    throw ShapeError("conv1d expects x[B,Cin,L] and w[Cout,Cin/g,K], got " + to_string(x.shape()) + " and " +
                     to_string(w.shape()));
  const std::size_t batch = x.dim(0), cin = x.dim(1), len = x.dim(2);
  const std::size_t cout = w.dim(0), cpg = w.dim(1), kernel = w.dim(2);
  const std::size_t g = opt.groups;
  if (g == 0 || cin % g != 0 || cout % g != 0 || cpg != cin / g)
    throw ShapeError("conv1d channel/group mismatch: x " + to_string(x.shape()) + ", w " + to_string(w.shape()) +
                     ", groups " + std::to_string(g));
  if (kernel < 1 || opt.dilation < 1 || opt.stride < 1) throw ShapeError("conv1d needs K, stride, dilation >= 1");
  const std::ptrdiff_t span = static_cast<std::ptrdiff_t>(opt.dilation * (kernel - 1) + 1);
  const std::ptrdiff_t padded = static_cast<std::ptrdiff_t>(len + opt.pad_left + opt.pad_right);
  if (padded < span) throw ShapeError("conv1d input too short: length " + std::to_string(len) + " for receptive span " + std::to_string(span));
  const std::size_t lout = static_cast<std::size_t>((padded - span) / static_cast<std::ptrdiff_t>(opt.stride)) + 1;
  if (bias.defined() && bias.size() != cout) throw ShapeError("conv1d bias size mismatch");
  const std::size_t opg = cout / g;

  // Calls f(x_index, w_index, out_index) for every valid tap.
  auto taps = [=](auto&& f) {
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t co = 0; co < cout; ++co) {
        const std::size_t grp = co / opg;
        for (std::size_t ci = 0; ci < cpg; ++ci) {
          const std::size_t xc = grp * cpg + ci;
          for (std::size_t kk = 0; kk < kernel; ++kk) {
            const std::size_t widx = (co * cpg + ci) * kernel + kk;
            const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(kk * opt.dilation) - static_cast<std::ptrdiff_t>(opt.pad_left);
            for (std::size_t t = 0; t < lout; ++t) {
              const std::ptrdiff_t pos = static_cast<std::ptrdiff_t>(t * opt.stride) + shift;
              if (pos < 0 || pos >= static_cast<std::ptrdiff_t>(len)) continue;
              f((b * cin + xc) * len + static_cast<std::size_t>(pos), widx, (b * cout + co) * lout + t);
            }
          }
        }
      }
  };

  Tensor out(Shape{batch, cout, lout});
  {
    const double* px = x.ptr();
    const double* pw = w.ptr();
    double* po = out.ptr();
    taps([&](std::size_t xi, std::size_t wi, std::size_t oi) { po[oi] += px[xi] * pw[wi]; });
    if (bias.defined())
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t co = 0; co < cout; ++co)
          for (std::size_t t = 0; t < lout; ++t) po[(b * cout + co) * lout + t] += bias[co];
  }
  Tape* tape = Tape::active();
  if (tape != nullptr && (x.requires_grad() || w.requires_grad() || bias.requires_grad())) {
    out.set_requires_grad(true);
    tape->record(out.node(), [xn = x.node(), wn = w.node(), bn = bias.defined() ? bias.node() : nullptr,
                              on = out.node(), taps, batch, cout, lout] {
      const bool gx = xn->requires_grad, gw = wn->requires_grad;
      if (gx) xn->ensure_grad();
      if (gw) wn->ensure_grad();
      const double* g = on->grad.data();
      taps([&](std::size_t xi, std::size_t wi, std::size_t oi) {
        if (gx) xn->grad[xi] += g[oi] * wn->data[wi];
        if (gw) wn->grad[wi] += g[oi] * xn->data[xi];
      });
      if (bn && bn->requires_grad) {
        bn->ensure_grad();
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t co = 0; co < cout; ++co)
            for (std::size_t t = 0; t < lout; ++t) bn->grad[co] += g[(b * cout + co) * lout + t];
      }
    });
  }
  return out;
}

// ---- normalization -------------------------------------------------------

inline Tensor softmax(const Tensor& x, int axis) {
  const std::size_t ax = normalize_axis(axis, x.rank());
  const auto sp = detail::split_at(x.shape(), ax);
  if (sp.n == 0) throw ShapeError("softmax over empty axis");
  Tensor out(x.shape());
  const double* px = x.ptr();
  double* py = out.ptr();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.n * sp.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < sp.n; ++k) mx = std::max(mx, px[base + k * sp.inner]);
      double s = 0.0;
      for (std::size_t k = 0; k < sp.n; ++k) {
        const double e = std::exp(px[base + k * sp.inner] - mx);
        py[base + k * sp.inner] = e;
        s += e;
      }
      for (std::size_t k = 0; k < sp.n; ++k) py[base + k * sp.inner] /= s;
    }
  detail::record(
      out,
      [xn = x.node(), on = out.node(), sp] {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        const double* y = on->data.data();
        const double* g = on->grad.data();
        for (std::size_t o = 0; o < sp.outer; ++o)
          for (std::size_t i = 0; i < sp.inner; ++i) {
            const std::size_t base = o * sp.n * sp.inner + i;
            double dot = 0.0;
            for (std::size_t k = 0; k < sp.n; ++k) dot += g[base + k * sp.inner] * y[base + k * sp.inner];
            for (std::size_t k = 0; k < sp.n; ++k) {
              const std::size_t j = base + k * sp.inner;
              xn->grad[j] += y[j] * (g[j] - dot);
            }
          }
      },
      x);
  return out;
}

/// Normalizes to zero mean / unit (biased) variance along `axis`. No affine.
inline Tensor layernorm(const Tensor& x, int axis, double eps = 1e-5) {
  if (!(eps > 0)) throw ShapeError("layernorm eps must be positive");
  const std::size_t ax = normalize_axis(axis, x.rank());
  const auto sp = detail::split_at(x.shape(), ax);
  if (sp.n == 0) throw ShapeError("layernorm over empty axis");
  Tensor out(x.shape());
  std::vector<double> inv_std(sp.outer * sp.inner);
  const double* px = x.ptr();
  double* py = out.ptr();
  const double n = static_cast<double>(sp.n);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.n * sp.inner + i;
      double mu = 0.0;
      for (std::size_t k = 0; k < sp.n; ++k) mu += px[base + k * sp.inner];
      mu /= n;
      double var = 0.0;
      for (std::size_t k = 0; k < sp.n; ++k) {
        const double d = px[base + k * sp.inner] - mu;
        var += d * d;
      }
      var /= n;
      const double is = 1.0 / std::sqrt(var + eps);
      inv_std[o * sp.inner + i] = is;
      for (std::size_t k = 0; k < sp.n; ++k) py[base + k * sp.inner] = (px[base + k * sp.inner] - mu) * is;
    }
  detail::record(
      out,
      [xn = x.node(), on = out.node(), sp, inv_std = std::move(inv_std)] {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        const double* y = on->data.data();
        const double* g = on->grad.data();
        const double n = static_cast<double>(sp.n);
        for (std::size_t o = 0; o < sp.outer; ++o)
          for (std::size_t i = 0; i < sp.inner; ++i) {
            const std::size_t base = o * sp.n * sp.inner + i;
            double gm = 0.0, gy = 0.0;
            for (std::size_t k = 0; k < sp.n; ++k) {
              gm += g[base + k * sp.inner];
              gy += g[base + k * sp.inner] * y[base + k * sp.inner];
            }
            gm /= n;
            gy /= n;
            const double is = inv_std[o * sp.inner + i];
            for (std::size_t k = 0; k < sp.n; ++k) {
              const std::size_t j = base + k * sp.inner;
              xn->grad[j] += is * (g[j] - gm - y[j] * gy);
            }
          }
      },
      x);
  return out;
}

}  // namespace dmsc
