#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "mhex/errors.hpp"
#include "mhex/tensor.hpp"

// Differentiable primitives. Every op reads its inputs' values, writes a new
// node, and records a closure that maps the output gradient back onto the
// inputs that require it.

namespace mhex {

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

// c[m x n] (+)= op(a) * op(b), row-major, inner extent k.
inline void gemm(const double* a, bool trans_a, const double* b, bool trans_b, double* c,
                 std::size_t m, std::size_t n, std::size_t k, bool accumulate) {
  const auto M = static_cast<Eigen::Index>(m);
  const auto N = static_cast<Eigen::Index>(n);
  const auto K = static_cast<Eigen::Index>(k);
  MutMap C(c, M, N);
  if (!accumulate) C.setZero();
  if (!trans_a && !trans_b)
    C.noalias() += ConstMap(a, M, K) * ConstMap(b, K, N);
  else if (trans_a && !trans_b)
    C.noalias() += ConstMap(a, K, M).transpose() * ConstMap(b, K, N);
  else if (!trans_a && trans_b)
    C.noalias() += ConstMap(a, M, K) * ConstMap(b, N, K).transpose();
  else
    C.noalias() += ConstMap(a, K, M).transpose() * ConstMap(b, N, K).transpose();
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

// View of `shape` as [outer, n, inner] around `axis`.
struct AxisView {
  std::size_t outer = 1, n = 1, inner = 1;
};

inline AxisView axis_view(const Shape& shape, std::size_t axis) {
  AxisView v;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i < axis)
      v.outer *= shape[i];
    else if (i == axis)
      v.n = shape[i];
    else
      v.inner *= shape[i];
  }
  return v;
}

inline double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  Node* pa = a.node();
  Node* pb = b.node();
  return make_result(a.shape(), std::move(out), {a, b},
                     [pa, pb](std::span<const double> g, GradSink& sink) {
                       for (Node* p : {pa, pb}) {
                         auto gi = sink(*p);
                         for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += g[i];
                       }
                     });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  Node* pa = a.node();
  Node* pb = b.node();
  return make_result(a.shape(), std::move(out), {a, b},
                     [pa, pb](std::span<const double> g, GradSink& sink) {
                       auto ga = sink(*pa);
                       for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
                       auto gb = sink(*pb);
                       for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g[i];
                     });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  Node* pa = a.node();
  Node* pb = b.node();
  return make_result(a.shape(), std::move(out), {a, b},
                     [pa, pb](std::span<const double> g, GradSink& sink) {
                       auto ga = sink(*pa);
                       for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * pb->value[i];
                       auto gb = sink(*pb);
                       for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * pa->value[i];
                     });
}

inline Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
  Node* pa = a.node();
  return make_result(a.shape(), std::move(out), {a},
                     [pa, s](std::span<const double> g, GradSink& sink) {
                       auto ga = sink(*pa);
                       for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * s;
                     });
}

/// max(x, 0); the subgradient at exactly 0 is 0.
inline Tensor relu(const Tensor& x) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > 0.0 || std::isnan(x[i]) ? x[i] : 0.0;  // NaN passes through
  Node* px = x.node();
  return make_result(x.shape(), std::move(out), {x},
                     [px](std::span<const double> g, GradSink& sink) {
                       auto gx = sink(*px);
                       for (std::size_t i = 0; i < gx.size(); ++i)
                         if (px->value[i] > 0.0) gx[i] += g[i];
                     });
}

inline Tensor sigmoid(const Tensor& x) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = detail::stable_sigmoid(x[i]);
  Node* px = x.node();
  std::vector<double> s = out;
  return make_result(x.shape(), std::move(out), {x},
                     [px, s = std::move(s)](std::span<const double> g, GradSink& sink) {
                       auto gx = sink(*px);
                       for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * s[i] * (1.0 - s[i]);
                     });
}

// ---------------------------------------------------------------- reductions

inline Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  Node* px = x.node();
  return make_result({1}, {acc}, {x}, [px](std::span<const double> g, GradSink& sink) {
    auto gx = sink(*px);
    for (auto& v : gx) v += g[0];
  });
}

/// Mean over one axis; the axis is removed from the result shape.
inline Tensor mean_axis(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank())
    throw DimensionError("mean_axis: axis " + std::to_string(axis) + " out of range for " +
                         shape_str(x.shape()));
  const auto v = detail::axis_view(x.shape(), axis);
  Shape out_shape;
  for (std::size_t i = 0; i < x.rank(); ++i)
    if (i != axis) out_shape.push_back(x.dim(i));
  if (out_shape.empty()) out_shape = {1};
  std::vector<double> out(v.outer * v.inner, 0.0);
  const auto& xv = x.values();
  const double inv = 1.0 / static_cast<double>(v.n);
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t j = 0; j < v.n; ++j)
      for (std::size_t i = 0; i < v.inner; ++i)
        out[o * v.inner + i] += xv[(o * v.n + j) * v.inner + i];
  for (auto& e : out) e *= inv;
  Node* px = x.node();
  return make_result(std::move(out_shape), std::move(out), {x},
                     [px, v, inv](std::span<const double> g, GradSink& sink) {
                       auto gx = sink(*px);
                       if (gx.empty()) return;
                       for (std::size_t o = 0; o < v.outer; ++o)
                         for (std::size_t j = 0; j < v.n; ++j)
                           for (std::size_t i = 0; i < v.inner; ++i)
                             gx[(o * v.n + j) * v.inner + i] += g[o * v.inner + i] * inv;
                     });
}

/// Per-channel spatial mean of a C x H x W map (or C x N matrix).
inline Tensor global_avg_pool(const Tensor& x) {
  if (x.rank() < 2)
    throw DimensionError("global_avg_pool expects C x H x W, got " + shape_str(x.shape()));
  std::size_t spatial = 1;
  for (std::size_t i = 1; i < x.rank(); ++i) spatial *= x.dim(i);
  const std::size_t c = x.dim(0);
  std::vector<double> out(c, 0.0);
  const auto& xv = x.values();
  for (std::size_t k = 0; k < c; ++k) {
    double acc = 0.0;
    for (std::size_t p = 0; p < spatial; ++p) acc += xv[k * spatial + p];
    out[k] = acc / static_cast<double>(spatial);
  }
  Node* px = x.node();
  return make_result({c}, std::move(out), {x},
                     [px, c, spatial](std::span<const double> g, GradSink& sink) {
                       auto gx = sink(*px);
                       if (gx.empty()) return;
                       const double inv = 1.0 / static_cast<double>(spatial);
                       for (std::size_t k = 0; k < c; ++k)
                         for (std::size_t p = 0; p < spatial; ++p) gx[k * spatial + p] += g[k] * inv;
                     });
}

// ---------------------------------------------------------------- shape ops

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (numel_of(shape) != x.numel())
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  Node* px = x.node();
  return make_result(std::move(shape), x.values(), {x},
                     [px](std::span<const double> g, GradSink& sink) {
                       auto gx = sink(*px);
                       for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
                     });
}

inline Tensor transpose(const Tensor& x) {
  if (x.rank() != 2) throw DimensionError("transpose expects a matrix, got " + shape_str(x.shape()));
  const std::size_t r = x.dim(0), c = x.dim(1);
  std::vector<double> out(x.numel());
  const auto& xv = x.values();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = xv[i * c + j];
  Node* px = x.node();
  return make_result({c, r}, std::move(out), {x},
                     [px, r, c](std::span<const double> g, GradSink& sink) {
                       auto gx = sink(*px);
                       if (gx.empty()) return;
                       for (std::size_t i = 0; i < r; ++i)
                         for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g[j * r + i];
                     });
}

/// Rows [begin, end) of a matrix.
inline Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
  if (x.rank() != 2 || begin >= end || end > x.dim(0))
    throw DimensionError("slice_rows: bad range [" + std::to_string(begin) + "," +
                         std::to_string(end) + ") for " + shape_str(x.shape()));
  const std::size_t c = x.dim(1);
  std::vector<double> out(x.values().begin() + static_cast<std::ptrdiff_t>(begin * c),
                          x.values().begin() + static_cast<std::ptrdiff_t>(end * c));
  Node* px = x.node();
  return make_result({end - begin, c}, std::move(out), {x},
                     [px, begin, c](std::span<const double> g, GradSink& sink) {
                       auto gx = sink(*px);
                       if (gx.empty()) return;
                       for (std::size_t i = 0; i < g.size(); ++i) gx[begin * c + i] += g[i];
                     });
}

/// Columns [begin, end) of a matrix.
inline Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end) {
  if (x.rank() != 2 || begin >= end || end > x.dim(1))
    throw DimensionError("slice_cols: bad range for " + shape_str(x.shape()));
  const std::size_t r = x.dim(0), c = x.dim(1), w = end - begin;
  std::vector<double> out(r * w);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = x[i * c + begin + j];
  Node* px = x.node();
  return make_result({r, w}, std::move(out), {x},
                     [px, r, c, w, begin](std::span<const double> g, GradSink& sink) {
                       auto gx = sink(*px);
                       if (gx.empty()) return;
                       for (std::size_t i = 0; i < r; ++i)
                         for (std::size_t j = 0; j < w; ++j) gx[i * c + begin + j] += g[i * w + j];
                     });
}

/// Side-by-side concatenation of matrices with equal row counts.
inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("concat_cols: no inputs");
  const std::size_t r = parts[0].dim(0);
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.dim(0) != r)
      throw DimensionError("concat_cols: row mismatch " + shape_str(p.shape()));
    total += p.dim(1);
  }
  std::vector<double> out(r * total);
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.dim(1);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < w; ++j) out[i * total + off + j] = p[i * w + j];
    off += w;
  }
  Tensor result = Tensor::from({r, total}, std::move(out));
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  if (!any) return result;
  std::vector<Node*> nodes;
  for (const auto& p : parts) {
    nodes.push_back(p.node());
    result.node()->parents.push_back(p.shared());
  }
  result.node()->requires_grad = true;
  result.node()->backward = [nodes, r, total](std::span<const double> g, GradSink& sink) {
    std::size_t off = 0;
    for (Node* p : nodes) {
      const std::size_t w = p->shape[1];
      auto gp = sink(*p);
      if (!gp.empty())
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < w; ++j) gp[i * w + j] += g[i * total + off + j];
      off += w;
    }
  };
  return result;
}

/// Broadcast add of a vector along `axis` of x (b has length shape[axis]).
inline Tensor broadcast_add(const Tensor& x, const Tensor& b, std::size_t axis) {
  if (axis >= x.rank() || b.numel() != x.dim(axis))
    throw DimensionError("broadcast_add: " + shape_str(b.shape()) + " does not match axis " +
                         std::to_string(axis) + " of " + shape_str(x.shape()));
  const auto v = detail::axis_view(x.shape(), axis);
  std::vector<double> out(x.values());
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t j = 0; j < v.n; ++j)
      for (std::size_t i = 0; i < v.inner; ++i) out[(o * v.n + j) * v.inner + i] += b[j];
  Node* px = x.node();
  Node* pb = b.node();
  return make_result(x.shape(), std::move(out), {x, b},
                     [px, pb, v](std::span<const double> g, GradSink& sink) {
                       auto gx = sink(*px);
                       for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
                       auto gb = sink(*pb);
                       if (gb.empty()) return;
                       for (std::size_t o = 0; o < v.outer; ++o)
                         for (std::size_t j = 0; j < v.n; ++j)
                           for (std::size_t i = 0; i < v.inner; ++i)
                             gb[j] += g[(o * v.n + j) * v.inner + i];
                     });
}

/// Broadcast multiply by a vector along `axis` (channel gating).
inline Tensor broadcast_mul(const Tensor& x, const Tensor& s, std::size_t axis) {
  if (axis >= x.rank() || s.numel() != x.dim(axis))
    throw DimensionError("broadcast_mul: " + shape_str(s.shape()) + " does not match axis " +
                         std::to_string(axis) + " of " + shape_str(x.shape()));
  const auto v = detail::axis_view(x.shape(), axis);
  std::vector<double> out(x.numel());
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t j = 0; j < v.n; ++j)
      for (std::size_t i = 0; i < v.inner; ++i) {
        const std::size_t idx = (o * v.n + j) * v.inner + i;
        out[idx] = x[idx] * s[j];
      }
  Node* px = x.node();
  Node* ps = s.node();
  return make_result(x.shape(), std::move(out), {x, s},
                     [px, ps, v](std::span<const double> g, GradSink& sink) {
                       auto gx = sink(*px);
                       auto gs = sink(*ps);
                       for (std::size_t o = 0; o < v.outer; ++o)
                         for (std::size_t j = 0; j < v.n; ++j)
                           for (std::size_t i = 0; i < v.inner; ++i) {
                             const std::size_t idx = (o * v.n + j) * v.inner + i;
                             if (!gx.empty()) gx[idx] += g[idx] * ps->value[j];
                             if (!gs.empty()) gs[j] += g[idx] * px->value[idx];
                           }
                     });
}

/// Rows of `table` selected by `ids` (embedding lookup).
inline Tensor gather_rows(const Tensor& table, std::span<const int> ids) {
  if (table.rank() != 2) throw DimensionError("gather_rows expects a matrix table");
  const std::size_t v = table.dim(0), d = table.dim(1);
  std::vector<double> out(ids.size() * d);
  std::vector<int> idx(ids.begin(), ids.end());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] < 0 || static_cast<std::size_t>(idx[r]) >= v)
      throw IndexError("gather_rows: id " + std::to_string(idx[r]) + " outside table of " +
                       std::to_string(v) + " rows");
    std::copy_n(table.values().begin() + static_cast<std::ptrdiff_t>(idx[r] * d), d,
                out.begin() + static_cast<std::ptrdiff_t>(r * d));
  }
  Node* pt = table.node();
  const std::size_t rows = idx.size();  // idx is moved into the closure below
  return make_result({rows, d}, std::move(out), {table},
                     [pt, idx = std::move(idx), d](std::span<const double> g, GradSink& sink) {
                       auto gt = sink(*pt);
                       if (gt.empty()) return;
                       for (std::size_t r = 0; r < idx.size(); ++r)
                         for (std::size_t j = 0; j < d; ++j)
                           gt[static_cast<std::size_t>(idx[r]) * d + j] += g[r * d + j];
                     });
}

/// Nearest-neighbour resize of a C x h x w map to C x H x W.
inline Tensor upsample_nearest(const Tensor& x, std::size_t out_h, std::size_t out_w) {
  if (x.rank() != 3) throw DimensionError("upsample_nearest expects C x H x W");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  std::vector<std::size_t> src(out_h * out_w);
  for (std::size_t i = 0; i < out_h; ++i)
    for (std::size_t j = 0; j < out_w; ++j) src[i * out_w + j] = (i * h / out_h) * w + (j * w / out_w);
  std::vector<double> out(c * out_h * out_w);
  const std::size_t plane = out_h * out_w;
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t p = 0; p < plane; ++p) out[k * plane + p] = x[k * h * w + src[p]];
  Node* px = x.node();
  return make_result({c, out_h, out_w}, std::move(out), {x},
                     [px, src = std::move(src), c, h, w, plane](std::span<const double> g, GradSink& sink) {
                       auto gx = sink(*px);
                       if (gx.empty()) return;
                       for (std::size_t k = 0; k < c; ++k)
                         for (std::size_t p = 0; p < plane; ++p) gx[k * h * w + src[p]] += g[k * plane + p];
                     });
}

/// Strided subsampling followed by zero channel padding: the parameter-free
/// shortcut used when a map must meet a smaller, wider one.
inline Tensor downsample_pad(const Tensor& x, std::size_t out_c, std::size_t out_h, std::size_t out_w) {
  if (x.rank() != 3 || out_c < x.dim(0) || out_h == 0 || out_w == 0 || x.dim(1) % out_h != 0 ||
      x.dim(2) % out_w != 0)
    throw DimensionError("downsample_pad: cannot map " + shape_str(x.shape()) + " to " +
                         shape_str({out_c, out_h, out_w}));
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t sh = h / out_h, sw = w / out_w;
  std::vector<double> out(out_c * out_h * out_w, 0.0);
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t i = 0; i < out_h; ++i)
      for (std::size_t j = 0; j < out_w; ++j)
        out[(k * out_h + i) * out_w + j] = x[(k * h + i * sh) * w + j * sw];
  Node* px = x.node();
  return make_result({out_c, out_h, out_w}, std::move(out), {x},
                     [px, c, h, w, out_h, out_w, sh, sw](std::span<const double> g, GradSink& sink) {
                       auto gx = sink(*px);
                       if (gx.empty()) return;
                       for (std::size_t k = 0; k < c; ++k)
                         for (std::size_t i = 0; i < out_h; ++i)
                           for (std::size_t j = 0; j < out_w; ++j)
                             gx[(k * h + i * sh) * w + j * sw] += g[(k * out_h + i) * out_w + j];
                     });
}

// ---------------------------------------------------------------- linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw DimensionError("matmul: shape mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n);
  detail::gemm(a.values().data(), false, b.values().data(), false, out.data(), m, n, k, false);
  Node* pa = a.node();
  Node* pb = b.node();
  return make_result({m, n}, std::move(out), {a, b},
                     [pa, pb, m, n, k](std::span<const double> g, GradSink& sink) {
                       auto ga = sink(*pa);
                       if (!ga.empty()) detail::gemm(g.data(), false, pb->value.data(), true, ga.data(), m, k, n, true);
                       auto gb = sink(*pb);
                       if (!gb.empty()) detail::gemm(pa->value.data(), true, g.data(), false, gb.data(), k, n, m, true);
                     });
}

/// Matrix times vector, returning a vector.
inline Tensor matvec(const Tensor& a, const Tensor& v) {
  return reshape(matmul(a, reshape(v, {v.numel(), 1})), {a.dim(0)});
}

struct Conv2dGeometry {
  std::size_t c, h, w, o, kh, kw, stride, pad, out_h, out_w;
};

inline Conv2dGeometry conv2d_geometry(const Shape& x, const Shape& k, std::size_t stride, std::size_t pad) {
  if (x.size() != 3 || k.size() != 4)
    throw DimensionError("conv2d expects C x H x W input and O x C x kh x kw kernel, got " + shape_str(x) +
                         " and " + shape_str(k));
  if (k[1] != x[0])
    throw DimensionError("conv2d: kernel expects " + std::to_string(k[1]) + " channels, input has " +
                         std::to_string(x[0]));
  if (stride == 0) throw ConfigError("conv2d: stride must be positive");
  const std::size_t ph = x[1] + 2 * pad, pw = x[2] + 2 * pad;
  if (k[2] > ph || k[3] > pw)
    throw ConfigError("conv2d: kernel " + shape_str(k) + " larger than padded input");
  if ((ph - k[2]) % stride != 0 || (pw - k[3]) % stride != 0)
    throw ConfigError("conv2d: non-integral output extent for input " + shape_str(x) + ", kernel " +
                      shape_str(k) + ", stride " + std::to_string(stride) + ", pad " + std::to_string(pad));
  return {x[0], x[1], x[2], k[0], k[2], k[3], stride, pad, (ph - k[2]) / stride + 1, (pw - k[3]) / stride + 1};
}

namespace detail {

// cols[(c*kh + i)*kw + j][oy*out_w + ox] = padded x[c][oy*s + i][ox*s + j]
inline std::vector<double> im2col(std::span<const double> x, const Conv2dGeometry& g) {
  const std::size_t rows = g.c * g.kh * g.kw, cols = g.out_h * g.out_w;
  std::vector<double> out(rows * cols, 0.0);
  for (std::size_t c = 0; c < g.c; ++c)
    for (std::size_t i = 0; i < g.kh; ++i)
      for (std::size_t j = 0; j < g.kw; ++j) {
        double* row = out.data() + ((c * g.kh + i) * g.kw + j) * cols;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const auto y = static_cast<std::ptrdiff_t>(oy * g.stride + i) - static_cast<std::ptrdiff_t>(g.pad);
          if (y < 0 || y >= static_cast<std::ptrdiff_t>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const auto xx = static_cast<std::ptrdiff_t>(ox * g.stride + j) - static_cast<std::ptrdiff_t>(g.pad);
            if (xx < 0 || xx >= static_cast<std::ptrdiff_t>(g.w)) continue;
            row[oy * g.out_w + ox] = x[(c * g.h + static_cast<std::size_t>(y)) * g.w + static_cast<std::size_t>(xx)];
          }
        }
      }
  return out;
}

inline void col2im_add(std::span<const double> cols_data, const Conv2dGeometry& g, std::span<double> dx) {
  const std::size_t cols = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.c; ++c)
    for (std::size_t i = 0; i < g.kh; ++i)
      for (std::size_t j = 0; j < g.kw; ++j) {
        const double* row = cols_data.data() + ((c * g.kh + i) * g.kw + j) * cols;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const auto y = static_cast<std::ptrdiff_t>(oy * g.stride + i) - static_cast<std::ptrdiff_t>(g.pad);
          if (y < 0 || y >= static_cast<std::ptrdiff_t>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const auto xx = static_cast<std::ptrdiff_t>(ox * g.stride + j) - static_cast<std::ptrdiff_t>(g.pad);
            if (xx < 0 || xx >= static_cast<std::ptrdiff_t>(g.w)) continue;
            dx[(c * g.h + static_cast<std::size_t>(y)) * g.w + static_cast<std::size_t>(xx)] += row[oy * g.out_w + ox];
          }
        }
      }
}

}  // namespace detail

/// Zero-padded cross-correlation of a C x H x W map with an O x C x kh x kw
/// kernel. Output extent is (H + 2 pad - kh) / stride + 1 and must be exact.
inline Tensor conv2d(const Tensor& x, const Tensor& k, std::size_t stride = 1, std::size_t pad = 0) {
  const auto g = conv2d_geometry(x.shape(), k.shape(), stride, pad);
  auto cols = detail::im2col(x.data(), g);
  const std::size_t kk = g.c * g.kh * g.kw, n = g.out_h * g.out_w;
  std::vector<double> out(g.o * n);
  detail::gemm(k.values().data(), false, cols.data(), false, out.data(), g.o, n, kk, false);
  Node* px = x.node();
  Node* pk = k.node();
  return make_result({g.o, g.out_h, g.out_w}, std::move(out), {x, k},
                     [px, pk, g, kk, n, cols = std::move(cols)](std::span<const double> gout, GradSink& sink) {
                       auto gk = sink(*pk);
                       if (!gk.empty()) detail::gemm(gout.data(), false, cols.data(), true, gk.data(), g.o, kk, n, true);
                       auto gx = sink(*px);
                       if (!gx.empty()) {
                         std::vector<double> dcols(kk * n);
                         detail::gemm(pk->value.data(), true, gout.data(), false, dcols.data(), kk, n, g.o, false);
                         detail::col2im_add(dcols, g, gx);
                       }
                     });
}

// ---------------------------------------------------------------- normalization / losses

/// Standardizes each vector along the last axis, then applies gamma/beta.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5) {
  if (!(eps > 0.0)) throw ConfigError("layer_norm: eps must be positive");
  const std::size_t d = x.shape().back();
  if (gamma.numel() != d || beta.numel() != d)
    throw DimensionError("layer_norm: affine parameters must have length " + std::to_string(d));
  const std::size_t rows = x.numel() / d;
  std::vector<double> out(x.numel()), xhat(x.numel()), inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.values().data() + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (xr[j] - mean) * inv_std[r];
      out[r * d + j] = xhat[r * d + j] * gamma[j] + beta[j];
    }
  }
  Node* px = x.node();
  Node* pg = gamma.node();
  Node* pb = beta.node();
  return make_result(x.shape(), std::move(out), {x, gamma, beta},
                     [px, pg, pb, d, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                         std::span<const double> g, GradSink& sink) {
                       auto gg = sink(*pg);
                       auto gb = sink(*pb);
                       auto gx = sink(*px);
                       for (std::size_t r = 0; r < rows; ++r) {
                         double sum_dy = 0.0, sum_dy_xhat = 0.0;
                         for (std::size_t j = 0; j < d; ++j) {
                           const double dy = g[r * d + j];
                           if (!gg.empty()) gg[j] += dy * xhat[r * d + j];
                           if (!gb.empty()) gb[j] += dy;
                           const double dxhat = dy * pg->value[j];
                           sum_dy += dxhat;
                           sum_dy_xhat += dxhat * xhat[r * d + j];
                         }
                         if (gx.empty()) continue;
                         const double inv_d = 1.0 / static_cast<double>(d);
                         for (std::size_t j = 0; j < d; ++j) {
                           const double dxhat = g[r * d + j] * pg->value[j];
                           gx[r * d + j] +=
                               inv_std[r] * (dxhat - inv_d * sum_dy - xhat[r * d + j] * inv_d * sum_dy_xhat);
                         }
                       }
                     });
}

/// Row-wise softmax of a matrix. `additive_mask` (optional, same shape) is
/// added to the logits first and treated as a constant.
inline Tensor softmax_rows(const Tensor& x, std::span<const double> additive_mask = {}) {
  if (x.rank() != 2) throw DimensionError("softmax_rows expects a matrix");
  const std::size_t r = x.dim(0), c = x.dim(1);
  if (!additive_mask.empty() && additive_mask.size() != x.numel())
    throw DimensionError("softmax_rows: mask size mismatch");
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < r; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j) {
      double v = x[i * c + j] + (additive_mask.empty() ? 0.0 : additive_mask[i * c + j]);
      out[i * c + j] = v;
      mx = std::max(mx, v);
    }
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      out[i * c + j] = std::exp(out[i * c + j] - mx);
      z += out[i * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] /= z;
  }
  Node* px = x.node();
  std::vector<double> p = out;
  return make_result(x.shape(), std::move(out), {x},
                     [px, r, c, p = std::move(p)](std::span<const double> g, GradSink& sink) {
                       auto gx = sink(*px);
                       if (gx.empty()) return;
                       for (std::size_t i = 0; i < r; ++i) {
                         double dot = 0.0;
                         for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * p[i * c + j];
                         for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += p[i * c + j] * (g[i * c + j] - dot);
                       }
                     });
}

/// Softmax probabilities of a logit vector (no graph).
inline std::vector<double> softmax(std::span<const double> logits) {
  std::vector<double> p(logits.begin(), logits.end());
  const double mx = *std::max_element(p.begin(), p.end());
  double z = 0.0;
  for (auto& v : p) {
    v = std::exp(v - mx);
    z += v;
  }
  for (auto& v : p) v /= z;
  return p;
}

/// Mean over the batch of -log softmax(logits)[target]. Accepts B x C logits
/// or a single length-C vector (B = 1).
inline Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> targets) {
  const std::size_t b = logits.rank() == 1 ? 1 : logits.dim(0);
  const std::size_t c = logits.rank() == 1 ? logits.dim(0) : logits.dim(1);
  if (logits.rank() > 2) throw DimensionError("softmax_cross_entropy expects B x C logits");
  if (targets.size() != b)
    throw DimensionError("softmax_cross_entropy: " + std::to_string(targets.size()) + " targets for batch of " +
                         std::to_string(b));
  std::vector<double> probs(b * c);
  double loss = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    const int t = targets[i];
    if (t < 0 || static_cast<std::size_t>(t) >= c)
      throw IndexError("softmax_cross_entropy: target " + std::to_string(t) + " outside [0, " +
                       std::to_string(c) + ")");
    const double* row = logits.values().data() + i * c;
    const double mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
    const double log_z = std::log(z) + mx;
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] = std::exp(row[j] - log_z);
    loss += log_z - row[t];
  }
  loss /= static_cast<double>(b);
  Node* pl = logits.node();
  std::vector<int> tg(targets.begin(), targets.end());
  return make_result({1}, {loss}, {logits},
                     [pl, b, c, probs = std::move(probs), tg = std::move(tg)](std::span<const double> g, GradSink& sink) {
                       auto gl = sink(*pl);
                       if (gl.empty()) return;
                       const double s = g[0] / static_cast<double>(b);
                       for (std::size_t i = 0; i < b; ++i)
                         for (std::size_t j = 0; j < c; ++j) {
                           const double onehot = static_cast<std::size_t>(tg[i]) == j ? 1.0 : 0.0;
                           gl[i * c + j] += s * (probs[i * c + j] - onehot);
                         }
                     });
}

inline Tensor softmax_cross_entropy(const Tensor& logits, int target) {
  const int t[1] = {target};
  return softmax_cross_entropy(logits, std::span<const int>(t, 1));
}

}  // namespace mhex
