#pragma once
//
// Differentiable tensor ops.
//
// Broadcasting rule (the only one used anywhere): shapes are aligned at their
// trailing axis; each aligned pair of extents must be equal or one of them 1;
// missing leading axes count as 1. Gradients of a broadcast operand are summed
// over the axes it was broadcast along.
//
// Activations are NHWC. Convolution weights are (Cout, KH, KW, Cin) so that
// each output channel owns one contiguous row of KH*KW*Cin inputs.
//

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <vector>

#include "normssl/tensor.hpp"

namespace normssl {

namespace detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

inline Shape broadcast_shape(const Shape& a, const Shape& b, std::string_view op) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError(std::string(op) + ": cannot broadcast " + to_string(a) + " with " +
                       to_string(b));
    }
    out[i] = da == 1 ? db : da;
  }
  return out;
}

// Element strides of `in` when viewed with the extents of `out` (0 on broadcast axes).
inline std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  std::size_t stride = 1;
  for (std::size_t k = 0; k < in.size(); ++k) {
    const std::size_t axis_in = in.size() - 1 - k;
    const std::size_t axis_out = out.size() - 1 - k;
    strides[axis_out] = in[axis_in] == 1 ? 0 : stride;
    stride *= in[axis_in];
  }
  return strides;
}

// Calls f(out_index, a_index, b_index) for every output element in row-major order.
template <class F>
void for_each_broadcast(const Shape& out, const Shape& a, const Shape& b, F&& f) {
  const std::size_t n = numel_of(out);
  if (a == out && b == out) {
    for (std::size_t i = 0; i < n; ++i) f(i, i, i);
    return;
  }
  const auto sa = broadcast_strides(a, out);
  const auto sb = broadcast_strides(b, out);
  std::vector<std::size_t> idx(out.size(), 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t i = 0; i < n; ++i) {
    f(i, ia, ib);
    for (std::size_t ax = out.size(); ax-- > 0;) {
      ++idx[ax];
      ia += sa[ax];
      ib += sb[ax];
      if (idx[ax] < out[ax]) break;
      ia -= sa[ax] * out[ax];
      ib -= sb[ax] * out[ax];
      idx[ax] = 0;
    }
  }
}

inline std::vector<bool> axis_mask(std::size_t rank, const std::vector<std::size_t>& axes,
                                   std::string_view op) {
  std::vector<bool> mask(rank, false);
  for (std::size_t ax : axes) {
    if (ax >= rank) throw ShapeError(std::string(op) + ": axis out of range");
    mask[ax] = true;
  }
  return mask;
}

inline Shape reduced_shape(const Shape& in, const std::vector<bool>& mask, bool keepdim) {
  Shape out;
  for (std::size_t i = 0; i < in.size(); ++i) {
    if (!mask[i]) out.push_back(in[i]);
    else if (keepdim) out.push_back(1);
  }
  return out;
}

inline Shape keepdim_shape(const Shape& in, const std::vector<bool>& mask) {
  return reduced_shape(in, mask, true);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <class Fwd, class DA, class DB>
Tensor binary_op(std::string op, const Tensor& a, const Tensor& b, Fwd fwd, DA da, DB db) {
  const Shape out_shape = detail::broadcast_shape(a.shape(), b.shape(), op);
  std::vector<double> out(numel_of(out_shape));
  const auto& av = a.values();
  const auto& bv = b.values();
  detail::for_each_broadcast(out_shape, a.shape(), b.shape(),
                             [&](std::size_t i, std::size_t ia, std::size_t ib) {
                               out[i] = fwd(av[ia], bv[ib]);
                             });
  TensorImpl* pa = a.impl().get();
  TensorImpl* pb = b.impl().get();
  return record(std::move(op), out_shape, std::move(out), {&a, &b},
                [pa, pb, out_shape, da, db](std::span<const double> g) {
                  auto ga = detail::grad_buffer(*pa);
                  auto gb = detail::grad_buffer(*pb);
                  detail::for_each_broadcast(
                      out_shape, pa->shape, pb->shape,
                      [&](std::size_t i, std::size_t ia, std::size_t ib) {
                        if (!ga.empty()) ga[ia] += g[i] * da(pa->data[ia], pb->data[ib]);
                        if (!gb.empty()) gb[ib] += g[i] * db(pa->data[ia], pb->data[ib]);
                      });
                });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double, double y) { return 1.0 / y; }, [](double x, double y) { return -x / (y * y); });
}

template <class Fwd, class Deriv>
Tensor unary_op(std::string op, const Tensor& x, Fwd fwd, Deriv deriv) {
  std::vector<double> out(x.numel());
  const auto& xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xv[i]);
  TensorImpl* px = x.impl().get();
  return record(std::move(op), x.shape(), std::move(out), {&x},
                [px, deriv](std::span<const double> g) {
                  auto gx = detail::grad_buffer(*px);
                  for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * deriv(px->data[i]);
                });
}

inline Tensor neg(const Tensor& x) {
  return unary_op("neg", x, [](double v) { return -v; }, [](double) { return -1.0; });
}

inline Tensor scale(const Tensor& x, double s) {
  return unary_op("scale", x, [s](double v) { return s * v; }, [s](double) { return s; });
}

inline Tensor add_scalar(const Tensor& x, double c) {
  return unary_op("add_scalar", x, [c](double v) { return v + c; }, [](double) { return 1.0; });
}

inline Tensor square(const Tensor& x) {
  return unary_op("square", x, [](double v) { return v * v; }, [](double v) { return 2.0 * v; });
}

inline Tensor exp(const Tensor& x) {
  return unary_op("exp", x, [](double v) { return std::exp(v); },
                  [](double v) { return std::exp(v); });
}

inline Tensor log(const Tensor& x) {
  return unary_op("log", x, [](double v) { return std::log(v); },
                  [](double v) { return 1.0 / v; });
}

inline Tensor sqrt(const Tensor& x) {
  return unary_op("sqrt", x, [](double v) { return std::sqrt(v); },
                  [](double v) { return 0.5 / std::sqrt(v); });
}

// Derivative at exactly 0 is 0.
inline Tensor relu(const Tensor& x) {
  return unary_op("relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
                  [](double v) { return v > 0.0 ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  TensorImpl* px = x.impl().get();
  return record("sum", {}, {total}, {&x}, [px](std::span<const double> g) {
    auto gx = detail::grad_buffer(*px);
    for (double& v : gx) v += g[0];
  });
}

inline Tensor mean(const Tensor& x) {
  const double n = static_cast<double>(x.numel());
  double total = 0.0;
  for (double v : x.data()) total += v;
  TensorImpl* px = x.impl().get();
  return record("mean", {}, {total / n}, {&x}, [px, n](std::span<const double> g) {
    auto gx = detail::grad_buffer(*px);
    for (double& v : gx) v += g[0] / n;
  });
}

inline Tensor sum(const Tensor& x, const std::vector<std::size_t>& axes, bool keepdim = false) {
  const auto mask = detail::axis_mask(x.rank(), axes, "sum");
  const Shape kept = detail::keepdim_shape(x.shape(), mask);
  std::vector<double> out(numel_of(kept), 0.0);
  const auto& xv = x.values();
  detail::for_each_broadcast(x.shape(), x.shape(), kept,
                             [&](std::size_t, std::size_t ix, std::size_t io) { out[io] += xv[ix]; });
  TensorImpl* px = x.impl().get();
  return record("sum_axes", detail::reduced_shape(x.shape(), mask, keepdim), std::move(out), {&x},
                [px, kept](std::span<const double> g) {
                  auto gx = detail::grad_buffer(*px);
                  detail::for_each_broadcast(
                      px->shape, px->shape, kept,
                      [&](std::size_t, std::size_t ix, std::size_t io) { gx[ix] += g[io]; });
                });
}

inline Tensor mean(const Tensor& x, const std::vector<std::size_t>& axes, bool keepdim = false) {
  const auto mask = detail::axis_mask(x.rank(), axes, "mean");
  std::size_t count = 1;
  for (std::size_t i = 0; i < x.rank(); ++i) {
    if (mask[i]) count *= x.dim(i);
  }
  return scale(sum(x, axes, keepdim), 1.0 / static_cast<double>(count));
}

// Biased (population) variance over the given axes.
inline Tensor var(const Tensor& x, const std::vector<std::size_t>& axes, bool keepdim = false) {
  const Tensor centered = sub(x, mean(x, axes, true));
  return mean(square(centered), axes, keepdim);
}

// ---------------------------------------------------------------------------
// Shape manipulation

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (numel_of(shape) != x.numel()) {
    throw ShapeError("reshape: " + to_string(x.shape()) + " -> " + to_string(shape));
  }
  TensorImpl* px = x.impl().get();
  return record("reshape", std::move(shape), x.values(), {&x}, [px](std::span<const double> g) {
    auto gx = detail::grad_buffer(*px);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

// Concatenation along the leading axis.
inline Tensor concat(const Tensor& a, const Tensor& b) {
  if (a.rank() == 0 || a.rank() != b.rank() ||
      !std::equal(a.shape().begin() + 1, a.shape().end(), b.shape().begin() + 1)) {
    throw ShapeError("concat: " + to_string(a.shape()) + " with " + to_string(b.shape()));
  }
  Shape shape = a.shape();
  shape[0] += b.dim(0);
  std::vector<double> out(a.values());
  out.insert(out.end(), b.values().begin(), b.values().end());
  TensorImpl* pa = a.impl().get();
  TensorImpl* pb = b.impl().get();
  return record("concat", std::move(shape), std::move(out), {&a, &b},
                [pa, pb](std::span<const double> g) {
                  const std::size_t na = pa->data.size();
                  auto ga = detail::grad_buffer(*pa);
                  auto gb = detail::grad_buffer(*pb);
                  for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
                  for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[na + i];
                });
}

inline Tensor transpose(const Tensor& x) {
  if (x.rank() != 2) throw ShapeError("transpose: expects rank 2, got " + to_string(x.shape()));
  const std::size_t r = x.dim(0), c = x.dim(1);
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x[i * c + j];
  TensorImpl* px = x.impl().get();
  return record("transpose", {c, r}, std::move(out), {&x}, [px, r, c](std::span<const double> g) {
    auto gx = detail::grad_buffer(*px);
    if (gx.empty()) return;
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g[j * r + i];
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  const auto m = static_cast<Eigen::Index>(a.dim(0));
  const auto k = static_cast<Eigen::Index>(a.dim(1));
  const auto n = static_cast<Eigen::Index>(b.dim(1));
  std::vector<double> out(static_cast<std::size_t>(m * n));
  detail::MatMap(out.data(), m, n).noalias() =
      detail::ConstMatMap(a.data().data(), m, k) * detail::ConstMatMap(b.data().data(), k, n);
  TensorImpl* pa = a.impl().get();
  TensorImpl* pb = b.impl().get();
  return record("matmul", {a.dim(0), b.dim(1)}, std::move(out), {&a, &b},
                [pa, pb, m, k, n](std::span<const double> g) {
                  detail::ConstMatMap gm(g.data(), m, n);
                  if (auto ga = detail::grad_buffer(*pa); !ga.empty()) {
                    detail::MatMap(ga.data(), m, k).noalias() +=
                        gm * detail::ConstMatMap(pb->data.data(), k, n).transpose();
                  }
                  if (auto gb = detail::grad_buffer(*pb); !gb.empty()) {
                    detail::MatMap(gb.data(), k, n).noalias() +=
                        detail::ConstMatMap(pa->data.data(), m, k).transpose() * gm;
                  }
                });
}

// x (N, in) times weight (out, in) transposed; bias (out) is optional.
inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor* bias = nullptr) {
  if (x.rank() != 2 || weight.rank() != 2 || x.dim(1) != weight.dim(1)) {
    throw ShapeError("linear: input " + to_string(x.shape()) + " weight " +
                     to_string(weight.shape()));
  }
  const auto m = static_cast<Eigen::Index>(x.dim(0));
  const auto k = static_cast<Eigen::Index>(x.dim(1));
  const auto n = static_cast<Eigen::Index>(weight.dim(0));
  std::vector<double> out(static_cast<std::size_t>(m * n));
  detail::MatMap om(out.data(), m, n);
  om.noalias() = detail::ConstMatMap(x.data().data(), m, k) *
                 detail::ConstMatMap(weight.data().data(), n, k).transpose();
  TensorImpl* pb = nullptr;
  if (bias) {
    if (bias->rank() != 1 || bias->dim(0) != weight.dim(0)) {
      throw ShapeError("linear: bias " + to_string(bias->shape()));
    }
    om.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias->data().data(), n);
    pb = bias->impl().get();
  }
  TensorImpl* px = x.impl().get();
  TensorImpl* pw = weight.impl().get();
  auto fn = [px, pw, pb, m, k, n](std::span<const double> g) {
    detail::ConstMatMap gm(g.data(), m, n);
    if (auto gx = detail::grad_buffer(*px); !gx.empty()) {
      detail::MatMap(gx.data(), m, k).noalias() += gm * detail::ConstMatMap(pw->data.data(), n, k);
    }
    if (auto gw = detail::grad_buffer(*pw); !gw.empty()) {
      detail::MatMap(gw.data(), n, k).noalias() +=
          gm.transpose() * detail::ConstMatMap(px->data.data(), m, k);
    }
    if (pb) {
      if (auto gbias = detail::grad_buffer(*pb); !gbias.empty()) {
        // Plain loop: Eigen's vectorized reduction order depends on buffer alignment.
        for (Eigen::Index r = 0; r < m; ++r)
          for (Eigen::Index c = 0; c < n; ++c) gbias[static_cast<std::size_t>(c)] += gm(r, c);
      }
    }
  };
  if (bias) return record("linear", {x.dim(0), weight.dim(0)}, std::move(out), {&x, &weight, bias}, fn);
  return record("linear", {x.dim(0), weight.dim(0)}, std::move(out), {&x, &weight}, fn);
}

struct Conv2dGeometry {
  std::size_t batch, height, width, in_channels;
  std::size_t kernel_h, kernel_w, out_channels;
  std::size_t stride, padding;
  std::size_t out_h, out_w;

  std::size_t patch_size() const { return kernel_h * kernel_w * in_channels; }
  std::size_t rows() const { return batch * out_h * out_w; }
  Shape output_shape() const { return {batch, out_h, out_w, out_channels}; }
};

namespace detail {

inline Conv2dGeometry conv_geometry(const Shape& x, const Shape& w, std::size_t stride,
                                    std::size_t padding) {
  if (x.size() != 4 || w.size() != 4 || x[3] != w[3] || stride == 0) {
    throw ShapeError("conv2d: input " + to_string(x) + " weight " + to_string(w));
  }
  Conv2dGeometry g{x[0], x[1], x[2], x[3], w[1], w[2], w[0], stride, padding, 0, 0};
  if (g.height + 2 * padding < g.kernel_h || g.width + 2 * padding < g.kernel_w) {
    throw ShapeError("conv2d: kernel larger than padded input");
  }
  g.out_h = (g.height + 2 * padding - g.kernel_h) / stride + 1;
  g.out_w = (g.width + 2 * padding - g.kernel_w) / stride + 1;
  return g;
}

// Patch matrix (rows = N*OH*OW, cols = KH*KW*Cin), zero outside the image.
inline void im2col(const Conv2dGeometry& g, const double* x, double* cols) {
  const std::size_t cin = g.in_channels;
  std::size_t row = 0;
  for (std::size_t n = 0; n < g.batch; ++n) {
    for (std::size_t oy = 0; oy < g.out_h; ++oy) {
      for (std::size_t ox = 0; ox < g.out_w; ++ox, ++row) {
        double* dst = cols + row * g.patch_size();
        for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                          static_cast<std::ptrdiff_t>(g.padding);
          for (std::size_t kx = 0; kx < g.kernel_w; ++kx, dst += cin) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                            static_cast<std::ptrdiff_t>(g.padding);
            if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(g.height) ||
                ix >= static_cast<std::ptrdiff_t>(g.width)) {
              std::fill(dst, dst + cin, 0.0);
            } else {
              const double* src =
                  x + ((n * g.height + static_cast<std::size_t>(iy)) * g.width +
                       static_cast<std::size_t>(ix)) * cin;
              std::copy(src, src + cin, dst);
            }
          }
        }
      }
    }
  }
}

inline void col2im_add(const Conv2dGeometry& g, const double* cols, double* x) {
  const std::size_t cin = g.in_channels;
  std::size_t row = 0;
  for (std::size_t n = 0; n < g.batch; ++n) {
    for (std::size_t oy = 0; oy < g.out_h; ++oy) {
      for (std::size_t ox = 0; ox < g.out_w; ++ox, ++row) {
        const double* src = cols + row * g.patch_size();
        for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                          static_cast<std::ptrdiff_t>(g.padding);
          for (std::size_t kx = 0; kx < g.kernel_w; ++kx, src += cin) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                            static_cast<std::ptrdiff_t>(g.padding);
            if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(g.height) ||
                ix >= static_cast<std::ptrdiff_t>(g.width)) {
              continue;
            }
            double* dst = x + ((n * g.height + static_cast<std::size_t>(iy)) * g.width +
                               static_cast<std::size_t>(ix)) * cin;
            for (std::size_t c = 0; c < cin; ++c) dst[c] += src[c];
          }
        }
      }
    }
  }
}

}  // namespace detail

// x (N,H,W,Cin), weight (Cout,KH,KW,Cin) -> (N,OH,OW,Cout). No bias.
inline Tensor conv2d(const Tensor& x, const Tensor& weight, std::size_t stride = 1,
                     std::size_t padding = 0) {
  const Conv2dGeometry geo = detail::conv_geometry(x.shape(), weight.shape(), stride, padding);
  const auto rows = static_cast<Eigen::Index>(geo.rows());
  const auto patch = static_cast<Eigen::Index>(geo.patch_size());
  const auto cout = static_cast<Eigen::Index>(geo.out_channels);
  const bool pointwise = geo.kernel_h == 1 && geo.kernel_w == 1 && stride == 1 && padding == 0;

  // im2col writes every entry, so the patch buffer is left uninitialized.
  std::unique_ptr<double[]> cols;
  const double* patches = x.data().data();
  if (!pointwise) {
    cols.reset(new double[geo.rows() * geo.patch_size()]);
    detail::im2col(geo, x.data().data(), cols.get());
    patches = cols.get();
  }
  std::vector<double> out(geo.rows() * geo.out_channels);
  detail::MatMap(out.data(), rows, cout).noalias() =
      detail::ConstMatMap(patches, rows, patch) *
      detail::ConstMatMap(weight.data().data(), cout, patch).transpose();

  TensorImpl* px = x.impl().get();
  TensorImpl* pw = weight.impl().get();
  // Patches are rebuilt in backward rather than held for the graph's lifetime.
  return record("conv2d", {geo.batch, geo.out_h, geo.out_w, geo.out_channels}, std::move(out),
                {&x, &weight}, [px, pw, geo, rows, patch, cout, pointwise](std::span<const double> g) {
                  detail::ConstMatMap gm(g.data(), rows, cout);
                  auto gx = detail::grad_buffer(*px);
                  auto gw = detail::grad_buffer(*pw);
                  if (!gw.empty()) {
                    std::unique_ptr<double[]> cols;
                    const double* patches = px->data.data();
                    if (!pointwise) {
                      cols.reset(new double[geo.rows() * geo.patch_size()]);
                      detail::im2col(geo, px->data.data(), cols.get());
                      patches = cols.get();
                    }
                    detail::MatMap(gw.data(), cout, patch).noalias() +=
                        gm.transpose() * detail::ConstMatMap(patches, rows, patch);
                    if (detail::injected_fault == InjectedFault::conv_backward) gw[0] = 1.01 * gw[0] + 1e-3;
                  }
                  if (!gx.empty()) {
                    detail::ConstMatMap wm(pw->data.data(), cout, patch);
                    if (pointwise) {
                      detail::MatMap(gx.data(), rows, patch).noalias() += gm * wm;
                    } else {
                      std::unique_ptr<double[]> dcols(new double[geo.rows() * geo.patch_size()]);
                      detail::MatMap(dcols.get(), rows, patch).noalias() = gm * wm;
                      detail::col2im_add(geo, dcols.get(), gx.data());
                    }
                  }
                });
}

// Mean over the spatial axes of an NHWC tensor -> (N, C).
inline Tensor global_avg_pool(const Tensor& x) {
  if (x.rank() != 4) throw ShapeError("global_avg_pool: expects NHWC, got " + to_string(x.shape()));
  return reshape(mean(x, {1, 2}, true), {x.dim(0), x.dim(3)});
}

// ---------------------------------------------------------------------------
// Row-wise helpers for (N, D) batches

// Euclidean norm of each row, floored at `floor` -> (N, 1). Zero gradient where floored.
inline Tensor row_norm(const Tensor& x, double floor = 1e-12) {
  if (x.rank() != 2) throw ShapeError("row_norm: expects rank 2, got " + to_string(x.shape()));
  const std::size_t n = x.dim(0), d = x.dim(1);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    double ss = 0.0;
    for (std::size_t j = 0; j < d; ++j) ss += x[i * d + j] * x[i * d + j];
    out[i] = std::max(std::sqrt(ss), floor);
  }
  TensorImpl* px = x.impl().get();
  return record("row_norm", {n, 1}, out, {&x}, [px, out, n, d, floor](std::span<const double> g) {
    auto gx = detail::grad_buffer(*px);
    for (std::size_t i = 0; i < n; ++i) {
      if (out[i] <= floor) continue;
      for (std::size_t j = 0; j < d; ++j) gx[i * d + j] += g[i] * px->data[i * d + j] / out[i];
    }
  });
}

// log(sum(exp(x))) along the last axis of (N, D), skipping entries where
// `include` is false -> (N). Each row needs at least one included entry.
inline Tensor logsumexp_rows(const Tensor& x, const std::vector<bool>& include = {}) {
  if (x.rank() != 2) throw ShapeError("logsumexp_rows: expects rank 2");
  const std::size_t n = x.dim(0), d = x.dim(1);
  if (!include.empty() && include.size() != x.numel()) {
    throw ShapeError("logsumexp_rows: mask size mismatch");
  }
  auto on = [&include](std::size_t idx) { return include.empty() || include[idx]; };
  std::vector<double> out(n);
  std::vector<double> softmax(x.numel(), 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < d; ++j)
      if (on(i * d + j)) mx = std::max(mx, x[i * d + j]);
    if (!std::isfinite(mx)) throw ShapeError("logsumexp_rows: row with no included entries");
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      if (!on(i * d + j)) continue;
      softmax[i * d + j] = std::exp(x[i * d + j] - mx);
      s += softmax[i * d + j];
    }
    for (std::size_t j = 0; j < d; ++j) softmax[i * d + j] /= s;
    out[i] = mx + std::log(s);
  }
  TensorImpl* px = x.impl().get();
  return record("logsumexp_rows", {n}, std::move(out), {&x},
                [px, softmax = std::move(softmax), n, d](std::span<const double> g) {
                  auto gx = detail::grad_buffer(*px);
                  for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < d; ++j) gx[i * d + j] += g[i] * softmax[i * d + j];
                });
}

}  // namespace normssl
