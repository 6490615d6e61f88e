#pragma once
//
// Normalization layers: batch, layer, group and instance normalization plus
// weight standardization.
//
// All of them share one kernel that standardizes disjoint "slices" of a
// tensor; the schemes differ only in which elements form a slice:
//
//   batch norm      one slice per channel, spanning (N, H, W)
//   layer norm      one slice per sample, spanning (H, W, C)
//   group norm      one slice per (sample, group), spanning (H, W, C/G)
//   instance norm   one slice per (sample, channel), spanning (H, W)
//   weight std.     one slice per weight row, spanning the row's inputs
//
// Slices are walked spatial-major, channel-minor, so layer norm and group
// norm with G=1 (and instance norm and G=C) accumulate in the same order.
//

#include <cmath>
#include <string>
#include <string_view>
#include <vector>

#include "normssl/ops.hpp"

namespace normssl {

enum class NormKind { batch, layer, group, instance, none };

inline std::string_view to_string(NormKind kind) {
  switch (kind) {
    case NormKind::batch: return "bn";
    case NormKind::layer: return "ln";
    case NormKind::group: return "gn";
    case NormKind::instance: return "in";
    case NormKind::none: return "none";
  }
  return "none";
}

inline NormKind parse_norm_kind(std::string_view text) {
  if (text == "bn") return NormKind::batch;
  if (text == "ln") return NormKind::layer;
  if (text == "gn") return NormKind::group;
  if (text == "in") return NormKind::instance;
  if (text == "none" || text == "-") return NormKind::none;
  throw Error("unknown normalization '" + std::string(text) + "' (expected bn|ln|gn|in|none)");
}

// Scheme for one norm site. Every site carries trainable affine gamma/beta,
// including kind none (an affine-only site).
struct NormSpec {
  NormKind kind = NormKind::none;
  std::size_t groups = 16;  // group norm only
  double eps = 1e-5;
  double momentum = 0.9;  // batch norm running statistics
  bool affine = true;
};

inline bool uses_batch_statistics(const NormSpec& spec) { return spec.kind == NormKind::batch; }

enum class NormMode { train, eval };

struct SliceStats {
  std::vector<double> mean;
  std::vector<double> var;
};

namespace detail {

// Element visitors. visit(k, f) calls f(flat_index) for each member of slice k.
struct ContiguousSlices {
  std::size_t count, size;
  template <class F>
  void visit(std::size_t k, F&& f) const {
    for (std::size_t i = k * size, end = (k + 1) * size; i < end; ++i) f(i);
  }
};

struct ChannelAcrossRowsSlices {  // batch norm: x viewed as (rows, C)
  std::size_t rows, channels;
  std::size_t count() const { return channels; }
  std::size_t size() const { return rows; }
  template <class F>
  void visit(std::size_t c, F&& f) const {
    for (std::size_t r = 0; r < rows; ++r) f(r * channels + c);
  }
};

struct GroupSlices {  // x viewed as (N, S, C) with C split into G groups
  std::size_t samples, spatial, channels, groups;
  std::size_t count() const { return samples * groups; }
  std::size_t size() const { return spatial * (channels / groups); }
  template <class F>
  void visit(std::size_t k, F&& f) const {
    const std::size_t n = k / groups, g = k % groups, width = channels / groups;
    for (std::size_t s = 0; s < spatial; ++s) {
      const std::size_t base = (n * spatial + s) * channels + g * width;
      for (std::size_t c = 0; c < width; ++c) f(base + c);
    }
  }
};

struct PerChannelSlices {  // instance norm: x viewed as (N, S, C)
  std::size_t samples, spatial, channels;
  std::size_t count() const { return samples * channels; }
  std::size_t size() const { return spatial; }
  template <class F>
  void visit(std::size_t k, F&& f) const {
    const std::size_t n = k / channels, c = k % channels;
    for (std::size_t s = 0; s < spatial; ++s) f((n * spatial + s) * channels + c);
  }
};

template <class Slices>
std::size_t slice_count(const Slices& s) {
  if constexpr (std::is_same_v<Slices, ContiguousSlices>) return s.count;
  else return s.count();
}

template <class Slices>
std::size_t slice_size(const Slices& s) {
  if constexpr (std::is_same_v<Slices, ContiguousSlices>) return s.size;
  else return s.size();
}

// y = (x - mean) / sqrt(var + eps) per slice, with biased variance.
template <class Slices>
Tensor normalize_slices(std::string op, const Tensor& x, const Slices& slices, double eps,
                        SliceStats* stats_out = nullptr) {
  const std::size_t count = slice_count(slices);
  const double n = static_cast<double>(slice_size(slices));
  const auto& xv = x.values();
  std::vector<double> y(x.numel());
  std::vector<double> inv_std(count);
  if (stats_out) {
    stats_out->mean.assign(count, 0.0);
    stats_out->var.assign(count, 0.0);
  }
  for (std::size_t k = 0; k < count; ++k) {
    double s = 0.0;
    slices.visit(k, [&](std::size_t i) { s += xv[i]; });
    const double m = s / n;
    double ss = 0.0;
    slices.visit(k, [&](std::size_t i) { ss += (xv[i] - m) * (xv[i] - m); });
    const double v = ss / n;
    inv_std[k] = 1.0 / std::sqrt(v + eps);
    slices.visit(k, [&](std::size_t i) { y[i] = (xv[i] - m) * inv_std[k]; });
    if (stats_out) {
      stats_out->mean[k] = m;
      stats_out->var[k] = v;
    }
  }
  TensorImpl* px = x.impl().get();
  std::vector<double> saved_y;
  if (grad_enabled() && x.requires_grad()) saved_y = y;
  return record(std::move(op), x.shape(), std::move(y), {&x},
                [px, slices, inv_std = std::move(inv_std), y = std::move(saved_y), count,
                 n](std::span<const double> g) {
                  auto gx = detail::grad_buffer(*px);
                  if (gx.empty()) return;
                  const double fault =
                      detail::injected_fault == InjectedFault::norm_backward ? 1.01 : 1.0;
                  for (std::size_t k = 0; k < count; ++k) {
                    double mg = 0.0, mgy = 0.0;
                    slices.visit(k, [&](std::size_t i) {
                      mg += g[i];
                      mgy += g[i] * y[i];
                    });
                    mg /= n;
                    mgy /= n;
                    slices.visit(k, [&](std::size_t i) {
                      gx[i] += fault * inv_std[k] * (g[i] - mg - y[i] * mgy);
                    });
                  }
                });
}

struct SampleLayout {
  std::size_t samples, spatial, channels;
};

inline SampleLayout sample_layout(const Tensor& x, std::string_view op) {
  if (x.rank() < 2) throw ShapeError(std::string(op) + ": expects (N, ..., C)");
  const std::size_t n = x.dim(0), c = x.shape().back();
  return {n, x.numel() / (n * c), c};
}

}  // namespace detail

// Train-mode batch normalization (pre-affine): per channel over every other axis.
inline Tensor batch_norm_train(const Tensor& x, double eps, SliceStats* stats_out = nullptr) {
  if (x.rank() < 2 || x.dim(0) < 2) {
    throw ShapeError("batch_norm: train mode needs a batch of at least 2, got " +
                     to_string(x.shape()));
  }
  const std::size_t c = x.shape().back();
  return detail::normalize_slices("batch_norm", x, detail::ChannelAcrossRowsSlices{x.numel() / c, c},
                                  eps, stats_out);
}

// Eval-mode batch normalization with fixed per-channel statistics.
inline Tensor batch_norm_eval(const Tensor& x, const std::vector<double>& mean,
                              const std::vector<double>& var, double eps) {
  const std::size_t c = x.shape().back();
  if (mean.size() != c || var.size() != c) throw ShapeError("batch_norm_eval: stats size mismatch");
  std::vector<double> inv(c);
  for (std::size_t j = 0; j < c; ++j) inv[j] = 1.0 / std::sqrt(var[j] + eps);
  std::vector<double> y(x.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = (x[i] - mean[i % c]) * inv[i % c];
  TensorImpl* px = x.impl().get();
  return record("batch_norm_eval", x.shape(), std::move(y), {&x},
                [px, inv, c](std::span<const double> g) {
                  auto gx = detail::grad_buffer(*px);
                  for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * inv[i % c];
                });
}

// Running statistics of one batch-norm site. An unpopulated state cannot be
// used in eval mode.
struct RunningStats {
  std::vector<double> mean;
  std::vector<double> var;
  bool populated = false;

  void update(const SliceStats& batch, double momentum) {
    if (mean.size() != batch.mean.size()) {
      mean.assign(batch.mean.size(), 0.0);
      var.assign(batch.var.size(), 1.0);
    }
    for (std::size_t c = 0; c < mean.size(); ++c) {
      mean[c] = momentum * mean[c] + (1.0 - momentum) * batch.mean[c];
      var[c] = momentum * var[c] + (1.0 - momentum) * batch.var[c];
    }
    populated = true;
  }
};

// Batch norm with running-stat bookkeeping (pre-affine). Train mode normalizes
// with batch statistics and folds them into `running`; eval mode reads `running`.
inline Tensor batch_norm(const Tensor& x, RunningStats& running, NormMode mode, double eps,
                         double momentum, SliceStats* batch_out = nullptr) {
  if (mode == NormMode::eval) {
    if (!running.populated) throw Error("batch_norm: eval mode with unpopulated running stats");
    return batch_norm_eval(x, running.mean, running.var, eps);
  }
  SliceStats stats;
  Tensor y = batch_norm_train(x, eps, &stats);
  running.update(stats, momentum);
  if (batch_out) *batch_out = std::move(stats);
  return y;
}

inline Tensor layer_norm(const Tensor& x, double eps) {
  const auto layout = detail::sample_layout(x, "layer_norm");
  return detail::normalize_slices("layer_norm", x,
                                  detail::ContiguousSlices{layout.samples, x.numel() / layout.samples},
                                  eps);
}

inline Tensor group_norm(const Tensor& x, std::size_t groups, double eps) {
  const auto layout = detail::sample_layout(x, "group_norm");
  if (groups == 0 || layout.channels % groups != 0) {
    throw ShapeError("group_norm: " + std::to_string(groups) + " groups do not divide " +
                     std::to_string(layout.channels) + " channels");
  }
  return detail::normalize_slices(
      "group_norm", x,
      detail::GroupSlices{layout.samples, layout.spatial, layout.channels, groups}, eps);
}

inline Tensor instance_norm(const Tensor& x, double eps) {
  const auto layout = detail::sample_layout(x, "instance_norm");
  return detail::normalize_slices(
      "instance_norm", x, detail::PerChannelSlices{layout.samples, layout.spatial, layout.channels},
      eps);
}

// Row-wise standardization of a weight tensor whose leading axis indexes
// output units; the row covers every remaining axis.
//   w_hat[i,j] = (w[i,j] - mu_i) / sqrt(eps + var_i)
// Gradients flow back to the raw weights.
inline Tensor weight_standardize(const Tensor& w, double eps = 1e-4) {
  if (w.rank() < 2) throw ShapeError("weight_standardize: expects (rows, ...)");
  const std::size_t rows = w.dim(0);
  return detail::normalize_slices("weight_standardize", w,
                                  detail::ContiguousSlices{rows, w.numel() / rows}, eps);
}

// y = x * gamma[c] + beta[c] along the last axis.
inline Tensor channel_affine(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
  const std::size_t c = x.shape().back();
  if (gamma.numel() != c || beta.numel() != c) {
    throw ShapeError("channel_affine: gamma/beta length must equal channel extent " +
                     std::to_string(c));
  }
  std::vector<double> y(x.numel());
  {
    const double* xs = x.data().data();
    const double* gs = gamma.data().data();
    const double* bs = beta.data().data();
    for (std::size_t row = 0; row < y.size(); row += c)
      for (std::size_t k = 0; k < c; ++k) y[row + k] = xs[row + k] * gs[k] + bs[k];
  }
  TensorImpl* px = x.impl().get();
  TensorImpl* pg = gamma.impl().get();
  TensorImpl* pb = beta.impl().get();
  return record("channel_affine", x.shape(), std::move(y), {&x, &gamma, &beta},
                [px, pg, pb, c](std::span<const double> g) {
                  auto gx = detail::grad_buffer(*px);
                  auto gg = detail::grad_buffer(*pg);
                  auto gb = detail::grad_buffer(*pb);
                  const double* xs = px->data.data();
                  const double* gs = pg->data.data();
                  for (std::size_t row = 0; row < g.size(); row += c) {
                    if (!gx.empty())
                      for (std::size_t k = 0; k < c; ++k) gx[row + k] += g[row + k] * gs[k];
                    if (!gg.empty())
                      for (std::size_t k = 0; k < c; ++k) gg[k] += g[row + k] * xs[row + k];
                    if (!gb.empty())
                      for (std::size_t k = 0; k < c; ++k) gb[k] += g[row + k];
                  }
                });
}

// Pre-affine normalization of `x` per `spec`. Batch norm needs `running`.
inline Tensor normalize(const Tensor& x, const NormSpec& spec, NormMode mode, RunningStats* running,
                        SliceStats* batch_out = nullptr) {
  switch (spec.kind) {
    case NormKind::batch: {
      if (!running) throw Error("normalize: batch norm needs running statistics");
      return batch_norm(x, *running, mode, spec.eps, spec.momentum, batch_out);
    }
    case NormKind::layer: return layer_norm(x, spec.eps);
    case NormKind::group: return group_norm(x, spec.groups, spec.eps);
    case NormKind::instance: return instance_norm(x, spec.eps);
    case NormKind::none: return x;
  }
  return x;
}

}  // namespace normssl
