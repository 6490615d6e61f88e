#pragma once
//
// Training objectives: the BYOL prediction loss and InfoNCE.
//

#include <string>
#include <vector>

#include "normssl/log.hpp"
#include "normssl/ops.hpp"

namespace normssl {

inline constexpr double kCosineNormFloor = 1e-12;

struct LossValue {
  Tensor loss;              // scalar, differentiable
  double positive = 0.0;    // InfoNCE positive (alignment) term
  double negative = 0.0;    // InfoNCE negative (log-sum-exp) term
  double alignment = 0.0;   // mean cosine between paired rows
};

namespace detail {

inline void require_pair(const Tensor& a, const Tensor& b, std::string_view op) {
  if (a.rank() != 2 || a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": expected equal (N, D) batches, got " +
                     to_string(a.shape()) + " and " + to_string(b.shape()));
  }
}

// Rows scaled to unit length; zero rows stay zero (norm floored) with a warning.
inline Tensor unit_rows(const Tensor& x, std::string_view op) {
  const Tensor norms = row_norm(x, kCosineNormFloor);
  for (double v : norms.data()) {
    if (v <= kCosineNormFloor) {
      log_warning(std::string(op) + ": zero-norm vector, norm floored at 1e-12");
      break;
    }
  }
  return div(x, norms);
}

}  // namespace detail

// Per-row cosine similarity of two (N, D) batches -> (N).
inline Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
  detail::require_pair(a, b, "cosine_similarity");
  return sum(mul(detail::unit_rows(a, "cosine_similarity"), detail::unit_rows(b, "cosine_similarity")),
             {1});
}

// Batch mean of -cos(prediction, target). Targets must carry no gradient.
inline LossValue byol_loss(const Tensor& prediction, const Tensor& target) {
  detail::require_pair(prediction, target, "byol_loss");
  if (target.requires_grad()) {
    throw GraphError("byol_loss: target projections must be detached from the graph");
  }
  const Tensor cos = cosine_similarity(prediction, target);
  LossValue out;
  out.loss = neg(mean(cos));
  out.alignment = -out.loss.item();
  return out;
}

// Symmetrized InfoNCE over two views of B images. For anchor z_i the positive
// is z'_i and the negative set is every z'_j plus every z_j with j != i
// (symmetrically for anchors z'_i). Similarities are cosines divided by tau.
// The loss is the mean over all 2B anchors of
//   -sim(anchor, positive) + log sum_{k in negatives} exp(sim(anchor, k)).
inline LossValue infonce_loss(const Tensor& z, const Tensor& z_prime, double tau) {
  detail::require_pair(z, z_prime, "infonce_loss");
  if (!(tau > 0.0)) throw Error("infonce_loss: temperature must be positive");
  const std::size_t b = z.dim(0);
  const std::size_t rows = 2 * b;

  const Tensor units = detail::unit_rows(concat(z, z_prime), "infonce_loss");
  const Tensor sims = scale(matmul(units, transpose(units)), 1.0 / tau);

  std::vector<double> positive_mask(rows * rows, 0.0);
  std::vector<bool> negative_set(rows * rows, true);
  for (std::size_t r = 0; r < rows; ++r) {
    positive_mask[r * rows + (r < b ? r + b : r - b)] = 1.0;
    negative_set[r * rows + r] = false;
  }
  const Tensor positive =
      neg(mean(sum(mul(sims, Tensor::from({rows, rows}, std::move(positive_mask))), {1})));
  const Tensor negative = mean(logsumexp_rows(sims, negative_set));

  LossValue out;
  out.loss = add(positive, negative);
  out.positive = positive.item();
  out.negative = negative.item();
  out.alignment = -out.positive * tau;
  return out;
}

}  // namespace normssl
