#include <gtest/gtest.h>

#include <random>

#include "normssl/objectives.hpp"

using namespace normssl;

namespace {

using Rows = std::vector<std::vector<long double>>;

Rows rows_of(const Tensor& t) {
  Rows r(t.dim(0), std::vector<long double>(t.dim(1)));
  for (std::size_t i = 0; i < t.dim(0); ++i)
    for (std::size_t j = 0; j < t.dim(1); ++j) r[i][j] = t[i * t.dim(1) + j];
  return r;
}

long double cosine(const std::vector<long double>& a, const std::vector<long double>& b) {
  long double ab = 0, aa = 0, bb = 0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    ab += a[k] * b[k];
    aa += a[k] * a[k];
    bb += b[k] * b[k];
  }
  return ab / std::sqrt(aa * bb);
}

// Independent oracle in cross-entropy form: every view of every image is an
// anchor; candidates are all other views (the anchor itself excluded, its
// partner included). Returns mean over anchors of -log softmax(partner).
long double infonce_oracle(const Rows& z, const Rows& zp, long double tau, bool include_self = false) {
  Rows all = z;
  all.insert(all.end(), zp.begin(), zp.end());
  const std::size_t b = z.size(), m = all.size();
  long double total = 0;
  for (std::size_t a = 0; a < m; ++a) {
    const std::size_t partner = a < b ? a + b : a - b;
    long double denom = 0;
    for (std::size_t k = 0; k < m; ++k) {
      if (k == a && !include_self) continue;
      denom += std::exp(cosine(all[a], all[k]) / tau);
    }
    total += -std::log(std::exp(cosine(all[a], all[partner]) / tau) / denom);
  }
  return total / static_cast<long double>(m);
}

Tensor randn(Shape shape, std::mt19937_64& rng) {
  std::normal_distribution<double> n;
  std::vector<double> v(numel_of(shape));
  for (double& x : v) x = n(rng);
  return Tensor::from(std::move(shape), std::move(v));
}

}  // namespace

TEST(Cosine, HandValues) {
  Tensor a = Tensor::from({2, 2}, {1.0, 0.0, 3.0, 4.0});
  Tensor b = Tensor::from({2, 2}, {0.0, 2.0, 6.0, 8.0});
  Tensor c = cosine_similarity(a, b);
  EXPECT_NEAR(c[0], 0.0, 1e-15);
  EXPECT_NEAR(c[1], 1.0, 1e-15);
}

TEST(Byol, LossIsMeanNegativeCosine) {
  Tensor q = Tensor::from({2, 2}, {1.0, 0.0, 1.0, 1.0});
  Tensor z = Tensor::from({2, 2}, {1.0, 0.0, -1.0, -1.0});
  EXPECT_NEAR(byol_loss(q, z).loss.item(), 0.0, 1e-15);  // (-1 + 1) / 2
}

TEST(Byol, TargetMustBeDetached) {
  Tensor q = Tensor::from({1, 2}, {1.0, 0.0}, true);
  Tensor z = Tensor::from({1, 2}, {1.0, 0.0}, true);
  EXPECT_THROW(byol_loss(q, z), GraphError);
  EXPECT_NO_THROW(byol_loss(q, z.detach()));
}

TEST(Byol, ShapeMismatchRaises) {
  EXPECT_THROW(byol_loss(Tensor::zeros({2, 3}), Tensor::zeros({2, 4})), ShapeError);
}

TEST(InfoNce, MatchesBruteForceOracle) {
  std::mt19937_64 rng(17);
  for (std::size_t b = 1; b <= 4; ++b) {
    for (int trial = 0; trial < 25; ++trial) {
      const std::size_t d = 2 + trial % 6;
      const double tau = 0.05 + 0.1 * (trial % 5);
      const Tensor z = randn({b, d}, rng), zp = randn({b, d}, rng);
      const double got = infonce_loss(z, zp, tau).loss.item();
      const long double want = infonce_oracle(rows_of(z), rows_of(zp), tau);
      EXPECT_NEAR(got, static_cast<double>(want), 1e-8) << "B=" << b << " trial " << trial;
    }
  }
}

TEST(InfoNce, NegativeSetExcludesAnchorIncludesPartner) {
  std::mt19937_64 rng(5);
  const Tensor z = randn({3, 4}, rng), zp = randn({3, 4}, rng);
  const double got = infonce_loss(z, zp, 0.2).loss.item();
  const auto with_self = static_cast<double>(infonce_oracle(rows_of(z), rows_of(zp), 0.2, true));
  EXPECT_GT(std::abs(got - with_self), 1e-3);
  // A single image: the only candidate is the partner, so the loss is zero.
  const Tensor one = randn({1, 4}, rng), other = randn({1, 4}, rng);
  EXPECT_NEAR(infonce_loss(one, other, 0.5).loss.item(), 0.0, 1e-12);
}

TEST(InfoNce, PositiveAndNegativeTermsReassemble) {
  std::mt19937_64 rng(6);
  const Tensor z = randn({4, 5}, rng), zp = randn({4, 5}, rng);
  const LossValue v = infonce_loss(z, zp, 0.1);
  EXPECT_DOUBLE_EQ(v.loss.item(), v.positive + v.negative);
}

TEST(InfoNce, RejectsNonPositiveTemperature) {
  EXPECT_THROW(infonce_loss(Tensor::full({2, 2}, 1.0), Tensor::full({2, 2}, 1.0), 0.0), Error);
}

TEST(InfoNce, ZeroRowIsFlooredNotNaN) {
  Tensor z = Tensor::from({2, 2}, {0.0, 0.0, 1.0, 0.0});
  Tensor zp = Tensor::from({2, 2}, {1.0, 1.0, 0.0, 1.0});
  EXPECT_TRUE(std::isfinite(infonce_loss(z, zp, 0.5).loss.item()));
}
