#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <random>

#include "normssl/verify.hpp"

using namespace normssl;

namespace {

Tensor gaussian(std::size_t n, std::size_t d, std::mt19937_64& rng, std::vector<double> scales = {}) {
  std::normal_distribution<double> g;
  std::vector<double> v(n * d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) v[i * d + j] = g(rng) * (scales.empty() ? 1.0 : scales[j]);
  return Tensor::from({n, d}, std::move(v));
}

// exp(entropy) of squared singular values of the centered features.
double svd_effective_rank(const Tensor& y) {
  Eigen::MatrixXd m(y.dim(0), y.dim(1));
  for (std::size_t i = 0; i < y.dim(0); ++i)
    for (std::size_t j = 0; j < y.dim(1); ++j) m(i, j) = y[i * y.dim(1) + j];
  m = m.rowwise() - m.colwise().mean();
  const Eigen::VectorXd s = Eigen::JacobiSVD<Eigen::MatrixXd>(m).singularValues();
  const Eigen::VectorXd p = s.array().square() / s.squaredNorm();
  double h = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i)
    if (p[i] > 0) h -= p[i] * std::log(p[i]);
  return std::exp(h);
}

}  // namespace

TEST(Collapse, ConstantFeaturesAreCollapsed) {
  const CollapseReport r = collapse_metrics(Tensor::full({10, 4}, 3.0));
  EXPECT_EQ(r.feature_std, 0.0);
  EXPECT_NEAR(r.pairwise_cosine, 1.0, 1e-12);
  EXPECT_TRUE(r.collapsed);
}

TEST(Collapse, OrthogonalBasisRows) {
  // Rows e_0..e_3: pairwise cosine 0, isotropic-ish spectrum.
  std::vector<double> v(16, 0.0);
  for (std::size_t i = 0; i < 4; ++i) v[i * 4 + i] = 1.0;
  const CollapseReport r = collapse_metrics(Tensor::from({4, 4}, v));
  EXPECT_NEAR(r.pairwise_cosine, 0.0, 1e-15);
  EXPECT_NEAR(r.effective_rank, 3.0, 1e-9);  // centering removes one direction
  EXPECT_FALSE(r.collapsed);
}

TEST(Collapse, EffectiveRankMatchesSvdOracle) {
  std::mt19937_64 rng(4);
  for (int t = 0; t < 5; ++t) {
    const Tensor y = gaussian(50, 6, rng, {3.0, 1.0, 0.5, 0.1, 2.0, 0.01});
    EXPECT_NEAR(collapse_metrics(y).effective_rank, svd_effective_rank(y), 1e-8);
  }
}

TEST(Collapse, InvariantToRotation) {
  std::mt19937_64 rng(5);
  const Tensor y = gaussian(40, 5, rng, {1.0, 2.0, 0.3, 0.3, 4.0});
  Eigen::MatrixXd a = Eigen::MatrixXd::Random(5, 5);
  const Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(a).householderQ();
  Tensor rotated = matmul(y, Tensor::from({5, 5}, std::vector<double>(q.data(), q.data() + 25)));
  const CollapseReport r1 = collapse_metrics(y), r2 = collapse_metrics(rotated);
  EXPECT_NEAR(r1.feature_std, r2.feature_std, 1e-12);
  EXPECT_NEAR(r1.effective_rank, r2.effective_rank, 1e-9);
  EXPECT_NEAR(r1.pairwise_cosine, r2.pairwise_cosine, 1e-12);
}

TEST(Collapse, ScaleDoesNotHideCollapse) {
  // A large constant offset with tiny jitter: absolute std is not small, relative std is.
  std::mt19937_64 rng(6);
  Tensor y = gaussian(20, 4, rng, {1e-5, 1e-5, 1e-5, 1e-5});
  Tensor shifted = add_scalar(y, 100.0);
  EXPECT_TRUE(collapse_metrics(shifted).collapsed);
  EXPECT_FALSE(collapse_metrics(gaussian(20, 4, rng)).collapsed);
}

TEST(Probe, SeparableClassesAreLearned) {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> g(0.0, 0.2);
  auto make = [&](std::size_t n, std::vector<int>& labels) {
    std::vector<double> v(n * 3);
    labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      labels[i] = static_cast<int>(i % 3);
      for (std::size_t j = 0; j < 3; ++j) v[i * 3 + j] = (j == i % 3 ? 2.0 : 0.0) + g(rng);
    }
    return Tensor::from({n, 3}, std::move(v));
  };
  std::vector<int> ltr, lte;
  const Tensor tr = make(90, ltr), te = make(60, lte);
  const ProbeResult r = linear_probe(tr, ltr, te, lte, 3);
  EXPECT_GE(r.test_accuracy, 0.99);
  EXPECT_DOUBLE_EQ(r.chance, 1.0 / 3.0);
  EXPECT_NEAR(r.chance_std_err, std::sqrt((1.0 / 3.0) * (2.0 / 3.0) / 60.0), 1e-15);
}

TEST(Probe, ConstantFeaturesScoreAtChance) {
  std::vector<int> ltr(100), lte(200);
  for (std::size_t i = 0; i < ltr.size(); ++i) ltr[i] = static_cast<int>(i % 4);
  for (std::size_t i = 0; i < lte.size(); ++i) lte[i] = static_cast<int>(i % 4);
  const ProbeResult r =
      linear_probe(Tensor::full({100, 8}, 1.5), ltr, Tensor::full({200, 8}, 1.5), lte, 4);
  EXPECT_NEAR(r.test_accuracy, 0.25, 3 * r.chance_std_err);
}

TEST(Probe, ObjectiveGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(31);
  std::normal_distribution<double> g;
  const Eigen::Index n = 12, d = 4, k = 3;
  Eigen::MatrixXd x(n, d), onehot = Eigen::MatrixXd::Zero(n, k);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < d; ++j) x(i, j) = g(rng);
    onehot(i, i % k) = 1.0;
  }
  const detail::SoftmaxObjective f{x, onehot, 0.3};
  Eigen::VectorXd theta(d * k + k), grad, unused;
  for (Eigen::Index i = 0; i < theta.size(); ++i) theta[i] = g(rng);
  f(theta, grad);
  for (Eigen::Index i = 0; i < theta.size(); ++i) {
    Eigen::VectorXd up = theta, down = theta;
    up[i] += 1e-6;
    down[i] -= 1e-6;
    EXPECT_NEAR(grad[i], (f(up, unused) - f(down, unused)) / 2e-6, 1e-7) << i;
  }
}

TEST(Probe, SolverReachesStationaryPoint) {
  // Overlapping classes, so the regularized optimum is interior and unique.
  std::mt19937_64 rng(32);
  std::normal_distribution<double> g;
  const Eigen::Index n = 200, d = 6, k = 4;
  Eigen::MatrixXd x(n, d), onehot = Eigen::MatrixXd::Zero(n, k);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < d; ++j) x(i, j) = g(rng) + (j == i % k ? 0.7 : 0.0);
    onehot(i, i % k) = 1.0;
  }
  const detail::SoftmaxObjective f{x, onehot, 1e-3};
  const Eigen::VectorXd theta = detail::minimize_lbfgs(f, Eigen::VectorXd::Zero(d * k + k), 500, 1e-9);
  Eigen::VectorXd grad;
  f(theta, grad);
  EXPECT_LT(grad.lpNorm<Eigen::Infinity>(), 1e-8);
}

TEST(Probe, DeterministicGivenInputs) {
  std::mt19937_64 rng(33);
  const Tensor tr = gaussian(60, 5, rng), te = gaussian(40, 5, rng);
  std::vector<int> ltr(60), lte(40);
  for (std::size_t i = 0; i < 60; ++i) ltr[i] = static_cast<int>(i % 3);
  for (std::size_t i = 0; i < 40; ++i) lte[i] = static_cast<int>(i % 3);
  const ProbeResult a = linear_probe(tr, ltr, te, lte, 3), b = linear_probe(tr, ltr, te, lte, 3);
  EXPECT_EQ(a.train_accuracy, b.train_accuracy);
  EXPECT_EQ(a.test_accuracy, b.test_accuracy);
}

TEST(Probe, RejectsMismatchedInputs) {
  EXPECT_THROW(linear_probe(Tensor::zeros({3, 2}), {0, 1}, Tensor::zeros({2, 2}), {0, 1}, 2), ShapeError);
  EXPECT_THROW(linear_probe(Tensor::zeros({2, 2}), {0, 5}, Tensor::zeros({2, 2}), {0, 1}, 2), Error);
}

TEST(Probe, EncoderIsFrozenDuringEvaluation) {
  ExperimentConfig c = small_test_config();
  const DataSplits data = load_data(c);
  NetworkAssembly net = build(c);
  refresh_running_stats(net, data.train);
  const auto before = parameter_hash(net.params);
  const ProbeResult r = probe_encoder(net, data, {20, 1e-4});
  EXPECT_EQ(parameter_hash(net.params), before);
  EXPECT_EQ(r.test_count, data.test.size());
}

TEST(BatchDependence, SwapTestSeparatesBatchNormFromGroupNorm) {
  ExperimentConfig c = small_test_config();
  std::mt19937_64 rng(8);
  const Tensor batch = detail::random_tensor({4, 8, 8, 3}, rng);
  const Tensor other = detail::random_tensor({1, 8, 8, 3}, rng);
  NetworkAssembly bn = build(c);
  EXPECT_GT(batch_dependence(bn, batch, other), 1e-6);
  for (const auto& s : bn.sites) EXPECT_FALSE(s.running.populated);
  c.encoder_norm = c.projector_norm = c.predictor_norm = NormKind::group;
  c.ws = true;
  NetworkAssembly gn = build(c);
  EXPECT_EQ(batch_dependence(gn, batch, other), 0.0);
}
