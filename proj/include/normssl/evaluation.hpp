#pragma once
//
// Representation diagnostics: collapse metrics and the linear probe.
//

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <numeric>
#include <vector>

#include "normssl/data.hpp"
#include "normssl/model.hpp"

namespace normssl {

struct CollapseThresholds {
  double relative_std = 1e-3;  // of the feature scale (uncentered RMS)
  double cosine = 0.99;
};

struct CollapseReport {
  double feature_std = 0.0;     // sqrt(trace(cov) / D)
  double feature_scale = 0.0;   // sqrt(mean ||y||^2 / D)
  double relative_std = 0.0;    // feature_std / feature_scale
  double effective_rank = 0.0;  // exp(entropy of normalized covariance spectrum)
  double pairwise_cosine = 0.0; // mean cosine over distinct rows
  bool collapsed = false;
};

// Features are an (N, D) batch of representations. Every quantity is
// invariant to an orthogonal rotation of the feature space.
inline CollapseReport collapse_metrics(const Tensor& features, const CollapseThresholds& thr = {}) {
  if (features.rank() != 2 || features.dim(0) < 2) {
    throw Error("collapse_metrics: need an (N, D) batch with N >= 2");
  }
  const auto n = static_cast<Eigen::Index>(features.dim(0));
  const auto d = static_cast<Eigen::Index>(features.dim(1));
  // Owned copy: Eigen's vectorized reductions sum in an order that depends on
  // buffer alignment, and an aligned matrix keeps the metrics reproducible.
  const Eigen::MatrixXd y = detail::ConstMatMap(features.data().data(), n, d);

  CollapseReport r;
  const Eigen::RowVectorXd mu = y.colwise().mean();
  const Eigen::MatrixXd centered = y.rowwise() - mu;
  const Eigen::MatrixXd cov = (centered.transpose() * centered) / static_cast<double>(n);
  r.feature_std = std::sqrt(std::max(cov.trace(), 0.0) / static_cast<double>(d));
  r.feature_scale = std::sqrt(y.squaredNorm() / static_cast<double>(n * d));
  r.relative_std = r.feature_scale > 0.0 ? r.feature_std / r.feature_scale : 0.0;

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov, Eigen::EigenvaluesOnly);
  const Eigen::VectorXd lambda = eig.eigenvalues().cwiseMax(0.0);
  const double total = lambda.sum();
  if (total > 0.0) {
    double entropy = 0.0;
    for (Eigen::Index i = 0; i < lambda.size(); ++i) {
      const double p = lambda[i] / total;
      if (p > 0.0) entropy -= p * std::log(p);
    }
    r.effective_rank = std::exp(entropy);
  }

  Eigen::MatrixXd units = y;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double norm = units.row(i).norm();
    units.row(i) /= std::max(norm, 1e-12);
  }
  const Eigen::VectorXd col_sum = units.colwise().sum();
  const double all_pairs = col_sum.squaredNorm();
  const double self_pairs = units.squaredNorm();
  r.pairwise_cosine = (all_pairs - self_pairs) / static_cast<double>(n * (n - 1));

  r.collapsed = r.relative_std < thr.relative_std && r.pairwise_cosine > thr.cosine;
  return r;
}

struct ProbeConfig {
  std::size_t iterations = 500;  // L-BFGS iterations, at most
  double l2 = 1e-4;
  double tolerance = 1e-6;  // stop once the gradient's max-abs entry falls below
};

struct ProbeResult {
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
  double chance = 0.0;
  double chance_std_err = 0.0;  // binomial std-err of chance accuracy on the test split
  std::size_t test_count = 0;
};

namespace detail {

// Mean cross-entropy of softmax(x W + b) plus (l2 / 2) |W|^2, and its
// gradient. theta packs W (d x k, column-major) followed by b.
struct SoftmaxObjective {
  const Eigen::MatrixXd& x;
  const Eigen::MatrixXd& onehot;
  double l2;

  double operator()(const Eigen::VectorXd& theta, Eigen::VectorXd& grad) const {
    const Eigen::Index n = x.rows(), d = x.cols(), k = onehot.cols();
    const Eigen::Map<const Eigen::MatrixXd> w(theta.data(), d, k);
    const Eigen::Map<const Eigen::RowVectorXd> b(theta.data() + d * k, k);
    Eigen::MatrixXd p = (x * w).rowwise() + b;
    double loss = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double top = p.row(i).maxCoeff();
      loss -= p.row(i).dot(onehot.row(i)) - top;
      p.row(i) = (p.row(i).array() - top).exp();
      const double z = p.row(i).sum();
      loss += std::log(z);
      p.row(i) /= z;
    }
    const Eigen::MatrixXd err = (p - onehot) / static_cast<double>(n);
    grad.resize(theta.size());
    Eigen::Map<Eigen::MatrixXd>(grad.data(), d, k) = x.transpose() * err + l2 * w;
    for (Eigen::Index c = 0; c < k; ++c) {
      double acc = 0.0;
      for (Eigen::Index i = 0; i < n; ++i) acc += err(i, c);
      grad[d * k + c] = acc;
    }
    return loss / static_cast<double>(n) + 0.5 * l2 * w.squaredNorm();
  }
};

// Limited-memory BFGS (two-loop recursion, memory 10) with Armijo backtracking.
template <class F>
Eigen::VectorXd minimize_lbfgs(const F& f, Eigen::VectorXd x, std::size_t max_iter, double tol) {
  constexpr std::size_t kMemory = 10;
  std::vector<Eigen::VectorXd> s_hist, y_hist;
  std::vector<double> rho;
  Eigen::VectorXd g;
  double fx = f(x, g);
  for (std::size_t it = 0; it < max_iter && g.lpNorm<Eigen::Infinity>() > tol; ++it) {
    Eigen::VectorXd q = g;
    std::vector<double> alpha(s_hist.size());
    for (std::size_t m = s_hist.size(); m-- > 0;) {
      alpha[m] = rho[m] * s_hist[m].dot(q);
      q -= alpha[m] * y_hist[m];
    }
    if (!s_hist.empty()) q *= s_hist.back().dot(y_hist.back()) / y_hist.back().squaredNorm();
    for (std::size_t m = 0; m < s_hist.size(); ++m) q += s_hist[m] * (alpha[m] - rho[m] * y_hist[m].dot(q));
    Eigen::VectorXd dir = -q;
    double slope = g.dot(dir);
    if (!(slope < 0.0)) {  // not a descent direction: restart from steepest descent
      s_hist.clear(), y_hist.clear(), rho.clear();
      dir = -g;
      slope = -g.squaredNorm();
    }
    double step = s_hist.empty() ? std::min(1.0, 1.0 / g.lpNorm<Eigen::Infinity>()) : 1.0;
    Eigen::VectorXd x_new, g_new;
    double f_new = 0.0;
    bool accepted = false;
    for (int tries = 0; tries < 40; ++tries, step *= 0.5) {
      x_new = x + step * dir;
      f_new = f(x_new, g_new);
      if (f_new <= fx + 1e-4 * step * slope) {
        accepted = true;
        break;
      }
    }
    if (!accepted) break;
    Eigen::VectorXd s = x_new - x, y = g_new - g;
    const double sy = s.dot(y);
    if (sy > 1e-12) {
      if (s_hist.size() == kMemory) {
        s_hist.erase(s_hist.begin()), y_hist.erase(y_hist.begin()), rho.erase(rho.begin());
      }
      s_hist.push_back(std::move(s));
      y_hist.push_back(std::move(y));
      rho.push_back(1.0 / sy);
    }
    x = std::move(x_new);
    g = std::move(g_new);
    fx = f_new;
  }
  return x;
}

}  // namespace detail

// Multinomial logistic regression with an L2 penalty, solved by L-BFGS from
// zero weights. Features are centered with the training mean and divided by
// the training features' uncentered RMS, a single scalar, so the probe is
// blind to overall scale yet does not amplify degenerate directions.
inline ProbeResult linear_probe(const Tensor& train_features, const std::vector<int>& train_labels,
                                const Tensor& test_features, const std::vector<int>& test_labels,
                                std::size_t num_classes, const ProbeConfig& cfg = {}) {
  if (train_features.rank() != 2 || test_features.rank() != 2 ||
      train_features.dim(1) != test_features.dim(1)) {
    throw ShapeError("linear_probe: feature batches must be (N, D) with equal D");
  }
  if (train_features.dim(0) != train_labels.size() || test_features.dim(0) != test_labels.size()) {
    throw ShapeError("linear_probe: label count does not match feature count");
  }
  if (train_labels.empty() || test_labels.empty()) throw Error("linear_probe: empty split");
  for (int l : train_labels)
    if (l < 0 || static_cast<std::size_t>(l) >= num_classes) throw Error("linear_probe: label out of range");
  for (int l : test_labels)
    if (l < 0 || static_cast<std::size_t>(l) >= num_classes) throw Error("linear_probe: label out of range");

  const auto n = static_cast<Eigen::Index>(train_features.dim(0));
  const auto m = static_cast<Eigen::Index>(test_features.dim(0));
  const auto d = static_cast<Eigen::Index>(train_features.dim(1));
  const auto k = static_cast<Eigen::Index>(num_classes);
  const Eigen::MatrixXd raw_train = detail::ConstMatMap(train_features.data().data(), n, d);
  const Eigen::MatrixXd raw_test = detail::ConstMatMap(test_features.data().data(), m, d);

  const Eigen::RowVectorXd mu = raw_train.colwise().mean();
  const double rms = std::sqrt(raw_train.squaredNorm() / static_cast<double>(n * d));
  const double inv_scale = rms > 0.0 ? 1.0 / rms : 0.0;
  const Eigen::MatrixXd x = (raw_train.rowwise() - mu) * inv_scale;
  const Eigen::MatrixXd xt = (raw_test.rowwise() - mu) * inv_scale;

  Eigen::MatrixXd onehot = Eigen::MatrixXd::Zero(n, k);
  for (Eigen::Index i = 0; i < n; ++i) onehot(i, train_labels[static_cast<std::size_t>(i)]) = 1.0;

  const detail::SoftmaxObjective objective{x, onehot, cfg.l2};
  const Eigen::VectorXd theta =
      detail::minimize_lbfgs(objective, Eigen::VectorXd::Zero(d * k + k), cfg.iterations, cfg.tolerance);
  const Eigen::Map<const Eigen::MatrixXd> w(theta.data(), d, k);
  const Eigen::Map<const Eigen::RowVectorXd> b(theta.data() + d * k, k);

  auto accuracy = [&](const Eigen::MatrixXd& feats, const std::vector<int>& labels) {
    const Eigen::MatrixXd logits = (feats * w).rowwise() + b;
    std::size_t correct = 0;
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
      Eigen::Index best = 0;
      logits.row(i).maxCoeff(&best);
      if (best == labels[static_cast<std::size_t>(i)]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(labels.size());
  };

  ProbeResult r;
  r.train_accuracy = accuracy(x, train_labels);
  r.test_accuracy = accuracy(xt, test_labels);
  r.chance = 1.0 / static_cast<double>(num_classes);
  r.test_count = test_labels.size();
  r.chance_std_err = std::sqrt(r.chance * (1.0 - r.chance) / static_cast<double>(r.test_count));
  return r;
}

// Order-sensitive FNV-1a over the raw bytes of every parameter.
inline std::uint64_t parameter_hash(const ParameterStore& params) {
  std::uint64_t h = 1469598103934665603ULL;
  for (std::size_t i = 0; i < params.size(); ++i) {
    for (double v : params[i].data()) {
      unsigned char bytes[sizeof(double)];
      std::memcpy(bytes, &v, sizeof v);
      for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ULL;
      }
    }
  }
  return h;
}

// Encoder outputs y = f(v) for a whole dataset, in eval mode, without a graph.
inline Tensor extract_features(NetworkAssembly& net, const Dataset& ds, std::size_t chunk = 128) {
  const NormMode saved = net.mode;
  net.mode = NormMode::eval;
  NoGradGuard no_grad;
  std::vector<double> values;
  std::size_t width = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < ds.size(); start += chunk) {
    idx.clear();
    for (std::size_t i = start; i < std::min(ds.size(), start + chunk); ++i) idx.push_back(i);
    const Tensor y = net.encode(make_batch(ds, idx));
    width = y.dim(1);
    values.insert(values.end(), y.data().begin(), y.data().end());
  }
  net.mode = saved;
  return Tensor::from({ds.size(), width}, std::move(values));
}

// Fills batch-norm running statistics by train-mode passes over `ds`
// (parameters untouched). Needed before eval-mode use of a fresh BN network.
inline void refresh_running_stats(NetworkAssembly& net, const Dataset& ds, std::size_t chunk = 128) {
  const NormMode saved = net.mode;
  net.mode = NormMode::train;
  NoGradGuard no_grad;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start + 2 <= ds.size(); start += chunk) {
    idx.clear();
    for (std::size_t i = start; i < std::min(ds.size(), start + chunk); ++i) idx.push_back(i);
    Tensor z = net.project(net.encode(make_batch(ds, idx)));
    if (net.predictor) net.predict(z);
  }
  net.mode = saved;
}

// Swap-one-sample test: runs the full train-mode forward on `batch`, replaces
// the last sample with `replacement` (one NHWC image), and returns the largest
// change in the outputs of the untouched samples. Zero (to rounding) means the
// assembly's outputs do not depend on other batch members. Running statistics
// are restored afterwards.
inline double batch_dependence(NetworkAssembly& net, const Tensor& batch, const Tensor& replacement) {
  if (batch.rank() != 4 || batch.dim(0) < 2) throw Error("batch_dependence: need an NHWC batch of >= 2");
  const std::size_t per = batch.numel() / batch.dim(0);
  if (replacement.numel() != per) throw ShapeError("batch_dependence: replacement is not one image");
  std::vector<RunningStats> saved;
  for (auto& s : net.sites) saved.push_back(s.running);
  const NormMode saved_mode = net.mode;
  net.mode = NormMode::train;
  auto outputs = [&](const Tensor& x) {
    NoGradGuard no_grad;
    Tensor out = net.project(net.encode(x));
    if (net.predictor) out = net.predict(out);
    return out;
  };
  const Tensor a = outputs(batch);
  std::vector<double> swapped(batch.data().begin(), batch.data().end());
  std::copy(replacement.data().begin(), replacement.data().end(), swapped.end() - static_cast<std::ptrdiff_t>(per));
  const Tensor b = outputs(Tensor::from(batch.shape(), std::move(swapped)));
  net.mode = saved_mode;
  for (std::size_t i = 0; i < net.sites.size(); ++i) {
    net.sites[i].running = saved[i];
    net.sites[i].last_batch.reset();
  }
  const std::size_t width = a.numel() / a.dim(0);
  double worst = 0.0;
  for (std::size_t i = 0; i < (a.dim(0) - 1) * width; ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

// Linear evaluation of a frozen encoder on a labeled train/test split.
inline ProbeResult probe_encoder(NetworkAssembly& net, const DataSplits& data,
                                 const ProbeConfig& cfg = {}) {
  const std::uint64_t before = parameter_hash(net.params);
  const Tensor train = extract_features(net, data.train);
  const Tensor test = extract_features(net, data.test);
  if (parameter_hash(net.params) != before) throw Error("probe_encoder: encoder parameters changed");
  return linear_probe(train, data.train.labels, test, data.test.labels, data.train.num_classes, cfg);
}

}  // namespace normssl
