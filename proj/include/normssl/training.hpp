#pragma once
//
// BYOL and SimCLR training: schedule, optimizers, EMA target, trainer loop.
//

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "normssl/config.hpp"
#include "normssl/data.hpp"
#include "normssl/evaluation.hpp"
#include "normssl/init_protocol.hpp"
#include "normssl/objectives.hpp"

namespace normssl {

class DivergenceError : public Error {
 public:
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Learning-rate schedule: linear warmup from 0, then cosine decay to 0.

struct Schedule {
  double base_lr = 0.2;
  std::size_t warmup_steps = 0;
  std::size_t total_steps = 1;
};

inline Schedule make_schedule(const ExperimentConfig& c, std::size_t steps_per_epoch) {
  Schedule s;
  s.base_lr = c.lr;
  s.total_steps = c.epochs * steps_per_epoch;
  s.warmup_steps = static_cast<std::size_t>(
      std::llround(c.warmup_fraction() * static_cast<double>(s.total_steps)));
  s.warmup_steps = std::min(s.warmup_steps, s.total_steps - 1);
  return s;
}

inline double lr_at(const Schedule& s, std::size_t step) {
  if (step > s.total_steps) {
    throw Error("lr_at: step " + std::to_string(step) + " beyond " + std::to_string(s.total_steps));
  }
  if (step < s.warmup_steps) {
    return s.base_lr * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
  }
  const double progress = static_cast<double>(step - s.warmup_steps) /
                          static_cast<double>(s.total_steps - s.warmup_steps);
  return s.base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

// ---------------------------------------------------------------------------
// EMA target update: xi <- (1 - rate) * xi + rate * theta.

inline void ema_update(ParameterStore& target, const ParameterStore& online, double rate) {
  if (target.size() != online.size()) throw Error("ema_update: parameter structures differ");
  for (std::size_t i = 0; i < target.size(); ++i) {
    if (target[i].shape() != online[i].shape() || target.info(i).name != online.info(i).name) {
      throw Error("ema_update: parameter structures differ at " + online.info(i).name);
    }
  }
  for (std::size_t i = 0; i < target.size(); ++i) {
    auto xi = target[i].mutable_data();
    auto theta = online[i].data();
    for (std::size_t j = 0; j < xi.size(); ++j) xi[j] = (1.0 - rate) * xi[j] + rate * theta[j];
  }
}

// Mixing rate handed to ema_update for a configured target decay.
inline double ema_rate(const ExperimentConfig& c) {
  return c.ema == EmaConvention::conventional ? 1.0 - c.target_decay : c.target_decay;
}

// ---------------------------------------------------------------------------
// Optimizers. Weight decay and trust-ratio scaling apply to conv/linear
// weights only; norm affines and biases take the plain update.

struct OptimizerSlots {
  std::vector<std::vector<double>> momentum;  // one buffer per parameter tensor

  void ensure(const ParameterStore& params) {
    if (momentum.size() == params.size()) return;
    momentum.clear();
    for (std::size_t i = 0; i < params.size(); ++i) momentum.emplace_back(params[i].numel(), 0.0);
  }
};

namespace detail {

inline std::vector<double> gradient_of(const Tensor& p, const std::string& name) {
  std::vector<double> g(p.numel(), 0.0);
  if (p.has_grad()) std::copy(p.grad().begin(), p.grad().end(), g.begin());
  for (double v : g) {
    if (!std::isfinite(v)) throw DivergenceError("non-finite gradient for " + name);
  }
  return g;
}

inline double l2(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

}  // namespace detail

// theta <- theta - lr * wd * theta (decoupled), then v <- m * v + g, theta <- theta - lr * v.
inline void sgd_step(ParameterStore& params, OptimizerSlots& slots, double lr, double momentum,
                     double weight_decay) {
  slots.ensure(params);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto g = detail::gradient_of(params[i], params.info(i).name);
    const bool decay = params.info(i).role == ParamRole::weight;
    auto theta = params[i].mutable_data();
    auto& v = slots.momentum[i];
    for (std::size_t j = 0; j < theta.size(); ++j) {
      if (decay) theta[j] -= lr * weight_decay * theta[j];
      v[j] = momentum * v[j] + g[j];
      theta[j] -= lr * v[j];
    }
  }
}

// trust_coeff * ||theta|| / (||g|| + wd * ||theta||); 1 when either norm term vanishes.
inline double lars_trust_ratio(double param_norm, double grad_norm, double weight_decay,
                               double trust_coeff) {
  const double denom = grad_norm + weight_decay * param_norm;
  if (param_norm <= 0.0 || denom <= 0.0) return 1.0;
  return trust_coeff * param_norm / denom;
}

// Per-tensor LARS: d = g + wd * theta, v <- m * v + ratio * d, theta <- theta - lr * v.
inline void lars_step(ParameterStore& params, OptimizerSlots& slots, double lr, double momentum,
                      double weight_decay, double trust_coeff) {
  slots.ensure(params);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto g = detail::gradient_of(params[i], params.info(i).name);
    auto theta = params[i].mutable_data();
    auto& v = slots.momentum[i];
    if (params.info(i).role != ParamRole::weight) {
      for (std::size_t j = 0; j < theta.size(); ++j) {
        v[j] = momentum * v[j] + g[j];
        theta[j] -= lr * v[j];
      }
      continue;
    }
    const double ratio =
        lars_trust_ratio(detail::l2(theta), detail::l2(g), weight_decay, trust_coeff);
    for (std::size_t j = 0; j < theta.size(); ++j) {
      v[j] = momentum * v[j] + ratio * (g[j] + weight_decay * theta[j]);
      theta[j] -= lr * v[j];
    }
  }
}

// ---------------------------------------------------------------------------
// Trainer

struct EpochMetrics {
  std::size_t epoch = 0;  // 1-based, completed epochs
  std::size_t step = 0;   // optimizer steps taken so far
  double loss = 0.0;      // mean over the epoch's steps
  std::optional<double> positive, negative;  // InfoNCE terms
  double lr = 0.0;        // rate used by the epoch's last step
  double feature_std = 0.0;
  double pairwise_cosine = 0.0;
  std::optional<double> probe_acc;
};

inline AugmentationPolicy augmentation_policy(const ExperimentConfig& c) {
  return {c.crop_min_scale, c.flip_prob, c.brightness, c.contrast, c.saturation, c.hue, c.grayscale_prob};
}

inline ProbeConfig probe_config(const ExperimentConfig& c) {
  return {c.probe_iterations, c.probe_l2};
}

inline CollapseThresholds collapse_thresholds(const ExperimentConfig& c) {
  return {c.collapse_std, c.collapse_cosine};
}

inline DataSplits load_data(const ExperimentConfig& c) {
  if (c.dataset == "synthetic") {
    return make_synthetic_splits(c.train_size, c.test_size, c.image_size, c.num_classes, c.data_seed);
  }
  constexpr std::string_view prefix = "binary:";
  if (c.dataset.starts_with(prefix)) {
    const std::string path = c.dataset.substr(prefix.size());
    Dataset all = load_binary_images(path, c.train_size + c.test_size, c.num_classes);
    if (all.size() < c.train_size + c.test_size) {
      throw ConfigError("dataset " + path + " holds fewer than train_size + test_size images");
    }
    DataSplits s;
    s.train = s.test = all;
    s.train.labels.resize(c.train_size);
    s.train.pixels.resize(c.train_size * all.image_numel());
    s.test.labels.assign(all.labels.begin() + static_cast<std::ptrdiff_t>(c.train_size), all.labels.end());
    s.test.pixels.assign(all.pixels.begin() + static_cast<std::ptrdiff_t>(c.train_size * all.image_numel()),
                         all.pixels.end());
    return s;
  }
  throw ConfigError("unknown dataset '" + c.dataset + "' (expected synthetic or binary:<path>)");
}

struct TrainerState {
  ExperimentConfig config;
  NetworkAssembly online;
  std::optional<NetworkAssembly> target;  // BYOL only; never optimized
  OptimizerSlots slots;                   // online parameters only
  std::size_t step = 0;
  std::size_t epoch = 0;
  std::mt19937_64 rng;
  std::optional<CapturedStats> captured;
};

class Trainer {
 public:
  // Fresh run: builds the assembly, applies the configured initialization and
  // creates the target network.
  Trainer(ExperimentConfig config, DataSplits data) : data_(std::move(data)) {
    validate(config);
    state_.config = std::move(config);
    state_.rng.seed(state_.config.seed);
    state_.online = build(state_.config, data_.train.channels);
    if (state_.config.init == InitMode::bn_capture_reinit) {
      std::vector<std::size_t> order = permutation();
      order.resize(state_.config.batch_size);
      const ViewPair views = make_views(data_.train, order, augmentation_policy(state_.config), state_.rng);
      auto result = apply_bn_capture_reinit(std::move(state_.online), views.v, state_.config.stat_floor);
      state_.online = std::move(result.network);
      state_.captured = std::move(result.stats);
    }
    init_target();
    check_data();
  }

  // Resumes from a restored state (see checkpoint.hpp).
  Trainer(TrainerState state, DataSplits data) : state_(std::move(state)), data_(std::move(data)) {
    validate(state_.config);
    check_data();
  }

  const TrainerState& state() const { return state_; }
  TrainerState& state() { return state_; }
  const DataSplits& data() const { return data_; }

  std::size_t steps_per_epoch() const { return data_.train.size() / state_.config.batch_size; }
  Schedule schedule() const { return make_schedule(state_.config, steps_per_epoch()); }
  bool finished() const { return state_.epoch >= state_.config.epochs; }

  EpochMetrics run_epoch() {
    if (finished()) throw Error("run_epoch: training already finished");
    const ExperimentConfig& c = state_.config;
    const Schedule sched = schedule();
    const AugmentationPolicy policy = augmentation_policy(c);
    const std::vector<std::size_t> order = permutation();
    EpochMetrics m;
    double loss_sum = 0.0, pos_sum = 0.0, neg_sum = 0.0;
    const std::size_t steps = steps_per_epoch();
    for (std::size_t s = 0; s < steps; ++s) {
      const std::span<const std::size_t> batch(order.data() + s * c.batch_size, c.batch_size);
      const ViewPair views = make_views(data_.train, batch, policy, state_.rng);
      const double lr = lr_at(sched, state_.step);
      const LossValue loss = train_step(views, lr);
      loss_sum += loss.loss.item();
      pos_sum += loss.positive;
      neg_sum += loss.negative;
      m.lr = lr;
    }
    ++state_.epoch;
    m.epoch = state_.epoch;
    m.step = state_.step;
    m.loss = loss_sum / static_cast<double>(steps);
    if (c.objective == Objective::simclr) {
      m.positive = pos_sum / static_cast<double>(steps);
      m.negative = neg_sum / static_cast<double>(steps);
    }
    const CollapseReport report = collapse_report();
    m.feature_std = report.feature_std;
    m.pairwise_cosine = report.pairwise_cosine;
    if (finished()) m.probe_acc = probe().test_accuracy;
    return m;
  }

  // One optimizer step on a pair of augmented views.
  LossValue train_step(const ViewPair& views, double lr) {
    const ExperimentConfig& c = state_.config;
    NetworkAssembly& online = state_.online;
    online.mode = NormMode::train;
    LossValue loss;
    try {
      const ViewOutputs out = online.forward_views(views.v, views.v_prime);
      if (c.objective == Objective::byol) {
        Tensor target_z, target_z_prime;
        {
          NoGradGuard no_grad;
          NetworkAssembly& target = *state_.target;
          target.mode = NormMode::train;
          target_z = target.project(target.encode(views.v));
          target_z_prime = target.project(target.encode(views.v_prime));
        }
        const LossValue a = byol_loss(out.q, target_z_prime);
        const LossValue b = byol_loss(out.q_prime, target_z);
        loss.loss = scale(add(a.loss, b.loss), 0.5);
        loss.alignment = 0.5 * (a.alignment + b.alignment);
      } else {
        loss = infonce_loss(out.z, out.z_prime, c.temperature);
      }
      backward(loss.loss);
    } catch (const NonFiniteError& e) {
      throw DivergenceError(std::string("training diverged: ") + e.what());
    }
    // Checked up front so a failing step leaves every parameter untouched.
    for (std::size_t i = 0; i < online.params.size(); ++i) detail::gradient_of(online.params[i], online.params.info(i).name);
    if (c.optimizer == OptimizerKind::lars) {
      lars_step(online.params, state_.slots, lr, c.momentum, c.weight_decay, c.trust_coeff);
    } else {
      sgd_step(online.params, state_.slots, lr, c.momentum, c.weight_decay);
    }
    online.params.zero_grad();
    if (state_.target) ema_update(state_.target->params, online.params, ema_rate(c));
    ++state_.step;
    return loss;
  }

  // Collapse metrics of the online encoder on the fixed metrics sample.
  CollapseReport collapse_report() {
    const std::size_t n = std::min(state_.config.metrics_sample, data_.train.size());
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    Tensor y;
    {
      NoGradGuard no_grad;
      const NormMode saved = state_.online.mode;
      state_.online.mode = NormMode::eval;
      y = state_.online.encode(make_batch(data_.train, idx));
      state_.online.mode = saved;
    }
    return collapse_metrics(y, collapse_thresholds(state_.config));
  }

  // The end-of-training probe is computed once and reused.
  ProbeResult probe() {
    if (final_probe_ && final_probe_->first == state_.step) return final_probe_->second;
    const ProbeResult r = probe_encoder(state_.online, data_, probe_config(state_.config));
    if (finished()) final_probe_.emplace(state_.step, r);
    return r;
  }

 private:
  std::vector<std::size_t> permutation() {
    std::vector<std::size_t> order(data_.train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), state_.rng);
    return order;
  }

  void init_target() {
    if (state_.config.objective != Objective::byol) return;
    state_.target = state_.online.deep_copy();
    state_.target->params.set_trainable(false);
  }

  void check_data() const {
    if (data_.train.size() < state_.config.batch_size) {
      throw ConfigError("training split smaller than one batch");
    }
    if (data_.train.side != data_.test.side || data_.train.channels != data_.test.channels) {
      throw ConfigError("train and test images differ in shape");
    }
  }

  TrainerState state_;
  DataSplits data_;
  std::optional<std::pair<std::size_t, ProbeResult>> final_probe_;
};

using MetricsCallback = std::function<void(const EpochMetrics&, Trainer&)>;

struct TrainResult {
  std::vector<EpochMetrics> metrics;
  CollapseReport collapse;
  ProbeResult probe;
  bool uses_batch_statistics = false;
};

namespace detail {

inline TrainResult run_training(Trainer& trainer, const MetricsCallback& on_epoch) {
  TrainResult result;
  while (!trainer.finished()) {
    result.metrics.push_back(trainer.run_epoch());
    if (on_epoch) on_epoch(result.metrics.back(), trainer);
  }
  result.collapse = trainer.collapse_report();
  result.probe = trainer.probe();
  result.uses_batch_statistics = trainer.state().online.uses_batch_statistics();
  return result;
}

}  // namespace detail

inline TrainResult train_byol(const ExperimentConfig& config, const DataSplits& data,
                              const MetricsCallback& on_epoch = {}) {
  if (config.objective != Objective::byol) throw ConfigError("train_byol: objective is not byol");
  Trainer trainer(config, data);
  return detail::run_training(trainer, on_epoch);
}

inline TrainResult train_simclr(const ExperimentConfig& config, const DataSplits& data,
                                const MetricsCallback& on_epoch = {}) {
  if (config.objective != Objective::simclr) throw ConfigError("train_simclr: objective is not simclr");
  Trainer trainer(config, data);
  return detail::run_training(trainer, on_epoch);
}

inline TrainResult train(const ExperimentConfig& config, const DataSplits& data,
                         const MetricsCallback& on_epoch = {}) {
  return config.objective == Objective::byol ? train_byol(config, data, on_epoch)
                                             : train_simclr(config, data, on_epoch);
}

}  // namespace normssl
