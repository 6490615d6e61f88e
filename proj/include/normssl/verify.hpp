#pragma once
//
// Property suite behind `normssl verify`: gradient checks, normalization
// equivalences, batch independence, weight-standardization invariants, the
// re-initialization equivalence, the InfoNCE reference, EMA replay and the
// static/dynamic batch-statistics agreement.
//

#include <chrono>
#include <cmath>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "normssl/grad_check.hpp"
#include "normssl/grid.hpp"

namespace normssl {

struct PropertyResult {
  std::string suite;
  std::string name;
  bool passed = false;
  double measured = 0.0;   // worst observed error (or the quantity being bounded)
  double tolerance = 0.0;
  std::string note;
};

struct VerifyOptions {
  std::size_t grad_cases = 10;         // random cases per gradient check
  std::size_t equivalence_cases = 1000;
  std::uint64_t seed = 7;
  InjectedFault fault = InjectedFault::none;
};

struct VerifyReport {
  std::vector<PropertyResult> results;
  bool passed() const {
    for (const auto& r : results)
      if (!r.passed) return false;
    return !results.empty();
  }
  std::string text() const {
    std::ostringstream os;
    os.precision(3);
    for (const auto& r : results) {
      os << (r.passed ? "PASS " : "FAIL ") << r.suite << " / " << r.name << "  measured=" << std::scientific
         << r.measured << " tol=" << r.tolerance << std::defaultfloat;
      if (!r.note.empty()) os << "  (" << r.note << ")";
      os << "\n";
    }
    return os.str();
  }
};

namespace detail {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0, double shift = 0.0) {
  std::normal_distribution<double> n(shift, scale);
  std::vector<double> v(numel_of(shape));
  for (double& x : v) x = n(rng);
  return Tensor::from(std::move(shape), std::move(v));
}

// Fixed random weighting so a layer output reduces to a scalar with a
// nontrivial gradient (a plain sum of normalized values has gradient zero).
inline Tensor weighted_sum(const Tensor& y, const Tensor& weights) { return sum(mul(y, weights)); }

}  // namespace detail

struct GradCase {
  std::string name;
  // Builds one random case: the input to differentiate and the scalar function.
  std::function<std::pair<Tensor, ScalarFunction>(std::mt19937_64&)> make;
};

inline std::vector<GradCase> gradient_cases() {
  using detail::random_tensor;
  using detail::weighted_sum;
  std::vector<GradCase> cases;
  auto pick = [](std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
  };

  cases.push_back({"conv2d input", [=](std::mt19937_64& rng) {
    const std::size_t cin = pick(rng, 1, 3), cout = pick(rng, 1, 3), k = pick(rng, 1, 3);
    const std::size_t stride = pick(rng, 1, 2), pad = k / 2;
    Tensor x = random_tensor({2, 5, 5, cin}, rng);
    Tensor w = random_tensor({cout, k, k, cin}, rng);
    Tensor r = random_tensor(detail::conv_geometry(x.shape(), w.shape(), stride, pad).output_shape(), rng);
    return std::pair{x, ScalarFunction([=](const Tensor& t) { return weighted_sum(conv2d(t, w, stride, pad), r); })};
  }});
  cases.push_back({"conv2d weight", [=](std::mt19937_64& rng) {
    const std::size_t cin = pick(rng, 1, 3), cout = pick(rng, 1, 3), k = pick(rng, 1, 3);
    const std::size_t stride = pick(rng, 1, 2), pad = k / 2;
    Tensor x = random_tensor({2, 5, 5, cin}, rng);
    Tensor w = random_tensor({cout, k, k, cin}, rng);
    Tensor r = random_tensor(detail::conv_geometry(x.shape(), w.shape(), stride, pad).output_shape(), rng);
    return std::pair{w, ScalarFunction([=](const Tensor& t) { return weighted_sum(conv2d(x, t, stride, pad), r); })};
  }});
  cases.push_back({"linear input", [=](std::mt19937_64& rng) {
    const std::size_t n = pick(rng, 1, 4), in = pick(rng, 1, 5), out = pick(rng, 1, 5);
    Tensor x = random_tensor({n, in}, rng), w = random_tensor({out, in}, rng), b = random_tensor({out}, rng);
    Tensor r = random_tensor({n, out}, rng);
    return std::pair{x, ScalarFunction([=](const Tensor& t) { return weighted_sum(linear(t, w, &b), r); })};
  }});
  cases.push_back({"linear weight", [=](std::mt19937_64& rng) {
    const std::size_t n = pick(rng, 1, 4), in = pick(rng, 1, 5), out = pick(rng, 1, 5);
    Tensor x = random_tensor({n, in}, rng), w = random_tensor({out, in}, rng), b = random_tensor({out}, rng);
    Tensor r = random_tensor({n, out}, rng);
    return std::pair{w, ScalarFunction([=](const Tensor& t) { return weighted_sum(linear(x, t, &b), r); })};
  }});
  cases.push_back({"linear bias", [=](std::mt19937_64& rng) {
    const std::size_t n = pick(rng, 1, 4), in = pick(rng, 1, 5), out = pick(rng, 1, 5);
    Tensor x = random_tensor({n, in}, rng), w = random_tensor({out, in}, rng), b = random_tensor({out}, rng);
    Tensor r = random_tensor({n, out}, rng);
    return std::pair{b, ScalarFunction([=](const Tensor& t) { return weighted_sum(linear(x, w, &t), r); })};
  }});
  cases.push_back({"batch_norm (train)", [=](std::mt19937_64& rng) {
    const bool spatial = pick(rng, 0, 1) == 1;
    const std::size_t n = pick(rng, 2, 4), c = pick(rng, 1, 4);
    const Shape s = spatial ? Shape{n, 2, 3, c} : Shape{n, c};
    Tensor x = random_tensor(s, rng, 1.5, 0.3), r = random_tensor(s, rng);
    return std::pair{x, ScalarFunction([=](const Tensor& t) { return weighted_sum(batch_norm_train(t, 1e-5), r); })};
  }});
  cases.push_back({"layer_norm", [=](std::mt19937_64& rng) {
    const std::size_t n = pick(rng, 1, 3), c = pick(rng, 2, 4);
    const Shape s{n, 2, 2, c};
    Tensor x = random_tensor(s, rng, 1.5, -0.2), r = random_tensor(s, rng);
    return std::pair{x, ScalarFunction([=](const Tensor& t) { return weighted_sum(layer_norm(t, 1e-5), r); })};
  }});
  cases.push_back({"group_norm", [=](std::mt19937_64& rng) {
    const std::size_t n = pick(rng, 1, 3), g = pick(rng, 1, 3), per = pick(rng, 1, 2);
    const Shape s{n, 2, 3, g * per};
    Tensor x = random_tensor(s, rng, 1.2, 0.5), r = random_tensor(s, rng);
    return std::pair{x, ScalarFunction([=](const Tensor& t) { return weighted_sum(group_norm(t, g, 1e-5), r); })};
  }});
  cases.push_back({"instance_norm", [=](std::mt19937_64& rng) {
    const std::size_t n = pick(rng, 1, 3), c = pick(rng, 1, 3);
    const Shape s{n, 3, 3, c};
    Tensor x = random_tensor(s, rng), r = random_tensor(s, rng);
    return std::pair{x, ScalarFunction([=](const Tensor& t) { return weighted_sum(instance_norm(t, 1e-5), r); })};
  }});
  cases.push_back({"ws conv2d weight", [=](std::mt19937_64& rng) {
    const std::size_t cin = pick(rng, 1, 3), cout = pick(rng, 1, 3), k = pick(rng, 2, 3);
    Tensor x = random_tensor({2, 4, 4, cin}, rng);
    Tensor w = random_tensor({cout, k, k, cin}, rng);
    Tensor r = random_tensor(detail::conv_geometry(x.shape(), w.shape(), 1, k / 2).output_shape(), rng);
    return std::pair{w, ScalarFunction([=](const Tensor& t) {
                       return weighted_sum(conv2d(x, weight_standardize(t, 1e-4), 1, k / 2), r);
                     })};
  }});
  cases.push_back({"ws linear weight", [=](std::mt19937_64& rng) {
    const std::size_t n = pick(rng, 1, 4), in = pick(rng, 2, 5), out = pick(rng, 1, 4);
    Tensor x = random_tensor({n, in}, rng), w = random_tensor({out, in}, rng);
    Tensor r = random_tensor({n, out}, rng);
    return std::pair{w, ScalarFunction([=](const Tensor& t) {
                       return weighted_sum(linear(x, weight_standardize(t, 1e-4)), r);
                     })};
  }});
  cases.push_back({"cosine_similarity", [=](std::mt19937_64& rng) {
    const std::size_t n = pick(rng, 1, 4), d = pick(rng, 2, 5);
    Tensor a = random_tensor({n, d}, rng), b = random_tensor({n, d}, rng), r = random_tensor({n}, rng);
    return std::pair{a, ScalarFunction([=](const Tensor& t) { return weighted_sum(cosine_similarity(t, b), r); })};
  }});
  cases.push_back({"byol_loss", [=](std::mt19937_64& rng) {
    const std::size_t n = pick(rng, 1, 4), d = pick(rng, 2, 5);
    Tensor q = random_tensor({n, d}, rng), z = random_tensor({n, d}, rng);
    return std::pair{q, ScalarFunction([=](const Tensor& t) { return byol_loss(t, z).loss; })};
  }});
  cases.push_back({"infonce_loss", [=](std::mt19937_64& rng) {
    const std::size_t n = pick(rng, 2, 4), d = pick(rng, 2, 5);
    const double tau = std::uniform_real_distribution<double>(0.2, 1.0)(rng);
    Tensor z = random_tensor({n, d}, rng), zp = random_tensor({n, d}, rng);
    if (pick(rng, 0, 1) == 0) {
      return std::pair{z, ScalarFunction([=](const Tensor& t) { return infonce_loss(t, zp, tau).loss; })};
    }
    return std::pair{zp, ScalarFunction([=](const Tensor& t) { return infonce_loss(z, t, tau).loss; })};
  }});
  return cases;
}

// Worst relative error per gradient case over `count` random draws.
inline std::vector<PropertyResult> gradient_suite(std::size_t count, std::uint64_t seed,
                                                  const GradCheckOptions& opt = {}) {
  std::vector<PropertyResult> out;
  std::mt19937_64 rng(seed);
  for (const auto& gc : gradient_cases()) {
    PropertyResult r{"gradients", gc.name, true, 0.0, opt.tolerance, ""};
    std::size_t excluded = 0;
    for (std::size_t i = 0; i < count; ++i) {
      auto [x, f] = gc.make(rng);
      const GradCheckReport rep = grad_check(f, x, opt);
      r.measured = std::max(r.measured, rep.deterministic ? rep.max_rel_error : INFINITY);
      r.passed = r.passed && rep.passed;
      excluded += rep.excluded;
    }
    r.note = std::to_string(count) + " cases";
    if (excluded) r.note += ", " + std::to_string(excluded) + " kink coordinates skipped";
    out.push_back(std::move(r));
  }
  return out;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) return INFINITY;
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

inline std::vector<PropertyResult> equivalence_suite(std::size_t count, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto pick = [&](std::size_t lo, std::size_t hi) { return std::uniform_int_distribution<std::size_t>(lo, hi)(rng); };
  PropertyResult ln{"equivalence", "group_norm(G=1) == layer_norm", true, 0.0, 1e-10, ""};
  PropertyResult in{"equivalence", "group_norm(G=C) == instance_norm", true, 0.0, 1e-10, ""};
  for (std::size_t i = 0; i < count; ++i) {
    const Shape s{pick(1, 3), pick(1, 4), pick(1, 4), pick(1, 6)};
    const double scale = std::exp(std::uniform_real_distribution<double>(-3.0, 3.0)(rng));
    const Tensor x = detail::random_tensor(s, rng, scale, 0.5 * scale);
    ln.measured = std::max(ln.measured, max_abs_diff(group_norm(x, 1, 1e-5).data(), layer_norm(x, 1e-5).data()));
    in.measured = std::max(in.measured, max_abs_diff(group_norm(x, s[3], 1e-5).data(), instance_norm(x, 1e-5).data()));
  }
  ln.passed = ln.measured <= ln.tolerance;
  in.passed = in.measured <= in.tolerance;
  ln.note = in.note = std::to_string(count) + " random tensors";
  return {ln, in};
}

// Replacing one sample must leave every other sample's output unchanged,
// except for train-mode batch norm, which must show a counterexample.
inline std::vector<PropertyResult> batch_independence_suite(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const Shape s{4, 3, 3, 4};
  const Tensor x = detail::random_tensor(s, rng);
  std::vector<double> swapped = x.values();
  for (std::size_t i = 3 * 36; i < 4 * 36; ++i) swapped[i] = 5.0 * swapped[i] + 1.0;
  const Tensor x2 = Tensor::from(s, swapped);
  const Tensor w = detail::random_tensor({5, 3, 3, 4}, rng);
  auto others = [](const Tensor& y) {
    return std::vector<double>(y.data().begin(), y.data().begin() + static_cast<std::ptrdiff_t>(3 * (y.numel() / 4)));
  };
  std::vector<std::pair<std::string, std::function<Tensor(const Tensor&)>>> fns{
      {"layer_norm", [](const Tensor& t) { return layer_norm(t, 1e-5); }},
      {"group_norm", [](const Tensor& t) { return group_norm(t, 2, 1e-5); }},
      {"instance_norm", [](const Tensor& t) { return instance_norm(t, 1e-5); }},
      {"ws conv2d", [w](const Tensor& t) { return conv2d(t, weight_standardize(w, 1e-4), 1, 1); }},
  };
  std::vector<PropertyResult> out;
  for (const auto& [name, f] : fns) {
    PropertyResult r{"batch independence", name + " ignores other samples", false, 0.0, 0.0, ""};
    r.measured = max_abs_diff(others(f(x)), others(f(x2)));
    r.passed = r.measured == 0.0;
    out.push_back(r);
  }
  PropertyResult bn{"batch independence", "batch_norm (train) depends on other samples", false, 0.0, 1e-6,
                    "measured must exceed tol"};
  bn.measured = max_abs_diff(others(batch_norm_train(x, 1e-5)), others(batch_norm_train(x2, 1e-5)));
  bn.passed = bn.measured > bn.tolerance;
  out.push_back(bn);
  return out;
}

inline std::vector<PropertyResult> ws_suite(std::uint64_t seed, double eps = 1e-4) {
  std::mt19937_64 rng(seed);
  PropertyResult mean_r{"weight standardization", "row |mean|", true, 0.0, 1e-10, ""};
  PropertyResult std_r{"weight standardization", "row |std - 1| (unit-variance rows)", true, 0.0, eps, ""};
  PropertyResult floor_r{"weight standardization", "row std == sqrt(var / (var + eps))", true, 0.0, 1e-12, ""};
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t rows = 1 + trial % 7, cols = 9 + 16 * (trial % 5);
    const double scale = trial % 2 ? 1.0 : 0.05;
    const Tensor w = detail::random_tensor({rows, cols}, rng, scale, 0.3);
    const Tensor ws = weight_standardize(w, eps);
    for (std::size_t r = 0; r < rows; ++r) {
      double m = 0.0, raw_m = 0.0;
      for (std::size_t c = 0; c < cols; ++c) {
        m += ws[r * cols + c];
        raw_m += w[r * cols + c];
      }
      m /= static_cast<double>(cols);
      raw_m /= static_cast<double>(cols);
      double v = 0.0, raw_v = 0.0;
      for (std::size_t c = 0; c < cols; ++c) {
        v += (ws[r * cols + c] - m) * (ws[r * cols + c] - m);
        raw_v += (w[r * cols + c] - raw_m) * (w[r * cols + c] - raw_m);
      }
      v /= static_cast<double>(cols);
      raw_v /= static_cast<double>(cols);
      mean_r.measured = std::max(mean_r.measured, std::abs(m));
      floor_r.measured = std::max(floor_r.measured, std::abs(std::sqrt(v) - std::sqrt(raw_v / (raw_v + eps))));
      if (scale == 1.0) std_r.measured = std::max(std_r.measured, std::abs(std::sqrt(v) - 1.0) * (raw_v >= 0.5 ? 1.0 : 0.0));
    }
  }
  mean_r.passed = mean_r.measured < mean_r.tolerance;
  std_r.passed = std_r.measured <= std_r.tolerance;
  floor_r.passed = floor_r.measured < floor_r.tolerance;
  std_r.note = "rows with raw variance >= 0.5";
  return {mean_r, std_r, floor_r};
}

// A small all-BN configuration used by the structural properties.
inline ExperimentConfig small_test_config() {
  ExperimentConfig c;
  c.image_size = 8;
  c.stem_width = 4;
  c.stage_widths = {4, 8};
  c.blocks_per_stage = 1;
  c.proj_hidden = 16;
  c.proj_out = 8;
  c.gn_groups = 2;
  c.batch_size = 8;
  c.train_size = 16;
  c.test_size = 16;
  c.epochs = 1;
  return c;
}

struct InitEquivalence {
  double first_site = 0.0;  // max |diff| at the first norm site output
  double end_to_end = 0.0;  // max |diff| at the final output, relative to its scale
  std::string first_site_name;
};

// BN network (train mode, reference affines) vs the re-initialized norm-free
// network on the captured batch.
inline InitEquivalence init_equivalence(const ExperimentConfig& config, const Tensor& batch) {
  NetworkAssembly bn = build(config, batch.dim(3));
  ReinitResult re = apply_bn_capture_reinit(bn.deep_copy(), batch, config.stat_floor);
  set_reference_affines(bn);
  auto run = [&](NetworkAssembly& net, std::vector<Tensor>& sites) {
    net.mode = NormMode::train;
    net.site_observer = [&](const NormSite&, const Tensor& y) { sites.push_back(y); };
    NoGradGuard no_grad;
    Tensor out = net.project(net.encode(batch));
    if (net.predictor) out = net.predict(out);
    net.site_observer = nullptr;
    return out;
  };
  std::vector<Tensor> bn_sites, re_sites;
  const Tensor a = run(bn, bn_sites);
  const Tensor b = run(re.network, re_sites);
  InitEquivalence eq;
  eq.first_site_name = bn.sites.front().name;
  eq.first_site = max_abs_diff(bn_sites.front().data(), re_sites.front().data());
  double scale = 0.0;
  for (double v : a.data()) scale = std::max(scale, std::abs(v));
  eq.end_to_end = max_abs_diff(a.data(), b.data()) / std::max(scale, 1.0);
  return eq;
}

inline std::vector<PropertyResult> init_protocol_suite(std::uint64_t seed) {
  ExperimentConfig c = small_test_config();
  c.init = InitMode::bn_capture_reinit;
  std::mt19937_64 rng(seed);
  const Tensor batch = detail::random_tensor({8, c.image_size, c.image_size, 3}, rng);
  const InitEquivalence eq = init_equivalence(c, batch);
  PropertyResult first{"init protocol", "first site matches BN (" + eq.first_site_name + ")", false, eq.first_site, 1e-10, ""};
  first.passed = eq.first_site <= first.tolerance;
  PropertyResult e2e{"init protocol", "end-to-end output matches BN", false, eq.end_to_end, 1e-4, "relative to output scale"};
  e2e.passed = eq.end_to_end <= e2e.tolerance;
  return {first, e2e};
}

// Loop-based InfoNCE: anchor i (first view) has positive z'_i and negatives
// {z'_j : all j} u {z_j : j != i}; symmetric for second-view anchors.
inline double infonce_reference(const std::vector<std::vector<double>>& z,
                                const std::vector<std::vector<double>>& zp, double tau) {
  const std::size_t b = z.size();
  auto cosine = [](const std::vector<double>& u, const std::vector<double>& v) {
    double uv = 0, uu = 0, vv = 0;
    for (std::size_t k = 0; k < u.size(); ++k) {
      uv += u[k] * v[k];
      uu += u[k] * u[k];
      vv += v[k] * v[k];
    }
    return uv / (std::sqrt(uu) * std::sqrt(vv));
  };
  double total = 0.0;
  for (int view = 0; view < 2; ++view) {
    const auto& own = view == 0 ? z : zp;
    const auto& other = view == 0 ? zp : z;
    for (std::size_t i = 0; i < b; ++i) {
      double denom = 0.0;
      for (std::size_t j = 0; j < b; ++j) {
        denom += std::exp(cosine(own[i], other[j]) / tau);
        if (j != i) denom += std::exp(cosine(own[i], own[j]) / tau);
      }
      total += -cosine(own[i], other[i]) / tau + std::log(denom);
    }
  }
  return total / static_cast<double>(2 * b);
}

inline PropertyResult infonce_property(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  PropertyResult r{"objectives", "infonce_loss matches loop reference (B <= 4)", true, 0.0, 1e-8, ""};
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t b = 1 + trial % 4, d = 2 + trial % 5;
    const double tau = 0.1 + 0.05 * (trial % 7);
    const Tensor z = detail::random_tensor({b, d}, rng), zp = detail::random_tensor({b, d}, rng);
    std::vector<std::vector<double>> zr(b), zpr(b);
    for (std::size_t i = 0; i < b; ++i) {
      zr[i].assign(z.data().begin() + static_cast<std::ptrdiff_t>(i * d), z.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * d));
      zpr[i].assign(zp.data().begin() + static_cast<std::ptrdiff_t>(i * d), zp.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * d));
    }
    r.measured = std::max(r.measured, std::abs(infonce_loss(z, zp, tau).loss.item() - infonce_reference(zr, zpr, tau)));
  }
  r.passed = r.measured <= r.tolerance;
  return r;
}

inline std::vector<PropertyResult> ema_suite(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  NetworkAssembly online = build(small_test_config());
  NetworkAssembly target = online.deep_copy();
  std::normal_distribution<double> n(0.0, 0.1);
  const double rate = 0.004;
  // Replay: the recurrence evaluated by hand, element by element.
  std::vector<std::vector<double>> expected;
  for (std::size_t i = 0; i < target.params.size(); ++i) expected.push_back(target.params[i].values());
  for (int step = 0; step < 10; ++step) {
    for (std::size_t i = 0; i < online.params.size(); ++i)
      for (double& v : online.params[i].mutable_data()) v += n(rng);
    ema_update(target.params, online.params, rate);
    for (std::size_t i = 0; i < expected.size(); ++i) {
      auto theta = online.params[i].data();
      for (std::size_t j = 0; j < expected[i].size(); ++j) expected[i][j] = (1.0 - rate) * expected[i][j] + rate * theta[j];
    }
  }
  PropertyResult replay{"ema", "10-step replay reproduces target exactly", false, 0.0, 0.0, ""};
  for (std::size_t i = 0; i < expected.size(); ++i)
    replay.measured = std::max(replay.measured, max_abs_diff(expected[i], target.params[i].data()));
  replay.passed = replay.measured == 0.0;

  PropertyResult zero{"ema", "rate 0 keeps target", false, 0.0, 0.0, ""};
  PropertyResult one{"ema", "rate 1 copies online", false, 0.0, 0.0, ""};
  ParameterStore before = target.params.deep_copy();
  ema_update(target.params, online.params, 0.0);
  for (std::size_t i = 0; i < before.size(); ++i)
    zero.measured = std::max(zero.measured, max_abs_diff(before[i].data(), target.params[i].data()));
  ema_update(target.params, online.params, 1.0);
  for (std::size_t i = 0; i < before.size(); ++i)
    one.measured = std::max(one.measured, max_abs_diff(online.params[i].data(), target.params[i].data()));
  zero.passed = zero.measured == 0.0;
  one.passed = one.measured == 0.0;
  return {replay, zero, one};
}

// Static inspection vs the swap-one-sample test on every grid assembly.
inline PropertyResult batch_statistics_agreement(std::uint64_t seed) {
  ExperimentConfig base = small_test_config();
  AblationGrid grid = table1_grid(base);
  const AblationGrid t2 = table2_grid();
  for (GridCell cell : t2.cells) {
    const ExperimentConfig preset_cfg = cell.config;
    cell.config = base;
    cell.config.encoder_norm = preset_cfg.encoder_norm;
    cell.config.projector_norm = preset_cfg.projector_norm;
    cell.config.predictor_norm = preset_cfg.predictor_norm;
    cell.config.ws = preset_cfg.ws;
    cell.config.init = preset_cfg.init;
    grid.cells.push_back(cell);
  }
  std::mt19937_64 rng(seed);
  const Tensor batch = detail::random_tensor({4, 8, 8, 3}, rng);
  const Tensor other = detail::random_tensor({1, 8, 8, 3}, rng);
  PropertyResult r{"batch statistics", "static detector agrees with swap test", true, 0.0, 0.0, ""};
  std::size_t disagreements = 0;
  for (const auto& cell : grid.cells) {
    NetworkAssembly net = build(cell.config);
    if (cell.config.init == InitMode::bn_capture_reinit) {
      net = apply_bn_capture_reinit(std::move(net), batch, cell.config.stat_floor).network;
    }
    const bool dynamic = batch_dependence(net, batch, other) > kBatchDependenceTolerance;
    if (dynamic != net.uses_batch_statistics()) {
      ++disagreements;
      r.note += (r.note.empty() ? "" : "; ") + cell.label;
    }
  }
  r.measured = static_cast<double>(disagreements);
  r.passed = disagreements == 0;
  if (r.passed) r.note = std::to_string(grid.cells.size()) + " assemblies";
  return r;
}

inline VerifyReport run_verify(const VerifyOptions& opt = {}) {
  FaultInjection fault(opt.fault);
  VerifyReport report;
  auto append = [&](std::vector<PropertyResult> rs) {
    for (auto& r : rs) report.results.push_back(std::move(r));
  };
  append(gradient_suite(opt.grad_cases, opt.seed));
  append(equivalence_suite(opt.equivalence_cases, opt.seed + 1));
  append(batch_independence_suite(opt.seed + 2));
  append(ws_suite(opt.seed + 3));
  append(init_protocol_suite(opt.seed + 4));
  report.results.push_back(infonce_property(opt.seed + 5));
  append(ema_suite(opt.seed + 6));
  report.results.push_back(batch_statistics_agreement(opt.seed + 7));
  return report;
}

}  // namespace normssl
