#pragma once

#include <cmath>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "normssl/tensor.hpp"

namespace normssl {

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  // Denominator floor of the relative error, so gradients near zero are
  // compared on an absolute scale.
  double error_floor = 1e-3;
  // One-sided slopes differing by more than this (relative) mark a kink; such
  // coordinates are excluded instead of compared.
  double kink_threshold = 1e-2;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t checked = 0;
  std::size_t excluded = 0;
  std::vector<std::size_t> excluded_points;
  bool deterministic = true;
  bool passed = false;

  std::string summary() const {
    std::ostringstream os;
    os << (passed ? "pass" : "FAIL") << " max_rel=" << max_rel_error << " max_abs=" << max_abs_error
       << " checked=" << checked << " excluded=" << excluded;
    if (!deterministic) os << " nondeterministic";
    return os.str();
  }
};

using ScalarFunction = std::function<Tensor(const Tensor&)>;

// Compares reverse-mode gradients of a scalar f at x against central finite
// differences, coordinate by coordinate.
inline GradCheckReport grad_check(const ScalarFunction& f, const Tensor& x,
                                  const GradCheckOptions& opt = {}) {
  GradCheckReport report;
  Tensor probe = x.detach();
  probe.set_requires_grad(true);
  Tensor y = f(probe);
  if (y.numel() != 1) throw ShapeError("grad_check: function must be scalar-valued");
  const double f0 = y.item();
  backward(y);
  const std::vector<double> analytic(probe.grad().begin(), probe.grad().end());

  auto eval = [&](const std::vector<double>& values) {
    NoGradGuard guard;
    return f(Tensor::from(x.shape(), values)).item();
  };

  std::vector<double> values(x.values());
  if (eval(values) != f0) {
    report.deterministic = false;
    return report;
  }

  for (std::size_t i = 0; i < values.size(); ++i) {
    const double original = values[i];
    values[i] = original + opt.step;
    const double fp = eval(values);
    values[i] = original - opt.step;
    const double fm = eval(values);
    values[i] = original;

    const double forward_slope = (fp - f0) / opt.step;
    const double backward_slope = (f0 - fm) / opt.step;
    const double slope_scale =
        std::max({1.0, std::abs(forward_slope), std::abs(backward_slope)});
    if (std::abs(forward_slope - backward_slope) > opt.kink_threshold * slope_scale) {
      ++report.excluded;
      report.excluded_points.push_back(i);
      continue;
    }
    const double numeric = (fp - fm) / (2.0 * opt.step);
    const double abs_err = std::abs(numeric - analytic[i]);
    const double denom = std::max({std::abs(numeric), std::abs(analytic[i]), opt.error_floor});
    report.max_abs_error = std::max(report.max_abs_error, abs_err);
    report.max_rel_error = std::max(report.max_rel_error, abs_err / denom);
    ++report.checked;
  }
  report.passed = report.deterministic && report.max_rel_error < opt.tolerance;
  return report;
}

}  // namespace normssl
