#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "celltrack/autodiff.hpp"

namespace celltrack {

struct GradCheckOptions {
  double eps = 1e-5;
  double tolerance = 1e-4;
  // Denominator floor of the relative error. Central differences at eps=1e-5
  // carry about 1e-10 of round-off through a deep network, so gradients
  // below this floor are compared on an absolute scale (tolerance * floor).
  double scale_floor = 1e-5;
  std::size_t max_failures_reported = 20;
};

struct GradCheckFailure {
  std::string parameter;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradCheckReport {
  std::size_t checked = 0;
  std::size_t failed = 0;
  double max_rel_error = 0.0;
  std::vector<GradCheckFailure> failures;

  bool passed() const { return failed == 0 && checked > 0; }
};

inline double relative_error(double analytic, double numeric, double floor) {
  const double scale = std::max({std::fabs(analytic), std::fabs(numeric), floor});
  return std::fabs(analytic - numeric) / scale;
}

/// Compares taped gradients of `loss_fn` against central differences for
/// every element of every parameter. `loss_fn(tape)` must return a 1x1 Var
/// and be deterministic.
template <class LossFn>
GradCheckReport gradient_check(std::span<ad::Parameter* const> params, LossFn&& loss_fn,
                               const GradCheckOptions& opt = {}) {
  ad::Gradients grads;
  {
    ad::Tape tape(ad::Mode::Train);
    ad::Var loss = loss_fn(tape);
    grads = tape.backward(loss);
  }
  auto eval = [&]() {
    ad::Tape tape(ad::Mode::Eval);
    return loss_fn(tape).scalar();
  };

  GradCheckReport report;
  for (ad::Parameter* p : params) {
    const Tensor2 g = grads.of(*p);
    auto values = p->value.values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + opt.eps;
      const double up = eval();
      values[i] = saved - opt.eps;
      const double down = eval();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * opt.eps);
      const double analytic = g.values()[i];
      const double err = relative_error(analytic, numeric, opt.scale_floor);
      ++report.checked;
      report.max_rel_error = std::max(report.max_rel_error, err);
      if (!(err < opt.tolerance)) {
        ++report.failed;
        if (report.failures.size() < opt.max_failures_reported) {
          report.failures.push_back({p->name, i, analytic, numeric, err});
        }
      }
    }
  }
  return report;
}

}  // namespace celltrack
