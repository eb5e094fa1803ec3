#pragma once

#include <cmath>
#include <map>
#include <span>
#include <string>

#include "celltrack/autodiff.hpp"

namespace celltrack {

struct AdamConfig {
  double lr = 1e-3;
  double weight_decay = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with decoupled weight decay. Moments are keyed by parameter name.
struct AdamState {
  struct Moments {
    Tensor2 first;
    Tensor2 second;
  };

  AdamConfig config;
  long step = 0;
  std::map<std::string, Moments> moments;

  explicit AdamState(AdamConfig cfg = {}) : config(cfg) {}
};

/// One optimisation step over `params`. A non-finite gradient aborts the
/// step before any parameter is touched.
inline void adam_step(AdamState& state, std::span<ad::Parameter* const> params, const ad::Gradients& grads) {
  for (const ad::Parameter* p : params) {
    const Tensor2* g = grads.find(*p);
    if (g == nullptr) continue;
    if (!g->same_shape(p->value)) {
      throw ConfigError("adam_step: gradient shape " + g->shape_string() + " != parameter shape " +
                        p->value.shape_string() + " for " + p->name);
    }
    if (!g->all_finite()) throw NumericError("adam_step: non-finite gradient for " + p->name);
  }

  const AdamConfig& c = state.config;
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  const double decay = 1.0 - c.lr * c.weight_decay;

  for (ad::Parameter* p : params) {
    const Tensor2 g = grads.of(*p);
    auto [it, inserted] = state.moments.try_emplace(p->name);
    AdamState::Moments& m = it->second;
    if (inserted || !m.first.same_shape(p->value)) {
      m.first = Tensor2(p->value.rows(), p->value.cols());
      m.second = Tensor2(p->value.rows(), p->value.cols());
    }
    auto w = p->value.values();
    auto gv = g.values();
    auto m1 = m.first.values();
    auto m2 = m.second.values();
    for (std::size_t i = 0; i < w.size(); ++i) {
      m1[i] = c.beta1 * m1[i] + (1.0 - c.beta1) * gv[i];
      m2[i] = c.beta2 * m2[i] + (1.0 - c.beta2) * gv[i] * gv[i];
      const double mhat = m1[i] / bc1;
      const double vhat = m2[i] / bc2;
      w[i] = w[i] * decay - c.lr * mhat / (std::sqrt(vhat) + c.eps);
    }
  }
}

}  // namespace celltrack
