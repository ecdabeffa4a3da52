#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "stg/autodiff.hpp"

namespace stg {

/// Adaptive-moment (Adam) state with bias correction.
struct AdamState {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::size_t step = 0;
  std::vector<Tensor> first_moment;
  std::vector<Tensor> second_moment;
};

inline void optimizer_step(const std::vector<Parameter*>& params, AdamState& state) {
  for (const auto* p : params) {
    if (!p->has_grad()) throw ContractError("optimizer_step: parameter '" + p->name + "' has no gradient");
    if (p->grad.shape() != p->value.shape()) {
      throw DimensionError("optimizer_step: gradient shape of '" + p->name + "' differs from its value");
    }
  }
  if (state.first_moment.empty()) {
    for (const auto* p : params) {
      state.first_moment.push_back(Tensor::zeros(p->value.shape()));
      state.second_moment.push_back(Tensor::zeros(p->value.shape()));
    }
  }
  if (state.first_moment.size() != params.size()) {
    throw ContractError("optimizer_step: parameter list changed between steps");
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter& p = *params[k];
    auto m = state.first_moment[k].data();
    auto v = state.second_moment[k].data();
    auto w = p.value.data();
    const auto g = p.grad.data();
    if (m.size() != w.size()) throw DimensionError("optimizer_step: moment shape mismatch for '" + p.name + "'");
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
      w[i] -= state.learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + state.epsilon);
    }
    p.value.require_finite("optimizer_step");
  }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
inline double clip_gradient_norm(const std::vector<Parameter*>& params, double max_norm) {
  double sq = 0.0;
  for (const auto* p : params) {
    for (double g : p->grad.data()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (auto* p : params) {
      for (double& g : p->grad.data()) g *= s;
    }
  }
  return norm;
}

}  // namespace stg
