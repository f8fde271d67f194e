#include <cmath>

#include "ddsa/error.hpp"
#include "ddsa/nn.hpp"

namespace ddsa::nn {

std::string_view to_string(OptimizerKind k) {
  switch (k) {
    case OptimizerKind::sgd: return "sgd";
    case OptimizerKind::adam: return "adam";
    case OptimizerKind::adamw: return "adamw";
  }
  return "sgd";
}

OptimizerKind optimizer_kind_from_string(std::string_view s) {
  if (s == "sgd") return OptimizerKind::sgd;
  if (s == "adam") return OptimizerKind::adam;
  if (s == "adamw") return OptimizerKind::adamw;
  throw std::invalid_argument("unknown optimizer '" + std::string(s) + "'");
}

void OptimizerConfig::validate() const {
  if (!(learning_rate > 0.0)) throw std::invalid_argument("optimizer: learning rate must be positive");
  if (momentum < 0.0 || momentum >= 1.0) throw std::invalid_argument("optimizer: momentum must lie in [0, 1)");
  if (weight_decay < 0.0) throw std::invalid_argument("optimizer: weight decay must be >= 0");
  if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
    throw std::invalid_argument("optimizer: betas must lie in [0, 1)");
}

void optimizer_step(ParamVector& params, const ParamVector& grad, OptimizerState& state,
                    const OptimizerConfig& config, double lr_scale) {
  if (grad.size() != params.size()) throw DimensionError("optimizer_step: gradient size mismatch");
  auto& theta = params.values();
  const auto& g = grad.values();
  const std::size_t n = theta.size();
  const double lr = config.learning_rate * lr_scale;
  ++state.step;

  if (config.kind == OptimizerKind::sgd) {
    if (config.momentum > 0.0 && state.m.size() != n) state.m.assign(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      double d = g[i] + config.weight_decay * theta[i];
      if (config.momentum > 0.0) {
        state.m[i] = config.momentum * state.m[i] + d;
        d = state.m[i];
      }
      theta[i] -= lr * d;
    }
    return;
  }

  if (state.m.size() != n) state.m.assign(n, 0.0);
  if (state.v.size() != n) state.v.assign(n, 0.0);
  const double b1 = config.beta1;
  const double b2 = config.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  const bool decoupled = config.kind == OptimizerKind::adamw;
  for (std::size_t i = 0; i < n; ++i) {
    double d = g[i];
    if (decoupled)
      theta[i] -= lr * config.weight_decay * theta[i];
    else
      d += config.weight_decay * theta[i];
    state.m[i] = b1 * state.m[i] + (1.0 - b1) * d;
    state.v[i] = b2 * state.v[i] + (1.0 - b2) * d * d;
    theta[i] -= lr * (state.m[i] / c1) / (std::sqrt(state.v[i] / c2) + config.epsilon);
  }
}

}  // namespace ddsa::nn
