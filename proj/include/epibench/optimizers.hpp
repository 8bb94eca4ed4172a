#pragma once

#include <cmath>
#include <stdexcept>
#include <string>

#include "epibench/nn.hpp"

namespace epibench {

enum class OptimizerKind { sgd, sgd_momentum, adam };

inline const char* to_string(OptimizerKind k) {
  switch (k) {
    case OptimizerKind::sgd: return "sgd";
    case OptimizerKind::sgd_momentum: return "sgd-momentum";
    case OptimizerKind::adam: return "adam";
  }
  return "?";
}

inline OptimizerKind optimizer_from_string(const std::string& s) {
  if (s == "sgd") return OptimizerKind::sgd;
  if (s == "sgd-momentum" || s == "sgdmom") return OptimizerKind::sgd_momentum;
  if (s == "adam") return OptimizerKind::adam;
  throw std::invalid_argument("unknown optimizer '" + s + "'");
}

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adam;
  double momentum = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct OptimizerState {
  OptimizerConfig config;
  Vector first;   // momentum buffer or Adam first moment
  Vector second;  // Adam second moment
  long long t = 0;

  OptimizerState() = default;
  OptimizerState(OptimizerConfig cfg, Eigen::Index size)
      : config(cfg), first(Vector::Zero(size)), second(Vector::Zero(size)) {}
};

/// One optimizer update in place.
///   sgd:          theta -= lr * g
///   sgd-momentum: v = m v + g; theta -= lr * v
///   adam:         bias-corrected first/second moments
inline void step(OptimizerState& state, ParamVector& params, const ParamVector& grad, double lr) {
  if (params.size() != grad.size() || state.first.size() != params.size())
    throw std::invalid_argument("optimizer state, parameter and gradient lengths differ");
  if (!(lr > 0.0)) throw std::invalid_argument("learning rate must be positive");
  ++state.t;
  const auto& c = state.config;
  switch (c.kind) {
    case OptimizerKind::sgd:
      params -= lr * grad;
      break;
    case OptimizerKind::sgd_momentum:
      state.first = c.momentum * state.first + grad;
      params -= lr * state.first;
      break;
    case OptimizerKind::adam: {
      state.first = c.beta1 * state.first + (1.0 - c.beta1) * grad;
      state.second = c.beta2 * state.second + (1.0 - c.beta2) * grad.cwiseAbs2();
      const double t = static_cast<double>(state.t);
      const double bc1 = 1.0 - std::pow(c.beta1, t);
      const double bc2 = 1.0 - std::pow(c.beta2, t);
      params.array() -= lr * (state.first.array() / bc1) / ((state.second.array() / bc2).sqrt() + c.epsilon);
      break;
    }
  }
  if (!params.allFinite()) throw std::runtime_error("optimizer produced non-finite parameters at step " +
                                                    std::to_string(state.t));
}

}  // namespace epibench
