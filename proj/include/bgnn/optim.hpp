// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "errors.hpp"
#include "tensor.hpp"

namespace bgnn {

struct AdamConfig {
  double lr = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 5e-4;
  /// false: L2 term added to the gradient before the moment updates.
  /// true: AdamW-style shrinkage applied directly to the parameters.
  bool decoupled = false;
};

struct AdamState {
  AdamConfig config;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
  std::uint64_t step = 0;
};

inline AdamState make_adam_state(std::span<const Tensor> params, AdamConfig config) {
  AdamState s{config, {}, {}, 0};
  for (const auto& p : params) {
    s.first_moment.emplace_back(p.numel(), 0.0);
    s.second_moment.emplace_back(p.numel(), 0.0);
  }
  return s;
}

/// One bias-corrected Adam update of `params` in place.
inline void adam_step(std::span<Tensor> params, std::span<const std::vector<double>> grads,
                      AdamState& state) {
  if (params.size() != grads.size() || params.size() != state.first_moment.size()) {
    throw ShapeError("adam_step: " + std::to_string(params.size()) + " params, " +
                     std::to_string(grads.size()) + " grads, " +
                     std::to_string(state.first_moment.size()) + " moment slots");
  }
  const auto& c = state.config;
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto p = params[k].mutable_values();
    const auto& g = grads[k];
    auto& m = state.first_moment[k];
    auto& v = state.second_moment[k];
    if (g.size() != p.size() || m.size() != p.size() || v.size() != p.size()) {
      throw ShapeError("adam_step: parameter " + std::to_string(k) + " has " +
                       std::to_string(p.size()) + " values but gradient has " +
                       std::to_string(g.size()));
    }
    for (std::size_t i = 0; i < p.size(); ++i) {
      double gi = g[i];
      if (!c.decoupled) gi += c.weight_decay * p[i];
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
      if (c.decoupled) p[i] -= c.lr * c.weight_decay * p[i];
      p[i] -= c.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + c.eps);
    }
  }
}

/// Adam over a fixed parameter list, reading gradients from the tensors.
class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamConfig config)
      : params_(std::move(params)), state_(make_adam_state(params_, config)) {}

  void step() {
    std::vector<std::vector<double>> grads;
    grads.reserve(params_.size());
    for (const auto& p : params_) grads.push_back(p.grad());
    adam_step(params_, grads, state_);
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  const AdamState& state() const { return state_; }
  std::span<Tensor> params() { return params_; }

 private:
  std::vector<Tensor> params_;
  AdamState state_;
};

}  // namespace bgnn
