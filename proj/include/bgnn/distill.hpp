// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "errors.hpp"
#include "ops.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace bgnn {

enum class TemperatureVariant { entropy_only, concat };

inline std::string to_string(TemperatureVariant v) {
  return v == TemperatureVariant::entropy_only ? "entropy_only" : "concat";
}

struct TemperatureConfig {
  double tau_min = 1.0;
  double tau_max = 4.0;
  std::size_t hidden = 64;

  void validate() const {
    if (!(tau_min >= 1.0) || !(tau_max > tau_min)) {
      throw ConfigError("temperature range must satisfy 1 <= tau_min < tau_max, got [" +
                        std::to_string(tau_min) + ", " + std::to_string(tau_max) + "]");
    }
    if (hidden == 0) throw ConfigError("temperature MLP width must be positive");
  }
};

/// Entropy of softmax(t) per row: the teacher's uncertainty on each sample,
/// in [0, log C]. Computed as logsumexp(t) - sum_c p_c t_c.
inline Tensor teacher_confidence(const Tensor& teacher_logits) {
  const auto m = teacher_logits.rows(), c = teacher_logits.cols();
  const auto tv = teacher_logits.values();
  std::vector<double> out(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = tv.data() + i * c;
    const double mx = *std::max_element(row, row + c);
    double z = 0.0, weighted = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double e = std::exp(row[j] - mx);
      z += e;
      weighted += e * (row[j] - mx);
    }
    const double h = std::log(z) - weighted / z;
    out[i] = std::clamp(h, 0.0, std::log(static_cast<double>(c)));
  }
  return Tensor({m, 1}, std::move(out));
}

/// Per-sample temperature from the teacher's logits:
///   tau = sigmoid(MLP(x)) * (tau_max - tau_min) + tau_min
/// with x = confidence (entropy_only) or [logits || confidence] (concat).
/// The MLP has one ReLU hidden layer and a zero-initialized output layer,
/// so every sample starts at the midpoint of the range.
class TemperatureModule {
 public:
  TemperatureModule() = default;

  static TemperatureModule init(TemperatureVariant variant, std::size_t n_classes,
                                TemperatureConfig config, std::uint64_t seed) {
    config.validate();
    TemperatureModule t;
    t.variant_ = variant;
    t.config_ = config;
    t.n_classes_ = n_classes;
    const auto in = t.input_dim();
    Rng rng(mix_seed(seed, 0x7e39));
    const double bound = std::sqrt(6.0 / static_cast<double>(in + config.hidden));
    std::vector<double> w1(in * config.hidden);
    for (auto& v : w1) v = rng.uniform(-bound, bound);
    t.w1_ = Tensor({in, config.hidden}, std::move(w1), true);
    t.b1_ = Tensor::zeros({config.hidden}, true);
    t.w2_ = Tensor::zeros({config.hidden, 1}, true);
    t.b2_ = Tensor::zeros({1}, true);
    return t;
  }

  std::size_t input_dim() const {
    return variant_ == TemperatureVariant::entropy_only ? 1 : n_classes_ + 1;
  }
  TemperatureVariant variant() const { return variant_; }
  const TemperatureConfig& config() const { return config_; }

  std::vector<Tensor> parameters() const { return {w1_, b1_, w2_, b2_}; }

  /// Pre-sigmoid MLP output, m x 1.
  Tensor raw_output(Tape& tape, const Tensor& teacher_logits) const {
    const auto conf = teacher_confidence(teacher_logits);
    Tensor input = conf;
    if (variant_ == TemperatureVariant::concat) {
      if (teacher_logits.cols() != n_classes_) {
        throw ShapeError("temperature module expects " + std::to_string(n_classes_) +
                         " classes, got logits " + shape_str(teacher_logits.shape()));
      }
      input = concat_cols(tape, teacher_logits.detach(), conf);
    }
    if (input.cols() != w1_.rows()) {
      throw ShapeError("temperature module input width " + std::to_string(input.cols()) +
                       " != " + std::to_string(w1_.rows()));
    }
    const auto hidden = relu(tape, linear(tape, input, w1_, b1_));
    return linear(tape, hidden, w2_, b2_);
  }

  /// Temperatures as an m x 1 tensor; gradients reach the MLP only.
  Tensor forward(Tape& tape, const Tensor& teacher_logits) const {
    return squash(tape, raw_output(tape, teacher_logits));
  }

  /// Maps raw MLP outputs into [tau_min, tau_max] and checks the range.
  Tensor squash(Tape& tape, const Tensor& raw) const {
    const double range = config_.tau_max - config_.tau_min;
    auto tau = add_row_bias(tape, scale(tape, sigmoid(tape, raw), range),
                            Tensor::vector({config_.tau_min}));
    for (double v : tau.values()) {
      if (!(v >= config_.tau_min && v <= config_.tau_max)) {
        throw ContractError("temperature " + std::to_string(v) + " escaped [" +
                            std::to_string(config_.tau_min) + ", " +
                            std::to_string(config_.tau_max) + "]");
      }
    }
    return tau;
  }

 private:
  TemperatureVariant variant_ = TemperatureVariant::entropy_only;
  TemperatureConfig config_;
  std::size_t n_classes_ = 0;
  Tensor w1_, b1_, w2_, b2_;
};

namespace detail {

/// Plain softmax of row i of `z` at temperature t.
inline void softmax_row(std::span<const double> z, double t, std::span<double> out) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : z) mx = std::max(mx, v / t);
  double s = 0.0;
  for (std::size_t j = 0; j < z.size(); ++j) {
    out[j] = std::exp(z[j] / t - mx);
    s += out[j];
  }
  for (auto& v : out) v /= s;
}

inline void check_kd_inputs(const Tensor& z, const Tensor& t, const Tensor& tau) {
  if (z.shape() != t.shape() || z.rank() != 2) {
    throw ContractError("kd: student logits " + shape_str(z.shape()) +
                        " and teacher logits " + shape_str(t.shape()) + " must match");
  }
  if (tau.numel() != 1 && tau.numel() != z.rows()) {
    throw ContractError("kd: need one temperature per sample or a shared one, got " +
                        shape_str(tau.shape()));
  }
  for (double v : tau.values()) {
    if (!(v > 0.0)) throw ContractError("kd: temperature must be > 0");
  }
}

}  // namespace detail

struct KdOptions {
  /// Multiply each sample's term by tau^2 (Hinton-style rescaling).
  bool tau_squared = false;
};

/// Soft cross-entropy -sum_v softmax(t_v/tau_v) . log softmax(z_v/tau_v) over
/// the samples listed in `scope`. The same tau softens both sides and
/// receives gradient through both; the teacher logits receive none.
inline Tensor kd_loss(Tape& tape, const Tensor& student_logits, const Tensor& teacher_logits,
                      const Tensor& tau, std::span<const std::size_t> scope,
                      KdOptions options = {}) {
  detail::check_kd_inputs(student_logits, teacher_logits, tau);
  if (scope.empty()) return Tensor::scalar(0.0);
  const bool shared = tau.numel() == 1;
  const auto z = gather_rows(tape, student_logits, scope);
  const auto t = gather_rows(tape, teacher_logits.detach(), scope);
  const std::vector<std::size_t> first(scope.size(), 0);
  const auto tau_s = gather_rows(tape, tau, shared ? std::span<const std::size_t>(first) : scope);

  auto target = softmax_rows(tape, t, tau_s);
  if (options.tau_squared) target = mul_rows(tape, target, mul(tape, tau_s, tau_s));
  const auto student = softmax_rows(tape, z, tau_s);
  return scale(tape, sum(tape, mul(tape, log_prob(tape, student), target)), -1.0);
}

inline std::vector<std::size_t> all_indices(std::size_t n) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  return idx;
}

/// Closed-form gradient of kd_loss with respect to the student logits,
/// (softmax(z/tau) - softmax(t/tau)) / tau, computed without the tape.
inline Tensor kd_gradient_reference(const Tensor& student_logits, const Tensor& teacher_logits,
                                    const Tensor& tau) {
  detail::check_kd_inputs(student_logits, teacher_logits, tau);
  const auto m = student_logits.rows(), c = student_logits.cols();
  const auto zv = student_logits.values();
  const auto tv = teacher_logits.values();
  std::vector<double> out(m * c), ps(c), pt(c);
  for (std::size_t i = 0; i < m; ++i) {
    const double t = tau.numel() == 1 ? tau[0] : tau[i];
    detail::softmax_row(zv.subspan(i * c, c), t, ps);
    detail::softmax_row(tv.subspan(i * c, c), t, pt);
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = (ps[j] - pt[j]) / t;
  }
  return Tensor({m, c}, std::move(out));
}

}  // namespace bgnn
