// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "errors.hpp"
#include "ops.hpp"
#include "tensor.hpp"

namespace bgnn {

/// One weight per training sample, kept on the simplex.
struct SampleWeights {
  std::vector<double> w;

  std::size_t size() const { return w.size(); }
  double sum() const { return std::accumulate(w.begin(), w.end(), 0.0); }
};

inline SampleWeights init_weights(std::size_t n_train) {
  if (n_train == 0) throw ContractError("init_weights: need at least one training sample");
  return {std::vector<double>(n_train, 1.0 / static_cast<double>(n_train))};
}

/// Unnormalized SAMME.R multiplier exp(-((C-1)/C) * log p_true).
inline double samme_r_multiplier(double p_true, std::size_t n_classes) {
  const double c = static_cast<double>(n_classes);
  return std::exp(-((c - 1.0) / c) * std::log(std::max(p_true, kProbFloor)));
}

/// Reweights training samples by the teacher's probability on the true
/// class, then renormalizes to sum one. Row i of `probs` and labels[i]
/// belong to weights.w[i].
inline SampleWeights samme_r_update(const SampleWeights& weights, const Tensor& probs,
                                    std::span<const std::size_t> labels, std::size_t n_classes) {
  const auto n = weights.size();
  if (probs.rows() != n || labels.size() != n || probs.cols() != n_classes) {
    throw ContractError("samme_r_update: " + std::to_string(n) + " weights, probabilities " +
                        shape_str(probs.shape()) + ", " + std::to_string(labels.size()) +
                        " labels, C=" + std::to_string(n_classes));
  }
  SampleWeights out{std::vector<double>(n)};
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double row_sum = 0.0;
    for (std::size_t c = 0; c < n_classes; ++c) row_sum += probs.at(i, c);
    if (std::abs(row_sum - 1.0) > 1e-6) {
      throw ContractError("samme_r_update: probability row " + std::to_string(i) + " sums to " +
                          std::to_string(row_sum));
    }
    if (labels[i] >= n_classes) throw ContractError("samme_r_update: label out of range");
    out.w[i] = weights.w[i] * samme_r_multiplier(probs.at(i, labels[i]), n_classes);
    total += out.w[i];
  }
  for (auto& v : out.w) v /= total;
  return out;
}

/// -sum_i w_i log p_i[y_i] over the rows of `probs`.
inline Tensor weighted_label_loss(Tape& tape, const Tensor& probs,
                                  std::span<const std::size_t> labels,
                                  std::span<const double> weights) {
  const auto n = probs.rows(), c = probs.cols();
  if (labels.size() != n || weights.size() != n) {
    throw ContractError("weighted_label_loss: " + std::to_string(n) + " rows, " +
                        std::to_string(labels.size()) + " labels, " +
                        std::to_string(weights.size()) + " weights");
  }
  auto selector = Tensor::zeros({n, c});
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] >= c) throw ContractError("weighted_label_loss: label out of range");
    selector.at(i, labels[i]) = weights[i];
  }
  return scale(tape, sum(tape, mul(tape, log_prob(tape, probs), selector)), -1.0);
}

}  // namespace bgnn
