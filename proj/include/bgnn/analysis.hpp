// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <cstdio>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "errors.hpp"
#include "graph.hpp"
#include "models.hpp"
#include "ops.hpp"
#include "tensor.hpp"

namespace bgnn {

/// Per-layer graph representations of one model: layers[l] is
/// n_graphs x width, rows in the order the graphs were given.
struct RepresentationSet {
  std::string tag;
  std::vector<Tensor> layers;

  std::size_t n_examples() const { return layers.empty() ? 0 : layers.front().rows(); }
};

/// Mean of each graph's node embeddings after every message-passing layer,
/// computed in eval mode.
inline RepresentationSet extract_layer_representations(GnnModel& model,
                                                       std::span<const Graph> graphs,
                                                       std::string tag = {},
                                                       std::size_t eval_batch = 256) {
  if (graphs.empty()) throw ContractError("extract_layer_representations: no graphs");
  RepresentationSet out;
  out.tag = tag.empty() ? to_string(model.config().arch) : std::move(tag);
  std::vector<std::vector<double>> rows(model.config().n_layers);
  std::vector<std::size_t> widths(model.config().n_layers, 0);
  for (std::size_t lo = 0; lo < graphs.size(); lo += eval_batch) {
    const auto hi = std::min(graphs.size(), lo + eval_batch);
    std::vector<const Graph*> ptrs;
    for (auto i = lo; i < hi; ++i) {
      if (graphs[i].n_nodes == 0) throw ContractError("cannot represent an empty graph");
      ptrs.push_back(&graphs[i]);
    }
    const auto batch = batch_graphs(ptrs);
    const auto prepared = prepare_batch(batch);
    Tape tape;
    Rng rng(0);
    const auto fwd = model.forward(tape, prepared, false, rng);
    for (std::size_t l = 0; l < fwd.layer_outputs.size(); ++l) {
      const auto& h = fwd.layer_outputs[l];
      const auto w = h.cols();
      widths[l] = w;
      for (std::size_t k = 0; k < batch.n_graphs; ++k) {
        const auto a = batch.node_offsets[k], b = batch.node_offsets[k + 1];
        std::vector<double> mean(w, 0.0);
        for (auto v = a; v < b; ++v) {
          for (std::size_t j = 0; j < w; ++j) mean[j] += h.at(v, j);
        }
        for (auto& x : mean) x /= static_cast<double>(b - a);
        rows[l].insert(rows[l].end(), mean.begin(), mean.end());
      }
    }
  }
  for (std::size_t l = 0; l < rows.size(); ++l) {
    out.layers.emplace_back(Shape{graphs.size(), widths[l]}, std::move(rows[l]));
  }
  return out;
}

/// Node embeddings after every layer of one graph, in eval mode.
inline RepresentationSet extract_node_representations(GnnModel& model, const PreparedGraph& g,
                                                      std::string tag = {}) {
  RepresentationSet out;
  out.tag = tag.empty() ? to_string(model.config().arch) : std::move(tag);
  Tape tape;
  Rng rng(0);
  for (const auto& h : model.forward(tape, g, false, rng).layer_outputs) {
    out.layers.push_back(h.detach());
  }
  return out;
}

namespace detail {

/// Column-centered copy of a row-major n x p matrix.
inline std::vector<double> center_columns(const Tensor& x) {
  const auto n = x.rows(), p = x.cols();
  std::vector<double> out(x.values().begin(), x.values().end());
  for (std::size_t j = 0; j < p; ++j) {
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += out[i * p + j];
    mean /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) out[i * p + j] -= mean;
  }
  return out;
}

/// Squared Frobenius norm of A^T B for row-major A (n x p) and B (n x q).
inline double cross_norm_sq(const std::vector<double>& a, std::size_t p,
                            const std::vector<double>& b, std::size_t q, std::size_t n) {
  double total = 0.0;
  std::vector<double> col(q);
  for (std::size_t i = 0; i < p; ++i) {
    std::fill(col.begin(), col.end(), 0.0);
    for (std::size_t r = 0; r < n; ++r) {
      const double av = a[r * p + i];
      if (av == 0.0) continue;
      for (std::size_t j = 0; j < q; ++j) col[j] += av * b[r * q + j];
    }
    for (double v : col) total += v * v;
  }
  return total;
}

}  // namespace detail

/// Linear CKA between representations of the same n examples:
///   ||Yc^T Xc||_F^2 / (||Xc^T Xc||_F ||Yc^T Yc||_F).
inline double linear_cka(const Tensor& x, const Tensor& y) {
  const auto n = x.rows();
  if (y.rows() != n) {
    throw ContractError("linear_cka: row counts differ (" + std::to_string(n) + " vs " +
                        std::to_string(y.rows()) + ")");
  }
  if (n < 2) throw DomainError("linear_cka: need at least two examples");
  const auto xc = detail::center_columns(x);
  const auto yc = detail::center_columns(y);
  const auto p = x.cols(), q = y.cols();
  const double xy = detail::cross_norm_sq(yc, q, xc, p, n);
  const double xx = std::sqrt(detail::cross_norm_sq(xc, p, xc, p, n));
  const double yy = std::sqrt(detail::cross_norm_sq(yc, q, yc, q, n));
  if (!(xx > 0.0) || !(yy > 0.0)) {
    throw DomainError("linear_cka: degenerate input (zero variance after centering)");
  }
  return xy / (xx * yy);
}

struct CkaEntry {
  std::string model_a;
  std::size_t layer_a = 0;  // 1-based
  std::string model_b;
  std::size_t layer_b = 0;
  /// Empty when either representation has zero variance.
  std::optional<double> cka;
};

/// Linear CKA for every ordered model pair and layer pair.
inline std::vector<CkaEntry> cka_matrix(std::span<const RepresentationSet> sets) {
  if (sets.empty()) throw ContractError("cka_matrix: no representation sets");
  const auto n = sets.front().n_examples();
  for (const auto& s : sets) {
    if (s.n_examples() != n) {
      throw ContractError("cka_matrix: '" + s.tag + "' has " + std::to_string(s.n_examples()) +
                          " examples, expected " + std::to_string(n));
    }
  }
  std::vector<CkaEntry> out;
  for (const auto& a : sets) {
    for (const auto& b : sets) {
      for (std::size_t la = 0; la < a.layers.size(); ++la) {
        for (std::size_t lb = 0; lb < b.layers.size(); ++lb) {
          CkaEntry e{a.tag, la + 1, b.tag, lb + 1, std::nullopt};
          try {
            e.cka = linear_cka(a.layers[la], b.layers[lb]);
          } catch (const DomainError&) {
            warn("CKA undefined for " + a.tag + " layer " + std::to_string(la + 1) + " vs " +
                 b.tag + " layer " + std::to_string(lb + 1) + " (zero variance)");
          }
          out.push_back(std::move(e));
        }
      }
    }
  }
  return out;
}

/// `model_a,layer_a,model_b,layer_b,cka` with six decimals; undefined
/// entries are written as `nan`.
inline std::string cka_csv(std::span<const CkaEntry> entries) {
  std::ostringstream out;
  out << "model_a,layer_a,model_b,layer_b,cka\n";
  char buf[64];
  for (const auto& e : entries) {
    if (e.cka) {
      std::snprintf(buf, sizeof buf, "%.6f", *e.cka);
    } else {
      std::snprintf(buf, sizeof buf, "nan");
    }
    out << e.model_a << ',' << e.layer_a << ',' << e.model_b << ',' << e.layer_b << ',' << buf
        << '\n';
  }
  return out.str();
}

}  // namespace bgnn
