// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "errors.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace bgnn {

struct Edge {
  std::size_t src = 0;
  std::size_t dst = 0;
  friend bool operator==(const Edge&, const Edge&) = default;
  friend auto operator<=>(const Edge&, const Edge&) = default;
};

/// Undirected graph; every edge is stored in both directions.
struct Graph {
  std::size_t n_nodes = 0;
  std::vector<Edge> edges;
  Tensor features = Tensor::zeros({0, 0});
  std::vector<std::size_t> node_labels;  // empty when absent
  std::optional<std::size_t> graph_label;
  // Split masks over nodes, empty when absent.
  std::vector<bool> train_mask;
  std::vector<bool> val_mask;
  std::vector<bool> test_mask;

  std::size_t feature_dim() const { return features.cols(); }
  std::size_t n_undirected_edges() const;
  void validate() const;
};

/// Builds the edge list from undirected pairs; duplicates and self-loops are dropped.
inline std::vector<Edge> undirected_edges(std::size_t n_nodes,
                                          const std::vector<std::pair<std::size_t, std::size_t>>& pairs) {
  std::set<Edge> seen;
  for (auto [a, b] : pairs) {
    if (a >= n_nodes || b >= n_nodes) {
      throw IndexError("edge (" + std::to_string(a) + "," + std::to_string(b) +
                       ") outside graph of " + std::to_string(n_nodes) + " nodes");
    }
    if (a == b) continue;
    seen.insert({a, b});
    seen.insert({b, a});
  }
  return {seen.begin(), seen.end()};
}

inline std::size_t Graph::n_undirected_edges() const {
  std::size_t n = 0;
  for (const auto& e : edges) n += e.src < e.dst ? 1 : 0;
  return n;
}

inline void Graph::validate() const {
  for (const auto& e : edges) {
    if (e.src >= n_nodes || e.dst >= n_nodes) {
      throw IndexError("edge endpoint outside graph of " + std::to_string(n_nodes) + " nodes");
    }
  }
  if (features.rows() != n_nodes) {
    throw ShapeError("feature rows " + std::to_string(features.rows()) + " != n_nodes " +
                     std::to_string(n_nodes));
  }
  if (!node_labels.empty() && node_labels.size() != n_nodes) {
    throw ShapeError("node label count does not match n_nodes");
  }
  const std::vector<bool>* masks[] = {&train_mask, &val_mask, &test_mask};
  for (const auto* m : masks) {
    if (!m->empty() && m->size() != n_nodes) throw ShapeError("mask length != n_nodes");
  }
  for (std::size_t v = 0; v < n_nodes; ++v) {
    int hits = 0;
    for (const auto* m : masks) hits += (!m->empty() && (*m)[v]) ? 1 : 0;
    if (hits > 1) throw ContractError("split masks overlap at node " + std::to_string(v));
  }
}

/// Sorted, deduplicated neighbor lists, ignoring self-loops.
inline std::vector<std::vector<std::size_t>> adjacency_lists(const Graph& g) {
  std::vector<std::vector<std::size_t>> adj(g.n_nodes);
  for (const auto& e : g.edges) {
    if (e.src != e.dst) adj[e.src].push_back(e.dst);
  }
  for (auto& a : adj) {
    std::sort(a.begin(), a.end());
    a.erase(std::unique(a.begin(), a.end()), a.end());
  }
  return adj;
}

/// D^{-1/2} (A + I) D^{-1/2} with D = degree + 1. Self-loops are added here,
/// never stored on the graph.
inline SparseMatrix normalize_adjacency(const Graph& g) {
  const auto adj = adjacency_lists(g);
  std::vector<double> inv_sqrt(g.n_nodes);
  for (std::size_t i = 0; i < g.n_nodes; ++i) {
    inv_sqrt[i] = 1.0 / std::sqrt(static_cast<double>(adj[i].size() + 1));
  }
  std::vector<SparseMatrix::Triplet> t;
  for (std::size_t i = 0; i < g.n_nodes; ++i) {
    t.push_back({i, i, inv_sqrt[i] * inv_sqrt[i]});
    for (auto j : adj[i]) t.push_back({i, j, inv_sqrt[i] * inv_sqrt[j]});
  }
  return SparseMatrix::from_triplets(g.n_nodes, g.n_nodes, std::move(t));
}

/// Replaces features with one-hot degrees. The width is shared across all
/// graphs: min(max observed degree, cap) + 1.
inline std::vector<Graph> one_hot_degree_features(std::vector<Graph> graphs,
                                                  std::optional<std::size_t> cap = std::nullopt) {
  std::vector<std::vector<std::size_t>> degrees;
  std::size_t max_deg = 0;
  for (const auto& g : graphs) {
    const auto adj = adjacency_lists(g);
    auto& d = degrees.emplace_back();
    for (const auto& a : adj) {
      d.push_back(a.size());
      max_deg = std::max(max_deg, a.size());
    }
  }
  const std::size_t top = cap ? std::min(max_deg, *cap) : max_deg;
  const std::size_t dim = top + 1;
  for (std::size_t k = 0; k < graphs.size(); ++k) {
    auto f = Tensor::zeros({graphs[k].n_nodes, dim});
    for (std::size_t v = 0; v < graphs[k].n_nodes; ++v) {
      f.at(v, std::min(degrees[k][v], top)) = 1.0;
    }
    graphs[k].features = f;
  }
  return graphs;
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

struct SplitRatios {
  double train = 0.8;
  double val = 0.1;
  double test = 0.1;
};

struct DatasetSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;
  SplitRatios ratios;
  std::uint64_t seed = 0;
};

namespace detail {

inline void split_group(std::vector<std::size_t> items, const SplitRatios& r, bool fill_train,
                        Rng& rng, DatasetSplit& out) {
  rng.shuffle(items.begin(), items.end());
  const double n = static_cast<double>(items.size());
  auto n_train = static_cast<std::size_t>(std::floor(r.train * n + 1e-9));
  const auto n_val = static_cast<std::size_t>(std::floor(r.val * n + 1e-9));
  const auto n_test = static_cast<std::size_t>(std::floor(r.test * n + 1e-9));
  if (fill_train) n_train = items.size() - n_val - n_test;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < n_train; ++i) out.train.push_back(items[pos++]);
  for (std::size_t i = 0; i < n_val; ++i) out.val.push_back(items[pos++]);
  for (std::size_t i = 0; i < n_test; ++i) out.test.push_back(items[pos++]);
}

}  // namespace detail

/// Seeded random split, stratified per class by default. When the ratios
/// sum to one, rounding leftovers go to train; otherwise leftovers are left
/// out of every list.
inline DatasetSplit random_split(std::size_t n_items, const std::vector<std::size_t>& labels,
                                 SplitRatios ratios, std::uint64_t seed, bool stratified = true) {
  const double total = ratios.train + ratios.val + ratios.test;
  if (ratios.train < 0 || ratios.val < 0 || ratios.test < 0 || total > 1.0 + 1e-9) {
    throw ContractError("split ratios must be nonnegative and sum to <= 1");
  }
  if (!labels.empty() && labels.size() != n_items) {
    throw ShapeError("random_split: label count does not match item count");
  }
  const bool fill_train = std::abs(total - 1.0) < 1e-9;
  const std::size_t parts = (ratios.train > 0) + (ratios.val > 0) + (ratios.test > 0);
  DatasetSplit out;
  out.ratios = ratios;
  out.seed = seed;
  Rng rng(seed);

  std::map<std::size_t, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < n_items; ++i) {
    by_class[(stratified && !labels.empty()) ? labels[i] : 0].push_back(i);
  }
  std::vector<std::size_t> pool;
  for (auto& [label, items] : by_class) {
    if (by_class.size() > 1 && items.size() < parts) {
      warn("class " + std::to_string(label) + " has " + std::to_string(items.size()) +
           " items, fewer than split parts; splitting it unstratified");
      pool.insert(pool.end(), items.begin(), items.end());
      continue;
    }
    detail::split_group(std::move(items), ratios, fill_train, rng, out);
  }
  if (!pool.empty()) detail::split_group(std::move(pool), ratios, fill_train, rng, out);
  std::sort(out.train.begin(), out.train.end());
  std::sort(out.val.begin(), out.val.end());
  std::sort(out.test.begin(), out.test.end());
  return out;
}

/// Marks the split on a node-task graph.
inline Graph with_masks(Graph g, const DatasetSplit& split) {
  g.train_mask.assign(g.n_nodes, false);
  g.val_mask.assign(g.n_nodes, false);
  g.test_mask.assign(g.n_nodes, false);
  for (auto i : split.train) g.train_mask.at(i) = true;
  for (auto i : split.val) g.val_mask.at(i) = true;
  for (auto i : split.test) g.test_mask.at(i) = true;
  g.validate();
  return g;
}

inline std::vector<std::size_t> mask_indices(const std::vector<bool>& mask) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) idx.push_back(i);
  return idx;
}

// ---------------------------------------------------------------------------
// Neighbor sampling
// ---------------------------------------------------------------------------

/// Per-node sampled neighbor lists for one GraphSage layer.
struct NeighborSample {
  std::vector<std::vector<std::size_t>> neighbors;
};

/// Uniform sampling without replacement of min(degree, fanout) neighbors.
/// An empty fanout means "all".
inline NeighborSample sample_neighbors(std::vector<std::vector<std::size_t>> adjacency,
                                       std::optional<std::size_t> fanout, Rng& rng) {
  if (fanout && *fanout == 0) throw ContractError("fanout must be >= 1 or all");
  NeighborSample s{std::move(adjacency)};
  if (!fanout) return s;
  for (auto& nb : s.neighbors) {
    if (nb.size() <= *fanout) continue;
    // Partial Fisher-Yates: the first `fanout` slots become the sample.
    for (std::size_t i = 0; i < *fanout; ++i) {
      const auto j = i + rng.below(nb.size() - i);
      std::swap(nb[i], nb[j]);
    }
    nb.resize(*fanout);
    std::sort(nb.begin(), nb.end());
  }
  return s;
}

inline NeighborSample sample_neighbors(const Graph& g, std::optional<std::size_t> fanout, Rng& rng) {
  return sample_neighbors(adjacency_lists(g), fanout, rng);
}

/// Row-normalized aggregation matrix: row v averages the sampled neighbors
/// of v, and is empty when v has none.
inline SparseMatrix mean_aggregator(const NeighborSample& s) {
  const auto n = s.neighbors.size();
  std::vector<SparseMatrix::Triplet> t;
  for (std::size_t v = 0; v < n; ++v) {
    const auto& nb = s.neighbors[v];
    for (auto u : nb) t.push_back({v, u, 1.0 / static_cast<double>(nb.size())});
  }
  return SparseMatrix::from_triplets(n, n, std::move(t));
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

struct GraphBatch {
  Graph merged;
  std::vector<std::size_t> graph_ids;     // per node, nondecreasing
  std::vector<std::size_t> node_offsets;  // n_graphs + 1 entries
  std::size_t n_graphs = 0;
  std::vector<std::size_t> labels;        // per graph, empty if unlabeled
};

/// Block-diagonal merge of graphs in order.
inline GraphBatch batch_graphs(const std::vector<const Graph*>& graphs) {
  GraphBatch b;
  b.n_graphs = graphs.size();
  const std::size_t dim = graphs.empty() ? 0 : graphs.front()->feature_dim();
  std::size_t total = 0;
  b.node_offsets.push_back(0);
  for (const auto* g : graphs) {
    if (g->feature_dim() != dim) {
      throw ShapeError("batch_graphs: feature dimension " + std::to_string(g->feature_dim()) +
                       " != " + std::to_string(dim));
    }
    total += g->n_nodes;
    b.node_offsets.push_back(total);
  }
  std::vector<double> feats;
  feats.reserve(total * dim);
  b.merged.n_nodes = total;
  bool all_labeled = !graphs.empty();
  for (std::size_t k = 0; k < graphs.size(); ++k) {
    const auto& g = *graphs[k];
    const auto off = b.node_offsets[k];
    for (const auto& e : g.edges) b.merged.edges.push_back({e.src + off, e.dst + off});
    feats.insert(feats.end(), g.features.values().begin(), g.features.values().end());
    b.graph_ids.insert(b.graph_ids.end(), g.n_nodes, k);
    all_labeled = all_labeled && g.graph_label.has_value();
    b.merged.node_labels.insert(b.merged.node_labels.end(), g.node_labels.begin(),
                                g.node_labels.end());
  }
  if (b.merged.node_labels.size() != total) b.merged.node_labels.clear();
  if (all_labeled) {
    for (const auto* g : graphs) b.labels.push_back(*g->graph_label);
  }
  b.merged.features = Tensor({total, dim}, std::move(feats));
  return b;
}

inline GraphBatch batch_graphs(const std::vector<Graph>& graphs) {
  std::vector<const Graph*> ptrs;
  for (const auto& g : graphs) ptrs.push_back(&g);
  return batch_graphs(ptrs);
}

inline std::vector<Graph> unbatch(const GraphBatch& b) {
  std::vector<Graph> out(b.n_graphs);
  const auto dim = b.merged.feature_dim();
  const auto fv = b.merged.features.values();
  for (std::size_t k = 0; k < b.n_graphs; ++k) {
    const auto lo = b.node_offsets[k], hi = b.node_offsets[k + 1];
    auto& g = out[k];
    g.n_nodes = hi - lo;
    g.features = Tensor({g.n_nodes, dim},
                        std::vector<double>(fv.begin() + lo * dim, fv.begin() + hi * dim));
    if (!b.merged.node_labels.empty()) {
      g.node_labels.assign(b.merged.node_labels.begin() + lo, b.merged.node_labels.begin() + hi);
    }
    if (!b.labels.empty()) g.graph_label = b.labels[k];
  }
  for (const auto& e : b.merged.edges) {
    const auto k = b.graph_ids[e.src];
    const auto lo = b.node_offsets[k];
    out[k].edges.push_back({e.src - lo, e.dst - lo});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

struct SbmParams {
  std::size_t n_per_block = 50;
  std::size_t n_blocks = 2;
  double p_in = 0.1;
  double p_out = 0.01;
  std::size_t feature_dim = 8;
  /// Standard deviation of the Gaussian noise added to the one-hot features.
  double feature_noise = 1.0;
  std::uint64_t seed = 0;
};

/// Stochastic block model; block index is the node label and features are
/// the one-hot block index plus seeded Gaussian noise.
inline Graph generate_sbm(const SbmParams& p) {
  if (p.p_in < 0 || p.p_in > 1 || p.p_out < 0 || p.p_out > 1) {
    throw ContractError("SBM probabilities must lie in [0,1]");
  }
  if (p.feature_dim < p.n_blocks) {
    throw ContractError("SBM feature_dim must be >= n_blocks for one-hot labels");
  }
  Rng rng(p.seed);
  Graph g;
  g.n_nodes = p.n_per_block * p.n_blocks;
  g.node_labels.resize(g.n_nodes);
  for (std::size_t v = 0; v < g.n_nodes; ++v) g.node_labels[v] = v / p.n_per_block;
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t i = 0; i < g.n_nodes; ++i) {
    for (std::size_t j = i + 1; j < g.n_nodes; ++j) {
      const double prob = g.node_labels[i] == g.node_labels[j] ? p.p_in : p.p_out;
      if (rng.uniform() < prob) pairs.emplace_back(i, j);
    }
  }
  g.edges = undirected_edges(g.n_nodes, pairs);
  auto f = Tensor::zeros({g.n_nodes, p.feature_dim});
  for (std::size_t v = 0; v < g.n_nodes; ++v) {
    for (std::size_t j = 0; j < p.feature_dim; ++j) {
      f.at(v, j) = (j == g.node_labels[v] ? 1.0 : 0.0) + p.feature_noise * rng.normal();
    }
  }
  g.features = f;
  return g;
}

}  // namespace bgnn
