// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "errors.hpp"
#include "graph.hpp"
#include "graph_io.hpp"
#include "rng.hpp"

namespace bgnn {

/// Node-classification SBM with a seeded split and optional label noise.
struct SbmFixture {
  SbmParams graph;
  SplitRatios split{0.1, 0.2, 0.7};
  /// Fraction of nodes whose label is replaced by a different random class.
  double label_noise = 0.0;
};

/// Two clean, well separated blocks.
inline SbmFixture sbm_small() {
  SbmFixture f;
  f.graph.n_per_block = 50;
  f.graph.n_blocks = 2;
  f.graph.p_in = 0.9;
  f.graph.p_out = 0.05;
  f.graph.feature_dim = 8;
  f.graph.feature_noise = 1.0;
  f.split = {0.2, 0.2, 0.6};
  return f;
}

/// Sparse, noisy blocks with few labels, so neighborhood structure and soft
/// targets on unlabeled nodes both matter.
inline SbmFixture sbm_hard(std::size_t n_nodes) {
  SbmFixture f;
  f.graph.n_blocks = 4;
  if (n_nodes < f.graph.n_blocks || n_nodes % f.graph.n_blocks != 0) {
    throw ConfigError("SBM fixture size must be a positive multiple of 4, got " +
                      std::to_string(n_nodes));
  }
  f.graph.n_per_block = n_nodes / f.graph.n_blocks;
  const double n = static_cast<double>(n_nodes);
  f.graph.p_in = 40.0 / n;
  f.graph.p_out = 4.0 / n;
  f.graph.feature_dim = 16;
  f.graph.feature_noise = 2.0;
  f.split = {0.1, 0.15, 0.75};
  f.label_noise = 0.1;
  return f;
}

/// Generates the graph with `graph_seed` and draws the split with
/// `split_seed`; label noise is part of the graph draw.
inline NodeDataset make_sbm_dataset(SbmFixture f, std::uint64_t graph_seed,
                                    std::uint64_t split_seed, std::string name = "sbm") {
  f.graph.seed = graph_seed;
  auto g = generate_sbm(f.graph);
  if (f.label_noise > 0.0) {
    Rng rng(mix_seed(graph_seed, 0x1abe1));
    for (auto& y : g.node_labels) {
      if (rng.uniform() < f.label_noise) {
        y = (y + 1 + rng.below(f.graph.n_blocks - 1)) % f.graph.n_blocks;
      }
    }
  }
  const auto split = random_split(g.n_nodes, g.node_labels, f.split, split_seed);
  NodeDataset ds;
  ds.name = std::move(name);
  ds.n_classes = f.graph.n_blocks;
  ds.graph = with_masks(std::move(g), split);
  return ds;
}

struct GraphSetParams {
  std::size_t n_graphs = 300;
  std::size_t min_nodes = 12;
  std::size_t max_nodes = 24;
  std::size_t degree_cap = 10;
  std::uint64_t seed = 0;
};

/// Three structural classes of small graphs, with one-hot degree features:
/// 0 = sparse random, 1 = two loosely joined communities, 2 = ring with chords.
inline std::vector<Graph> generate_graph_set(const GraphSetParams& p) {
  if (p.min_nodes < 4 || p.max_nodes < p.min_nodes) {
    throw ConfigError("graph set needs 4 <= min_nodes <= max_nodes");
  }
  Rng rng(p.seed);
  std::vector<Graph> graphs;
  for (std::size_t k = 0; k < p.n_graphs; ++k) {
    const std::size_t cls = k % 3;
    const std::size_t n = p.min_nodes + rng.below(p.max_nodes - p.min_nodes + 1);
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    if (cls == 0) {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j)
          if (rng.uniform() < 0.15) pairs.emplace_back(i, j);
    } else if (cls == 1) {
      const std::size_t half = n / 2;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
          const bool same = (i < half) == (j < half);
          if (rng.uniform() < (same ? 0.5 : 0.03)) pairs.emplace_back(i, j);
        }
    } else {
      for (std::size_t i = 0; i < n; ++i) pairs.emplace_back(i, (i + 1) % n);
      for (std::size_t c = 0; c < 2; ++c) pairs.emplace_back(rng.below(n), rng.below(n));
    }
    Graph g;
    g.n_nodes = n;
    g.edges = undirected_edges(n, pairs);
    g.graph_label = cls;
    graphs.push_back(std::move(g));
  }
  return one_hot_degree_features(std::move(graphs), p.degree_cap);
}

/// Small TU fixture: triangles with a pendant vs. paths, node labels set.
inline std::vector<Graph> tu_toy_graphs() {
  std::vector<Graph> graphs;
  for (std::size_t k = 0; k < 12; ++k) {
    Graph g;
    const bool tri = k % 2 == 0;
    g.n_nodes = 4 + k % 3;
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    for (std::size_t v = 0; v + 1 < g.n_nodes; ++v) pairs.emplace_back(v, v + 1);
    if (tri) pairs.emplace_back(0, 2);
    g.edges = undirected_edges(g.n_nodes, pairs);
    g.graph_label = tri ? 1 : 0;
    g.node_labels.resize(g.n_nodes);
    for (std::size_t v = 0; v < g.n_nodes; ++v) g.node_labels[v] = (v + k) % 3;
    g.features = Tensor::zeros({g.n_nodes, 3});
    for (std::size_t v = 0; v < g.n_nodes; ++v) g.features.at(v, g.node_labels[v]) = 1.0;
    graphs.push_back(std::move(g));
  }
  return graphs;
}

/// Six-node bundle with sparse features and an explicit split.
inline NodeDataset json_toy_dataset() {
  NodeDataset ds;
  ds.name = "json_toy";
  ds.n_classes = 2;
  auto& g = ds.graph;
  g.n_nodes = 6;
  g.edges = undirected_edges(6, {{0, 1}, {1, 2}, {0, 2}, {3, 4}, {4, 5}, {3, 5}, {2, 3}});
  g.features = Tensor::zeros({6, 4});
  for (std::size_t v = 0; v < 6; ++v) g.features.at(v, v < 3 ? 0 : 1) = 1.0;
  g.features.at(2, 3) = 0.5;
  g.node_labels = {0, 0, 0, 1, 1, 1};
  DatasetSplit split;
  split.train = {0, 3};
  split.val = {1, 4};
  split.test = {2, 5};
  g = with_masks(std::move(g), split);
  return ds;
}

}  // namespace bgnn
