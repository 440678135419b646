// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <set>

#include <bgnn/fixtures.hpp>
#include <bgnn/graph.hpp>

using namespace bgnn;

namespace {

Graph path_graph(std::size_t n) {
  Graph g;
  g.n_nodes = n;
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t i = 0; i + 1 < n; ++i) pairs.emplace_back(i, i + 1);
  g.edges = undirected_edges(n, pairs);
  g.features = Tensor::zeros({n, 2});
  return g;
}

}  // namespace

TEST(Graph, UndirectedEdgesAreSymmetricAndDeduplicated) {
  const auto e = undirected_edges(4, {{0, 1}, {1, 0}, {2, 2}, {3, 1}});
  EXPECT_EQ(e.size(), 4u);
  for (const auto& x : e) {
    EXPECT_NE(x.src, x.dst);
    EXPECT_NE(std::find(e.begin(), e.end(), Edge{x.dst, x.src}), e.end());
  }
  EXPECT_THROW(undirected_edges(2, {{0, 2}}), IndexError);
}

TEST(Graph, ValidateCatchesInconsistencies) {
  auto g = path_graph(3);
  EXPECT_NO_THROW(g.validate());
  g.node_labels = {0, 1};
  EXPECT_THROW(g.validate(), ShapeError);
  g.node_labels = {0, 1, 0};
  g.train_mask = {true, false, false};
  g.test_mask = {true, false, false};
  EXPECT_THROW(g.validate(), ContractError);
  g.test_mask.clear();
  g.features = Tensor::zeros({2, 2});
  EXPECT_THROW(g.validate(), ShapeError);
}

TEST(Graph, NormalizedAdjacencyOfPath) {
  const auto a = normalize_adjacency(path_graph(3)).densify();
  // degrees with self-loops: 2, 3, 2
  EXPECT_NEAR(a.at(0, 0), 0.5, 1e-15);
  EXPECT_NEAR(a.at(1, 1), 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(a.at(0, 1), 1.0 / std::sqrt(6.0), 1e-15);
  EXPECT_NEAR(a.at(1, 0), a.at(0, 1), 1e-15);
  EXPECT_EQ(a.at(0, 2), 0.0);
}

TEST(Graph, NormalizedAdjacencyIsSymmetricWithUnitSpectralBound) {
  const auto g = make_sbm_dataset(sbm_small(), 3, 3, "s").graph;
  const auto a = normalize_adjacency(g).densify();
  const auto n = g.n_nodes;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) EXPECT_NEAR(a.at(i, j), a.at(j, i), 1e-15);
  // Power iteration: the largest eigenvalue of D^-1/2 (A+I) D^-1/2 is 1.
  std::vector<double> v(n, 1.0), w(n);
  double lambda = 0;
  for (int it = 0; it < 200; ++it) {
    std::fill(w.begin(), w.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) w[i] += a.at(i, j) * v[j];
    double norm = 0;
    for (double x : w) norm += x * x;
    norm = std::sqrt(norm);
    double vn = 0;
    for (double x : v) vn += x * x;
    lambda = norm / std::sqrt(vn);
    for (std::size_t i = 0; i < n; ++i) v[i] = w[i] / norm;
  }
  EXPECT_NEAR(lambda, 1.0, 1e-6);
}

TEST(Graph, OneHotDegreeWidthSharedAndCapped) {
  std::vector<Graph> gs{path_graph(3), path_graph(2)};
  auto out = one_hot_degree_features(gs);
  EXPECT_EQ(out[0].feature_dim(), 3u);
  EXPECT_EQ(out[1].feature_dim(), 3u);
  EXPECT_EQ(out[0].features.at(1, 2), 1.0);
  EXPECT_EQ(out[1].features.at(0, 1), 1.0);
  auto capped = one_hot_degree_features(gs, 1);
  EXPECT_EQ(capped[0].feature_dim(), 2u);
  EXPECT_EQ(capped[0].features.at(1, 1), 1.0);
}

TEST(Split, DisjointCoveringAndStratified) {
  std::vector<std::size_t> labels(100);
  for (std::size_t i = 0; i < 100; ++i) labels[i] = i % 4;
  const auto s = random_split(100, labels, {0.6, 0.2, 0.2}, 5);
  std::set<std::size_t> all;
  for (const auto* part : {&s.train, &s.val, &s.test})
    for (auto i : *part) EXPECT_TRUE(all.insert(i).second);
  EXPECT_EQ(all.size(), 100u);
  EXPECT_EQ(s.val.size(), 20u);
  for (std::size_t c = 0; c < 4; ++c) {
    EXPECT_EQ(std::count_if(s.val.begin(), s.val.end(), [&](auto i) { return labels[i] == c; }),
              5);
  }
  const auto again = random_split(100, labels, {0.6, 0.2, 0.2}, 5);
  EXPECT_EQ(again.train, s.train);
  EXPECT_NE(random_split(100, labels, {0.6, 0.2, 0.2}, 6).train, s.train);
}

TEST(Split, PartialRatiosLeaveItemsOut) {
  const auto s = random_split(50, {}, {0.1, 0.1, 0.1}, 1);
  EXPECT_EQ(s.train.size() + s.val.size() + s.test.size(), 15u);
  EXPECT_THROW(random_split(10, {}, {0.8, 0.2, 0.2}, 1), ContractError);
  EXPECT_THROW(random_split(10, {0, 1}, {0.8, 0.1, 0.1}, 1), ShapeError);
}

TEST(Split, MasksRoundTrip) {
  auto g = path_graph(6);
  const auto s = random_split(6, {}, {0.5, 0.5, 0.0}, 2);
  g = with_masks(g, s);
  EXPECT_EQ(mask_indices(g.train_mask), s.train);
  EXPECT_EQ(mask_indices(g.val_mask), s.val);
  EXPECT_TRUE(mask_indices(g.test_mask).empty());
}

TEST(Sampling, FanoutBoundsAndSubset) {
  const auto g = make_sbm_dataset(sbm_small(), 1, 1, "s").graph;
  const auto adj = adjacency_lists(g);
  Rng rng(4);
  const auto s = sample_neighbors(g, 3, rng);
  for (std::size_t v = 0; v < g.n_nodes; ++v) {
    EXPECT_EQ(s.neighbors[v].size(), std::min<std::size_t>(3, adj[v].size()));
    std::set<std::size_t> uniq(s.neighbors[v].begin(), s.neighbors[v].end());
    EXPECT_EQ(uniq.size(), s.neighbors[v].size());
    for (auto u : s.neighbors[v])
      EXPECT_TRUE(std::binary_search(adj[v].begin(), adj[v].end(), u));
  }
  EXPECT_EQ(sample_neighbors(g, std::nullopt, rng).neighbors, adj);
  EXPECT_THROW(sample_neighbors(g, 0, rng), ContractError);
}

TEST(Sampling, MeanAggregatorRowsAverage) {
  NeighborSample s{{{1, 2}, {0}, {}}};
  const auto m = mean_aggregator(s).densify();
  EXPECT_EQ(m.at(0, 1), 0.5);
  EXPECT_EQ(m.at(0, 2), 0.5);
  EXPECT_EQ(m.at(1, 0), 1.0);
  EXPECT_EQ(m.at(2, 0) + m.at(2, 1) + m.at(2, 2), 0.0);
}

TEST(Batching, RoundTripPreservesGraphs) {
  auto gs = tu_toy_graphs();
  const auto b = batch_graphs(gs);
  EXPECT_EQ(b.n_graphs, gs.size());
  EXPECT_EQ(b.labels.size(), gs.size());
  EXPECT_TRUE(std::is_sorted(b.graph_ids.begin(), b.graph_ids.end()));
  const auto back = unbatch(b);
  ASSERT_EQ(back.size(), gs.size());
  for (std::size_t k = 0; k < gs.size(); ++k) {
    EXPECT_EQ(back[k].n_nodes, gs[k].n_nodes);
    auto e1 = back[k].edges, e2 = gs[k].edges;
    std::sort(e1.begin(), e1.end());
    std::sort(e2.begin(), e2.end());
    EXPECT_EQ(e1, e2);
    EXPECT_EQ(back[k].graph_label, gs[k].graph_label);
    EXPECT_TRUE(std::equal(back[k].features.values().begin(), back[k].features.values().end(),
                           gs[k].features.values().begin()));
  }
}

TEST(Batching, MismatchedFeatureWidthThrows) {
  auto a = path_graph(2), b = path_graph(2);
  b.features = Tensor::zeros({2, 3});
  EXPECT_THROW(batch_graphs(std::vector<Graph>{a, b}), ShapeError);
}

TEST(Sbm, DeterministicAndAssortative) {
  SbmParams p;
  p.n_per_block = 40;
  p.p_in = 0.3;
  p.p_out = 0.02;
  p.seed = 9;
  const auto a = generate_sbm(p), b = generate_sbm(p);
  EXPECT_EQ(a.edges, b.edges);
  EXPECT_TRUE(std::equal(a.features.values().begin(), a.features.values().end(),
                         b.features.values().begin()));
  std::size_t same = 0, diff = 0;
  for (const auto& e : a.edges) (a.node_labels[e.src] == a.node_labels[e.dst] ? same : diff)++;
  EXPECT_GT(same, 5 * diff);
  p.feature_dim = 1;
  EXPECT_THROW(generate_sbm(p), ContractError);
}

TEST(Fixtures, GeneratedGraphSetIsBalancedAndDeterministic) {
  GraphSetParams gp;
  gp.n_graphs = 30;
  const auto a = generate_graph_set(gp), b = generate_graph_set(gp);
  ASSERT_EQ(a.size(), 30u);
  std::vector<int> counts(3, 0);
  for (std::size_t k = 0; k < a.size(); ++k) {
    EXPECT_EQ(a[k].edges, b[k].edges);
    ASSERT_TRUE(a[k].graph_label.has_value());
    counts[*a[k].graph_label]++;
    EXPECT_NO_THROW(a[k].validate());
  }
  for (int c : counts) EXPECT_EQ(c, 10);
}
