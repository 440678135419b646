// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include <bgnn/fixtures.hpp>
#include <bgnn/models.hpp>

#include "testing.hpp"

using namespace bgnn;
using bgnn::testing::gradcheck;
using bgnn::testing::project;
using bgnn::testing::random_tensor;

namespace {

constexpr double kGradTol = 1e-4;

Graph small_graph() {
  auto g = make_sbm_dataset(sbm_small(), 2, 2, "s").graph;
  // keep the gradient checks cheap
  Graph h;
  h.n_nodes = 12;
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (const auto& e : g.edges)
    if (e.src < 12 && e.dst < 12 && e.src < e.dst) pairs.emplace_back(e.src, e.dst);
  pairs.emplace_back(0, 11);
  pairs.emplace_back(3, 7);
  h.edges = undirected_edges(12, pairs);
  h.features = Tensor({12, g.feature_dim()},
                      std::vector<double>(g.features.values().begin(),
                                          g.features.values().begin() + 12 * g.feature_dim()));
  return h;
}

ModelConfig node_config(Architecture arch, std::size_t in_dim) {
  auto c = default_config(arch, TaskKind::node, in_dim, 3, 5);
  c.heads = 2;
  c.head_dim = 3;
  c.dropout = 0.0;
  return c;
}

}  // namespace

TEST(Layers, GcnGradients) {
  Rng rng(1);
  const auto g = small_graph();
  const auto adj = normalize_adjacency(g);
  auto h = random_tensor({12, 8}, rng), w = random_tensor({8, 4}, rng), b = random_tensor({4}, rng);
  EXPECT_LT(gradcheck([&](Tape& t) { return project(t, gcn_layer(t, h, adj, w, b)); }, {h, w, b}),
            kGradTol);
}

TEST(Layers, SageGradients) {
  Rng rng(2);
  const auto g = small_graph();
  const auto agg = mean_aggregator(NeighborSample{adjacency_lists(g)});
  auto h = random_tensor({12, 8}, rng), w = random_tensor({16, 4}, rng), b = random_tensor({4}, rng);
  EXPECT_LT(gradcheck([&](Tape& t) { return project(t, sage_layer(t, h, agg, w, b)); }, {h, w, b}),
            kGradTol);
}

TEST(Layers, GatGradients) {
  Rng rng(3);
  const auto edges = attention_edges(adjacency_lists(small_graph()));
  auto h = random_tensor({12, 8}, rng);
  std::vector<GatHead> heads;
  for (int k = 0; k < 2; ++k)
    heads.push_back({random_tensor({8, 3}, rng), random_tensor({3, 1}, rng), random_tensor({3, 1}, rng)});
  auto b = random_tensor({6}, rng), b_avg = random_tensor({3}, rng);
  std::vector<Tensor> inputs{h, b};
  for (auto& hd : heads) inputs.insert(inputs.end(), {hd.weight, hd.att_target, hd.att_source});
  EXPECT_LT(gradcheck([&](Tape& t) {
              return project(t, gat_layer(t, h, edges, heads, b, HeadCombine::concat));
            },
                      inputs),
            kGradTol);
  EXPECT_LT(gradcheck([&](Tape& t) {
              return project(t, gat_layer(t, h, edges, heads, b_avg, HeadCombine::average));
            },
                      {h, b_avg}),
            kGradTol);
}

TEST(Layers, GatMatchesDirectComputation) {
  Rng rng(4);
  const auto adj = adjacency_lists(small_graph());
  const auto edges = attention_edges(adj);
  auto h = random_tensor({12, 4}, rng, 1.0, false);
  GatHead hd{random_tensor({4, 2}, rng, 1.0, false), random_tensor({2, 1}, rng, 1.0, false),
             random_tensor({2, 1}, rng, 1.0, false)};
  Tape t;
  std::vector<Tensor> alpha;
  const auto out = gat_layer(t, h, edges, {hd}, Tensor::zeros({2}), HeadCombine::concat, 0.2, &alpha);
  // Independent per-node evaluation.
  std::vector<std::array<double, 2>> wh(12);
  for (std::size_t v = 0; v < 12; ++v)
    for (std::size_t c = 0; c < 2; ++c) {
      wh[v][c] = 0;
      for (std::size_t k = 0; k < 4; ++k) wh[v][c] += h.at(v, k) * hd.weight.at(k, c);
    }
  const auto score = [&](std::size_t i, std::size_t j) {
    double e = 0;
    for (std::size_t c = 0; c < 2; ++c)
      e += hd.att_target.values()[c] * wh[i][c] + hd.att_source.values()[c] * wh[j][c];
    return e > 0 ? e : 0.2 * e;
  };
  for (std::size_t i = 0; i < 12; ++i) {
    std::vector<std::size_t> nb{i};
    nb.insert(nb.end(), adj[i].begin(), adj[i].end());
    double z = 0;
    for (auto j : nb) z += std::exp(score(i, j));
    for (std::size_t c = 0; c < 2; ++c) {
      double expect = 0;
      for (auto j : nb) expect += std::exp(score(i, j)) / z * wh[j][c];
      EXPECT_NEAR(out.at(i, c), expect, 1e-12);
    }
  }
  // attention sums to one over each neighborhood
  std::vector<double> total(12, 0.0);
  for (std::size_t k = 0; k < edges.target.size(); ++k) total[edges.target[k]] += alpha[0].values()[k];
  for (double s : total) EXPECT_NEAR(s, 1.0, 1e-12);
}

TEST(Model, WholeModelGradients) {
  const auto g = small_graph();
  const auto pg = prepare_graph(g);
  for (auto arch : {Architecture::gcn, Architecture::sage, Architecture::gat}) {
    auto m = GnnModel::init(node_config(arch, g.feature_dim()), 5);
    const auto loss = [&](Tape& t) {
      Rng rng(0);
      return project(t, m.forward(t, pg, true, rng).logits);
    };
    EXPECT_LT(gradcheck(loss, m.parameters()), kGradTol) << to_string(arch);
  }
}

TEST(Model, GraphTaskGradientsWithBatchNorm) {
  auto gs = tu_toy_graphs();
  gs.resize(4);
  const auto batch = batch_graphs(gs);
  const auto pg = prepare_batch(batch);
  for (auto arch : {Architecture::gcn, Architecture::sage, Architecture::gat}) {
    auto c = default_config(arch, TaskKind::graph, 3, 2, 4);
    c.heads = 2;
    c.head_dim = 2;
    c.dropout = 0.0;
    ASSERT_TRUE(c.batch_norm);
    auto m = GnnModel::init(c, 6);
    const auto loss = [&](Tape& t) {
      Rng rng(0);
      auto copy = m.norms();  // running statistics must not drift between evaluations
      auto out = project(t, m.forward(t, pg, true, rng).logits);
      m.norms() = copy;
      return out;
    };
    EXPECT_LT(gradcheck(loss, m.parameters()), kGradTol) << to_string(arch);
  }
}

TEST(Model, OutputShapesAndParameterCounts) {
  const auto pg = prepare_graph(small_graph());
  const auto in = pg.features.cols();
  auto gcn = GnnModel::init(node_config(Architecture::gcn, in), 1);
  EXPECT_EQ(gcn.parameter_count(), in * 5 + 5 + 5 * 3 + 3);
  auto sage = GnnModel::init(node_config(Architecture::sage, in), 1);
  EXPECT_EQ(sage.parameter_count(), 2 * in * 5 + 5 + 2 * 5 * 3 + 3);
  auto gat = GnnModel::init(node_config(Architecture::gat, in), 1);
  // layer 1: 2 heads of (in x 3 + 3 + 3), bias 6; layer 2: 2 heads of (6 x 3 + 3 + 3), bias 3
  EXPECT_EQ(gat.parameter_count(), 2 * (in * 3 + 6) + 6 + 2 * (6 * 3 + 6) + 3);
  for (auto* m : {&gcn, &sage, &gat}) {
    const auto logits = m->predict(pg);
    EXPECT_EQ(logits.rows(), 12u);
    EXPECT_EQ(logits.cols(), 3u);
  }
  auto gc = default_config(Architecture::gcn, TaskKind::graph, 3, 2, 4);
  auto gm = GnnModel::init(gc, 1);
  const auto gs = tu_toy_graphs();
  const auto logits = gm.predict(prepare_batch(batch_graphs(gs)));
  EXPECT_EQ(logits.rows(), gs.size());
  EXPECT_EQ(logits.cols(), 2u);
}

TEST(Model, InitDeterministicPerSeed) {
  const auto c = node_config(Architecture::gat, 8);
  EXPECT_EQ(GnnModel::init(c, 3).state_vector(), GnnModel::init(c, 3).state_vector());
  EXPECT_NE(GnnModel::init(c, 3).state_vector(), GnnModel::init(c, 4).state_vector());
}

TEST(Model, CloneIsIndependent) {
  auto m = GnnModel::init(node_config(Architecture::gcn, 8), 1);
  auto c = m.clone();
  c.parameters()[0].mutable_values()[0] += 1.0;
  EXPECT_NE(m.state_vector(), c.state_vector());
}

TEST(Model, NodePermutationEquivariance) {
  const auto g = small_graph();
  std::vector<std::size_t> perm(g.n_nodes);
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = (i * 5 + 3) % g.n_nodes;
  Graph p;
  p.n_nodes = g.n_nodes;
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (const auto& e : g.edges) pairs.emplace_back(perm[e.src], perm[e.dst]);
  p.edges = undirected_edges(p.n_nodes, pairs);
  p.features = Tensor::zeros(g.features.shape());
  for (std::size_t v = 0; v < g.n_nodes; ++v)
    for (std::size_t j = 0; j < g.feature_dim(); ++j) p.features.at(perm[v], j) = g.features.at(v, j);
  for (auto arch : {Architecture::gcn, Architecture::sage, Architecture::gat}) {
    auto m = GnnModel::init(node_config(arch, g.feature_dim()), 2);
    const auto a = m.predict(prepare_graph(g));
    const auto b = m.predict(prepare_graph(p));
    for (std::size_t v = 0; v < g.n_nodes; ++v)
      for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(a.at(v, c), b.at(perm[v], c), 1e-12);
  }
}

TEST(Model, GraphOrderInBatchDoesNotMatter) {
  auto gs = tu_toy_graphs();
  auto m = GnnModel::init(default_config(Architecture::gat, TaskKind::graph, 3, 2, 4), 3);
  const auto a = m.predict(prepare_batch(batch_graphs(gs)));
  std::reverse(gs.begin(), gs.end());
  const auto b = m.predict(prepare_batch(batch_graphs(gs)));
  const auto n = gs.size();
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t c = 0; c < 2; ++c) EXPECT_NEAR(a.at(k, c), b.at(n - 1 - k, c), 1e-12);
}

TEST(Model, SageSamplesOnlyWhenTraining) {
  const auto pg = prepare_graph(make_sbm_dataset(sbm_small(), 1, 1, "s").graph);
  auto c = node_config(Architecture::sage, pg.features.cols());
  c.fanout = 2;
  auto m = GnnModel::init(c, 1);
  Tape t;
  Rng r1(1), r2(2);
  const auto e1 = m.forward(t, pg, false, r1).logits;
  const auto e2 = m.forward(t, pg, false, r2).logits;
  EXPECT_TRUE(std::equal(e1.values().begin(), e1.values().end(), e2.values().begin()));
  Rng r3(1), r4(2);
  const auto t1 = m.forward(t, pg, true, r3).logits;
  const auto t2 = m.forward(t, pg, true, r4).logits;
  EXPECT_FALSE(std::equal(t1.values().begin(), t1.values().end(), t2.values().begin()));
}

TEST(Model, BatchNormRunningStatistics) {
  auto bn = BatchNorm::make(2);
  Tape t;
  const auto x = Tensor::matrix(4, 2, {1, 10, 3, 10, 5, 12, 7, 12});
  bn.forward(t, x, true);
  EXPECT_NEAR(bn.running_mean[0], 0.1 * 4.0, 1e-12);
  EXPECT_NEAR(bn.running_var[0], 0.9 + 0.1 * (20.0 / 3.0), 1e-12);
  EXPECT_NEAR(bn.running_var[1], 0.9 + 0.1 * (4.0 / 3.0), 1e-12);
  const auto y = bn.forward(t, x, false);
  EXPECT_NEAR(y.at(0, 0), (1.0 - 0.4) / std::sqrt(bn.running_var[0] + 1e-5), 1e-12);
}

TEST(Model, ConfigValidation) {
  auto c = node_config(Architecture::gcn, 0);
  EXPECT_THROW(GnnModel::init(c, 0), ConfigError);
  c = node_config(Architecture::gcn, 4);
  c.dropout = 1.0;
  EXPECT_THROW(GnnModel::init(c, 0), ConfigError);
  EXPECT_THROW(parse_architecture("mlp"), ConfigError);
  EXPECT_EQ(parse_architecture("graphsage"), Architecture::sage);
  EXPECT_EQ(default_config(Architecture::gat, TaskKind::node, 4, 2).activation, Activation::elu);
  auto m = GnnModel::init(node_config(Architecture::gcn, 4), 0);
  EXPECT_THROW(m.predict(prepare_graph(small_graph())), ShapeError);
}

TEST(Checkpoint, RoundTripRestoresPredictions) {
  const auto dir = std::filesystem::temp_directory_path() / "bgnn_ckpt_test";
  std::filesystem::remove_all(dir);
  auto gs = tu_toy_graphs();
  const auto pg = prepare_batch(batch_graphs(gs));
  auto c = default_config(Architecture::sage, TaskKind::graph, 3, 2, 4);
  c.fanout = 5;
  auto m = GnnModel::init(c, 9);
  Tape t;
  Rng rng(0);
  m.forward(t, pg, true, rng);  // moves running statistics away from init
  save_checkpoint(m, dir / "m");
  auto back = load_checkpoint(dir / "m");
  EXPECT_EQ(back.state_vector(), m.state_vector());
  EXPECT_EQ(back.config().fanout, c.fanout);
  const auto a = m.predict(pg), b = back.predict(pg);
  EXPECT_TRUE(std::equal(a.values().begin(), a.values().end(), b.values().begin()));
  EXPECT_THROW(load_checkpoint(dir / "nope"), IoError);
  std::filesystem::resize_file(dir / "m.bin", 16);
  EXPECT_THROW(load_checkpoint(dir / "m"), FormatError);
}
