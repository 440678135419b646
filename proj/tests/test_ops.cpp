// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include <bgnn/ops.hpp>
#include <bgnn/optim.hpp>

#include "testing.hpp"

using namespace bgnn;
using bgnn::testing::gradcheck;
using bgnn::testing::project;
using bgnn::testing::random_tensor;

namespace {
constexpr double kGradTol = 1e-4;
}

TEST(Gradcheck, Matmul) {
  Rng rng(1);
  auto a = random_tensor({3, 4}, rng), b = random_tensor({4, 2}, rng);
  EXPECT_LT(gradcheck([&](Tape& t) { return project(t, matmul(t, a, b)); }, {a, b}), kGradTol);
}

TEST(Gradcheck, Spmm) {
  Rng rng(2);
  auto s = SparseMatrix::from_triplets(3, 4, {{0, 1, 0.5}, {1, 0, 2.0}, {1, 3, -1.0}, {2, 2, 1.5}});
  auto d = random_tensor({4, 3}, rng);
  EXPECT_LT(gradcheck([&](Tape& t) { return project(t, spmm(t, s, d)); }, {d}), kGradTol);
}

TEST(Gradcheck, Elementwise) {
  Rng rng(3);
  auto x = random_tensor({4, 3}, rng);
  for (auto& v : x.mutable_values())
    if (std::abs(v) < 0.05) v = 0.3;  // keep clear of kinks
  for (auto kind : {Activation::relu, Activation::leaky_relu, Activation::elu, Activation::sigmoid,
                    Activation::tanh, Activation::exp, Activation::identity}) {
    const ElementwiseOp op{kind, kind == Activation::leaky_relu ? 0.2 : 1.0};
    EXPECT_LT(gradcheck([&](Tape& t) { return project(t, elementwise(t, op, x)); }, {x}), kGradTol)
        << static_cast<int>(kind);
  }
  auto p = Tensor::matrix(2, 2, {0.3, 1.2, 2.0, 0.7}, true);
  EXPECT_LT(gradcheck([&](Tape& t) { return project(t, log(t, p)); }, {p}), kGradTol);
  EXPECT_LT(gradcheck([&](Tape& t) { return project(t, log_prob(t, p)); }, {p}), kGradTol);
}

TEST(Gradcheck, Arithmetic) {
  Rng rng(4);
  auto a = random_tensor({3, 2}, rng), b = random_tensor({3, 2}, rng);
  auto bias = random_tensor({2}, rng), s = random_tensor({3}, rng);
  EXPECT_LT(gradcheck([&](Tape& t) { return project(t, add(t, a, b)); }, {a, b}), kGradTol);
  EXPECT_LT(gradcheck([&](Tape& t) { return project(t, sub(t, a, b)); }, {a, b}), kGradTol);
  EXPECT_LT(gradcheck([&](Tape& t) { return project(t, mul(t, a, b)); }, {a, b}), kGradTol);
  EXPECT_LT(gradcheck([&](Tape& t) { return project(t, scale(t, a, -1.7)); }, {a}), kGradTol);
  EXPECT_LT(gradcheck([&](Tape& t) { return project(t, add_row_bias(t, a, bias)); }, {a, bias}),
            kGradTol);
  EXPECT_LT(gradcheck([&](Tape& t) { return project(t, mul_rows(t, a, s)); }, {a, s}), kGradTol);
  EXPECT_LT(gradcheck([&](Tape& t) { return mean(t, mul(t, a, a)); }, {a}), kGradTol);
}

TEST(Gradcheck, SoftmaxWithTemperature) {
  Rng rng(5);
  auto z = random_tensor({4, 3}, rng, 2.0);
  auto tau_rows = Tensor({4, 1}, {0.7, 1.0, 2.5, 4.0}, true);
  auto tau_shared = Tensor::scalar(1.8, true);
  EXPECT_LT(gradcheck([&](Tape& t) { return project(t, softmax_rows(t, z, tau_rows)); },
                      {z, tau_rows}),
            kGradTol);
  EXPECT_LT(gradcheck([&](Tape& t) { return project(t, softmax_rows(t, z, tau_shared)); },
                      {z, tau_shared}),
            kGradTol);
}

TEST(Gradcheck, SegmentOps) {
  Rng rng(6);
  const std::vector<std::size_t> ids{0, 2, 0, 1, 2, 2};
  auto x = random_tensor({6, 3}, rng);
  auto scores = random_tensor({6, 1}, rng);
  EXPECT_LT(gradcheck([&](Tape& t) { return project(t, segment_sum(t, x, ids, 4)); }, {x}),
            kGradTol);
  EXPECT_LT(gradcheck([&](Tape& t) { return project(t, segment_softmax(t, scores, ids, 3)); },
                      {scores}),
            kGradTol);
}

TEST(Gradcheck, RowSelection) {
  Rng rng(7);
  auto x = random_tensor({4, 3}, rng), y = random_tensor({4, 2}, rng);
  const std::vector<std::size_t> idx{3, 0, 3, 1};
  EXPECT_LT(gradcheck([&](Tape& t) { return project(t, gather_rows(t, x, idx)); }, {x}), kGradTol);
  EXPECT_LT(gradcheck([&](Tape& t) { return project(t, concat_cols(t, x, y)); }, {x, y}),
            kGradTol);
}

TEST(Gradcheck, DropoutWithFixedMask) {
  Rng rng(8);
  auto x = random_tensor({5, 4}, rng);
  EXPECT_LT(gradcheck(
                [&](Tape& t) {
                  Rng mask_rng(11);
                  return project(t, dropout(t, x, 0.4, true, mask_rng));
                },
                {x}),
            kGradTol);
}

TEST(Gradcheck, BatchNorm) {
  Rng rng(9);
  auto x = random_tensor({6, 3}, rng);
  auto gamma = random_tensor({3}, rng), beta = random_tensor({3}, rng);
  EXPECT_LT(gradcheck([&](Tape& t) { return project(t, batch_norm_train(t, x, gamma, beta, 1e-5)); },
                      {x, gamma, beta}),
            kGradTol);
  const std::vector<double> mu{0.1, -0.2, 0.3}, var{1.5, 0.5, 2.0};
  EXPECT_LT(gradcheck(
                [&](Tape& t) {
                  return project(t, batch_norm_inference(t, x, gamma, beta, mu, var, 1e-5));
                },
                {x, gamma, beta}),
            kGradTol);
}

TEST(Ops, MatmulValues) {
  Tape t;
  const auto c = matmul(t, Tensor::matrix(2, 2, {1, 2, 3, 4}), Tensor::matrix(2, 1, {5, 6}));
  EXPECT_EQ(c.at(0, 0), 17.0);
  EXPECT_EQ(c.at(1, 0), 39.0);
  EXPECT_THROW(matmul(t, Tensor::matrix(2, 2, {1, 2, 3, 4}), Tensor::matrix(3, 1, {1, 2, 3})),
               ShapeError);
}

TEST(Ops, SpmmMatchesDenseProduct) {
  Rng rng(12);
  auto s = SparseMatrix::from_triplets(3, 3, {{0, 0, 1.0}, {0, 2, 2.0}, {2, 1, -0.5}});
  auto d = random_tensor({3, 2}, rng, 1.0, false);
  Tape t;
  const auto a = spmm(t, s, d);
  const auto b = matmul(t, s.densify(), d);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a.values()[i], b.values()[i], 1e-14);
}

TEST(Ops, SoftmaxRowsAgreesWithDirectFormula) {
  Tape t;
  const auto z = Tensor::matrix(2, 3, {1.0, 2.0, 3.0, -1.0, 0.0, 1000.0});
  const auto p = softmax_rows(t, z, 2.0);
  const double e0 = std::exp(0.5), e1 = std::exp(1.0), e2 = std::exp(1.5);
  EXPECT_NEAR(p.at(0, 0), e0 / (e0 + e1 + e2), 1e-15);
  EXPECT_NEAR(p.at(0, 2), e2 / (e0 + e1 + e2), 1e-15);
  EXPECT_NEAR(p.at(1, 2), 1.0, 1e-15);
  EXPECT_TRUE(p.all_finite());
  EXPECT_THROW(softmax_rows(t, z, 0.0), DomainError);
  EXPECT_THROW(softmax_rows(t, z, Tensor::vector({1, 2, 3})), ShapeError);
}

TEST(Ops, SoftmaxRowsSumToOne) {
  Rng rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    auto z = random_tensor({5, 4}, rng, 10.0, false);
    Tape t;
    const auto p = softmax_rows(t, z, 0.1 + 5.0 * rng.uniform());
    for (std::size_t i = 0; i < 5; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < 4; ++j) {
        EXPECT_GE(p.at(i, j), 0.0);
        s += p.at(i, j);
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Ops, SegmentSoftmaxNormalizesWithinSegments) {
  Tape t;
  const std::vector<std::size_t> ids{1, 0, 1, 1};
  const auto y = segment_softmax(t, Tensor::matrix(4, 1, {0.0, 5.0, std::log(2.0), 0.0}), ids, 2);
  EXPECT_NEAR(y.values()[1], 1.0, 1e-15);
  EXPECT_NEAR(y.values()[0], 0.25, 1e-15);
  EXPECT_NEAR(y.values()[2], 0.5, 1e-15);
  EXPECT_THROW(segment_softmax(t, Tensor::matrix(2, 1, {0, 0}), ids, 2), ShapeError);
}

TEST(Ops, SegmentSumEmptySegmentIsZero) {
  Tape t;
  const std::vector<std::size_t> ids{0, 0, 2};
  const auto y = segment_sum(t, Tensor::matrix(3, 1, {1, 2, 3}), ids, 3);
  EXPECT_EQ(y.at(0, 0), 3.0);
  EXPECT_EQ(y.at(1, 0), 0.0);
  EXPECT_EQ(y.at(2, 0), 3.0);
}

TEST(Ops, LogRejectsNonPositive) {
  Tape t;
  EXPECT_THROW(log(t, Tensor::vector({1.0, 0.0})), DomainError);
  const auto lp = log_prob(t, Tensor::vector({0.0}));
  EXPECT_NEAR(lp.item(), std::log(kProbFloor), 1e-12);
}

TEST(Ops, DropoutEvalIsIdentityAndTrainKeepsMean) {
  Rng rng(14);
  auto x = Tensor::full({200, 50}, 1.0);
  Tape t;
  EXPECT_TRUE(dropout(t, x, 0.5, false, rng).same_storage(x));
  const auto y = dropout(t, x, 0.5, true, rng);
  const auto v = y.values();
  const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  EXPECT_NEAR(m, 1.0, 0.05);
  for (double e : v) EXPECT_TRUE(e == 0.0 || e == 2.0);
  EXPECT_THROW(dropout(t, x, 1.0, true, rng), DomainError);
}

TEST(Ops, BatchNormNormalizesColumns) {
  Rng rng(15);
  auto x = random_tensor({50, 3}, rng, 3.0, false);
  for (std::size_t i = 0; i < 50; ++i) x.at(i, 1) += 10.0;
  Tape t;
  BatchStats stats;
  const auto y = batch_norm_train(t, x, Tensor::full({3}, 1.0), Tensor::zeros({3}), 1e-5, &stats);
  for (std::size_t j = 0; j < 3; ++j) {
    double m = 0, s = 0;
    for (std::size_t i = 0; i < 50; ++i) m += y.at(i, j);
    m /= 50;
    for (std::size_t i = 0; i < 50; ++i) s += (y.at(i, j) - m) * (y.at(i, j) - m);
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(s / 50, 1.0, 1e-4);
  }
  EXPECT_GT(stats.mean[1], 8.0);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  auto p = Tensor::vector({1.0, -2.0});
  AdamConfig cfg;
  cfg.weight_decay = 0.0;
  auto state = make_adam_state(std::span<const Tensor>(&p, 1), cfg);
  const std::vector<std::vector<double>> g{{0.5, -3.0}};
  adam_step(std::span<Tensor>(&p, 1), g, state);
  // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
  EXPECT_NEAR(p.values()[0], 1.0 - 0.01 * 0.5 / (0.5 + 1e-8), 1e-12);
  EXPECT_NEAR(p.values()[1], -2.0 + 0.01 * 3.0 / (3.0 + 1e-8), 1e-12);
}

TEST(Adam, CoupledAndDecoupledWeightDecay) {
  AdamConfig cfg;
  cfg.weight_decay = 0.1;
  auto coupled = Tensor::vector({2.0});
  auto s1 = make_adam_state(std::span<const Tensor>(&coupled, 1), cfg);
  adam_step(std::span<Tensor>(&coupled, 1), std::vector<std::vector<double>>{{0.0}}, s1);
  // gradient becomes wd * p = 0.2, and the first step has magnitude lr.
  EXPECT_NEAR(coupled.values()[0], 2.0 - 0.01, 1e-9);

  cfg.decoupled = true;
  auto dec = Tensor::vector({2.0});
  auto s2 = make_adam_state(std::span<const Tensor>(&dec, 1), cfg);
  adam_step(std::span<Tensor>(&dec, 1), std::vector<std::vector<double>>{{0.0}}, s2);
  EXPECT_NEAR(dec.values()[0], 2.0 - 0.01 * 0.1 * 2.0, 1e-12);
}

TEST(Adam, MinimizesQuadratic) {
  auto p = Tensor::vector({3.0, -4.0}, true);
  AdamConfig cfg;
  cfg.lr = 0.1;
  cfg.weight_decay = 0.0;
  Adam opt({p}, cfg);
  for (int i = 0; i < 500; ++i) {
    Tape t;
    opt.zero_grad();
    t.backward(sum(t, mul(t, p, p)));
    opt.step();
  }
  EXPECT_NEAR(p.values()[0], 0.0, 1e-2);
  EXPECT_NEAR(p.values()[1], 0.0, 1e-2);
}

TEST(Adam, MismatchedGradientsThrow) {
  auto p = Tensor::vector({1.0});
  auto s = make_adam_state(std::span<const Tensor>(&p, 1), AdamConfig{});
  EXPECT_THROW(adam_step(std::span<Tensor>(&p, 1), std::vector<std::vector<double>>{{1, 2}}, s),
               ShapeError);
}
