// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "boosting.hpp"
#include "distill.hpp"
#include "errors.hpp"
#include "graph.hpp"
#include "graph_io.hpp"
#include "io.hpp"
#include "models.hpp"
#include "ops.hpp"
#include "optim.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace bgnn {

// ---------------------------------------------------------------------------
// Task data
// ---------------------------------------------------------------------------

enum class Split { train, val, test };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

/// A classification problem over "samples": the nodes of one graph for the
/// node task, or whole graphs for the graph task.
struct TaskData {
  std::string name;
  TaskKind task = TaskKind::node;
  std::size_t n_classes = 0;
  std::size_t in_dim = 0;
  std::vector<std::size_t> labels;  // per sample
  DatasetSplit split;

  Graph graph;              // node task
  PreparedGraph prepared;   // node task, full neighborhoods
  std::vector<Graph> graphs;  // graph task

  std::size_t n_samples() const { return labels.size(); }

  const std::vector<std::size_t>& indices(Split s) const {
    switch (s) {
      case Split::train: return split.train;
      case Split::val: return split.val;
      case Split::test: return split.test;
    }
    return split.test;
  }
};

namespace detail {

inline void check_split(const DatasetSplit& split, std::size_t n) {
  std::vector<int> seen(n, 0);
  for (const auto* part : {&split.train, &split.val, &split.test}) {
    for (auto i : *part) {
      if (i >= n) throw ContractError("split index " + std::to_string(i) + " out of range");
      if (seen[i]++) throw ContractError("split index " + std::to_string(i) + " appears twice");
    }
  }
  if (split.train.empty()) throw ContractError("split has no training samples");
}

inline std::size_t count_classes(const std::vector<std::size_t>& labels) {
  return labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end()) + 1;
}

}  // namespace detail

/// Node task over one graph; the split comes from the graph's masks.
inline TaskData make_node_task(Graph g, std::size_t n_classes, std::string name = "graph") {
  g.validate();
  if (g.node_labels.size() != g.n_nodes) throw ContractError("node task needs node labels");
  TaskData d;
  d.name = std::move(name);
  d.task = TaskKind::node;
  d.n_classes = std::max(n_classes, detail::count_classes(g.node_labels));
  d.in_dim = g.feature_dim();
  d.labels = g.node_labels;
  d.split.train = mask_indices(g.train_mask);
  d.split.val = mask_indices(g.val_mask);
  d.split.test = mask_indices(g.test_mask);
  detail::check_split(d.split, g.n_nodes);
  d.prepared = prepare_graph(g);
  d.graph = std::move(g);
  return d;
}

inline TaskData make_node_task(const NodeDataset& ds) {
  return make_node_task(ds.graph, ds.n_classes, ds.name);
}

/// Graph task; every graph needs a label and the same feature width.
inline TaskData make_graph_task(std::vector<Graph> graphs, std::size_t n_classes,
                                DatasetSplit split, std::string name = "graphs") {
  if (graphs.empty()) throw ContractError("graph task needs at least one graph");
  TaskData d;
  d.name = std::move(name);
  d.task = TaskKind::graph;
  d.in_dim = graphs.front().feature_dim();
  for (const auto& g : graphs) {
    if (!g.graph_label) throw ContractError("graph task needs a label on every graph");
    if (g.feature_dim() != d.in_dim) throw ShapeError("graphs disagree on feature width");
    d.labels.push_back(*g.graph_label);
  }
  d.n_classes = std::max(n_classes, detail::count_classes(d.labels));
  detail::check_split(split, graphs.size());
  d.split = std::move(split);
  d.graphs = std::move(graphs);
  return d;
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct Hyperparams {
  std::size_t epochs = 300;
  AdamConfig adam;
  /// Graphs per training batch (graph task).
  std::size_t batch_size = 32;
  /// Graphs per evaluation batch (graph task).
  std::size_t eval_batch_size = 256;

  static Hyperparams defaults(TaskKind task) {
    Hyperparams h;
    h.epochs = task == TaskKind::node ? 300 : 200;
    return h;
  }

  void validate() const {
    if (!(adam.lr > 0.0)) throw ConfigError("learning rate must be > 0");
    if (adam.weight_decay < 0.0) throw ConfigError("weight decay must be >= 0");
    if (batch_size == 0 || eval_batch_size == 0) throw ConfigError("batch size must be >= 1");
  }
};

enum class KdScope { automatic, train_only, all };

inline std::string to_string(KdScope s) {
  switch (s) {
    case KdScope::automatic: return "auto";
    case KdScope::train_only: return "train";
    case KdScope::all: return "all";
  }
  return "?";
}

inline KdScope parse_kd_scope(const std::string& s) {
  if (s == "auto") return KdScope::automatic;
  if (s == "train") return KdScope::train_only;
  if (s == "all") return KdScope::all;
  throw ConfigError("unknown KD scope '" + s + "' (expected auto, train or all)");
}

struct DistillConfig {
  double lambda = 1.0;
  bool boosting = true;
  bool adaptive = true;
  /// Temperature used when `adaptive` is off.
  double fixed_tau = 4.0;
  TemperatureConfig temperature;
  /// Overrides the per-step variant schedule when set.
  std::optional<TemperatureVariant> variant;
  KdScope scope = KdScope::automatic;
  bool tau_squared = false;

  void validate() const {
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ConfigError("lambda must be >= 0");
    if (!(fixed_tau > 0.0)) throw ConfigError("fixed temperature must be > 0");
    temperature.validate();
  }
};

/// entropy_only for the first distillation step, concat afterwards.
inline TemperatureVariant scheduled_variant(std::size_t step) {
  return step <= 1 ? TemperatureVariant::entropy_only : TemperatureVariant::concat;
}

/// Seed of step `step` in a sequential run seeded with `seed`.
inline std::uint64_t step_seed(std::uint64_t seed, std::size_t step) {
  return step == 0 ? seed : mix_seed(seed, step);
}

struct TrainPlan {
  std::vector<ModelConfig> models;  // teachers first, final student last
  Hyperparams hyper;
  DistillConfig distill;
  std::uint64_t seed = 0;

  void validate() const {
    if (models.empty()) throw ConfigError("a plan needs at least one model");
    for (const auto& m : models) m.validate();
    hyper.validate();
    distill.validate();
  }
};

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

struct EpochMetrics {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double train_acc = 0.0;
  double val_loss = 0.0;
  double val_acc = 0.0;
  /// Range of temperatures emitted during the epoch (adaptive KD only).
  std::optional<double> tau_lo;
  std::optional<double> tau_hi;
};

struct TrainMetrics {
  std::size_t step = 0;
  std::string arch;
  std::uint64_t seed = 0;
  std::vector<EpochMetrics> per_epoch;
  /// Epoch of the returned model; 0 means the initialization.
  std::size_t best_epoch = 0;
  double best_val_acc = 0.0;
  double test_acc = 0.0;
  /// Accuracy on training samples the teacher got wrong; empty without a
  /// teacher or when the teacher fits every training sample.
  std::optional<double> teacher_mis_acc;
  std::size_t n_teacher_mis = 0;
  double wall_ms = 0.0;
  std::vector<std::size_t> test_predictions;  // aligned with split.test
};

// ---------------------------------------------------------------------------
// Inference and evaluation
// ---------------------------------------------------------------------------

/// Row-wise argmax; ties resolve to the lowest class index.
inline std::vector<std::size_t> argmax_rows(const Tensor& logits) {
  const auto m = logits.rows(), c = logits.cols();
  std::vector<std::size_t> out(m);
  for (std::size_t i = 0; i < m; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j) {
      if (logits.at(i, j) > logits.at(i, best)) best = j;
    }
    out[i] = best;
  }
  return out;
}

namespace detail {

inline std::vector<const Graph*> graph_ptrs(const TaskData& d, std::span<const std::size_t> ids) {
  std::vector<const Graph*> out;
  out.reserve(ids.size());
  for (auto i : ids) out.push_back(&d.graphs.at(i));
  return out;
}

inline void check_model(const GnnModel& m, const TaskData& d) {
  const auto& c = m.config();
  if (c.task != d.task || c.in_dim != d.in_dim || c.n_classes != d.n_classes) {
    throw ContractError("model (" + to_string(c.task) + ", in=" + std::to_string(c.in_dim) +
                        ", C=" + std::to_string(c.n_classes) + ") does not fit data '" + d.name +
                        "' (" + to_string(d.task) + ", in=" + std::to_string(d.in_dim) +
                        ", C=" + std::to_string(d.n_classes) + ")");
  }
}

}  // namespace detail

/// Eval-mode logits for every sample, n_samples x C.
inline Tensor predict_logits(GnnModel& model, const TaskData& d, std::size_t eval_batch = 256) {
  detail::check_model(model, d);
  if (d.task == TaskKind::node) return model.predict(d.prepared);
  const auto c = d.n_classes;
  std::vector<double> out;
  out.reserve(d.n_samples() * c);
  const auto all = all_indices(d.n_samples());
  for (std::size_t lo = 0; lo < all.size(); lo += eval_batch) {
    const auto hi = std::min(all.size(), lo + eval_batch);
    const auto batch = batch_graphs(detail::graph_ptrs(d, std::span(all).subspan(lo, hi - lo)));
    const auto logits = model.predict(prepare_batch(batch));
    out.insert(out.end(), logits.values().begin(), logits.values().end());
  }
  return Tensor({d.n_samples(), c}, std::move(out));
}

struct EvalResult {
  double accuracy = 0.0;
  std::vector<std::size_t> samples;
  std::vector<std::size_t> labels;
  std::vector<std::size_t> predictions;
  std::vector<bool> correct;
  /// Correctness restricted to samples the teacher misclassified (when a
  /// teacher's predictions were supplied).
  std::vector<std::size_t> teacher_mis_samples;
  std::vector<bool> teacher_mis_correct;
  std::optional<double> teacher_mis_accuracy;
};

/// Scores per-sample predictions (indexed by sample id) on one split.
inline EvalResult evaluate(std::span<const std::size_t> predictions, const TaskData& d, Split split,
                           std::span<const std::size_t> teacher_predictions = {}) {
  if (predictions.size() != d.n_samples()) {
    throw ContractError("evaluate: " + std::to_string(predictions.size()) + " predictions for " +
                        std::to_string(d.n_samples()) + " samples");
  }
  if (!teacher_predictions.empty() && teacher_predictions.size() != d.n_samples()) {
    throw ContractError("evaluate: teacher predictions do not cover every sample");
  }
  const auto& idx = d.indices(split);
  if (idx.empty()) throw ContractError("evaluate: split '" + to_string(split) + "' is empty");
  EvalResult r;
  std::size_t hits = 0, mis_hits = 0;
  for (auto i : idx) {
    const bool ok = predictions[i] == d.labels[i];
    r.samples.push_back(i);
    r.labels.push_back(d.labels[i]);
    r.predictions.push_back(predictions[i]);
    r.correct.push_back(ok);
    hits += ok;
    if (!teacher_predictions.empty() && teacher_predictions[i] != d.labels[i]) {
      r.teacher_mis_samples.push_back(i);
      r.teacher_mis_correct.push_back(ok);
      mis_hits += ok;
    }
  }
  r.accuracy = static_cast<double>(hits) / static_cast<double>(idx.size());
  if (!r.teacher_mis_samples.empty()) {
    r.teacher_mis_accuracy =
        static_cast<double>(mis_hits) / static_cast<double>(r.teacher_mis_samples.size());
  }
  return r;
}

inline EvalResult evaluate(GnnModel& model, const TaskData& d, Split split,
                           std::span<const std::size_t> teacher_predictions = {}) {
  const auto preds = argmax_rows(predict_logits(model, d));
  return evaluate(preds, d, split, teacher_predictions);
}

enum class Aggregation { mean, top5of10 };

struct AccuracySummary {
  double mean = 0.0;
  double std = 0.0;
  std::size_t n = 0;
};

/// Mean and sample standard deviation of per-seed accuracies; top5of10
/// keeps only the best five values.
inline AccuracySummary aggregate(std::vector<double> accs, Aggregation mode = Aggregation::mean) {
  if (accs.empty()) throw ContractError("aggregate: no accuracies");
  if (mode == Aggregation::top5of10) {
    std::sort(accs.begin(), accs.end(), std::greater<>());
    accs.resize(std::min<std::size_t>(accs.size(), 5));
  }
  AccuracySummary s;
  s.n = accs.size();
  s.mean = std::accumulate(accs.begin(), accs.end(), 0.0) / static_cast<double>(s.n);
  if (s.n > 1) {
    double ss = 0.0;
    for (double a : accs) ss += (a - s.mean) * (a - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(s.n - 1));
  }
  return s;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// What a student optimizes besides plain cross-entropy.
struct StudentObjective {
  Tensor teacher_logits;  // n_samples x C; empty without a teacher
  SampleWeights weights;  // over split.train; empty means uniform
  DistillConfig distill;
  TemperatureVariant variant = TemperatureVariant::entropy_only;

  bool has_kd() const { return teacher_logits.numel() > 0 && distill.lambda > 0.0; }
};

namespace detail {

struct BatchPlan {
  std::vector<std::size_t> samples;  // sample ids, row order of the logits
};

inline double mean_ce(const Tensor& logits, std::span<const std::size_t> rows,
                      std::span<const std::size_t> labels) {
  if (rows.empty()) return 0.0;
  const auto c = logits.cols();
  double total = 0.0;
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const auto r = rows[k];
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, logits.at(r, j));
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(logits.at(r, j) - mx);
    total += std::log(z) + mx - logits.at(r, labels[k]);
  }
  return total / static_cast<double>(rows.size());
}

}  // namespace detail

/// Trains a freshly initialized model on `d` and returns the parameters
/// with the best validation accuracy seen (the initialization counts as
/// epoch 0 only when no epoch runs).
inline std::pair<GnnModel, TrainMetrics> fit(const ModelConfig& config, const TaskData& d,
                                             const Hyperparams& hyper, std::uint64_t seed,
                                             const StudentObjective& objective = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  hyper.validate();
  auto model = GnnModel::init(config, seed);
  detail::check_model(model, d);
  const auto& train = d.split.train;
  const auto n_train = train.size();
  const auto weights = objective.weights.size() == 0 ? init_weights(n_train) : objective.weights;
  if (weights.size() != n_train) {
    throw ContractError("fit: " + std::to_string(weights.size()) + " sample weights for " +
                        std::to_string(n_train) + " training samples");
  }
  const bool kd = objective.has_kd();
  if (kd && (objective.teacher_logits.rows() != d.n_samples() ||
             objective.teacher_logits.cols() != d.n_classes)) {
    throw ContractError("fit: teacher logits " + shape_str(objective.teacher_logits.shape()) +
                        " do not cover the data");
  }
  const auto& dc = objective.distill;
  const bool kd_all = dc.scope == KdScope::all ||
                      (dc.scope == KdScope::automatic && d.task == TaskKind::node);

  std::vector<std::size_t> train_pos(d.n_samples(), SIZE_MAX);
  for (std::size_t k = 0; k < n_train; ++k) train_pos[train[k]] = k;

  TemperatureModule temp;
  std::vector<Tensor> params = model.parameters();
  if (kd && dc.adaptive) {
    temp = TemperatureModule::init(objective.variant, d.n_classes, dc.temperature, seed);
    for (const auto& p : temp.parameters()) params.push_back(p);
  }
  Adam opt(params, hyper.adam);
  Rng drop_rng(mix_seed(seed, 1));
  Rng order_rng(mix_seed(seed, 2));

  TrainMetrics metrics;
  metrics.arch = to_string(config.arch);
  metrics.seed = seed;
  GnnModel best = model.clone();
  double best_val = -1.0;

  const auto& val = d.split.val;
  std::vector<std::size_t> val_labels;
  for (auto i : val) val_labels.push_back(d.labels[i]);
  const std::vector<std::size_t> pool =
      (d.task == TaskKind::graph && kd && kd_all) ? all_indices(d.n_samples()) : train;

  for (std::size_t epoch = 1; epoch <= hyper.epochs; ++epoch) {
    EpochMetrics em;
    em.epoch = epoch;
    std::size_t train_hits = 0, train_seen = 0;

    std::vector<std::vector<std::size_t>> batches;
    if (d.task == TaskKind::node) {
      batches.push_back({});
    } else {
      auto order = pool;
      order_rng.shuffle(order.begin(), order.end());
      for (std::size_t lo = 0; lo < order.size(); lo += hyper.batch_size) {
        const auto hi = std::min(order.size(), lo + hyper.batch_size);
        batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(lo),
                             order.begin() + static_cast<std::ptrdiff_t>(hi));
      }
    }

    for (const auto& batch : batches) {
      Tape tape;
      PreparedGraph batch_graph;
      const PreparedGraph* pg = &d.prepared;
      const bool node = d.task == TaskKind::node;
      if (!node) {
        batch_graph = prepare_batch(batch_graphs(detail::graph_ptrs(d, batch)));
        pg = &batch_graph;
      }
      const auto sample_of = [&](std::size_t row) { return node ? row : batch[row]; };
      const auto n_rows = node ? d.n_samples() : batch.size();

      const auto fwd = model.forward(tape, *pg, true, drop_rng);
      std::vector<std::size_t> label_rows, label_y;
      std::vector<double> label_w;
      std::vector<std::size_t> kd_rows;
      for (std::size_t r = 0; r < n_rows; ++r) {
        const auto s = sample_of(r);
        if (train_pos[s] != SIZE_MAX) {
          label_rows.push_back(r);
          label_y.push_back(d.labels[s]);
          label_w.push_back(weights.w[train_pos[s]]);
          if (!kd_all) kd_rows.push_back(r);
        }
        if (kd_all) kd_rows.push_back(r);
      }

      Tensor loss;
      bool have_loss = false;
      if (!label_rows.empty()) {
        const auto probs = softmax_rows(tape, gather_rows(tape, fwd.logits, label_rows), 1.0);
        loss = scale(tape, weighted_label_loss(tape, probs, label_y, label_w),
                     static_cast<double>(n_train));
        have_loss = true;
        const auto preds = argmax_rows(probs);
        for (std::size_t k = 0; k < preds.size(); ++k) train_hits += preds[k] == label_y[k];
        train_seen += preds.size();
      }
      if (kd && !kd_rows.empty()) {
        std::vector<std::size_t> samples(n_rows);
        for (std::size_t r = 0; r < n_rows; ++r) samples[r] = sample_of(r);
        Tape scratch;
        const auto teacher =
            node ? objective.teacher_logits : gather_rows(scratch, objective.teacher_logits, samples);
        Tensor tau;
        if (dc.adaptive) {
          tau = temp.forward(tape, teacher);
          for (auto r : kd_rows) {
            const double v = tau[r];
            em.tau_lo = std::min(em.tau_lo.value_or(v), v);
            em.tau_hi = std::max(em.tau_hi.value_or(v), v);
          }
        } else {
          tau = Tensor::scalar(dc.fixed_tau);
        }
        const auto kd_term = kd_loss(tape, fwd.logits, teacher, tau, kd_rows, {dc.tau_squared});
        const auto weighted = scale(tape, kd_term, dc.lambda);
        loss = have_loss ? add(tape, loss, weighted) : weighted;
        have_loss = true;
      }
      if (!have_loss) continue;
      const double value = loss.item();
      if (!std::isfinite(value)) {
        throw TrainingError("training " + metrics.arch + " diverged at epoch " +
                            std::to_string(epoch) + " (loss " + std::to_string(value) + ")");
      }
      em.train_loss += value;
      tape.backward(loss);
      opt.step();
      opt.zero_grad();
    }
    em.train_acc = train_seen ? static_cast<double>(train_hits) / static_cast<double>(train_seen)
                              : 0.0;

    if (!val.empty()) {
      const auto logits = predict_logits(model, d, hyper.eval_batch_size);
      const auto preds = argmax_rows(logits);
      std::size_t hits = 0;
      for (auto i : val) hits += preds[i] == d.labels[i];
      em.val_acc = static_cast<double>(hits) / static_cast<double>(val.size());
      em.val_loss = detail::mean_ce(logits, val, val_labels);
    }
    if (val.empty() || em.val_acc > best_val) {
      best_val = em.val_acc;
      best = model.clone();
      metrics.best_epoch = epoch;
    }
    metrics.per_epoch.push_back(em);
  }

  metrics.best_val_acc = std::max(best_val, 0.0);
  if (!d.split.test.empty()) {
    const auto r = evaluate(best, d, Split::test);
    metrics.test_acc = r.accuracy;
    metrics.test_predictions = r.predictions;
  }
  metrics.wall_ms = std::chrono::duration<double, std::milli>(
                        std::chrono::steady_clock::now() - t0)
                        .count();
  return {std::move(best), std::move(metrics)};
}

/// Plain supervised training (the NoKD baseline).
inline std::pair<GnnModel, TrainMetrics> train_supervised(const ModelConfig& config,
                                                          const TaskData& d,
                                                          const Hyperparams& hyper,
                                                          std::uint64_t seed) {
  return fit(config, d, hyper, seed);
}

struct StepResult {
  GnnModel student;
  SampleWeights weights;
  TrainMetrics metrics;
};

/// One distillation step: the frozen teacher's eval-mode logits drive the
/// sample-weight update and the KD target of a freshly initialized student.
inline StepResult train_bgnn_step(GnnModel& teacher, const ModelConfig& student_config,
                                  const TaskData& d, const SampleWeights& weights,
                                  const DistillConfig& distill, const Hyperparams& hyper,
                                  std::uint64_t seed,
                                  TemperatureVariant variant = TemperatureVariant::entropy_only) {
  distill.validate();
  if (teacher.config().n_classes != d.n_classes || student_config.n_classes != d.n_classes) {
    throw ContractError("teacher, student and data must agree on the class count");
  }
  const auto teacher_logits = predict_logits(teacher, d, hyper.eval_batch_size);
  const auto teacher_preds = argmax_rows(teacher_logits);
  const auto& train = d.split.train;

  SampleWeights next = weights.size() == 0 ? init_weights(train.size()) : weights;
  if (distill.boosting) {
    Tape scratch;
    const auto probs = softmax_rows(scratch, gather_rows(scratch, teacher_logits, train), 1.0);
    std::vector<std::size_t> y;
    for (auto i : train) y.push_back(d.labels[i]);
    next = samme_r_update(next, probs, y, d.n_classes);
  }

  StudentObjective obj;
  obj.teacher_logits = teacher_logits;
  obj.weights = next;
  obj.distill = distill;
  obj.variant = distill.variant.value_or(variant);
  auto [student, metrics] = fit(student_config, d, hyper, seed, obj);

  const auto eval = evaluate(student, d, Split::train, teacher_preds);
  metrics.teacher_mis_acc = eval.teacher_mis_accuracy;
  metrics.n_teacher_mis = eval.teacher_mis_samples.size();
  return {std::move(student), std::move(next), std::move(metrics)};
}

struct SequentialResult {
  std::vector<GnnModel> models;  // one per step; the last is the final student
  std::vector<TrainMetrics> steps;
  SampleWeights weights;

  GnnModel& final_model() { return models.back(); }
  const TrainMetrics& final_metrics() const { return steps.back(); }
};

/// Supervised step 0, then each model distills from its predecessor.
inline SequentialResult run_sequential(const TrainPlan& plan, const TaskData& d) {
  plan.validate();
  SequentialResult out;
  auto [first, m0] = train_supervised(plan.models.front(), d, plan.hyper, plan.seed);
  m0.step = 0;
  out.models.push_back(std::move(first));
  out.steps.push_back(std::move(m0));
  out.weights = init_weights(d.split.train.size());
  for (std::size_t i = 1; i < plan.models.size(); ++i) {
    auto r = train_bgnn_step(out.models.back(), plan.models[i], d, out.weights, plan.distill,
                             plan.hyper, step_seed(plan.seed, i), scheduled_variant(i));
    r.metrics.step = i;
    out.weights = std::move(r.weights);
    out.models.push_back(std::move(r.student));
    out.steps.push_back(std::move(r.metrics));
  }
  return out;
}

/// Knowledge distillation with a constant temperature, uniform weights and
/// no boosting: a supervised teacher, then one student.
inline SequentialResult run_fixed_kd_baseline(const ModelConfig& teacher_config,
                                              const ModelConfig& student_config, const TaskData& d,
                                              double tau, double lambda, const Hyperparams& hyper,
                                              std::uint64_t seed) {
  if (!(tau > 0.0)) throw ContractError("fixed temperature must be > 0");
  TrainPlan plan;
  plan.models = {teacher_config, student_config};
  plan.hyper = hyper;
  plan.seed = seed;
  plan.distill.lambda = lambda;
  plan.distill.adaptive = false;
  plan.distill.boosting = false;
  plan.distill.fixed_tau = tau;
  return run_sequential(plan, d);
}

inline std::vector<TrainMetrics> run_fixed_kd_baseline(const ModelConfig& teacher_config,
                                                       const ModelConfig& student_config,
                                                       const TaskData& d, double tau,
                                                       double lambda, const Hyperparams& hyper,
                                                       std::span<const std::uint64_t> seeds) {
  std::vector<TrainMetrics> out;
  for (auto s : seeds) {
    out.push_back(
        run_fixed_kd_baseline(teacher_config, student_config, d, tau, lambda, hyper, s)
            .final_metrics());
  }
  return out;
}

struct EnsembleResult {
  Tensor mean_logits;
  std::vector<std::size_t> predictions;  // per sample
  double test_acc = 0.0;
};

/// Averages raw logits and takes the argmax per sample.
inline EnsembleResult ensemble_from_logits(std::span<const Tensor> logits, const TaskData& d) {
  if (logits.empty()) throw ContractError("ensemble needs at least one model");
  const auto shape = logits.front().shape();
  std::vector<double> mean(logits.front().numel(), 0.0);
  for (const auto& l : logits) {
    if (l.shape() != shape) throw ContractError("ensemble members disagree on the class count");
    const auto v = l.values();
    for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += v[i];
  }
  for (auto& v : mean) v /= static_cast<double>(logits.size());
  EnsembleResult r;
  r.mean_logits = Tensor(shape, std::move(mean));
  r.predictions = argmax_rows(r.mean_logits);
  if (!d.split.test.empty()) r.test_acc = evaluate(r.predictions, d, Split::test).accuracy;
  return r;
}

inline EnsembleResult ensemble_predict(std::span<GnnModel> models, const TaskData& d) {
  std::vector<Tensor> logits;
  for (auto& m : models) logits.push_back(predict_logits(m, d));
  return ensemble_from_logits(logits, d);
}

/// Trains each configuration supervised (seed of step i) and ensembles them.
inline std::pair<EnsembleResult, SequentialResult> run_ensemble_baseline(
    const std::vector<ModelConfig>& configs, const TaskData& d, const Hyperparams& hyper,
    std::uint64_t seed) {
  if (configs.empty()) throw ContractError("ensemble needs at least one model");
  SequentialResult runs;
  for (std::size_t i = 0; i < configs.size(); ++i) {
    auto [m, metrics] = train_supervised(configs[i], d, hyper, step_seed(seed, i));
    metrics.step = i;
    runs.models.push_back(std::move(m));
    runs.steps.push_back(std::move(metrics));
  }
  auto ens = ensemble_predict(runs.models, d);
  return {std::move(ens), std::move(runs)};
}

// ---------------------------------------------------------------------------
// Grid search
// ---------------------------------------------------------------------------

using DataFactory = std::function<TaskData(std::uint64_t seed)>;

struct GridPoint {
  double lambda = 0.0;
  double lr = 0.0;
  AccuracySummary val;
  AccuracySummary test;
};

struct GridResult {
  std::vector<GridPoint> points;
  std::size_t best = 0;  // highest mean validation accuracy, first on ties
};

inline GridResult grid_search(TrainPlan plan, const DataFactory& data,
                              std::span<const double> lambdas, std::span<const double> lrs,
                              std::span<const std::uint64_t> seeds) {
  if (lambdas.empty() || lrs.empty() || seeds.empty()) {
    throw ConfigError("grid search needs at least one lambda, learning rate and seed");
  }
  GridResult g;
  for (double lam : lambdas) {
    for (double lr : lrs) {
      plan.distill.lambda = lam;
      plan.hyper.adam.lr = lr;
      std::vector<double> vals, tests;
      for (auto s : seeds) {
        plan.seed = s;
        const auto r = run_sequential(plan, data(s));
        vals.push_back(r.final_metrics().best_val_acc);
        tests.push_back(r.final_metrics().test_acc);
      }
      g.points.push_back({lam, lr, aggregate(vals), aggregate(tests)});
      if (g.points.back().val.mean > g.points[g.best].val.mean) g.best = g.points.size() - 1;
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Output files
// ---------------------------------------------------------------------------

inline nlohmann::json optional_json(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

inline nlohmann::json step_to_json(const TrainMetrics& m) {
  nlohmann::json j;
  j["step"] = m.step;
  j["arch"] = m.arch;
  j["seed"] = m.seed;
  j["best_epoch"] = m.best_epoch;
  j["best_val_acc"] = m.best_val_acc;
  j["test_acc"] = m.test_acc;
  j["teacher_mis_acc"] = optional_json(m.teacher_mis_acc);
  j["n_teacher_mis"] = m.n_teacher_mis;
  j["wall_ms"] = m.wall_ms;
  auto epochs = nlohmann::json::array();
  for (const auto& e : m.per_epoch) {
    nlohmann::json ej{{"epoch", e.epoch},       {"train_loss", e.train_loss},
                      {"train_acc", e.train_acc}, {"val_loss", e.val_loss},
                      {"val_acc", e.val_acc}};
    if (e.tau_lo) {
      ej["tau_min"] = *e.tau_lo;
      ej["tau_max"] = *e.tau_hi;
    }
    epochs.push_back(std::move(ej));
  }
  j["per_epoch"] = std::move(epochs);
  return j;
}

/// One metrics object per run. Top-level fields describe the final model;
/// `steps` holds every step of a sequential run.
inline nlohmann::json metrics_to_json(const std::string& plan, std::uint64_t seed,
                                      const std::vector<TrainMetrics>& steps,
                                      std::optional<double> test_acc_override = std::nullopt) {
  if (steps.empty()) throw ContractError("metrics_to_json: no steps");
  const auto& last = steps.back();
  nlohmann::json j;
  j["plan"] = plan;
  j["seed"] = seed;
  auto per_epoch = nlohmann::json::array();
  for (const auto& e : last.per_epoch) {
    per_epoch.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_acc", e.val_acc}});
  }
  j["per_epoch"] = std::move(per_epoch);
  j["test_acc"] = test_acc_override.value_or(last.test_acc);
  j["teacher_mis_acc"] = optional_json(last.teacher_mis_acc);
  double wall = 0.0;
  for (const auto& s : steps) wall += s.wall_ms;
  j["wall_ms"] = wall;
  auto arr = nlohmann::json::array();
  for (const auto& s : steps) arr.push_back(step_to_json(s));
  j["steps"] = std::move(arr);
  return j;
}

/// `sample_id,true,pred` rows for one evaluated split.
inline std::string predictions_csv(std::span<const std::size_t> samples,
                                   std::span<const std::size_t> labels,
                                   std::span<const std::size_t> predictions) {
  if (samples.size() != labels.size() || samples.size() != predictions.size()) {
    throw ContractError("predictions_csv: column lengths differ");
  }
  std::ostringstream out;
  out << "sample_id,true,pred\n";
  for (std::size_t i = 0; i < samples.size(); ++i) {
    out << samples[i] << ',' << labels[i] << ',' << predictions[i] << '\n';
  }
  return out.str();
}

struct PredictionRow {
  std::size_t sample_id = 0;
  std::size_t label = 0;
  std::size_t prediction = 0;
};

inline std::vector<PredictionRow> parse_predictions_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::getline(in, line);
  if (line != "sample_id,true,pred") throw FormatError("predictions file: bad header '" + line + "'");
  std::vector<PredictionRow> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    PredictionRow r;
    char c1 = 0, c2 = 0;
    std::istringstream ls(line);
    if (!(ls >> r.sample_id >> c1 >> r.label >> c2 >> r.prediction) || c1 != ',' || c2 != ',') {
      throw FormatError("predictions file:" + std::to_string(lineno) + ": malformed row");
    }
    rows.push_back(r);
  }
  return rows;
}

inline double accuracy_of(std::span<const PredictionRow> rows) {
  if (rows.empty()) throw ContractError("accuracy_of: no rows");
  std::size_t hits = 0;
  for (const auto& r : rows) hits += r.label == r.prediction;
  return static_cast<double>(hits) / static_cast<double>(rows.size());
}

}  // namespace bgnn
