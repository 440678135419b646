// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <map>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "../analysis.hpp"
#include "../errors.hpp"
#include "../fixtures.hpp"
#include "../graph_io.hpp"
#include "../io.hpp"
#include "../models.hpp"
#include "../pipeline.hpp"
#include "config.hpp"

namespace bgnn::cli {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Dataset specs
// ---------------------------------------------------------------------------

/// Parsed form of a dataset spec:
///   sbm:small | sbm:<nodes> | graphs:<count> | json:<file> | tu:<dir>:<NAME> | <name>
/// A bare name is looked up under $BGNN_DATA_DIR as <name>.json or as a TU
/// directory <NAME>/<NAME>_A.txt.
struct DatasetSource {
  enum class Kind { sbm_small, sbm, graphs, json, tu };
  Kind kind = Kind::sbm_small;
  std::size_t size = 0;
  fs::path path;
  std::string name;

  TaskKind task() const {
    return (kind == Kind::graphs || kind == Kind::tu) ? TaskKind::graph : TaskKind::node;
  }
};

inline std::size_t parse_count(const std::string& s, const std::string& spec) {
  std::size_t n = 0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), n);
  if (s.empty() || r.ec != std::errc() || r.ptr != s.data() + s.size() || n == 0) {
    throw ConfigError("dataset '" + spec + "': expected a positive count after ':'");
  }
  return n;
}

inline DatasetSource resolve_dataset(const std::string& spec) {
  DatasetSource src;
  const auto colon = spec.find(':');
  const auto head = spec.substr(0, colon);
  const auto rest = colon == std::string::npos ? std::string() : spec.substr(colon + 1);
  if (head == "sbm") {
    if (rest == "small") {
      src.kind = DatasetSource::Kind::sbm_small;
      src.name = "sbm-small";
    } else {
      src.kind = DatasetSource::Kind::sbm;
      src.size = parse_count(rest, spec);
      if (src.size % 4 != 0) throw ConfigError("dataset '" + spec + "': node count must be a multiple of 4");
      src.name = "sbm-" + rest;
    }
    return src;
  }
  if (head == "graphs") {
    src.kind = DatasetSource::Kind::graphs;
    src.size = parse_count(rest, spec);
    src.name = "graphs-" + rest;
    return src;
  }
  if (head == "json") {
    src.kind = DatasetSource::Kind::json;
    src.path = rest;
    if (!fs::is_regular_file(src.path)) throw ConfigError("dataset file not found: " + rest);
    src.name = src.path.stem().string();
    return src;
  }
  if (head == "tu") {
    const auto sep = rest.rfind(':');
    if (sep == std::string::npos) throw ConfigError("dataset '" + spec + "': expected tu:<dir>:<NAME>");
    src.kind = DatasetSource::Kind::tu;
    src.path = rest.substr(0, sep);
    src.name = rest.substr(sep + 1);
    if (!fs::is_regular_file(src.path / (src.name + "_A.txt"))) {
      throw ConfigError("TU dataset not found: " + (src.path / (src.name + "_A.txt")).string());
    }
    return src;
  }
  if (colon != std::string::npos) throw ConfigError("unknown dataset kind '" + head + "'");

  const char* root = std::getenv("BGNN_DATA_DIR");
  if (root == nullptr || *root == '\0') {
    throw ConfigError("dataset '" + spec + "' needs BGNN_DATA_DIR or an explicit json:/tu: path");
  }
  const fs::path base(root);
  for (const auto& candidate : {base / (spec + ".json"), base / spec / (spec + ".json")}) {
    if (fs::is_regular_file(candidate)) {
      src.kind = DatasetSource::Kind::json;
      src.path = candidate;
      src.name = spec;
      return src;
    }
  }
  for (const auto& dir : {base / spec, base}) {
    if (fs::is_regular_file(dir / (spec + "_A.txt"))) {
      src.kind = DatasetSource::Kind::tu;
      src.path = dir;
      src.name = spec;
      return src;
    }
  }
  throw ConfigError("dataset '" + spec + "' not found under " + base.string());
}

inline bool has_split(const Graph& g) {
  return std::find(g.train_mask.begin(), g.train_mask.end(), true) != g.train_mask.end();
}

/// Loads the data for one seed; fixed-split bundles ignore the seed.
inline TaskData load_task(const DatasetSource& src, const RunConfig& rc, std::uint64_t seed) {
  switch (src.kind) {
    case DatasetSource::Kind::sbm_small:
      return make_node_task(make_sbm_dataset(sbm_small(), 0, seed, src.name));
    case DatasetSource::Kind::sbm:
      return make_node_task(make_sbm_dataset(sbm_hard(src.size), 0, seed, src.name));
    case DatasetSource::Kind::graphs: {
      GraphSetParams p;
      p.n_graphs = src.size;
      auto graphs = generate_graph_set(p);
      std::vector<std::size_t> labels;
      for (const auto& g : graphs) labels.push_back(*g.graph_label);
      auto split = random_split(graphs.size(), labels, rc.split, seed);
      return make_graph_task(std::move(graphs), 3, std::move(split), src.name);
    }
    case DatasetSource::Kind::json: {
      auto ds = load_json_bundle(src.path);
      for (const auto& w : check_known_statistics(ds)) warn(w);
      if (!has_split(ds.graph)) {
        ds.graph = with_masks(std::move(ds.graph),
                              random_split(ds.graph.n_nodes, ds.graph.node_labels, rc.split, seed));
      }
      return make_node_task(ds);
    }
    case DatasetSource::Kind::tu: {
      auto tu = load_tu_dataset(src.path, src.name);
      auto graphs = std::move(tu.graphs);
      if (!tu.has_node_labels) graphs = one_hot_degree_features(std::move(graphs), 10);
      std::vector<std::size_t> labels;
      for (const auto& g : graphs) labels.push_back(*g.graph_label);
      auto split = random_split(graphs.size(), labels, rc.split, seed);
      return make_graph_task(std::move(graphs), tu.n_classes, std::move(split), src.name);
    }
  }
  throw ContractError("unhandled dataset kind");
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct RunRecord {
  std::uint64_t seed = 0;
  double test_acc = 0.0;
  nlohmann::json metrics;
};

inline std::string seed_tag(PlanKind plan, std::uint64_t seed) {
  return to_string(plan) + "_seed" + std::to_string(seed);
}

/// Trains one seed of the configured plan and writes its files under rc.out.
inline RunRecord run_one(const RunConfig& rc, const DatasetSource& src, std::uint64_t seed) {
  const auto data = load_task(src, rc, seed);
  const auto hyper = rc.hyperparams(data.task);
  std::vector<ModelConfig> configs;
  for (auto a : rc.architectures()) {
    configs.push_back(rc.model_config(a, data.task, data.in_dim, data.n_classes));
  }

  SequentialResult result;
  std::vector<std::size_t> test_pred;
  std::optional<double> override_acc;
  if (rc.plan == PlanKind::ensemble) {
    auto [ens, runs] = run_ensemble_baseline(configs, data, hyper, seed);
    result = std::move(runs);
    for (auto i : data.split.test) test_pred.push_back(ens.predictions[i]);
    override_acc = ens.test_acc;
  } else {
    TrainPlan plan;
    plan.models = configs;
    plan.hyper = hyper;
    plan.distill = rc.distill_for_plan();
    plan.seed = seed;
    result = run_sequential(plan, data);
    test_pred = result.final_metrics().test_predictions;
  }

  RunRecord rec;
  rec.seed = seed;
  rec.metrics = metrics_to_json(to_string(rc.plan), seed, result.steps, override_acc);
  rec.metrics["dataset"] = data.name;
  rec.test_acc = rec.metrics["test_acc"].get<double>();

  const auto tag = seed_tag(rc.plan, seed);
  std::vector<std::size_t> test_labels;
  for (auto i : data.split.test) test_labels.push_back(data.labels[i]);
  write_file_atomic(rc.out / (tag + "_predictions.csv"),
                    predictions_csv(data.split.test, test_labels, test_pred));
  if (rc.checkpoints) {
    for (std::size_t i = 0; i < result.models.size(); ++i) {
      save_checkpoint(result.models[i], rc.out / "checkpoints" /
                                            (tag + "_step" + std::to_string(i) + "_" +
                                             to_string(result.models[i].config().arch)));
    }
  }
  write_file_atomic(rc.out / (tag + "_metrics.json"), rec.metrics.dump(2) + "\n");
  return rec;
}

inline void check_task(const RunConfig& rc, const DatasetSource& src) {
  if (rc.task && *rc.task != src.task()) {
    throw ConfigError("run.task is " + to_string(*rc.task) + " but dataset '" + src.name +
                      "' is a " + to_string(src.task()) + "-level task");
  }
}

struct TrainSummary {
  std::vector<RunRecord> runs;
  AccuracySummary accuracy;
};

inline TrainSummary cmd_train(const RunConfig& rc) {
  const auto src = resolve_dataset(rc.dataset);
  check_task(rc, src);
  TrainSummary s;
  std::vector<double> accs;
  for (auto seed : rc.seeds) {
    s.runs.push_back(run_one(rc, src, seed));
    accs.push_back(s.runs.back().test_acc);
  }
  s.accuracy = aggregate(accs, rc.aggregation);
  nlohmann::json j;
  j["plan"] = to_string(rc.plan);
  j["dataset"] = rc.dataset;
  j["seeds"] = rc.seeds;
  j["test_acc"] = accs;
  j["aggregation"] = rc.aggregation == Aggregation::mean ? "mean" : "top5of10";
  j["mean_acc"] = s.accuracy.mean;
  j["std"] = s.accuracy.std;
  write_file_atomic(rc.out / (to_string(rc.plan) + "_summary.json"), j.dump(2) + "\n");
  return s;
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

enum class SweepParam { tau, lambda, lr };

inline SweepParam parse_sweep_param(const std::string& s) {
  if (s == "tau") return SweepParam::tau;
  if (s == "lambda") return SweepParam::lambda;
  if (s == "lr") return SweepParam::lr;
  throw ConfigError("unknown sweep parameter '" + s + "' (expected tau, lambda or lr)");
}

inline std::string format_value(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

/// Values as a comma list, or lo:hi:step with an inclusive upper end.
inline std::vector<double> parse_values(const std::string& s) {
  std::vector<double> out;
  const auto number = [&](const std::string& t) {
    double v = 0.0;
    const auto r = std::from_chars(t.data(), t.data() + t.size(), v);
    if (t.empty() || r.ec != std::errc() || r.ptr != t.data() + t.size()) {
      throw ConfigError("bad sweep value '" + t + "'");
    }
    return v;
  };
  if (s.find(':') != std::string::npos) {
    std::vector<std::string> parts;
    std::istringstream in(s);
    std::string p;
    while (std::getline(in, p, ':')) parts.push_back(ConfigFile::trim(p));
    if (parts.size() != 3) throw ConfigError("range values must look like lo:hi:step");
    const double lo = number(parts[0]), hi = number(parts[1]), step = number(parts[2]);
    if (!(step > 0.0) || hi < lo) throw ConfigError("empty sweep range '" + s + "'");
    const auto n = static_cast<std::size_t>(std::floor((hi - lo) / step + 1e-9));
    for (std::size_t i = 0; i <= n; ++i) out.push_back(lo + static_cast<double>(i) * step);
    return out;
  }
  for (const auto& t : detail::split_list(s)) out.push_back(number(t));
  return out;
}

struct SweepRow {
  double value = 0.0;
  AccuracySummary accuracy;
};

/// One full multi-seed run per value, each in its own directory; values are
/// spread over up to `jobs` threads.
inline std::vector<SweepRow> cmd_sweep(const RunConfig& rc, SweepParam param,
                                       const std::vector<double>& values, std::size_t jobs = 1) {
  if (values.empty()) throw ConfigError("sweep needs at least one value");
  const auto src = resolve_dataset(rc.dataset);
  check_task(rc, src);
  const std::string pname = param == SweepParam::tau ? "tau"
                            : param == SweepParam::lambda ? "lambda" : "lr";
  std::vector<RunConfig> configs;
  for (double v : values) {
    auto c = rc;
    switch (param) {
      case SweepParam::tau:
        c.distill.fixed_tau = v;
        c.distill.adaptive = false;
        break;
      case SweepParam::lambda: c.distill.lambda = v; break;
      case SweepParam::lr: c.lr = v; break;
    }
    c.distill.validate();
    if (!(c.lr > 0.0)) throw ConfigError("learning rate must be > 0");
    c.out = rc.out / ("sweep_" + pname) / ("value_" + format_value(v));
    configs.push_back(std::move(c));
  }

  std::vector<SweepRow> rows(values.size());
  std::vector<std::exception_ptr> errors(values.size());
  std::mutex next_mutex;
  std::size_t next = 0;
  const auto worker = [&]() {
    for (;;) {
      std::size_t i = 0;
      {
        std::lock_guard lock(next_mutex);
        if (next >= configs.size()) return;
        i = next++;
      }
      try {
        rows[i] = {values[i], cmd_train(configs[i]).accuracy};
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const auto n_threads = std::max<std::size_t>(1, std::min(jobs, configs.size()));
  std::vector<std::thread> threads;
  for (std::size_t t = 1; t < n_threads; ++t) threads.emplace_back(worker);
  worker();
  for (auto& t : threads) t.join();
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  std::ostringstream csv;
  csv << "value,mean_acc,std\n";
  for (const auto& r : rows) {
    char buf[96];
    std::snprintf(buf, sizeof buf, "%s,%.6f,%.6f\n", format_value(r.value).c_str(),
                  r.accuracy.mean, r.accuracy.std);
    csv << buf;
  }
  write_file_atomic(rc.out / ("sweep_" + pname + "_summary.csv"), csv.str());
  return rows;
}

// ---------------------------------------------------------------------------
// cka
// ---------------------------------------------------------------------------

/// Layer-wise CKA between checkpoints on one dataset. Graph datasets use
/// per-graph mean embeddings; node datasets use node embeddings.
inline std::vector<CkaEntry> cmd_cka(const std::vector<fs::path>& checkpoints,
                                     const std::string& dataset, const fs::path& output,
                                     std::uint64_t seed = 0) {
  if (checkpoints.empty()) throw ConfigError("cka needs at least one checkpoint");
  for (const auto& c : checkpoints) {
    for (const char* ext : {".json", ".bin"}) {
      const auto p = fs::path(c).concat(ext);
      if (!fs::is_regular_file(p)) throw ConfigError("checkpoint file not found: " + p.string());
    }
  }
  const auto src = resolve_dataset(dataset);
  const auto data = load_task(src, RunConfig{}, seed);

  std::vector<RepresentationSet> sets;
  std::map<std::string, std::size_t> seen;
  for (const auto& c : checkpoints) {
    auto model = load_checkpoint(c);
    bgnn::detail::check_model(model, data);
    auto tag = to_string(model.config().arch);
    if (seen[tag]++ > 0) tag += "_" + std::to_string(seen[tag]);
    sets.push_back(data.task == TaskKind::graph
                       ? extract_layer_representations(model, data.graphs, tag)
                       : extract_node_representations(model, data.prepared, tag));
  }
  auto entries = cka_matrix(sets);
  write_file_atomic(output, cka_csv(entries));
  return entries;
}

// ---------------------------------------------------------------------------
// make-fixtures
// ---------------------------------------------------------------------------

enum class FixtureKind { sbm, tu_toy, json_toy };

inline FixtureKind parse_fixture_kind(const std::string& s) {
  if (s == "sbm") return FixtureKind::sbm;
  if (s == "tu_toy") return FixtureKind::tu_toy;
  if (s == "json_toy") return FixtureKind::json_toy;
  throw ConfigError("unknown fixture kind '" + s + "' (expected sbm, tu_toy or json_toy)");
}

/// Writes the fixture and returns the path of the main file or directory.
inline fs::path cmd_make_fixtures(FixtureKind kind, std::uint64_t seed, const fs::path& out) {
  switch (kind) {
    case FixtureKind::sbm: {
      const auto path = out / "sbm.json";
      save_json_bundle(make_sbm_dataset(sbm_hard(600), seed, seed, "sbm600"), path);
      return path;
    }
    case FixtureKind::tu_toy: {
      const auto dir = out / "TU_TOY";
      write_tu_dataset(dir, "TU_TOY", tu_toy_graphs());
      return dir;
    }
    case FixtureKind::json_toy: {
      const auto path = out / "json_toy.json";
      save_json_bundle(json_toy_dataset(), path);
      return path;
    }
  }
  throw ContractError("unhandled fixture kind");
}

}  // namespace bgnn::cli
