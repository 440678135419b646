// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "../distill.hpp"
#include "../errors.hpp"
#include "../models.hpp"
#include "../pipeline.hpp"

namespace bgnn::cli {

/// One `key = value` entry and where it came from, for error messages.
struct ConfigValue {
  std::string value;
  std::string origin;  // "file:line" or "--flag"
};

/// Flat key-value text with [sections]; keys are stored as "section.key".
/// Lines starting with '#' or ';' are comments.
class ConfigFile {
 public:
  static ConfigFile parse(const std::string& text, const std::string& source) {
    ConfigFile cfg;
    std::istringstream in(text);
    std::string line, section;
    std::size_t no = 0;
    while (std::getline(in, line)) {
      ++no;
      const auto where = source + ":" + std::to_string(no);
      const auto s = trim(line);
      if (s.empty() || s[0] == '#' || s[0] == ';') continue;
      if (s.front() == '[') {
        if (s.back() != ']' || s.size() < 3) throw ConfigError(where + ": malformed section header");
        section = trim(s.substr(1, s.size() - 2));
        continue;
      }
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value'");
      const auto key = trim(s.substr(0, eq));
      if (key.empty()) throw ConfigError(where + ": empty key");
      if (section.empty()) throw ConfigError(where + ": key '" + key + "' outside a section");
      const auto full = section + "." + key;
      if (cfg.values_.count(full)) throw ConfigError(where + ": duplicate key '" + full + "'");
      cfg.values_[full] = {trim(s.substr(eq + 1)), where};
    }
    return cfg;
  }

  static ConfigFile load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str(), path.string());
  }

  void set(const std::string& key, std::string value, std::string origin) {
    values_[key] = {std::move(value), std::move(origin)};
  }

  const std::map<std::string, ConfigValue>& values() const { return values_; }

  static std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return {};
    const auto b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
  }

 private:
  std::map<std::string, ConfigValue> values_;
};

enum class PlanKind { nokd, kd, bgnn, ensemble };

inline std::string to_string(PlanKind p) {
  switch (p) {
    case PlanKind::nokd: return "nokd";
    case PlanKind::kd: return "kd";
    case PlanKind::bgnn: return "bgnn";
    case PlanKind::ensemble: return "ensemble";
  }
  return "?";
}

/// Everything a run needs, validated before any work starts.
struct RunConfig {
  // [run]
  std::optional<TaskKind> task;  // derived from the dataset when unset
  std::string dataset = "sbm:small";
  PlanKind plan = PlanKind::bgnn;
  std::vector<std::uint64_t> seeds{0};
  std::filesystem::path out = "runs";
  Aggregation aggregation = Aggregation::mean;
  bool checkpoints = true;
  // [models]
  std::vector<Architecture> teachers{Architecture::gat};
  Architecture student = Architecture::gcn;
  std::size_t hidden = 16;
  std::size_t heads = 8;
  std::size_t head_dim = 8;
  double dropout = 0.5;
  std::size_t layers = 2;
  std::optional<std::size_t> fanout;
  std::optional<bool> batch_norm;  // task default when unset
  // [train]
  std::optional<std::size_t> epochs;  // task default when unset
  double lr = 0.01;
  double weight_decay = 5e-4;
  bool decoupled_weight_decay = false;
  std::size_t batch_size = 32;
  // [distill]
  DistillConfig distill;
  // [split]
  SplitRatios split{0.8, 0.1, 0.1};

  /// Models of the plan in training order.
  std::vector<Architecture> architectures() const {
    if (plan == PlanKind::nokd) return {student};
    auto a = teachers;
    a.push_back(student);
    return a;
  }

  Hyperparams hyperparams(TaskKind t) const {
    auto h = Hyperparams::defaults(t);
    if (epochs) h.epochs = *epochs;
    h.adam.lr = lr;
    h.adam.weight_decay = weight_decay;
    h.adam.decoupled = decoupled_weight_decay;
    h.batch_size = batch_size;
    return h;
  }

  ModelConfig model_config(Architecture arch, TaskKind t, std::size_t in_dim,
                           std::size_t n_classes) const {
    auto c = default_config(arch, t, in_dim, n_classes, hidden);
    c.heads = heads;
    c.head_dim = head_dim;
    c.dropout = dropout;
    c.n_layers = layers;
    c.fanout = fanout;
    if (batch_norm) c.batch_norm = *batch_norm;
    return c;
  }

  /// Distillation settings as the plan kind implies them.
  DistillConfig distill_for_plan() const {
    auto d = distill;
    if (plan == PlanKind::kd) {
      d.adaptive = false;
      d.boosting = false;
    }
    return d;
  }
};

namespace detail {

[[noreturn]] inline void bad_value(const ConfigValue& v, const std::string& key,
                                   const std::string& why) {
  throw ConfigError(v.origin + ": invalid value '" + v.value + "' for " + key + ": " + why);
}

inline double to_double(const ConfigValue& v, const std::string& key) {
  double out = 0.0;
  const auto* b = v.value.data();
  const auto* e = b + v.value.size();
  const auto r = std::from_chars(b, e, out);
  if (r.ec != std::errc() || r.ptr != e) bad_value(v, key, "expected a number");
  return out;
}

inline std::uint64_t to_u64(const std::string& s, const ConfigValue& v, const std::string& key) {
  std::uint64_t out = 0;
  const auto* b = s.data();
  const auto* e = b + s.size();
  const auto r = std::from_chars(b, e, out);
  if (s.empty() || r.ec != std::errc() || r.ptr != e) {
    bad_value(v, key, "expected a non-negative integer");
  }
  return out;
}

inline std::size_t to_size(const ConfigValue& v, const std::string& key) {
  return static_cast<std::size_t>(to_u64(v.value, v, key));
}

inline bool to_bool(const ConfigValue& v, const std::string& key) {
  if (v.value == "true" || v.value == "yes" || v.value == "on" || v.value == "1") return true;
  if (v.value == "false" || v.value == "no" || v.value == "off" || v.value == "0") return false;
  bad_value(v, key, "expected true or false");
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, ',')) {
    item = ConfigFile::trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

}  // namespace detail

/// Seeds as a comma list with optional inclusive ranges: "0,3,5-7".
inline std::vector<std::uint64_t> parse_seeds(const ConfigValue& v, const std::string& key) {
  std::vector<std::uint64_t> out;
  for (const auto& item : detail::split_list(v.value)) {
    const auto dash = item.find('-');
    if (dash == std::string::npos) {
      out.push_back(detail::to_u64(item, v, key));
      continue;
    }
    const auto lo = detail::to_u64(ConfigFile::trim(item.substr(0, dash)), v, key);
    const auto hi = detail::to_u64(ConfigFile::trim(item.substr(dash + 1)), v, key);
    if (hi < lo) detail::bad_value(v, key, "empty seed range");
    for (auto s = lo; s <= hi; ++s) out.push_back(s);
  }
  if (out.empty()) detail::bad_value(v, key, "no seeds given");
  return out;
}

/// Builds and validates a RunConfig; unknown keys are rejected with their
/// origin.
inline RunConfig build_run_config(const ConfigFile& file) {
  RunConfig rc;
  for (const auto& [key, v] : file.values()) {
    try {
      if (key == "run.task") {
        rc.task = parse_task(v.value);
      } else if (key == "run.dataset") {
        if (v.value.empty()) detail::bad_value(v, key, "empty dataset");
        rc.dataset = v.value;
      } else if (key == "run.plan") {
        if (v.value == "nokd") rc.plan = PlanKind::nokd;
        else if (v.value == "kd") rc.plan = PlanKind::kd;
        else if (v.value == "bgnn") rc.plan = PlanKind::bgnn;
        else if (v.value == "ensemble") rc.plan = PlanKind::ensemble;
        else detail::bad_value(v, key, "expected nokd, kd, bgnn or ensemble");
      } else if (key == "run.seeds") {
        rc.seeds = parse_seeds(v, key);
      } else if (key == "run.out") {
        if (v.value.empty()) detail::bad_value(v, key, "empty output directory");
        rc.out = v.value;
      } else if (key == "run.aggregation") {
        if (v.value == "mean") rc.aggregation = Aggregation::mean;
        else if (v.value == "top5of10") rc.aggregation = Aggregation::top5of10;
        else detail::bad_value(v, key, "expected mean or top5of10");
      } else if (key == "run.checkpoints") {
        rc.checkpoints = detail::to_bool(v, key);
      } else if (key == "models.teachers") {
        rc.teachers.clear();
        for (const auto& a : detail::split_list(v.value)) rc.teachers.push_back(parse_architecture(a));
      } else if (key == "models.student") {
        rc.student = parse_architecture(v.value);
      } else if (key == "models.hidden") {
        rc.hidden = detail::to_size(v, key);
      } else if (key == "models.heads") {
        rc.heads = detail::to_size(v, key);
      } else if (key == "models.head_dim") {
        rc.head_dim = detail::to_size(v, key);
      } else if (key == "models.dropout") {
        rc.dropout = detail::to_double(v, key);
      } else if (key == "models.layers") {
        rc.layers = detail::to_size(v, key);
      } else if (key == "models.fanout") {
        if (v.value == "all") rc.fanout.reset();
        else rc.fanout = detail::to_size(v, key);
      } else if (key == "models.batch_norm") {
        if (v.value == "auto") rc.batch_norm.reset();
        else rc.batch_norm = detail::to_bool(v, key);
      } else if (key == "train.epochs") {
        rc.epochs = detail::to_size(v, key);
      } else if (key == "train.lr") {
        rc.lr = detail::to_double(v, key);
      } else if (key == "train.weight_decay") {
        rc.weight_decay = detail::to_double(v, key);
      } else if (key == "train.decoupled_weight_decay") {
        rc.decoupled_weight_decay = detail::to_bool(v, key);
      } else if (key == "train.batch_size") {
        rc.batch_size = detail::to_size(v, key);
      } else if (key == "distill.lambda") {
        rc.distill.lambda = detail::to_double(v, key);
        if (!(rc.distill.lambda >= 0.0)) detail::bad_value(v, key, "must be >= 0");
      } else if (key == "distill.boosting") {
        rc.distill.boosting = detail::to_bool(v, key);
      } else if (key == "distill.adaptive_temperature") {
        rc.distill.adaptive = detail::to_bool(v, key);
      } else if (key == "distill.tau_min") {
        rc.distill.temperature.tau_min = detail::to_double(v, key);
      } else if (key == "distill.tau_max") {
        rc.distill.temperature.tau_max = detail::to_double(v, key);
      } else if (key == "distill.fixed_tau") {
        rc.distill.fixed_tau = detail::to_double(v, key);
        if (!(rc.distill.fixed_tau > 0.0)) detail::bad_value(v, key, "must be > 0");
      } else if (key == "distill.temperature_hidden") {
        rc.distill.temperature.hidden = detail::to_size(v, key);
      } else if (key == "distill.variant") {
        if (v.value == "auto") rc.distill.variant.reset();
        else if (v.value == "entropy_only") rc.distill.variant = TemperatureVariant::entropy_only;
        else if (v.value == "concat") rc.distill.variant = TemperatureVariant::concat;
        else detail::bad_value(v, key, "expected auto, entropy_only or concat");
      } else if (key == "distill.kd_scope") {
        rc.distill.scope = parse_kd_scope(v.value);
      } else if (key == "distill.tau_squared") {
        rc.distill.tau_squared = detail::to_bool(v, key);
      } else if (key == "split.train") {
        rc.split.train = detail::to_double(v, key);
      } else if (key == "split.val") {
        rc.split.val = detail::to_double(v, key);
      } else if (key == "split.test") {
        rc.split.test = detail::to_double(v, key);
      } else {
        throw ConfigError(v.origin + ": unknown key '" + key + "'");
      }
    } catch (const ConfigError& e) {
      const std::string msg = e.what();
      if (msg.rfind(v.origin, 0) == 0) throw;
      throw ConfigError(v.origin + ": " + msg);
    }
  }

  const auto fail = [](const std::string& m) { throw ConfigError("config: " + m); };
  if (rc.plan != PlanKind::nokd && rc.teachers.empty()) fail("plan needs at least one teacher");
  if (rc.hidden == 0 || rc.heads == 0 || rc.head_dim == 0) fail("model widths must be >= 1");
  if (rc.layers == 0) fail("models.layers must be >= 1");
  if (rc.layers != 2 && rc.plan != PlanKind::nokd) {
    fail("models.layers other than 2 is only supported with plan nokd");
  }
  if (!(rc.dropout >= 0.0 && rc.dropout < 1.0)) fail("dropout must lie in [0,1)");
  if (rc.fanout && *rc.fanout == 0) fail("fanout must be >= 1 or all");
  if (!(rc.lr > 0.0)) fail("learning rate must be > 0");
  if (rc.weight_decay < 0.0) fail("weight decay must be >= 0");
  if (rc.batch_size == 0) fail("batch size must be >= 1");
  for (double r : {rc.split.train, rc.split.val, rc.split.test}) {
    if (r < 0.0) fail("split ratios must be >= 0");
  }
  if (rc.split.train + rc.split.val + rc.split.test > 1.0 + 1e-9) fail("split ratios exceed 1");
  if (!(rc.split.train > 0.0)) fail("split.train must be > 0");
  rc.distill.validate();
  return rc;
}

}  // namespace bgnn::cli
