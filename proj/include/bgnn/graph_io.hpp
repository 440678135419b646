// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "errors.hpp"
#include "graph.hpp"
#include "io.hpp"

namespace bgnn {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// TU plain-text format
// ---------------------------------------------------------------------------

struct TuDataset {
  std::string name;
  std::vector<Graph> graphs;  // graph_label set on each
  std::size_t n_classes = 0;
  bool has_node_labels = false;
  std::size_t n_indicator_lines = 0;
  std::size_t n_edge_lines = 0;

  std::vector<std::size_t> labels() const {
    std::vector<std::size_t> out;
    for (const auto& g : graphs) out.push_back(g.graph_label.value_or(0));
    return out;
  }
};

namespace detail {

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

/// Non-empty lines with their 1-based line numbers.
inline std::vector<std::pair<std::size_t, std::string>> read_lines(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::pair<std::size_t, std::string>> out;
  std::string line;
  std::size_t no = 0;
  while (std::getline(in, line)) {
    ++no;
    auto t = trim(line);
    if (!t.empty()) out.emplace_back(no, std::move(t));
  }
  return out;
}

inline long long parse_int(const std::string& tok, const fs::path& file, std::size_t line) {
  try {
    std::size_t used = 0;
    const auto v = std::stoll(trim(tok), &used);
    if (used != trim(tok).size()) throw std::invalid_argument(tok);
    return v;
  } catch (const std::exception&) {
    throw FormatError(file.filename().string() + ":" + std::to_string(line) +
                      ": expected an integer, got '" + tok + "'");
  }
}

}  // namespace detail

/// Reads <name>_A.txt, <name>_graph_indicator.txt, <name>_graph_labels.txt
/// and, when present, <name>_node_labels.txt. Node ids in the files are
/// 1-based and global; each graph is renumbered from 0. Node labels become
/// one-hot features, graph labels are remapped to 0..C-1 in sorted order.
inline TuDataset load_tu_dataset(const fs::path& dir, const std::string& name) {
  const auto file = [&](const char* suffix) { return dir / (name + suffix); };
  for (const char* required : {"_A.txt", "_graph_indicator.txt", "_graph_labels.txt"}) {
    if (!fs::exists(file(required))) {
      throw IoError("missing TU file " + file(required).string());
    }
  }
  TuDataset ds;
  ds.name = name;

  const auto ind_path = file("_graph_indicator.txt");
  const auto ind_lines = detail::read_lines(ind_path);
  ds.n_indicator_lines = ind_lines.size();
  std::vector<std::size_t> node_graph(ind_lines.size());
  std::size_t n_graphs = 0;
  for (std::size_t i = 0; i < ind_lines.size(); ++i) {
    const auto g = detail::parse_int(ind_lines[i].second, ind_path, ind_lines[i].first);
    if (g < 1) throw FormatError(ind_path.filename().string() + ":" +
                                 std::to_string(ind_lines[i].first) + ": graph id must be >= 1");
    node_graph[i] = static_cast<std::size_t>(g - 1);
    n_graphs = std::max(n_graphs, node_graph[i] + 1);
  }

  // Local numbering in order of appearance inside each graph.
  std::vector<std::size_t> local(node_graph.size());
  std::vector<std::size_t> counts(n_graphs, 0);
  for (std::size_t i = 0; i < node_graph.size(); ++i) local[i] = counts[node_graph[i]]++;

  const auto lab_path = file("_graph_labels.txt");
  const auto lab_lines = detail::read_lines(lab_path);
  if (lab_lines.size() != n_graphs) {
    throw FormatError(lab_path.filename().string() + ": " + std::to_string(lab_lines.size()) +
                      " labels for " + std::to_string(n_graphs) + " graphs");
  }
  std::vector<long long> raw_labels;
  for (const auto& [no, text] : lab_lines) raw_labels.push_back(detail::parse_int(text, lab_path, no));
  std::set<long long> distinct(raw_labels.begin(), raw_labels.end());
  std::map<long long, std::size_t> remap;
  for (auto v : distinct) remap.emplace(v, remap.size());
  ds.n_classes = remap.size();

  std::vector<std::vector<std::pair<std::size_t, std::size_t>>> pairs(n_graphs);
  const auto a_path = file("_A.txt");
  const auto a_lines = detail::read_lines(a_path);
  ds.n_edge_lines = a_lines.size();
  for (const auto& [no, text] : a_lines) {
    const auto comma = text.find(',');
    if (comma == std::string::npos) {
      throw FormatError(a_path.filename().string() + ":" + std::to_string(no) +
                        ": expected 'src, dst'");
    }
    const auto a = detail::parse_int(text.substr(0, comma), a_path, no);
    const auto b = detail::parse_int(text.substr(comma + 1), a_path, no);
    const auto n = static_cast<long long>(node_graph.size());
    if (a < 1 || b < 1 || a > n || b > n) {
      throw FormatError(a_path.filename().string() + ":" + std::to_string(no) +
                        ": node id outside 1.." + std::to_string(n));
    }
    const auto ia = static_cast<std::size_t>(a - 1), ib = static_cast<std::size_t>(b - 1);
    if (node_graph[ia] != node_graph[ib]) {
      throw FormatError(a_path.filename().string() + ":" + std::to_string(no) +
                        ": edge joins nodes of graphs " + std::to_string(node_graph[ia] + 1) +
                        " and " + std::to_string(node_graph[ib] + 1));
    }
    pairs[node_graph[ia]].emplace_back(local[ia], local[ib]);
  }

  std::vector<std::size_t> node_label_idx;
  std::size_t n_node_label_values = 0;
  if (fs::exists(file("_node_labels.txt"))) {
    const auto nl_path = file("_node_labels.txt");
    const auto nl_lines = detail::read_lines(nl_path);
    if (nl_lines.size() != node_graph.size()) {
      throw FormatError(nl_path.filename().string() + ": " + std::to_string(nl_lines.size()) +
                        " node labels for " + std::to_string(node_graph.size()) + " nodes");
    }
    std::vector<long long> raw;
    for (const auto& [no, text] : nl_lines) raw.push_back(detail::parse_int(text, nl_path, no));
    std::set<long long> values(raw.begin(), raw.end());
    std::map<long long, std::size_t> nremap;
    for (auto v : values) nremap.emplace(v, nremap.size());
    n_node_label_values = nremap.size();
    for (auto v : raw) node_label_idx.push_back(nremap.at(v));
    ds.has_node_labels = true;
  }

  ds.graphs.resize(n_graphs);
  for (std::size_t k = 0; k < n_graphs; ++k) {
    auto& g = ds.graphs[k];
    g.n_nodes = counts[k];
    g.edges = undirected_edges(g.n_nodes, pairs[k]);
    g.graph_label = remap.at(raw_labels[k]);
    g.features = Tensor::zeros({g.n_nodes, n_node_label_values});
  }
  if (ds.has_node_labels) {
    for (std::size_t i = 0; i < node_graph.size(); ++i) {
      auto& g = ds.graphs[node_graph[i]];
      g.features.at(local[i], node_label_idx[i]) = 1.0;
      g.node_labels.resize(g.n_nodes);
      g.node_labels[local[i]] = node_label_idx[i];
    }
  }
  return ds;
}

/// Writes graphs in TU format. Node labels, when every graph has them, go to
/// <name>_node_labels.txt; graph labels are written as stored.
inline void write_tu_dataset(const fs::path& dir, const std::string& name,
                             const std::vector<Graph>& graphs) {
  fs::create_directories(dir);
  std::ofstream a(dir / (name + "_A.txt"));
  std::ofstream ind(dir / (name + "_graph_indicator.txt"));
  std::ofstream lab(dir / (name + "_graph_labels.txt"));
  if (!a || !ind || !lab) throw IoError("cannot write TU files under " + dir.string());
  const bool node_labels = std::all_of(graphs.begin(), graphs.end(), [](const Graph& g) {
    return g.node_labels.size() == g.n_nodes;
  });
  std::ofstream nl;
  if (node_labels) nl.open(dir / (name + "_node_labels.txt"));
  std::size_t base = 1;
  for (std::size_t k = 0; k < graphs.size(); ++k) {
    const auto& g = graphs[k];
    for (std::size_t v = 0; v < g.n_nodes; ++v) {
      ind << (k + 1) << '\n';
      if (node_labels) nl << g.node_labels[v] << '\n';
    }
    for (const auto& e : g.edges) a << (e.src + base) << ", " << (e.dst + base) << '\n';
    lab << g.graph_label.value_or(0) << '\n';
    base += g.n_nodes;
  }
}

// ---------------------------------------------------------------------------
// JSON node-classification bundle
// ---------------------------------------------------------------------------

struct NodeDataset {
  std::string name;
  Graph graph;  // node_labels and masks populated
  std::size_t n_classes = 0;
};

namespace detail {

inline const nlohmann::json& require_key(const nlohmann::json& j, const char* key) {
  if (!j.contains(key)) throw FormatError(std::string("bundle is missing key '") + key + "'");
  return j.at(key);
}

inline std::vector<bool> index_mask(const nlohmann::json& j, const char* key, std::size_t n) {
  std::vector<bool> mask(n, false);
  for (const auto& v : require_key(j, key)) {
    const auto i = v.get<long long>();
    if (i < 0 || static_cast<std::size_t>(i) >= n) {
      throw FormatError(std::string("index ") + std::to_string(i) + " in '" + key +
                        "' outside 0.." + std::to_string(n - 1));
    }
    mask[static_cast<std::size_t>(i)] = true;
  }
  return mask;
}

}  // namespace detail

inline NodeDataset parse_json_bundle(const nlohmann::json& j) {
  NodeDataset ds;
  ds.name = j.value("name", std::string{});
  auto& g = ds.graph;
  try {
    g.n_nodes = detail::require_key(j, "n_nodes").get<std::size_t>();
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    for (const auto& e : detail::require_key(j, "edges")) {
      if (!e.is_array() || e.size() != 2) throw FormatError("'edges' entries must be [src, dst]");
      const auto a = e[0].get<long long>(), b = e[1].get<long long>();
      if (a < 0 || b < 0 || static_cast<std::size_t>(a) >= g.n_nodes ||
          static_cast<std::size_t>(b) >= g.n_nodes) {
        throw FormatError("'edges' entry [" + std::to_string(a) + "," + std::to_string(b) +
                          "] outside 0.." + std::to_string(g.n_nodes - 1));
      }
      pairs.emplace_back(static_cast<std::size_t>(a), static_cast<std::size_t>(b));
    }
    g.edges = undirected_edges(g.n_nodes, pairs);

    const auto& f = detail::require_key(j, "features");
    if (f.is_object()) {
      const auto shape = detail::require_key(f, "shape").get<std::vector<std::size_t>>();
      if (shape.size() != 2 || shape[0] != g.n_nodes) {
        throw FormatError("'features.shape' must be [n_nodes, dim]");
      }
      const auto& idx = detail::require_key(f, "indices");
      const auto& val = detail::require_key(f, "values");
      if (idx.size() != val.size()) throw FormatError("'features' indices/values length mismatch");
      g.features = Tensor::zeros({shape[0], shape[1]});
      for (std::size_t k = 0; k < idx.size(); ++k) {
        const auto r = idx[k].at(0).get<std::size_t>(), c = idx[k].at(1).get<std::size_t>();
        if (r >= shape[0] || c >= shape[1]) throw FormatError("'features' index out of range");
        g.features.at(r, c) = val[k].get<double>();
      }
    } else {
      if (f.size() != g.n_nodes) throw FormatError("'features' must have n_nodes rows");
      const std::size_t dim = g.n_nodes ? f[0].size() : 0;
      std::vector<double> v;
      v.reserve(g.n_nodes * dim);
      for (const auto& row : f) {
        if (row.size() != dim) throw FormatError("'features' rows must share one width");
        for (const auto& x : row) v.push_back(x.get<double>());
      }
      g.features = Tensor({g.n_nodes, dim}, std::move(v));
    }

    const auto& labels = detail::require_key(j, "labels");
    if (labels.size() != g.n_nodes) throw FormatError("'labels' must have n_nodes entries");
    for (const auto& l : labels) {
      const auto v = l.get<long long>();
      if (v < 0) throw FormatError("'labels' entries must be >= 0");
      g.node_labels.push_back(static_cast<std::size_t>(v));
      ds.n_classes = std::max(ds.n_classes, static_cast<std::size_t>(v) + 1);
    }
    g.train_mask = detail::index_mask(j, "train_idx", g.n_nodes);
    g.val_mask = detail::index_mask(j, "val_idx", g.n_nodes);
    g.test_mask = detail::index_mask(j, "test_idx", g.n_nodes);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed bundle: ") + e.what());
  }
  try {
    g.validate();
  } catch (const std::exception& e) {
    throw FormatError(std::string("invalid bundle: ") + e.what());
  }
  return ds;
}

inline NodeDataset load_json_bundle(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open bundle " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  auto ds = parse_json_bundle(j);
  if (ds.name.empty()) ds.name = path.stem().string();
  return ds;
}

/// Canonical JSON form: each undirected edge once as [lo, hi] in sorted
/// order, dense features, sorted index lists.
inline nlohmann::json to_json_bundle(const NodeDataset& ds) {
  const auto& g = ds.graph;
  nlohmann::json j;
  if (!ds.name.empty()) j["name"] = ds.name;
  j["n_nodes"] = g.n_nodes;
  auto edges = nlohmann::json::array();
  for (const auto& e : g.edges)
    if (e.src < e.dst) edges.push_back({e.src, e.dst});
  j["edges"] = std::move(edges);
  auto feats = nlohmann::json::array();
  for (std::size_t v = 0; v < g.n_nodes; ++v) {
    auto row = nlohmann::json::array();
    for (std::size_t c = 0; c < g.feature_dim(); ++c) row.push_back(g.features.at(v, c));
    feats.push_back(std::move(row));
  }
  j["features"] = std::move(feats);
  j["labels"] = g.node_labels;
  j["train_idx"] = mask_indices(g.train_mask);
  j["val_idx"] = mask_indices(g.val_mask);
  j["test_idx"] = mask_indices(g.test_mask);
  return j;
}

inline void save_json_bundle(const NodeDataset& ds, const fs::path& path) {
  write_file_atomic(path, to_json_bundle(ds).dump() + "\n");
}

struct KnownStatistics {
  std::size_t n_nodes, n_undirected_edges, n_features, n_classes;
};

/// Published sizes of the standard node-classification benchmarks.
inline std::optional<KnownStatistics> known_statistics(std::string name) {
  std::transform(name.begin(), name.end(), name.begin(), ::tolower);
  static const std::map<std::string, KnownStatistics> table = {
      {"cora", {2485, 5069, 1433, 7}},
      {"citeseer", {2110, 3668, 3703, 6}},
      {"pubmed", {19717, 44324, 500, 3}},
      {"a-computers", {13381, 245778, 767, 10}},
  };
  const auto it = table.find(name);
  if (it == table.end()) return std::nullopt;
  return it->second;
}

/// Compares a loaded bundle with the published statistics for its name and
/// returns one message per mismatching field (empty when all agree or the
/// name is unknown).
inline std::vector<std::string> check_known_statistics(const NodeDataset& ds) {
  std::vector<std::string> issues;
  const auto ref = known_statistics(ds.name);
  if (!ref) return issues;
  const auto cmp = [&](const char* what, std::size_t got, std::size_t want) {
    if (got != want) {
      issues.push_back(ds.name + ": " + what + " " + std::to_string(got) + " (reference " +
                       std::to_string(want) + ")");
    }
  };
  cmp("nodes", ds.graph.n_nodes, ref->n_nodes);
  cmp("undirected edges", ds.graph.n_undirected_edges(), ref->n_undirected_edges);
  cmp("features", ds.graph.feature_dim(), ref->n_features);
  cmp("classes", ds.n_classes, ref->n_classes);
  return issues;
}

}  // namespace bgnn
