// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "errors.hpp"
#include "graph.hpp"
#include "io.hpp"
#include "ops.hpp"
#include "optim.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace bgnn {

enum class Architecture { gcn, sage, gat };
enum class TaskKind { node, graph };

inline std::string to_string(Architecture a) {
  switch (a) {
    case Architecture::gcn: return "gcn";
    case Architecture::sage: return "sage";
    case Architecture::gat: return "gat";
  }
  return "?";
}

inline Architecture parse_architecture(const std::string& s) {
  if (s == "gcn") return Architecture::gcn;
  if (s == "sage" || s == "graphsage") return Architecture::sage;
  if (s == "gat") return Architecture::gat;
  throw ConfigError("unknown architecture '" + s + "' (expected gcn, sage or gat)");
}

inline std::string to_string(TaskKind t) { return t == TaskKind::node ? "node" : "graph"; }

inline TaskKind parse_task(const std::string& s) {
  if (s == "node") return TaskKind::node;
  if (s == "graph") return TaskKind::graph;
  throw ConfigError("unknown task '" + s + "' (expected node or graph)");
}

inline std::string to_string(Activation a) {
  switch (a) {
    case Activation::relu: return "relu";
    case Activation::leaky_relu: return "leaky_relu";
    case Activation::elu: return "elu";
    case Activation::sigmoid: return "sigmoid";
    case Activation::tanh: return "tanh";
    case Activation::exp: return "exp";
    case Activation::log: return "log";
    case Activation::identity: return "identity";
  }
  return "?";
}

inline Activation parse_activation(const std::string& s) {
  for (auto a : {Activation::relu, Activation::leaky_relu, Activation::elu, Activation::sigmoid,
                 Activation::tanh, Activation::identity}) {
    if (to_string(a) == s) return a;
  }
  throw ConfigError("unknown activation '" + s + "'");
}

/// Conventional parameter for a hidden-layer activation.
inline double activation_param(Activation a) {
  return a == Activation::leaky_relu ? 0.2 : 1.0;
}

struct ModelConfig {
  Architecture arch = Architecture::gcn;
  TaskKind task = TaskKind::node;
  std::size_t in_dim = 0;
  std::size_t n_classes = 0;
  /// Width of GCN/GraphSage hidden layers. GAT uses heads * head_dim.
  std::size_t hidden_dim = 16;
  /// Message-passing layers. Training plans use 2; deeper stacks exist for
  /// the representation-similarity study.
  std::size_t n_layers = 2;
  Activation activation = Activation::relu;
  double dropout = 0.5;
  std::size_t heads = 8;
  std::size_t head_dim = 8;
  std::optional<std::size_t> fanout;  // GraphSage sampling, nullopt = all
  bool batch_norm = false;

  std::size_t hidden_width() const {
    return arch == Architecture::gat ? heads * head_dim : hidden_dim;
  }

  void validate() const {
    if (in_dim == 0 || n_classes == 0 || hidden_width() == 0 || n_layers == 0) {
      throw ConfigError("model dimensions must be positive (in_dim=" + std::to_string(in_dim) +
                        ", n_classes=" + std::to_string(n_classes) +
                        ", hidden=" + std::to_string(hidden_width()) + ")");
    }
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0,1)");
    if (fanout && *fanout == 0) throw ConfigError("fanout must be >= 1");
  }
};

/// Paper-default configuration for an architecture on a dataset.
inline ModelConfig default_config(Architecture arch, TaskKind task, std::size_t in_dim,
                                  std::size_t n_classes, std::size_t hidden = 16) {
  ModelConfig c;
  c.arch = arch;
  c.task = task;
  c.in_dim = in_dim;
  c.n_classes = n_classes;
  c.hidden_dim = hidden;
  c.activation = arch == Architecture::gat ? Activation::elu : Activation::relu;
  c.batch_norm = task == TaskKind::graph;
  return c;
}

// ---------------------------------------------------------------------------
// Graph structure consumed by the layers
// ---------------------------------------------------------------------------

/// Attention neighborhoods with self-loops, grouped by target node.
struct AttentionEdges {
  std::vector<std::size_t> source;
  std::vector<std::size_t> target;
  std::size_t n_nodes = 0;
};

inline AttentionEdges attention_edges(const std::vector<std::vector<std::size_t>>& adj) {
  AttentionEdges e;
  e.n_nodes = adj.size();
  for (std::size_t i = 0; i < adj.size(); ++i) {
    e.source.push_back(i);
    e.target.push_back(i);
    for (auto j : adj[i]) {
      e.source.push_back(j);
      e.target.push_back(i);
    }
  }
  return e;
}

/// Everything a forward pass needs about one graph or one batch of graphs.
struct PreparedGraph {
  Tensor features;
  std::vector<std::vector<std::size_t>> adjacency;
  SparseMatrix adj_norm;
  SparseMatrix mean_all;
  AttentionEdges attention;
  // Graph task only.
  std::vector<std::size_t> graph_ids;
  std::size_t n_graphs = 0;

  std::size_t n_nodes() const { return adjacency.size(); }
};

inline PreparedGraph prepare_graph(const Graph& g) {
  PreparedGraph p;
  p.features = g.features;
  p.adjacency = adjacency_lists(g);
  p.adj_norm = normalize_adjacency(g);
  p.mean_all = mean_aggregator(NeighborSample{p.adjacency});
  p.attention = attention_edges(p.adjacency);
  p.graph_ids.assign(g.n_nodes, 0);
  p.n_graphs = 1;
  return p;
}

inline PreparedGraph prepare_batch(const GraphBatch& b) {
  auto p = prepare_graph(b.merged);
  p.graph_ids = b.graph_ids;
  p.n_graphs = b.n_graphs;
  return p;
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

/// A_norm * h * W + b.
inline Tensor gcn_layer(Tape& tape, const Tensor& h, const SparseMatrix& adj_norm,
                        const Tensor& weight, const Tensor& bias) {
  if (h.cols() != weight.rows() || adj_norm.n_cols() != h.rows()) {
    throw ShapeError("gcn_layer: input " + shape_str(h.shape()) + ", weight " +
                     shape_str(weight.shape()) + ", adjacency " +
                     std::to_string(adj_norm.n_rows()) + "x" + std::to_string(adj_norm.n_cols()));
  }
  return add_row_bias(tape, spmm(tape, adj_norm, matmul(tape, h, weight)), bias);
}

/// [h_v || mean of sampled neighbors of v] * W + b. `aggregator` is the
/// row-normalized sample matrix, so an empty sample contributes zeros.
inline Tensor sage_layer(Tape& tape, const Tensor& h, const SparseMatrix& aggregator,
                         const Tensor& weight, const Tensor& bias) {
  if (weight.rows() != 2 * h.cols() || aggregator.n_cols() != h.rows()) {
    throw ShapeError("sage_layer: input " + shape_str(h.shape()) + ", weight " +
                     shape_str(weight.shape()));
  }
  const auto neigh = spmm(tape, aggregator, h);
  return linear(tape, concat_cols(tape, h, neigh), weight, bias);
}

struct GatHead {
  Tensor weight;         // in x out
  Tensor att_target;     // out x 1, scores W h_i of the aggregating node
  Tensor att_source;     // out x 1, scores W h_j of the neighbor
};

enum class HeadCombine { concat, average };

/// Multi-head graph attention. Per head, e_ij = LeakyReLU(a^T [W h_i || W h_j])
/// over j in N(i) and i itself, alpha = softmax over j, out_i = sum_j alpha_ij W h_j.
/// Heads are concatenated or averaged, then the bias is added. When
/// `attention` is non-null it receives one alpha vector per head, aligned
/// with edges.source/target.
inline Tensor gat_layer(Tape& tape, const Tensor& h, const AttentionEdges& edges,
                        const std::vector<GatHead>& heads, const Tensor& bias,
                        HeadCombine combine, double negative_slope = 0.2,
                        std::vector<Tensor>* attention = nullptr) {
  if (heads.empty()) throw ShapeError("gat_layer: no heads");
  if (edges.n_nodes != h.rows()) {
    throw ShapeError("gat_layer: " + std::to_string(edges.n_nodes) + " nodes in edges, input " +
                     shape_str(h.shape()));
  }
  Tensor combined;
  for (std::size_t k = 0; k < heads.size(); ++k) {
    const auto& hd = heads[k];
    if (hd.weight.rows() != h.cols() || hd.att_target.numel() != hd.weight.cols() ||
        hd.att_source.numel() != hd.weight.cols()) {
      throw ShapeError("gat_layer: head " + std::to_string(k) + " weight " +
                       shape_str(hd.weight.shape()) + " for input " + shape_str(h.shape()));
    }
    const auto wh = matmul(tape, h, hd.weight);
    const auto s_target = matmul(tape, wh, hd.att_target);
    const auto s_source = matmul(tape, wh, hd.att_source);
    const auto scores =
        leaky_relu(tape,
                   add(tape, gather_rows(tape, s_target, edges.target),
                       gather_rows(tape, s_source, edges.source)),
                   negative_slope);
    const auto alpha = segment_softmax(tape, scores, edges.target, edges.n_nodes);
    if (attention) attention->push_back(alpha);
    const auto messages = mul_rows(tape, gather_rows(tape, wh, edges.source), alpha);
    const auto out = segment_sum(tape, messages, edges.target, edges.n_nodes);
    if (k == 0) {
      combined = out;
    } else if (combine == HeadCombine::concat) {
      combined = concat_cols(tape, combined, out);
    } else {
      combined = add(tape, combined, out);
    }
  }
  if (combine == HeadCombine::average && heads.size() > 1) {
    combined = scale(tape, combined, 1.0 / static_cast<double>(heads.size()));
  }
  return add_row_bias(tape, combined, bias);
}

// ---------------------------------------------------------------------------
// Batch normalization with running statistics
// ---------------------------------------------------------------------------

struct BatchNorm {
  Tensor gamma;
  Tensor beta;
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  static BatchNorm make(std::size_t dim) {
    BatchNorm bn;
    bn.gamma = Tensor(Shape{dim}, std::vector<double>(dim, 1.0), true);
    bn.beta = Tensor::zeros({dim}, true);
    bn.running_mean.assign(dim, 0.0);
    bn.running_var.assign(dim, 1.0);
    return bn;
  }

  /// Training mode normalizes by batch statistics and updates the running
  /// estimates (unbiased variance); a batch of one falls back to the
  /// running statistics.
  Tensor forward(Tape& tape, const Tensor& x, bool training) {
    if (x.cols() != gamma.numel()) {
      throw ShapeError("batch_norm: input " + shape_str(x.shape()) + " for " +
                       std::to_string(gamma.numel()) + " features");
    }
    if (training && x.rows() == 1) {
      warn("batch_norm: batch of size 1 in training; using running statistics");
      training = false;
    }
    if (!training) {
      return batch_norm_inference(tape, x, gamma, beta, running_mean, running_var, eps);
    }
    BatchStats stats;
    auto y = batch_norm_train(tape, x, gamma, beta, eps, &stats);
    const double n = static_cast<double>(x.rows());
    for (std::size_t j = 0; j < running_mean.size(); ++j) {
      running_mean[j] = (1.0 - momentum) * running_mean[j] + momentum * stats.mean[j];
      running_var[j] = (1.0 - momentum) * running_var[j] + momentum * stats.var[j] * n / (n - 1.0);
    }
    return y;
  }
};

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

struct LayerParams {
  Tensor weight;               // GCN / GraphSage
  std::vector<GatHead> heads;  // GAT
  Tensor bias;
};

struct ForwardResult {
  Tensor logits;
  /// Post-activation node representations per message-passing layer; the
  /// last entry of a node-task model is the logits themselves.
  std::vector<Tensor> layer_outputs;
};

class GnnModel {
 public:
  GnnModel() = default;

  /// Glorot-uniform weights, zero biases; deterministic per seed.
  static GnnModel init(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    GnnModel m;
    m.config_ = config;
    m.seed_ = seed;
    Rng rng(mix_seed(seed, 0x1417));
    const auto glorot = [&](std::size_t fan_in, std::size_t fan_out, Shape shape) {
      const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
      std::vector<double> v(shape_numel(shape));
      for (auto& x : v) x = rng.uniform(-bound, bound);
      return Tensor(std::move(shape), std::move(v), true);
    };
    const auto L = config.n_layers;
    std::size_t in = config.in_dim;
    for (std::size_t l = 0; l < L; ++l) {
      const bool last = l + 1 == L;
      LayerParams lp;
      std::size_t out_width = 0;
      if (config.arch == Architecture::gat) {
        std::size_t per_head = config.head_dim;
        if (last) per_head = config.task == TaskKind::node ? config.n_classes : config.hidden_width();
        for (std::size_t k = 0; k < config.heads; ++k) {
          GatHead hd;
          hd.weight = glorot(in, per_head, {in, per_head});
          hd.att_target = glorot(per_head, 1, {per_head, 1});
          hd.att_source = glorot(per_head, 1, {per_head, 1});
          lp.heads.push_back(std::move(hd));
        }
        out_width = last ? per_head : per_head * config.heads;
      } else {
        out_width = (last && config.task == TaskKind::node) ? config.n_classes : config.hidden_dim;
        const auto rows = config.arch == Architecture::sage ? 2 * in : in;
        lp.weight = glorot(rows, out_width, {rows, out_width});
      }
      lp.bias = Tensor::zeros({out_width}, true);
      m.layers_.push_back(std::move(lp));
      if (!last && config.batch_norm) m.norms_.push_back(BatchNorm::make(out_width));
      in = out_width;
    }
    if (config.task == TaskKind::graph) {
      m.head_weight_ = glorot(in, config.n_classes, {in, config.n_classes});
      m.head_bias_ = Tensor::zeros({config.n_classes}, true);
    }
    return m;
  }

  const ModelConfig& config() const { return config_; }
  std::uint64_t seed() const { return seed_; }

  /// Trainable tensors in declaration order: per layer (weight | per head
  /// weight, att_target, att_source), bias; then batch-norm gamma/beta per
  /// intermediate layer; then the graph-task classifier head.
  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    for (const auto& lp : layers_) {
      if (lp.heads.empty()) {
        out.push_back(lp.weight);
      } else {
        for (const auto& hd : lp.heads) {
          out.push_back(hd.weight);
          out.push_back(hd.att_target);
          out.push_back(hd.att_source);
        }
      }
      out.push_back(lp.bias);
    }
    for (const auto& bn : norms_) {
      out.push_back(bn.gamma);
      out.push_back(bn.beta);
    }
    if (config_.task == TaskKind::graph) {
      out.push_back(head_weight_);
      out.push_back(head_bias_);
    }
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.numel();
    return n;
  }

  const std::vector<LayerParams>& layers() const { return layers_; }
  std::vector<BatchNorm>& norms() { return norms_; }
  const std::vector<BatchNorm>& norms() const { return norms_; }

  /// Independent deep copy (parameters and running statistics).
  GnnModel clone() const {
    GnnModel m = *this;
    for (auto& lp : m.layers_) {
      lp.weight = lp.weight.clone();
      lp.bias = lp.bias.clone();
      for (auto& hd : lp.heads) {
        hd.weight = hd.weight.clone();
        hd.att_target = hd.att_target.clone();
        hd.att_source = hd.att_source.clone();
      }
    }
    for (auto& bn : m.norms_) {
      bn.gamma = bn.gamma.clone();
      bn.beta = bn.beta.clone();
    }
    m.head_weight_ = head_weight_.clone();
    m.head_bias_ = head_bias_.clone();
    return m;
  }

  /// Flattened parameter values followed by batch-norm running statistics.
  std::vector<double> state_vector() const {
    std::vector<double> out;
    for (const auto& p : parameters()) out.insert(out.end(), p.values().begin(), p.values().end());
    for (const auto& bn : norms_) {
      out.insert(out.end(), bn.running_mean.begin(), bn.running_mean.end());
      out.insert(out.end(), bn.running_var.begin(), bn.running_var.end());
    }
    return out;
  }

  void load_state_vector(const std::vector<double>& state) {
    std::size_t pos = 0;
    const auto take = [&](std::span<double> dst) {
      if (pos + dst.size() > state.size()) throw FormatError("parameter file too short");
      std::copy_n(state.begin() + static_cast<std::ptrdiff_t>(pos), dst.size(), dst.begin());
      pos += dst.size();
    };
    for (auto p : parameters()) take(p.mutable_values());
    for (auto& bn : norms_) {
      take(bn.running_mean);
      take(bn.running_var);
    }
    if (pos != state.size()) throw FormatError("parameter file has trailing values");
  }

  /// Full forward pass. Dropout and GraphSage sampling are active only in
  /// training mode; evaluation uses full neighborhoods.
  ForwardResult forward(Tape& tape, const PreparedGraph& g, bool training, Rng& rng) {
    if (g.features.cols() != config_.in_dim || g.features.rows() != g.n_nodes()) {
      throw ShapeError("model expects " + std::to_string(config_.in_dim) +
                       " input features, got " + shape_str(g.features.shape()));
    }
    ForwardResult r;
    Tensor h = g.features;
    const auto L = layers_.size();
    for (std::size_t l = 0; l < L; ++l) {
      const bool last = l + 1 == L;
      const auto& lp = layers_[l];
      switch (config_.arch) {
        case Architecture::gcn:
          h = gcn_layer(tape, h, g.adj_norm, lp.weight, lp.bias);
          break;
        case Architecture::sage:
          if (training && config_.fanout) {
            const auto agg = mean_aggregator(sample_neighbors(g.adjacency, config_.fanout, rng));
            h = sage_layer(tape, h, agg, lp.weight, lp.bias);
          } else {
            h = sage_layer(tape, h, g.mean_all, lp.weight, lp.bias);
          }
          break;
        case Architecture::gat:
          h = gat_layer(tape, h, g.attention, lp.heads, lp.bias,
                        last ? HeadCombine::average : HeadCombine::concat);
          break;
      }
      if (!last || config_.task == TaskKind::graph) {
        h = elementwise(tape, {config_.activation, activation_param(config_.activation)}, h);
      }
      r.layer_outputs.push_back(h);
      if (!last) {
        h = dropout(tape, h, config_.dropout, training, rng);
        if (config_.batch_norm) h = norms_[l].forward(tape, h, training);
      }
    }
    if (config_.task == TaskKind::graph) {
      const auto pooled = segment_sum(tape, h, g.graph_ids, g.n_graphs);
      r.logits = linear(tape, pooled, head_weight_, head_bias_);
    } else {
      r.logits = h;
    }
    return r;
  }

  /// Eval-mode logits without recording gradients.
  Tensor predict(const PreparedGraph& g) {
    Tape tape;
    Rng rng(0);
    return forward(tape, g, false, rng).logits.detach();
  }

 private:
  ModelConfig config_;
  std::uint64_t seed_ = 0;
  std::vector<LayerParams> layers_;
  std::vector<BatchNorm> norms_;
  Tensor head_weight_;
  Tensor head_bias_;
};

// ---------------------------------------------------------------------------
// Checkpoints: <prefix>.json manifest + <prefix>.bin little-endian f64
// ---------------------------------------------------------------------------

inline nlohmann::json config_to_json(const ModelConfig& c) {
  nlohmann::json j;
  j["arch"] = to_string(c.arch);
  j["task"] = to_string(c.task);
  j["in_dim"] = c.in_dim;
  j["n_classes"] = c.n_classes;
  j["hidden_dim"] = c.hidden_dim;
  j["n_layers"] = c.n_layers;
  j["activation"] = to_string(c.activation);
  j["dropout"] = c.dropout;
  j["heads"] = c.heads;
  j["head_dim"] = c.head_dim;
  j["fanout"] = c.fanout ? nlohmann::json(*c.fanout) : nlohmann::json("all");
  j["batch_norm"] = c.batch_norm;
  return j;
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.arch = parse_architecture(j.at("arch").get<std::string>());
    c.task = parse_task(j.at("task").get<std::string>());
    c.in_dim = j.at("in_dim").get<std::size_t>();
    c.n_classes = j.at("n_classes").get<std::size_t>();
    c.hidden_dim = j.at("hidden_dim").get<std::size_t>();
    c.n_layers = j.at("n_layers").get<std::size_t>();
    c.activation = parse_activation(j.at("activation").get<std::string>());
    c.dropout = j.at("dropout").get<double>();
    c.heads = j.at("heads").get<std::size_t>();
    c.head_dim = j.at("head_dim").get<std::size_t>();
    if (j.at("fanout").is_number()) c.fanout = j.at("fanout").get<std::size_t>();
    c.batch_norm = j.at("batch_norm").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad model config: ") + e.what());
  }
  return c;
}

inline void save_checkpoint(const GnnModel& model, const std::filesystem::path& prefix) {
  nlohmann::json manifest;
  manifest["config"] = config_to_json(model.config());
  manifest["seed"] = model.seed();
  const auto state = model.state_vector();
  manifest["n_values"] = state.size();
  auto shapes = nlohmann::json::array();
  for (const auto& p : model.parameters()) shapes.push_back(p.shape());
  manifest["parameter_shapes"] = shapes;
  std::string bytes;
  bytes.reserve(state.size() * 8);
  for (double v : state) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) bytes.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
  }
  write_file_atomic(std::filesystem::path(prefix).concat(".bin"), bytes);
  write_file_atomic(std::filesystem::path(prefix).concat(".json"), manifest.dump(2) + "\n");
}

inline GnnModel load_checkpoint(const std::filesystem::path& prefix) {
  const auto json_path = std::filesystem::path(prefix).concat(".json");
  const auto bin_path = std::filesystem::path(prefix).concat(".bin");
  std::ifstream in(json_path);
  if (!in) throw IoError("missing checkpoint manifest " + json_path.string());
  nlohmann::json manifest;
  try {
    in >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(json_path.string() + ": " + e.what());
  }
  auto model = GnnModel::init(config_from_json(manifest.at("config")),
                              manifest.at("seed").get<std::uint64_t>());
  std::ifstream bin(bin_path, std::ios::binary);
  if (!bin) throw IoError("missing checkpoint values " + bin_path.string());
  std::vector<double> state;
  char bytes[8];
  while (bin.read(bytes, 8)) {
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= std::uint64_t(static_cast<unsigned char>(bytes[i])) << (8 * i);
    state.push_back(std::bit_cast<double>(bits));
  }
  model.load_state_vector(state);
  return model;
}

}  // namespace bgnn
