#pragma once

// Edge-oriented message passing network. Each block first updates node
// features with an edge-attention weighted sum over incoming neighbours and
// the node itself (PDN-Conv), then refreshes every edge from its previous
// features, both updated endpoints and their distance & similarity vector.
// A classifier maps the final edge features to association probabilities.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "celltrack/adam.hpp"
#include "celltrack/autodiff.hpp"
#include "celltrack/dml.hpp"
#include "celltrack/graph.hpp"
#include "celltrack/mlp.hpp"

namespace celltrack {

struct GnnConfig {
  std::size_t d_dml = 128;
  std::size_t d_st = 13;
  std::size_t d_v = 32;
  std::size_t d_e = 64;
  std::size_t node_hidden = 64;  // node homogenizer
  std::size_t edge_hidden = 64;  // edge-init homogenizer and edge encoder
  std::size_t pdn_hidden = 32;   // attention MLP
  int blocks = 6;
  std::vector<std::size_t> classifier_widths{64, 32};
};

inline nlohmann::json to_json(const GnnConfig& c) {
  return {{"d_dml", c.d_dml},           {"d_st", c.d_st},       {"d_v", c.d_v},
          {"d_e", c.d_e},               {"node_hidden", c.node_hidden}, {"edge_hidden", c.edge_hidden},
          {"pdn_hidden", c.pdn_hidden}, {"blocks", c.blocks},   {"classifier_widths", c.classifier_widths}};
}

inline GnnConfig gnn_config_from_json(const nlohmann::json& j) {
  GnnConfig c;
  c.d_dml = j.value("d_dml", c.d_dml);
  c.d_st = j.value("d_st", c.d_st);
  c.d_v = j.value("d_v", c.d_v);
  c.d_e = j.value("d_e", c.d_e);
  c.node_hidden = j.value("node_hidden", c.node_hidden);
  c.edge_hidden = j.value("edge_hidden", c.edge_hidden);
  c.pdn_hidden = j.value("pdn_hidden", c.pdn_hidden);
  c.blocks = j.value("blocks", c.blocks);
  c.classifier_widths = j.value("classifier_widths", c.classifier_widths);
  return c;
}

struct EpMpnnBlock {
  MlpParams f_edge_pdn;  // d_E -> 1, sigmoid output: attention weight
  MlpParams f_node_pdn;  // d_V -> d_V
  MlpParams f_edge_ee;   // d_E + 2 d_V + (d_V + 1) -> d_E
};

struct GnnModel {
  GnnConfig config;
  Homogenizers homogenizers;
  std::vector<EpMpnnBlock> blocks;
  MlpParams classifier;

  std::vector<ad::Parameter*> parameters() {
    std::vector<ad::Parameter*> out;
    auto add = [&out](MlpParams& m) {
      auto p = m.parameters();
      out.insert(out.end(), p.begin(), p.end());
    };
    add(homogenizers.node);
    add(homogenizers.edge);
    for (auto& b : blocks) {
      add(b.f_edge_pdn);
      add(b.f_node_pdn);
      add(b.f_edge_ee);
    }
    add(classifier);
    return out;
  }

  std::vector<const ad::Parameter*> parameters() const {
    auto mut = const_cast<GnnModel*>(this)->parameters();
    return {mut.begin(), mut.end()};
  }
};

inline GnnModel make_gnn(const GnnConfig& cfg, std::mt19937_64& rng) {
  if (cfg.blocks < 1) throw ConfigError("make_gnn: need at least one block");
  if (cfg.classifier_widths.empty()) throw ConfigError("make_gnn: classifier needs hidden layers");
  using A = Activation;
  GnnModel m;
  m.config = cfg;
  m.homogenizers.node =
      make_mlp("homogenizer.node", {cfg.d_dml + cfg.d_st, cfg.node_hidden, cfg.d_v}, {A::ReLU, A::None}, rng);
  m.homogenizers.edge = make_mlp("homogenizer.edge", {cfg.d_v + 1, cfg.edge_hidden, cfg.d_e}, {A::ReLU, A::None}, rng);
  for (int l = 0; l < cfg.blocks; ++l) {
    const std::string p = "block" + std::to_string(l) + ".";
    EpMpnnBlock b;
    b.f_edge_pdn = make_mlp(p + "f_edge_pdn", {cfg.d_e, cfg.pdn_hidden, 1}, {A::ReLU, A::Sigmoid}, rng);
    b.f_node_pdn = make_mlp(p + "f_node_pdn", {cfg.d_v, cfg.d_v, cfg.d_v}, {A::ReLU, A::None}, rng);
    b.f_edge_ee = make_mlp(p + "f_edge_ee", {cfg.d_e + 3 * cfg.d_v + 1, cfg.edge_hidden, cfg.d_e}, {A::ReLU, A::None}, rng);
    m.blocks.push_back(std::move(b));
  }
  std::vector<std::size_t> dims{cfg.d_e};
  std::vector<A> acts;
  for (std::size_t w : cfg.classifier_widths) {
    dims.push_back(w);
    acts.push_back(A::ReLU);
  }
  dims.push_back(1);
  acts.push_back(A::Sigmoid);
  m.classifier = make_mlp("classifier", dims, acts, rng);
  return m;
}

/// x_i' = f_node(x_i) + sum_{j -> i} f_edge(z_ji) f_node(x_j); the self
/// term carries weight exactly 1.
inline ad::Var pdn_conv(ad::Tape& tape, const EpMpnnBlock& block, ad::Var x_prev, ad::Var z_cur, const TrackedGraph& g) {
  ad::Var mapped = mlp_forward(tape, block.f_node_pdn, x_prev);
  if (g.num_edges() == 0) return mapped;
  ad::Var weights = mlp_forward(tape, block.f_edge_pdn, z_cur);
  ad::Var messages = ad::row_scale(ad::gather_rows(mapped, g.src), weights);
  return ad::add(mapped, ad::scatter_add_rows(messages, g.dst, g.num_nodes));
}

/// z_ij' = f_ee([z_ij, x_i, x_j, ds(x_i, x_j)]) with i the source.
inline ad::Var edge_encode(ad::Tape& tape, const EpMpnnBlock& block, ad::Var z_prev, ad::Var x_new, const TrackedGraph& g) {
  ad::Var xs = ad::gather_rows(x_new, g.src);
  ad::Var xd = ad::gather_rows(x_new, g.dst);
  return mlp_forward(tape, block.f_edge_ee, ad::concat_cols({z_prev, xs, xd, ds_rows(xs, xd)}));
}

struct GnnOutput {
  ad::Var logits;  // |E| x 1, pre-sigmoid classifier output
  ad::Var probs;   // |E| x 1
};

/// Runs blocks [first_block, L) and the classifier from given node and edge
/// features.
inline GnnOutput gnn_forward_from(ad::Tape& tape, const GnnModel& model, const TrackedGraph& g, ad::Var x, ad::Var z,
                                  std::size_t first_block) {
  for (std::size_t l = first_block; l < model.blocks.size(); ++l) {
    x = pdn_conv(tape, model.blocks[l], x, z, g);
    z = edge_encode(tape, model.blocks[l], z, x, g);
  }
  // Classifier with the final sigmoid split off so logits stay observable.
  ad::Var h = z;
  const auto& layers = model.classifier.layers;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    h = ad::add_row(ad::matmul(h, tape.parameter(layers[i].weight)), tape.parameter(layers[i].bias));
    if (i + 1 < layers.size() && layers[i].activation == Activation::ReLU) h = ad::relu(h);
  }
  return {h, ad::sigmoid(h)};
}

inline GnnOutput gnn_forward(ad::Tape& tape, const GnnModel& model, const TrackedGraph& g, ad::Var v_dml, ad::Var v_st) {
  InitialEmbeddings init = init_embeddings(tape, model.homogenizers, v_dml, v_st, g);
  return gnn_forward_from(tape, model, g, init.x, init.z, 0);
}

inline std::vector<double> predict_edges(const GnnModel& model, const TrackedGraph& g, const Tensor2& v_dml, const Tensor2& v_st) {
  ad::Tape tape(ad::Mode::Eval);
  GnnOutput out = gnn_forward(tape, model, g, tape.constant(v_dml), tape.constant(v_st));
  auto v = out.probs.value().values();
  return {v.begin(), v.end()};
}

// ---------------------------------------------------------------------------
// Loss

inline constexpr double kProbClamp = 1e-7;

struct ClassWeights {
  double negative = 0.0;
  double positive = 0.0;
};

/// (1/|N|, (|N|-1)/|N|) from the mean candidate in-degree.
inline ClassWeights adaptive_weights(double mean_degree) {
  if (!(mean_degree >= 1.0)) {
    throw ConfigError("weighted_ce_loss: mean neighbour count " + std::to_string(mean_degree) + " < 1");
  }
  return {1.0 / mean_degree, (mean_degree - 1.0) / mean_degree};
}

/// Mean in-degree over the nodes that can have incoming candidates (every
/// node outside the graph's first frame).
inline double mean_in_degree(const TrackedGraph& g) {
  if (g.num_nodes == 0) return 0.0;
  const int first = *std::min_element(g.node_frame.begin(), g.node_frame.end());
  std::size_t eligible = 0;
  for (int f : g.node_frame) eligible += f != first ? 1 : 0;
  if (eligible == 0) return 0.0;
  return static_cast<double>(g.num_edges()) / static_cast<double>(eligible);
}

/// -mean[ w0 (1-y) log(1-p) + w1 y log p ] with p = sigmoid(logit), computed
/// from the logits through softplus so saturated probabilities keep full
/// precision. Logits are clamped to the range that keeps p in
/// [1e-7, 1-1e-7]; clamped edges pass no gradient.
inline ad::Var weighted_ce_loss(ad::Var logits, std::span<const int> labels, double mean_degree) {
  const ClassWeights w = adaptive_weights(mean_degree);
  if (!logits.valid()) throw UsageError("weighted_ce_loss: untaped logits");
  if (logits.cols() != 1 || logits.rows() != labels.size()) throw ConfigError("weighted_ce_loss: shape mismatch");
  const std::size_t n = labels.size();
  if (n == 0) throw ConfigError("weighted_ce_loss: no edges");
  static const double limit = std::log((1.0 - kProbClamp) / kProbClamp);
  auto softplus = [](double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); };
  const Tensor2& z = logits.value();
  double total = 0.0;
  for (std::size_t e = 0; e < n; ++e) {
    const double c = std::clamp(z(e, 0), -limit, limit);
    // -log p = softplus(-c), -log(1-p) = softplus(c)
    total += labels[e] ? w.positive * softplus(-c) : w.negative * softplus(c);
  }
  std::vector<int> y(labels.begin(), labels.end());
  return logits.tape()->record(Tensor2(1, 1, total / n), {logits}, [logits, y = std::move(y), w](ad::Tape& t, const Tensor2& g) {
    const Tensor2& z = logits.value();
    Tensor2& buf = t.grad_buffer(logits);
    const double up = g(0, 0) / static_cast<double>(y.size());
    for (std::size_t e = 0; e < y.size(); ++e) {
      const double c = z(e, 0);
      if (c < -limit || c > limit) continue;
      const double p = ad::sigmoid_scalar(c);
      buf(e, 0) += y[e] ? -up * w.positive * (1.0 - p) : up * w.negative * p;
    }
  });
}

// ---------------------------------------------------------------------------
// Training

/// One training graph with its node inputs. `descriptors` is only used when
/// the embedder is fine-tuned jointly.
struct GraphSample {
  std::string name;
  TrackedGraph graph;
  Tensor2 descriptors;
  Tensor2 v_dml;
  Tensor2 v_st;
  std::vector<int> labels;
};

struct GnnTrainConfig {
  AdamConfig adam{1e-3, 1e-5};
  std::size_t epochs = 30;
  std::uint64_t seed = 1;
  bool joint_dml = false;
  AdamConfig dml_adam{1e-5, 1e-4};
  // Std of per-component Gaussian noise added to the embedding input while
  // training, rows renormalized afterwards; 0 disables.
  double dml_noise = 0.6;
  // Cosine decay of both learning rates down to lr * lr_floor at the last step.
  double lr_floor = 0.01;
};

struct EpochStats {
  std::size_t epoch = 0;
  double loss = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

namespace detail {

struct Counts {
  double tp = 0, fp = 0, fn = 0;
};

inline void count_edges(Counts& c, std::span<const double> probs, std::span<const int> y) {
  for (std::size_t e = 0; e < y.size(); ++e) {
    const bool pred = probs[e] > 0.5;
    c.tp += pred && y[e];
    c.fp += pred && !y[e];
    c.fn += !pred && y[e];
  }
}

}  // namespace detail

/// Full-graph steps in a seeded shuffled order each epoch. With joint_dml
/// and a non-null embedder the embedder is updated from the same loss.
inline std::vector<EpochStats> train_gnn(GnnModel& model, std::span<const GraphSample> samples, EmbedderParams* embedder,
                                         const GnnTrainConfig& cfg,
                                         const std::function<void(const EpochStats&)>& on_epoch = {}) {
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  AdamState opt(cfg.adam);
  AdamState dml_opt(cfg.dml_adam);
  const auto params = model.parameters();
  const bool joint = cfg.joint_dml && embedder != nullptr;
  std::vector<ad::Parameter*> dml_params;
  if (joint) dml_params = embedder->parameters();

  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].graph.num_edges() > 0) order.push_back(i);
  }
  const double total = static_cast<double>(std::max<std::size_t>(1, cfg.epochs * order.size() - 1));
  std::size_t step = 0;
  auto schedule = [&](double base) {
    const double c = 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / total));
    return base * (cfg.lr_floor + (1.0 - cfg.lr_floor) * c);
  };
  std::vector<EpochStats> history;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    detail::Counts counts;
    for (std::size_t idx : order) {
      const GraphSample& s = samples[idx];
      ad::Tape tape;
      ad::Var v_dml = joint ? embed(tape, *embedder, s.descriptors) : tape.constant(s.v_dml);
      if (cfg.dml_noise > 0.0) {
        Tensor2 noise(s.v_dml.rows(), s.v_dml.cols());
        for (double& v : noise.values()) v = cfg.dml_noise * gauss(rng);
        v_dml = ad::l2_normalize_rows(ad::add(v_dml, tape.constant(noise)));
      }
      GnnOutput out = gnn_forward(tape, model, s.graph, v_dml, tape.constant(s.v_st));
      ad::Var loss = weighted_ce_loss(out.logits, s.labels, mean_in_degree(s.graph));
      if (!std::isfinite(loss.scalar())) {
        throw NumericError("train_gnn: non-finite loss on graph '" + s.name + "' at epoch " + std::to_string(epoch));
      }
      loss_sum += loss.scalar();
      detail::count_edges(counts, out.probs.value().values(), s.labels);
      ad::Gradients grads = tape.backward(loss);
      opt.config.lr = schedule(cfg.adam.lr);
      dml_opt.config.lr = schedule(cfg.dml_adam.lr);
      ++step;
      adam_step(opt, params, grads);
      if (joint) adam_step(dml_opt, dml_params, grads);
    }
    EpochStats st;
    st.epoch = epoch;
    st.loss = order.empty() ? 0.0 : loss_sum / static_cast<double>(order.size());
    st.precision = counts.tp + counts.fp > 0 ? counts.tp / (counts.tp + counts.fp) : 0.0;
    st.recall = counts.tp + counts.fn > 0 ? counts.tp / (counts.tp + counts.fn) : 0.0;
    st.f1 = st.precision + st.recall > 0 ? 2 * st.precision * st.recall / (st.precision + st.recall) : 0.0;
    history.push_back(st);
    if (on_epoch) on_epoch(st);
  }
  return history;
}

}  // namespace celltrack
