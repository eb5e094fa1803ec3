#pragma once

// The full finite-difference suite over every learnable component: the
// embedder under the multi-similarity loss, and the homogenizers, each
// message-passing block and the classifier under the weighted edge loss.

#include <chrono>
#include <random>
#include <string>
#include <vector>

#include "celltrack/dml.hpp"
#include "celltrack/gnn.hpp"
#include "celltrack/gradcheck.hpp"

namespace celltrack {

struct GradSuiteEntry {
  std::string component;
  GradCheckReport report;
  double seconds = 0.0;
};

/// Two frames with two instances each, fully connected (4 edges).
inline TrackedGraph gradcheck_graph() {
  TrackedGraph g;
  g.num_nodes = 4;
  g.node_frame = {1, 1, 2, 2};
  g.src = {0, 0, 1, 1};
  g.dst = {2, 3, 2, 3};
  return g;
}

inline std::vector<GradSuiteEntry> run_gradient_suite(std::uint64_t seed = 11, const GradCheckOptions& opt = {},
                                                      const GnnConfig& gnn_cfg = {}, const DmlConfig& dml_cfg = {}) {
  using Clock = std::chrono::steady_clock;
  std::vector<GradSuiteEntry> out;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);

  {
    EmbedderParams emb = make_embedder(dml_cfg, rng);
    Tensor2 desc(8, kDescriptorSize);
    for (double& v : desc.values()) v = u(rng);
    const std::vector<int> labels{0, 0, 0, 0, 1, 1, 1, 1};
    // A wide margin mines every pair, so each embedding row feeds the loss.
    const MinedPairs pairs = mine_hard_pairs(affinity(embed(emb, desc)), labels, 10.0);
    const MsLossParams ms{dml_cfg.alpha_ms, dml_cfg.beta_ms, dml_cfg.lambda_ms};
    auto loss = [&](ad::Tape& tape) { return multi_similarity_loss(affinity(embed(tape, emb, desc)), pairs, ms); };
    const auto t0 = Clock::now();
    GradSuiteEntry e{"dml.embedder", gradient_check(emb.parameters(), loss, opt), 0.0};
    e.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    out.push_back(std::move(e));
  }

  GnnModel model = make_gnn(gnn_cfg, rng);
  const TrackedGraph g = gradcheck_graph();
  Tensor2 v_dml(g.num_nodes, gnn_cfg.d_dml), v_st(g.num_nodes, gnn_cfg.d_st);
  for (double& v : v_dml.values()) v = u(rng);
  // Embedder outputs are unit rows; matching that keeps the test point in
  // the regime the model actually sees.
  for (std::size_t i = 0; i < v_dml.rows(); ++i) {
    double n = 0.0;
    for (double v : v_dml.row(i)) n += v * v;
    for (double& v : v_dml.row(i)) v /= std::sqrt(n);
  }
  for (double& v : v_st.values()) v = 0.5 * (u(rng) + 1.0);
  const std::vector<int> labels{1, 0, 0, 1};
  const double degree = mean_in_degree(g);
  auto loss = [&](ad::Tape& tape) {
    GnnOutput o = gnn_forward(tape, model, g, tape.constant(v_dml), tape.constant(v_st));
    return weighted_ce_loss(o.logits, labels, degree);
  };
  auto check = [&](std::string name, auto&& fn, std::vector<ad::Parameter*> params) {
    const auto t0 = Clock::now();
    GradSuiteEntry e{std::move(name), gradient_check(params, fn, opt), 0.0};
    e.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    out.push_back(std::move(e));
  };
  auto join = [](MlpParams& a, MlpParams* b = nullptr, MlpParams* c = nullptr) {
    std::vector<ad::Parameter*> p = a.parameters();
    for (MlpParams* m : {b, c}) {
      if (m == nullptr) continue;
      auto q = m->parameters();
      p.insert(p.end(), q.begin(), q.end());
    }
    return p;
  };
  check("homogenizers", loss, join(model.homogenizers.node, &model.homogenizers.edge));

  // Block l's parameters only act downstream of it, so the upstream part is
  // evaluated once and fed in as constants.
  for (std::size_t l = 0; l < model.blocks.size(); ++l) {
    ad::Tape pre(ad::Mode::Eval);
    InitialEmbeddings init = init_embeddings(pre, model.homogenizers, pre.constant(v_dml), pre.constant(v_st), g);
    ad::Var x = init.x, z = init.z;
    for (std::size_t k = 0; k < l; ++k) {
      x = pdn_conv(pre, model.blocks[k], x, z, g);
      z = edge_encode(pre, model.blocks[k], z, x, g);
    }
    const Tensor2 x_in = x.value(), z_in = z.value();
    auto tail = [&](ad::Tape& tape) {
      GnnOutput o = gnn_forward_from(tape, model, g, tape.constant(x_in), tape.constant(z_in), l);
      return weighted_ce_loss(o.logits, labels, degree);
    };
    auto& b = model.blocks[l];
    check("block" + std::to_string(l), tail, join(b.f_edge_pdn, &b.f_node_pdn, &b.f_edge_ee));
  }
  {
    ad::Tape pre(ad::Mode::Eval);
    InitialEmbeddings init = init_embeddings(pre, model.homogenizers, pre.constant(v_dml), pre.constant(v_st), g);
    ad::Var x = init.x, z = init.z;
    for (const auto& b : model.blocks) {
      x = pdn_conv(pre, b, x, z, g);
      z = edge_encode(pre, b, z, x, g);
    }
    const Tensor2 x_in = x.value(), z_in = z.value();
    auto head = [&](ad::Tape& tape) {
      GnnOutput o = gnn_forward_from(tape, model, g, tape.constant(x_in), tape.constant(z_in), model.blocks.size());
      return weighted_ce_loss(o.logits, labels, degree);
    };
    check("classifier", head, join(model.classifier));
  }
  return out;
}

}  // namespace celltrack
