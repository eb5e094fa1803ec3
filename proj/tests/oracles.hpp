#pragma once

// Loop-level reference implementations, written straight from the
// definitions and sharing no code with the taped library paths.

#include <cmath>
#include <vector>

#include "celltrack/dml.hpp"
#include "celltrack/gnn.hpp"
#include "celltrack/lineage.hpp"

namespace celltrack::oracle {

using Vec = std::vector<double>;

inline Vec dense(const DenseLayer& l, const Vec& x, bool apply_activation = true) {
  Vec y(l.out_dim());
  for (std::size_t k = 0; k < y.size(); ++k) {
    double s = l.bias.value(0, k);
    for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * l.weight.value(i, k);
    if (apply_activation && l.activation == Activation::ReLU) s = s > 0 ? s : 0;
    if (apply_activation && l.activation == Activation::Sigmoid) s = 1.0 / (1.0 + std::exp(-s));
    y[k] = s;
  }
  return y;
}

inline Vec mlp(const MlpParams& m, Vec x) {
  for (const auto& l : m.layers) x = dense(l, x);
  return x;
}

inline Vec ds(const Vec& a, const Vec& b) {
  Vec out;
  double dot = 0, na = 0, nb = 0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    out.push_back(std::fabs(a[k] - b[k]));
    dot += a[k] * b[k];
    na += a[k] * a[k];
    nb += b[k] * b[k];
  }
  out.push_back(na == 0 || nb == 0 ? 0.0 : dot / std::sqrt(na * nb));
  return out;
}

inline Vec cat(std::initializer_list<Vec> parts) {
  Vec out;
  for (const Vec& p : parts) out.insert(out.end(), p.begin(), p.end());
  return out;
}

inline Vec row(const Tensor2& t, std::size_t r) { return {t.row(r).begin(), t.row(r).end()}; }

/// Edge probabilities of `model` on `g`, one node and edge at a time.
inline Vec gnn_probs(const GnnModel& model, const TrackedGraph& g, const Tensor2& v_dml, const Tensor2& v_st) {
  std::vector<Vec> x(g.num_nodes), z(g.num_edges());
  for (std::size_t i = 0; i < g.num_nodes; ++i) x[i] = mlp(model.homogenizers.node, cat({row(v_dml, i), row(v_st, i)}));
  for (std::size_t e = 0; e < g.num_edges(); ++e) z[e] = mlp(model.homogenizers.edge, ds(x[g.src[e]], x[g.dst[e]]));
  for (const auto& b : model.blocks) {
    std::vector<Vec> mapped(g.num_nodes), xn(g.num_nodes);
    for (std::size_t i = 0; i < g.num_nodes; ++i) xn[i] = mapped[i] = mlp(b.f_node_pdn, x[i]);
    for (std::size_t e = 0; e < g.num_edges(); ++e) {
      const double w = mlp(b.f_edge_pdn, z[e])[0];
      for (std::size_t k = 0; k < xn[g.dst[e]].size(); ++k) xn[g.dst[e]][k] += w * mapped[g.src[e]][k];
    }
    for (std::size_t e = 0; e < g.num_edges(); ++e) {
      const Vec& xs = xn[g.src[e]];
      const Vec& xd = xn[g.dst[e]];
      z[e] = mlp(b.f_edge_ee, cat({z[e], xs, xd, ds(xs, xd)}));
    }
    x = std::move(xn);
  }
  Vec probs;
  for (std::size_t e = 0; e < g.num_edges(); ++e) {
    Vec h = z[e];
    const auto& layers = model.classifier.layers;
    for (std::size_t i = 0; i + 1 < layers.size(); ++i) h = dense(layers[i], h);
    const double logit = dense(layers.back(), h, false)[0];
    probs.push_back(1.0 / (1.0 + std::exp(-logit)));
  }
  return probs;
}

/// -mean[w0 (1-y) log(1-p) + w1 y log p], p clamped to [1e-7, 1-1e-7].
inline double weighted_ce(const Vec& probs, const std::vector<int>& y, double mean_degree) {
  const double w0 = 1.0 / mean_degree, w1 = (mean_degree - 1.0) / mean_degree;
  double s = 0;
  for (std::size_t e = 0; e < y.size(); ++e) {
    const double p = std::min(std::max(probs[e], 1e-7), 1.0 - 1e-7);
    s += y[e] ? w1 * std::log(p) : w0 * std::log(1.0 - p);
  }
  return -s / static_cast<double>(y.size());
}

/// Resolver rules applied edge by edge: e survives the outgoing rule when
/// fewer than two competing outgoing edges beat it, and the incoming rule
/// when no surviving edge into the same target beats it.
inline std::vector<std::uint8_t> resolve(std::span<const double> p, const TrackedGraph& g) {
  const std::size_t ne = g.num_edges();
  auto beats = [&](std::size_t a, std::size_t b) {
    return p[a] > p[b] || (p[a] == p[b] && (g.src[a] < g.src[b] || (g.src[a] == g.src[b] && g.dst[a] < g.dst[b])));
  };
  std::vector<std::uint8_t> out_ok(ne, 0), active(ne, 0);
  for (std::size_t e = 0; e < ne; ++e) {
    if (!(p[e] > 0.5)) continue;
    int better = 0;
    for (std::size_t f = 0; f < ne; ++f) better += f != e && g.src[f] == g.src[e] && p[f] > 0.5 && beats(f, e);
    out_ok[e] = better < 2;
  }
  for (std::size_t e = 0; e < ne; ++e) {
    if (!out_ok[e]) continue;
    bool beaten = false;
    for (std::size_t f = 0; f < ne; ++f) beaten |= f != e && out_ok[f] && g.dst[f] == g.dst[e] && beats(f, e);
    active[e] = !beaten;
  }
  return active;
}

struct Triplet {
  int m = 0, k = 0, l = 0;  // cell indices; k < l
  auto operator<=>(const Triplet&) const = default;
};

/// Every (m, k, l) satisfying the triplet condition: k and l unparented and
/// starting at t, m childless and ending at t-1, m's last centroid inside the
/// gate of both first centroids.
inline std::vector<Triplet> mitosis_candidates(const LineageForest& f, std::span<const CellInstance> inst,
                                               const NeighborhoodRule& rule) {
  const auto children = f.children();
  std::vector<Triplet> out;
  for (const auto& m : f.tracks) {
    if (children.count(m.cell)) continue;
    const Point& pm = inst[m.nodes.back()].centroid;
    for (const auto& k : f.tracks) {
      for (const auto& l : f.tracks) {
        if (k.cell >= l.cell || k.parent != 0 || l.parent != 0) continue;
        if (k.t_init != m.t_fin + 1 || l.t_init != m.t_fin + 1) continue;
        if (rule.within(pm, inst[k.nodes.front()].centroid) && rule.within(pm, inst[l.nodes.front()].centroid)) {
          out.push_back({m.cell, k.cell, l.cell});
        }
      }
    }
  }
  return out;
}

/// True when `t` is a candidate and no other candidate shares a track with it.
inline bool unambiguous(const Triplet& t, const std::vector<Triplet>& cands) {
  bool found = false;
  for (const auto& c : cands) {
    if (c == t) {
      found = true;
      continue;
    }
    for (int a : {c.m, c.k, c.l}) {
      if (a == t.m || a == t.k || a == t.l) return false;
    }
  }
  return found;
}

inline double ms_loss(const Tensor2& a, const MinedPairs& p, const MsLossParams& m) {
  double total = 0.0;
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double sp = 0.0, sn = 0.0;
    for (auto [x, j] : p.positive) {
      if (x == i) sp += std::exp(-m.alpha * (a(i, j) - m.lambda));
    }
    for (auto [x, j] : p.negative) {
      if (x == i) sn += std::exp(m.beta * (a(i, j) - m.lambda));
    }
    total += std::log(1.0 + sp) / m.alpha + std::log(1.0 + sn) / m.beta;
  }
  return total / static_cast<double>(a.rows());
}

}  // namespace celltrack::oracle
