#pragma once

// Direct candidate graph over a whole sequence: one node per cell instance,
// edges only between consecutive frames and only inside the per-axis
// neighborhood gate.

#include <algorithm>
#include <cmath>
#include <iostream>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "celltrack/autodiff.hpp"
#include "celltrack/forest.hpp"
#include "celltrack/mlp.hpp"
#include "celltrack/st_features.hpp"

namespace celltrack {

/// Per-axis box gate: two instances are neighbours when every centroid
/// coordinate differs by at most threshold[axis].
struct NeighborhoodRule {
  double alpha = 2.0;
  int ndim = 2;
  Point threshold{};

  bool within(const Point& a, const Point& b) const {
    for (int d = 0; d < ndim; ++d) {
      if (std::fabs(a[d] - b[d]) > threshold[d]) return false;
    }
    return true;
  }
};

/// Node-index pairs of every ground-truth association in a sequence.
inline std::vector<std::pair<std::size_t, std::size_t>> gt_node_links(const Sequence& seq) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  if (!seq.gt) return out;
  const auto& forest = *seq.gt;
  for (const auto& t : forest.tracks) {
    for (std::size_t i = 1; i < t.nodes.size(); ++i) out.emplace_back(t.nodes[i - 1], t.nodes[i]);
    if (t.parent != 0) {
      if (const Trajectory* p = forest.find(t.parent)) out.emplace_back(p->nodes.back(), t.nodes.front());
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

/// threshold[axis] = alpha * max(max bbox extent, max GT step displacement).
/// Without any GT association only the bbox term is used and a warning goes
/// to `warn`.
inline NeighborhoodRule fit_neighborhood(std::span<const Sequence> training, double alpha,
                                         std::ostream* warn = &std::cerr) {
  if (!(alpha > 0.0)) throw ConfigError("fit_neighborhood: alpha must be positive");
  NeighborhoodRule rule;
  rule.alpha = alpha;
  Point bbox{}, move{};
  bool any_instance = false, any_link = false;
  for (const Sequence& seq : training) {
    for (const CellInstance& c : seq.instances) {
      if (!any_instance) rule.ndim = c.ndim;
      any_instance = true;
      if (!c.has_mask) continue;
      for (int d = 0; d < c.ndim; ++d) bbox[d] = std::max(bbox[d], double(c.bbox_max[d] - c.bbox_min[d] + 1));
    }
    for (const auto& [a, b] : gt_node_links(seq)) {
      any_link = true;
      for (int d = 0; d < rule.ndim; ++d) {
        move[d] = std::max(move[d], std::fabs(seq.instances[a].centroid[d] - seq.instances[b].centroid[d]));
      }
    }
  }
  if (!any_instance) throw ConfigError("fit_neighborhood: no training instances");
  if (!any_link && warn != nullptr) {
    *warn << "warning: fit_neighborhood found no ground-truth associations; using the bounding-box term only\n";
  }
  for (int d = 0; d < rule.ndim; ++d) {
    rule.threshold[d] = alpha * std::max(bbox[d], move[d]);
    if (!(rule.threshold[d] > 0.0)) throw ConfigError("fit_neighborhood: zero threshold on axis " + std::to_string(d));
  }
  return rule;
}

struct TrackedGraph {
  std::size_t num_nodes = 0;
  std::vector<int> node_frame;
  std::vector<std::size_t> src;
  std::vector<std::size_t> dst;

  std::size_t num_edges() const { return src.size(); }
};

/// Instances must be ordered by frame with node == position.
inline TrackedGraph build_graph(std::span<const CellInstance> instances, const NeighborhoodRule& rule) {
  TrackedGraph g;
  g.num_nodes = instances.size();
  g.node_frame.resize(instances.size());
  std::map<int, std::vector<std::size_t>> by_frame;
  for (std::size_t i = 0; i < instances.size(); ++i) {
    if (instances[i].node != i) throw ConfigError("build_graph: node indices not assigned");
    g.node_frame[i] = instances[i].frame;
    by_frame[instances[i].frame].push_back(i);
  }
  for (const auto& [t, nodes] : by_frame) {
    auto next = by_frame.find(t + 1);
    if (next == by_frame.end()) continue;
    for (std::size_t i : nodes) {
      for (std::size_t j : next->second) {
        if (rule.within(instances[i].centroid, instances[j].centroid)) {
          g.src.push_back(i);
          g.dst.push_back(j);
        }
      }
    }
  }
  return g;
}

/// Y[e] = 1 for same-cell links and for parent-end to daughter-start links.
inline std::vector<int> edge_labels(const TrackedGraph& g, const LineageForest& gt) {
  std::vector<int> cell(g.num_nodes, 0);
  std::map<int, const Trajectory*> tracks;
  for (const auto& t : gt.tracks) {
    tracks[t.cell] = &t;
    for (std::size_t n : t.nodes) {
      if (n < cell.size()) cell[n] = t.cell;
    }
  }
  std::vector<int> y(g.num_edges(), 0);
  for (std::size_t e = 0; e < g.num_edges(); ++e) {
    const int cs = cell[g.src[e]], cd = cell[g.dst[e]];
    if (cs == 0 || cd == 0) continue;
    if (cs == cd) {
      y[e] = 1;
      continue;
    }
    const Trajectory* child = tracks.at(cd);
    if (child->parent == cs && child->nodes.front() == g.dst[e] && tracks.at(cs)->nodes.back() == g.src[e]) y[e] = 1;
  }
  return y;
}

/// Distance & similarity vector: |a_k - b_k| for every k, then cos(a, b)
/// (0 when either vector is zero).
inline std::vector<double> ds_vector(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ConfigError("ds_vector: length mismatch");
  std::vector<double> out(a.size() + 1);
  for (std::size_t k = 0; k < a.size(); ++k) out[k] = std::fabs(a[k] - b[k]);
  out.back() = ad::cosine_similarity(a, b);
  return out;
}

/// Taped row-wise ds_vector.
inline ad::Var ds_rows(ad::Var a, ad::Var b) {
  return ad::concat_cols({ad::abs(ad::sub(a, b)), ad::row_cosine(a, b)});
}

/// Node and edge-init MLPs that bring the raw feature sources to d_V / d_E.
struct Homogenizers {
  MlpParams node;  // d_DML + d_ST -> d_V
  MlpParams edge;  // d_V + 1 -> d_E
};

struct InitialEmbeddings {
  ad::Var x;
  ad::Var z;
};

/// X0 = node(concat(V_DML, V_ST)); Z0 = edge(ds(X0[src], X0[dst])).
inline InitialEmbeddings init_embeddings(ad::Tape& tape, const Homogenizers& h, ad::Var v_dml, ad::Var v_st,
                                         const TrackedGraph& g) {
  if (v_dml.rows() != g.num_nodes || v_st.rows() != g.num_nodes) {
    throw ConfigError("init_embeddings: feature rows (" + std::to_string(v_dml.rows()) + ", " +
                      std::to_string(v_st.rows()) + ") != node count " + std::to_string(g.num_nodes));
  }
  ad::Var x = mlp_forward(tape, h.node, ad::concat_cols({v_dml, v_st}));
  ad::Var ds = ds_rows(ad::gather_rows(x, g.src), ad::gather_rows(x, g.dst));
  ad::Var z = mlp_forward(tape, h.edge, ds);
  return {x, z};
}

}  // namespace celltrack
