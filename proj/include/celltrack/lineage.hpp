#pragma once

// From edge probabilities to lineage: conflict resolution on the active
// edge set, chaining into trajectories, and triplet-based division
// detection for daughters whose link to the parent was not predicted.

#include <algorithm>
#include <cmath>
#include <map>
#include <span>
#include <stdexcept>
#include <tuple>
#include <vector>

#include "celltrack/forest.hpp"
#include "celltrack/graph.hpp"

namespace celltrack {

inline constexpr double kActiveThreshold = 0.5;

/// Keeps edges with p > 0.5, then at most the top-2 outgoing per source,
/// then at most the top-1 incoming per target. Ties go to the smaller
/// source, then the smaller target.
inline std::vector<std::uint8_t> resolve_edges(std::span<const double> probs, const TrackedGraph& g) {
  if (probs.size() != g.num_edges()) throw ConfigError("resolve_edges: probability count != edge count");
  const std::size_t ne = g.num_edges();
  auto better = [&](std::size_t a, std::size_t b) {
    if (probs[a] != probs[b]) return probs[a] > probs[b];
    if (g.src[a] != g.src[b]) return g.src[a] < g.src[b];
    return g.dst[a] < g.dst[b];
  };
  std::vector<std::uint8_t> active(ne, 0);
  std::vector<std::vector<std::size_t>> out(g.num_nodes);
  for (std::size_t e = 0; e < ne; ++e) {
    if (probs[e] > kActiveThreshold) out[g.src[e]].push_back(e);
  }
  for (auto& edges : out) {
    std::sort(edges.begin(), edges.end(), better);
    for (std::size_t i = 0; i < edges.size() && i < 2; ++i) active[edges[i]] = 1;
  }
  std::vector<std::vector<std::size_t>> in(g.num_nodes);
  for (std::size_t e = 0; e < ne; ++e) {
    if (active[e]) in[g.dst[e]].push_back(e);
  }
  for (auto& edges : in) {
    if (edges.size() < 2) continue;
    std::sort(edges.begin(), edges.end(), better);
    for (std::size_t i = 1; i < edges.size(); ++i) active[edges[i]] = 0;
  }
  return active;
}

/// Chains single-in/single-out active edges into trajectories. A node with
/// two active outgoing edges ends its track, and both successors start
/// tracks parented to it. Cells are numbered canonically.
inline LineageForest build_tracks(const TrackedGraph& g, std::span<const std::uint8_t> active,
                                  std::span<const CellInstance> instances) {
  if (active.size() != g.num_edges() || instances.size() != g.num_nodes) {
    throw ConfigError("build_tracks: size mismatch");
  }
  const std::size_t n = g.num_nodes;
  std::vector<std::vector<std::size_t>> succ(n);
  std::vector<std::ptrdiff_t> pred(n, -1);
  for (std::size_t e = 0; e < g.num_edges(); ++e) {
    if (!active[e]) continue;
    succ[g.src[e]].push_back(g.dst[e]);
    if (pred[g.dst[e]] >= 0) throw std::logic_error("build_tracks: node with two active incoming edges");
    pred[g.dst[e]] = static_cast<std::ptrdiff_t>(g.src[e]);
  }
  for (const auto& s : succ) {
    if (s.size() > 2) throw std::logic_error("build_tracks: node with more than two active outgoing edges");
  }

  LineageForest forest;
  std::vector<int> track_of(n, 0);
  for (std::size_t start = 0; start < n; ++start) {
    const bool is_start = pred[start] < 0 || succ[static_cast<std::size_t>(pred[start])].size() == 2;
    if (!is_start) continue;
    Trajectory t;
    t.cell = static_cast<int>(forest.tracks.size()) + 1;
    std::size_t node = start;
    while (true) {
      t.nodes.push_back(node);
      track_of[node] = t.cell;
      if (succ[node].size() != 1) break;
      node = succ[node].front();
    }
    t.t_init = instances[t.nodes.front()].frame;
    t.t_fin = instances[t.nodes.back()].frame;
    forest.tracks.push_back(std::move(t));
  }
  for (auto& t : forest.tracks) {
    const std::ptrdiff_t p = pred[t.nodes.front()];
    if (p >= 0) t.parent = track_of[static_cast<std::size_t>(p)];
  }
  return canonical_numbering(std::move(forest), instances);
}

namespace detail {

inline double centroid_distance(const CellInstance& a, const CellInstance& b) {
  double s = 0.0;
  for (int d = 0; d < a.ndim; ++d) s += (a.centroid[d] - b.centroid[d]) * (a.centroid[d] - b.centroid[d]);
  return std::sqrt(s);
}

}  // namespace detail

/// For unparented tracks k, l starting together at t and a childless track m
/// ending at t-1 whose last centroid gates with both first centroids, sets
/// P(k) = P(l) = m. Candidates are taken greedily by summed centroid
/// distance; each track takes part in at most one triplet.
inline LineageForest detect_mitosis(LineageForest forest, std::span<const CellInstance> instances, const NeighborhoodRule& rule) {
  auto& tr = forest.tracks;
  std::map<int, std::size_t> children;
  for (const auto& t : tr) {
    if (t.parent != 0) ++children[t.parent];
  }
  std::map<int, std::vector<std::size_t>> starts, ends;
  for (std::size_t i = 0; i < tr.size(); ++i) {
    if (tr[i].parent == 0) starts[tr[i].t_init].push_back(i);
    if (children[tr[i].cell] == 0) ends[tr[i].t_fin].push_back(i);
  }
  using Candidate = std::tuple<double, std::size_t, std::size_t, std::size_t>;  // score, m, k, l
  std::vector<Candidate> cands;
  for (const auto& [t, ks] : starts) {
    auto e = ends.find(t - 1);
    if (e == ends.end()) continue;
    for (std::size_t m : e->second) {
      const CellInstance& pm = instances[tr[m].nodes.back()];
      std::vector<std::size_t> near;
      for (std::size_t k : ks) {
        if (rule.within(pm.centroid, instances[tr[k].nodes.front()].centroid)) near.push_back(k);
      }
      for (std::size_t a = 0; a < near.size(); ++a) {
        for (std::size_t b = a + 1; b < near.size(); ++b) {
          const double score = detail::centroid_distance(pm, instances[tr[near[a]].nodes.front()]) +
                               detail::centroid_distance(pm, instances[tr[near[b]].nodes.front()]);
          cands.emplace_back(score, m, near[a], near[b]);
        }
      }
    }
  }
  std::sort(cands.begin(), cands.end());
  std::vector<std::uint8_t> used(tr.size(), 0);
  for (const auto& [score, m, k, l] : cands) {
    if (used[m] || used[k] || used[l]) continue;
    used[m] = used[k] = used[l] = 1;
    tr[k].parent = tr[m].cell;
    tr[l].parent = tr[m].cell;
  }
  return canonical_numbering(std::move(forest), instances);
}

/// resolve_edges -> build_tracks -> detect_mitosis.
inline LineageForest infer_lineage(std::span<const double> probs, const TrackedGraph& g,
                                   std::span<const CellInstance> instances, const NeighborhoodRule& rule) {
  const auto active = resolve_edges(probs, g);
  return detect_mitosis(build_tracks(g, active, instances), instances, rule);
}

}  // namespace celltrack
