#pragma once

// Trajectories, lineage forests and their file-level form (track table).

#include <algorithm>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "celltrack/errors.hpp"
#include "celltrack/st_features.hpp"

namespace celltrack {

/// Maximal run of one cell's instances in consecutive frames.
struct Trajectory {
  int cell = 0;
  int parent = 0;  // 0: not the result of a division
  int t_init = 0;
  int t_fin = 0;
  std::vector<std::size_t> nodes;  // indices into the sequence's instance list, in frame order
};

struct LineageForest {
  std::vector<Trajectory> tracks;

  const Trajectory* find(int cell) const {
    for (const auto& t : tracks) {
      if (t.cell == cell) return &t;
    }
    return nullptr;
  }

  std::map<int, std::vector<int>> children() const {
    std::map<int, std::vector<int>> out;
    for (const auto& t : tracks) {
      if (t.parent != 0) out[t.parent].push_back(t.cell);
    }
    return out;
  }

  std::size_t total_length() const {
    std::size_t n = 0;
    for (const auto& t : tracks) n += t.nodes.size();
    return n;
  }
};

/// Throws ConfigError describing the first broken invariant: frames
/// consecutive, parent < cell, parent ends before the child starts, every
/// instance in exactly one track.
inline void validate_forest(const LineageForest& forest, std::span<const CellInstance> instances, int num_frames) {
  std::vector<int> owner(instances.size(), 0);
  std::set<int> cells;
  for (const auto& t : forest.tracks) {
    const std::string who = "track " + std::to_string(t.cell);
    if (t.cell <= 0 || !cells.insert(t.cell).second) throw ConfigError(who + ": duplicate or non-positive index");
    if (t.nodes.empty()) throw ConfigError(who + ": empty");
    if (t.t_init < 1 || t.t_init > t.t_fin || t.t_fin > num_frames) throw ConfigError(who + ": bad time span");
    if (t.t_fin - t.t_init + 1 != static_cast<int>(t.nodes.size())) throw ConfigError(who + ": length != span");
    for (std::size_t i = 0; i < t.nodes.size(); ++i) {
      const std::size_t n = t.nodes[i];
      if (n >= instances.size()) throw ConfigError(who + ": node out of range");
      if (instances[n].frame != t.t_init + static_cast<int>(i)) throw ConfigError(who + ": frames not consecutive");
      if (owner[n] != 0) throw ConfigError(who + ": instance shared with track " + std::to_string(owner[n]));
      owner[n] = t.cell;
    }
  }
  for (const auto& t : forest.tracks) {
    if (t.parent == 0) continue;
    const Trajectory* p = forest.find(t.parent);
    const std::string who = "track " + std::to_string(t.cell);
    if (p == nullptr) throw ConfigError(who + ": unknown parent");
    if (t.parent == t.cell || t.parent > t.cell) throw ConfigError(who + ": parent index must be smaller");
    if (p->t_fin >= t.t_init) throw ConfigError(who + ": parent does not end before child starts");
  }
  for (std::size_t n = 0; n < owner.size(); ++n) {
    if (owner[n] == 0) throw ConfigError("instance " + std::to_string(n) + " belongs to no track");
  }
}

/// Renumbers cells 1..N by (t_init, first centroid) and remaps parents, which
/// guarantees parent < child.
inline LineageForest canonical_numbering(LineageForest forest, std::span<const CellInstance> instances) {
  auto& tr = forest.tracks;
  std::sort(tr.begin(), tr.end(), [&](const Trajectory& a, const Trajectory& b) {
    if (a.t_init != b.t_init) return a.t_init < b.t_init;
    const auto& ca = instances[a.nodes.front()].centroid;
    const auto& cb = instances[b.nodes.front()].centroid;
    if (ca != cb) return ca < cb;
    return a.nodes.front() < b.nodes.front();
  });
  std::map<int, int> remap;
  for (std::size_t i = 0; i < tr.size(); ++i) remap[tr[i].cell] = static_cast<int>(i) + 1;
  for (auto& t : tr) {
    t.cell = remap.at(t.cell);
    if (t.parent != 0) t.parent = remap.at(t.parent);
  }
  return forest;
}

using Link = std::pair<InstanceKey, InstanceKey>;

/// Frame-to-frame associations implied by a forest: consecutive instances
/// of each track plus parent-end to child-start links.
inline std::set<Link> forest_links(const LineageForest& forest, std::span<const CellInstance> instances) {
  std::set<Link> links;
  for (const auto& t : forest.tracks) {
    for (std::size_t i = 1; i < t.nodes.size(); ++i) {
      links.insert({key_of(instances[t.nodes[i - 1]]), key_of(instances[t.nodes[i]])});
    }
    if (t.parent != 0) {
      const Trajectory* p = forest.find(t.parent);
      if (p != nullptr) links.insert({key_of(instances[p->nodes.back()]), key_of(instances[t.nodes.front()])});
    }
  }
  return links;
}

// ---------------------------------------------------------------------------
// File-level form: track lines plus a per-instance cell assignment.

struct TrackLine {
  int cell = 0;
  int t_init = 0;
  int t_fin = 0;
  int parent = 0;
  friend bool operator==(const TrackLine&, const TrackLine&) = default;
};

struct TrackTable {
  std::vector<TrackLine> tracks;
  std::map<InstanceKey, int> cell_of;
  friend bool operator==(const TrackTable&, const TrackTable&) = default;
};

inline TrackTable to_track_table(const LineageForest& forest, std::span<const CellInstance> instances) {
  TrackTable table;
  for (const auto& t : forest.tracks) {
    table.tracks.push_back({t.cell, t.t_init, t.t_fin, t.parent});
    for (std::size_t n : t.nodes) table.cell_of[key_of(instances[n])] = t.cell;
  }
  std::sort(table.tracks.begin(), table.tracks.end(), [](const TrackLine& a, const TrackLine& b) { return a.cell < b.cell; });
  return table;
}

/// Track links straight from a table (no instance list needed).
inline std::set<Link> table_links(const TrackTable& table) {
  std::map<int, std::vector<InstanceKey>> members;
  for (const auto& [key, cell] : table.cell_of) members[cell].push_back(key);
  std::set<Link> links;
  for (auto& [cell, keys] : members) {
    std::sort(keys.begin(), keys.end());
    for (std::size_t i = 1; i < keys.size(); ++i) links.insert({keys[i - 1], keys[i]});
  }
  for (const auto& t : table.tracks) {
    if (t.parent == 0) continue;
    auto child = members.find(t.cell);
    auto parent = members.find(t.parent);
    if (child == members.end() || parent == members.end()) continue;
    links.insert({parent->second.back(), child->second.front()});
  }
  return links;
}

/// Rebuilds a node-indexed forest from a table. Instances absent from the
/// table become singleton tracks with fresh indices.
inline LineageForest forest_from_table(const TrackTable& table, std::span<const CellInstance> instances) {
  std::map<int, Trajectory> by_cell;
  for (const auto& line : table.tracks) {
    by_cell[line.cell] = Trajectory{line.cell, line.parent, line.t_init, line.t_fin, {}};
  }
  int next = by_cell.empty() ? 1 : by_cell.rbegin()->first + 1;
  LineageForest forest;
  for (std::size_t n = 0; n < instances.size(); ++n) {
    auto it = table.cell_of.find(key_of(instances[n]));
    if (it == table.cell_of.end()) {
      forest.tracks.push_back({next++, 0, instances[n].frame, instances[n].frame, {n}});
      continue;
    }
    auto tr = by_cell.find(it->second);
    if (tr == by_cell.end()) throw ConfigError("instance assigned to unknown track " + std::to_string(it->second));
    tr->second.nodes.push_back(n);
  }
  for (auto& [cell, t] : by_cell) {
    std::sort(t.nodes.begin(), t.nodes.end(), [&](std::size_t a, std::size_t b) { return instances[a].frame < instances[b].frame; });
    if (!t.nodes.empty()) forest.tracks.push_back(std::move(t));
  }
  std::sort(forest.tracks.begin(), forest.tracks.end(), [](const Trajectory& a, const Trajectory& b) { return a.cell < b.cell; });
  return forest;
}

/// All instances of one sequence, ordered by (frame, label), with optional
/// ground-truth lineage.
struct Sequence {
  std::string name;
  int num_frames = 0;
  std::vector<CellInstance> instances;
  std::optional<LineageForest> gt;
};

}  // namespace celltrack
