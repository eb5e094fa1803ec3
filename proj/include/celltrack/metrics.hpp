#pragma once

#include <map>
#include <set>
#include <span>
#include <vector>

#include "json.hpp"

#include "celltrack/errors.hpp"
#include "celltrack/forest.hpp"

namespace celltrack {

/// |predicted ∩ gt| / |gt|.
inline double association_accuracy(const std::set<Link>& predicted, const std::set<Link>& gt) {
  if (gt.empty()) throw ConfigError("association_accuracy: ground truth has no associations");
  std::size_t hits = 0;
  for (const Link& l : gt) hits += predicted.count(l);
  return static_cast<double>(hits) / static_cast<double>(gt.size());
}

struct TrackCover {
  int gt_cell = 0;
  std::size_t length = 0;
  int matched_cell = 0;  // 0: no predicted instance overlaps
  std::size_t covered = 0;
};

struct TeResult {
  double instance_weighted = 0.0;
  double mean_over_tracks = 0.0;
  std::vector<TrackCover> per_track;
};

/// Each GT track is matched to the predicted track covering most of its
/// instances (ties: longer predicted track, then smaller index).
/// instance_weighted = sum covered / sum GT lengths.
inline TeResult target_effectiveness(const std::map<InstanceKey, int>& predicted, const std::map<InstanceKey, int>& gt) {
  std::map<int, std::size_t> pred_len;
  for (const auto& [key, cell] : predicted) ++pred_len[cell];
  std::map<int, std::vector<InstanceKey>> gt_members;
  for (const auto& [key, cell] : gt) gt_members[cell].push_back(key);

  TeResult out;
  std::size_t covered = 0, total = 0;
  double frac_sum = 0.0;
  for (const auto& [cell, keys] : gt_members) {
    std::map<int, std::size_t> overlap;
    for (const InstanceKey& k : keys) {
      auto it = predicted.find(k);
      if (it != predicted.end()) ++overlap[it->second];
    }
    TrackCover tc{cell, keys.size(), 0, 0};
    for (const auto& [pcell, n] : overlap) {
      const bool better = n > tc.covered || (n == tc.covered && pred_len[pcell] > pred_len[tc.matched_cell]);
      if (better) {
        tc.matched_cell = pcell;
        tc.covered = n;
      }
    }
    covered += tc.covered;
    total += tc.length;
    frac_sum += static_cast<double>(tc.covered) / static_cast<double>(tc.length);
    out.per_track.push_back(tc);
  }
  if (total > 0) {
    out.instance_weighted = static_cast<double>(covered) / static_cast<double>(total);
    out.mean_over_tracks = frac_sum / static_cast<double>(out.per_track.size());
  }
  return out;
}

struct EdgePrf {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  bool precision_defined = true;  // false when nothing was predicted positive
  bool recall_defined = true;     // false when Y has no positives
};

/// Counts at the 0.5 threshold, before conflict resolution. Undefined
/// ratios are reported as 0 with the matching flag cleared.
inline EdgePrf edge_prf(std::span<const double> probs, std::span<const int> labels) {
  if (probs.size() != labels.size()) throw ConfigError("edge_prf: length mismatch");
  double tp = 0, fp = 0, fn = 0;
  for (std::size_t e = 0; e < probs.size(); ++e) {
    const bool p = probs[e] > 0.5;
    tp += p && labels[e];
    fp += p && !labels[e];
    fn += !p && labels[e];
  }
  EdgePrf r;
  r.precision_defined = tp + fp > 0;
  r.recall_defined = tp + fn > 0;
  r.precision = r.precision_defined ? tp / (tp + fp) : 0.0;
  r.recall = r.recall_defined ? tp / (tp + fn) : 0.0;
  r.f1 = r.precision + r.recall > 0 ? 2 * r.precision * r.recall / (r.precision + r.recall) : 0.0;
  return r;
}

/// Everything `eval` reports for one predicted/GT track-table pair. Link
/// precision and recall are computed on frame-to-frame associations.
struct TrackingReport {
  double aa = 0.0;
  TeResult te;
  double link_precision = 0.0;
  double link_recall = 0.0;
  std::size_t gt_links = 0;
  std::size_t predicted_links = 0;
};

inline TrackingReport evaluate_tracks(const TrackTable& predicted, const TrackTable& gt) {
  const auto pl = table_links(predicted);
  const auto gl = table_links(gt);
  TrackingReport r;
  r.aa = association_accuracy(pl, gl);
  r.te = target_effectiveness(predicted.cell_of, gt.cell_of);
  std::size_t hits = 0;
  for (const Link& l : pl) hits += gl.count(l);
  r.link_precision = pl.empty() ? 0.0 : static_cast<double>(hits) / pl.size();
  r.link_recall = r.aa;
  r.gt_links = gl.size();
  r.predicted_links = pl.size();
  return r;
}

inline nlohmann::json to_json(const TrackingReport& r) {
  nlohmann::json per = nlohmann::json::array();
  for (const auto& t : r.te.per_track) {
    per.push_back({{"gt_cell", t.gt_cell}, {"length", t.length}, {"matched_cell", t.matched_cell}, {"covered", t.covered}});
  }
  return {{"aa", r.aa},
          {"te", r.te.instance_weighted},
          {"te_mean_over_tracks", r.te.mean_over_tracks},
          {"edge_precision", r.link_precision},
          {"edge_recall", r.link_recall},
          {"gt_links", r.gt_links},
          {"predicted_links", r.predicted_links},
          {"per_track", per}};
}

}  // namespace celltrack
