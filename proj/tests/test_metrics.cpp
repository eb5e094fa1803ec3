#include <algorithm>
#include <random>

#include <gtest/gtest.h>

#include "celltrack/metrics.hpp"

using namespace celltrack;

namespace {

/// `cells` GT tracks of length `frames`; cell c owns label c in every frame.
TrackTable straight_tracks(int cells, int frames) {
  TrackTable t;
  for (int c = 1; c <= cells; ++c) {
    t.tracks.push_back({c, 1, frames, 0});
    for (int f = 1; f <= frames; ++f) t.cell_of[{f, c}] = c;
  }
  return t;
}

/// Cells 1 and 2 trade identities from frame `at` onwards.
TrackTable with_switch(TrackTable t, int at) {
  for (auto& [key, cell] : t.cell_of) {
    if (key.frame >= at && (cell == 1 || cell == 2)) cell = 3 - cell;
  }
  return t;
}

TrackTable relabel(TrackTable t, int offset) {
  for (auto& line : t.tracks) {
    line.cell += offset;
    if (line.parent) line.parent += offset;
  }
  for (auto& [key, cell] : t.cell_of) cell += offset;
  return t;
}

double te_oracle(const TrackTable& pred, const TrackTable& gt) {
  std::set<int> gt_cells, pred_cells;
  for (const auto& [k, c] : gt.cell_of) gt_cells.insert(c);
  for (const auto& [k, c] : pred.cell_of) pred_cells.insert(c);
  double covered = 0;
  for (int g : gt_cells) {
    double best = 0;
    for (int p : pred_cells) {
      double n = 0;
      for (const auto& [k, c] : gt.cell_of) {
        auto it = pred.cell_of.find(k);
        n += c == g && it != pred.cell_of.end() && it->second == p;
      }
      best = std::max(best, n);
    }
    covered += best;
  }
  return covered / static_cast<double>(gt.cell_of.size());
}

}  // namespace

TEST(AssociationAccuracy, PerfectAndEmptyPredictions) {
  const TrackTable gt = straight_tracks(3, 5);
  const auto gl = table_links(gt);
  EXPECT_EQ(association_accuracy(gl, gl), 1.0);
  EXPECT_EQ(association_accuracy({}, gl), 0.0);
}

TEST(AssociationAccuracy, NineOfTenLinks) {
  const TrackTable gt = straight_tracks(1, 11);  // 10 links
  auto pred = table_links(gt);
  pred.erase(pred.begin());
  const auto gl = table_links(gt);
  std::size_t inter = 0;
  for (const Link& l : gl) inter += std::count(pred.begin(), pred.end(), l);
  EXPECT_EQ(gl.size(), 10u);
  EXPECT_EQ(association_accuracy(pred, gl), static_cast<double>(inter) / gl.size());
  EXPECT_DOUBLE_EQ(association_accuracy(pred, gl), 0.9);
}

TEST(AssociationAccuracy, EmptyGroundTruthIsError) {
  EXPECT_THROW(association_accuracy({}, {}), ConfigError);
}

TEST(AssociationAccuracy, DivisionLinksCount) {
  TrackTable gt;
  gt.tracks = {{1, 1, 2, 0}, {2, 3, 3, 1}, {3, 3, 3, 1}};
  gt.cell_of = {{{1, 1}, 1}, {{2, 1}, 1}, {{3, 1}, 2}, {{3, 2}, 3}};
  const auto gl = table_links(gt);
  EXPECT_EQ(gl.size(), 3u);
  // Same partition, but the daughters are not parented.
  TrackTable pred = gt;
  pred.tracks[1].parent = pred.tracks[2].parent = 0;
  EXPECT_NEAR(association_accuracy(table_links(pred), gl), 1.0 / 3.0, 1e-15);
}

TEST(TargetEffectiveness, PerfectTrackingIsOne) {
  const TrackTable gt = straight_tracks(4, 6);
  const TeResult r = target_effectiveness(gt.cell_of, gt.cell_of);
  EXPECT_EQ(r.instance_weighted, 1.0);
  EXPECT_EQ(r.mean_over_tracks, 1.0);
}

TEST(TargetEffectiveness, SingletonPredictionsCoverOneInstance) {
  const TrackTable gt = straight_tracks(1, 10);
  std::map<InstanceKey, int> pred;
  int next = 1;
  for (const auto& [k, c] : gt.cell_of) pred[k] = next++;
  EXPECT_NEAR(target_effectiveness(pred, gt.cell_of).instance_weighted, 0.1, 1e-15);
}

TEST(TargetEffectiveness, IdentitySwitchMatchesExhaustiveCoverCount) {
  const TrackTable gt = straight_tracks(5, 10);
  const TrackTable pred = with_switch(gt, 6);
  const TeResult r = target_effectiveness(pred.cell_of, gt.cell_of);
  EXPECT_NEAR(r.instance_weighted, te_oracle(pred, gt), 1e-15);
  EXPECT_NEAR(r.instance_weighted, 0.8, 1e-15);
  EXPECT_NEAR(association_accuracy(table_links(pred), table_links(gt)), 43.0 / 45.0, 1e-15);
}

TEST(TargetEffectiveness, RandomPredictionsMatchOracle) {
  std::mt19937_64 rng(1);
  const TrackTable gt = straight_tracks(6, 8);
  for (int trial = 0; trial < 50; ++trial) {
    TrackTable pred = gt;
    for (auto& [k, c] : pred.cell_of) c = 1 + static_cast<int>(rng() % 9);
    EXPECT_NEAR(target_effectiveness(pred.cell_of, gt.cell_of).instance_weighted, te_oracle(pred, gt), 1e-12);
  }
}

TEST(TargetEffectiveness, TiesGoToLongerPredictedTrack) {
  // GT track 1 has 2 instances, split between predicted 7 (length 1) and 8
  // (length 3); both cover one instance, so 8 is assigned.
  const std::map<InstanceKey, int> gt{{{1, 1}, 1}, {{2, 1}, 1}, {{1, 2}, 2}, {{2, 2}, 2}};
  const std::map<InstanceKey, int> pred{{{1, 1}, 7}, {{2, 1}, 8}, {{1, 2}, 8}, {{2, 2}, 8}};
  const TeResult r = target_effectiveness(pred, gt);
  EXPECT_EQ(r.per_track[0].matched_cell, 8);
}

TEST(Metrics, InvariantToPredictedRelabeling) {
  const TrackTable gt = straight_tracks(5, 10);
  const TrackTable pred = with_switch(gt, 4);
  const TrackTable moved = relabel(pred, 100);
  EXPECT_EQ(association_accuracy(table_links(pred), table_links(gt)),
            association_accuracy(table_links(moved), table_links(gt)));
  EXPECT_EQ(target_effectiveness(pred.cell_of, gt.cell_of).instance_weighted,
            target_effectiveness(moved.cell_of, gt.cell_of).instance_weighted);
}

TEST(Metrics, BothOneExactlyWhenForestsAgreeUpToRenaming) {
  const TrackTable gt = straight_tracks(3, 4);
  const auto report = evaluate_tracks(relabel(gt, 10), gt);
  EXPECT_EQ(report.aa, 1.0);
  EXPECT_EQ(report.te.instance_weighted, 1.0);
  // Splitting one track breaks a link, so AA drops below 1.
  TrackTable split = gt;
  split.cell_of[{3, 1}] = split.cell_of[{4, 1}] = 9;
  split.tracks.push_back({9, 3, 4, 0});
  split.tracks[0].t_fin = 2;
  const auto r2 = evaluate_tracks(split, gt);
  EXPECT_LT(r2.aa, 1.0);
  EXPECT_LT(r2.te.instance_weighted, 1.0);
}

TEST(EdgePrf, ExactPredictionsScoreOne) {
  const std::vector<double> p{1, 0, 1, 0};
  const std::vector<int> y{1, 0, 1, 0};
  const EdgePrf r = edge_prf(p, y);
  EXPECT_EQ(r.precision, 1.0);
  EXPECT_EQ(r.recall, 1.0);
  EXPECT_EQ(r.f1, 1.0);
}

TEST(EdgePrf, AllNegativePredictionsFlagUndefinedPrecision) {
  const std::vector<double> p{0.1, 0.2, 0.3};
  const std::vector<int> y{1, 0, 1};
  const EdgePrf r = edge_prf(p, y);
  EXPECT_FALSE(r.precision_defined);
  EXPECT_EQ(r.precision, 0.0);
  EXPECT_EQ(r.recall, 0.0);
  EXPECT_TRUE(r.recall_defined);
}

TEST(EdgePrf, RandomVectorsMatchConfusionLoop) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> p(30);
    std::vector<int> y(30);
    int tp = 0, fp = 0, fn = 0;
    for (std::size_t e = 0; e < 30; ++e) {
      p[e] = u(rng);
      y[e] = u(rng) < 0.4;
      if (p[e] > 0.5 && y[e]) ++tp;
      if (p[e] > 0.5 && !y[e]) ++fp;
      if (p[e] <= 0.5 && y[e]) ++fn;
    }
    const EdgePrf r = edge_prf(p, y);
    if (tp + fp > 0) EXPECT_DOUBLE_EQ(r.precision, double(tp) / (tp + fp));
    if (tp + fn > 0) EXPECT_DOUBLE_EQ(r.recall, double(tp) / (tp + fn));
  }
}

TEST(MetricsJson, HasReportedFields) {
  const TrackTable gt = straight_tracks(2, 3);
  const auto j = to_json(evaluate_tracks(gt, gt));
  for (const char* k : {"aa", "te", "edge_precision", "edge_recall", "per_track"}) EXPECT_TRUE(j.contains(k)) << k;
  EXPECT_EQ(j["per_track"].size(), 2u);
}
