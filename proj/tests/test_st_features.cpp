#include <map>
#include <random>

#include <gtest/gtest.h>

#include "celltrack/st_features.hpp"
#include "celltrack/synth.hpp"
#include "test_util.hpp"

using namespace celltrack;

namespace {

FrameRecord blank(std::size_t h, std::size_t w, int t = 1) {
  FrameRecord f;
  f.t = t;
  f.shape = {1, h, w};
  f.image.assign(h * w, 0);
  f.labels.assign(h * w, 0);
  return f;
}

void paint(FrameRecord& f, std::size_t y0, std::size_t x0, std::size_t y1, std::size_t x1, std::uint16_t label,
           std::uint16_t value) {
  for (std::size_t y = y0; y <= y1; ++y) {
    for (std::size_t x = x0; x <= x1; ++x) {
      f.labels[y * f.shape.width + x] = label;
      f.image[y * f.shape.width + x] = value;
    }
  }
}

struct Scan {
  double n = 0, sy = 0, sx = 0;
  int ylo = 1 << 30, yhi = -1, xlo = 1 << 30, xhi = -1;
};

}  // namespace

TEST(ExtractStFeatures, UniformSquare) {
  FrameRecord f = blank(6, 6);
  paint(f, 0, 0, 2, 2, 1, 5);
  const auto inst = extract_st_features(f);
  ASSERT_EQ(inst.size(), 1u);
  EXPECT_EQ(inst[0].centroid[0], 1.0);
  EXPECT_EQ(inst[0].centroid[1], 1.0);
  EXPECT_EQ(inst[0].area, 9.0);
  EXPECT_EQ(inst[0].intensity_min, 5.0);
  EXPECT_EQ(inst[0].intensity_max, 5.0);
  EXPECT_EQ(inst[0].intensity_mean, 5.0);
  EXPECT_EQ(inst[0].descriptor.size(), kDescriptorSize);
}

TEST(ExtractStFeatures, DisjointBlobsHaveDisjointBoxes) {
  FrameRecord f = blank(10, 10);
  paint(f, 1, 1, 3, 4, 1, 10);
  paint(f, 6, 5, 8, 8, 2, 20);
  const auto inst = extract_st_features(f);
  ASSERT_EQ(inst.size(), 2u);
  const bool disjoint = inst[0].bbox_max[0] < inst[1].bbox_min[0] || inst[1].bbox_max[0] < inst[0].bbox_min[0] ||
                        inst[0].bbox_max[1] < inst[1].bbox_min[1] || inst[1].bbox_max[1] < inst[0].bbox_min[1];
  EXPECT_TRUE(disjoint);
}

TEST(ExtractStFeatures, EmptyLabelMapGivesNoInstances) { EXPECT_TRUE(extract_st_features(blank(4, 4)).empty()); }

TEST(ExtractStFeatures, SyntheticBlobsMatchPixelScan) {
  SynthConfig cfg = synth_preset("desk");
  cfg.frames = 3;
  cfg.seed = 21;
  const auto seq = generate_sequence(cfg);
  for (const auto& f : seq.frames) {
    std::map<int, Scan> scan;
    for (std::size_t y = 0; y < f.shape.height; ++y) {
      for (std::size_t x = 0; x < f.shape.width; ++x) {
        const int l = f.labels[y * f.shape.width + x];
        if (l == 0) continue;
        Scan& s = scan[l];
        s.n += 1;
        s.sy += double(y);
        s.sx += double(x);
        s.ylo = std::min<int>(s.ylo, y);
        s.yhi = std::max<int>(s.yhi, y);
        s.xlo = std::min<int>(s.xlo, x);
        s.xhi = std::max<int>(s.xhi, x);
      }
    }
    const auto inst = extract_st_features(f);
    ASSERT_EQ(inst.size(), scan.size());
    double area_sum = 0;
    for (const auto& c : inst) {
      const Scan& s = scan.at(c.label);
      EXPECT_EQ(c.area, s.n);
      EXPECT_EQ(c.centroid[0], s.sy / s.n);
      EXPECT_EQ(c.centroid[1], s.sx / s.n);
      EXPECT_EQ(c.bbox_min[0], s.ylo);
      EXPECT_EQ(c.bbox_max[0], s.yhi);
      EXPECT_EQ(c.bbox_min[1], s.xlo);
      EXPECT_EQ(c.bbox_max[1], s.xhi);
      EXPECT_GE(c.centroid[0], c.bbox_min[0]);
      EXPECT_LE(c.centroid[0], c.bbox_max[0]);
      area_sum += c.area;
    }
    const auto nonzero = std::count_if(f.labels.begin(), f.labels.end(), [](auto l) { return l != 0; });
    EXPECT_EQ(area_sum, double(nonzero));
  }
}

TEST(ExtractStFeatures, RenumberingLabelsOnlyPermutesInstances) {
  FrameRecord f = blank(12, 12);
  paint(f, 0, 0, 2, 3, 1, 40);
  paint(f, 5, 5, 9, 7, 2, 90);
  paint(f, 8, 0, 11, 2, 3, 60);
  FrameRecord g = f;
  const std::map<int, int> remap{{1, 30}, {2, 7}, {3, 12}};
  for (auto& l : g.labels) {
    if (l != 0) l = static_cast<std::uint16_t>(remap.at(l));
  }
  const auto a = extract_st_features(f);
  const auto b = extract_st_features(g);
  ASSERT_EQ(a.size(), b.size());
  for (const auto& c : a) {
    const int mapped = remap.at(c.label);
    auto it = std::find_if(b.begin(), b.end(), [&](const CellInstance& d) { return d.label == mapped; });
    ASSERT_NE(it, b.end());
    EXPECT_EQ(it->centroid, c.centroid);
    EXPECT_EQ(it->area, c.area);
    EXPECT_EQ(it->descriptor, c.descriptor);
  }
}

TEST(ExtractStFeatures, ThreeDimensionalBlobSkipsAxisFeatures) {
  FrameRecord f;
  f.shape = {3, 4, 4};
  f.image.assign(f.shape.size(), 7);
  f.labels.assign(f.shape.size(), 0);
  for (std::size_t z = 0; z < 2; ++z) {
    for (std::size_t y = 1; y < 3; ++y) {
      for (std::size_t x = 1; x < 3; ++x) f.labels[(z * 4 + y) * 4 + x] = 1;
    }
  }
  const auto inst = extract_st_features(f);
  ASSERT_EQ(inst.size(), 1u);
  EXPECT_EQ(inst[0].ndim, 3);
  EXPECT_EQ(inst[0].centroid[0], 0.5);
  EXPECT_EQ(inst[0].centroid[1], 1.5);
  EXPECT_EQ(inst[0].centroid[2], 1.5);
  EXPECT_EQ(inst[0].area, 8.0);
  EXPECT_EQ(inst[0].major_axis, 0.0);
}

TEST(NodeIndices, FollowFrameMajorOrder) {
  FrameRecord f1 = blank(8, 8, 1), f2 = blank(8, 8, 2);
  paint(f1, 0, 0, 1, 1, 4, 1);
  paint(f1, 4, 4, 5, 5, 9, 1);
  paint(f2, 0, 0, 1, 1, 2, 1);
  auto all = extract_st_features(f1);
  auto b = extract_st_features(f2);
  all.insert(all.end(), b.begin(), b.end());
  assign_node_indices(all);
  // i = sum of earlier frame counts + (k - 1)
  EXPECT_EQ(all[0].node, 0u);
  EXPECT_EQ(all[1].node, 1u);
  EXPECT_EQ(all[2].node, 2u);
  EXPECT_EQ(all[2].k, 1);
  std::swap(all[0], all[2]);
  EXPECT_THROW(assign_node_indices(all), ConfigError);
}

TEST(MinMaxScale, SimpleColumn) {
  StFeatureTable t{{"a"}, Tensor2::from_rows({{0}, {5}, {10}})};
  const auto s = minmax_scale(t);
  EXPECT_EQ(s.values, Tensor2::from_rows({{0}, {0.5}, {1}}));
}

TEST(MinMaxScale, ConstantColumnMapsToZero) {
  StFeatureTable t{{"a"}, Tensor2::from_rows({{7}, {7}, {7}})};
  EXPECT_EQ(minmax_scale(t).values, Tensor2(3, 1));
}

TEST(MinMaxScale, RoundTripRecoversInput) {
  std::mt19937_64 rng(3);
  StFeatureTable t{{"a", "b", "c", "d"}, test::random_tensor(50, 4, rng, -20, 300)};
  const auto s = minmax_scale(t);
  for (std::size_t c = 0; c < 4; ++c) {
    double lo = INFINITY, hi = -INFINITY;
    for (std::size_t r = 0; r < 50; ++r) {
      lo = std::min(lo, t.values(r, c));
      hi = std::max(hi, t.values(r, c));
    }
    for (std::size_t r = 0; r < 50; ++r) {
      EXPECT_GE(s.values(r, c), 0.0);
      EXPECT_LE(s.values(r, c), 1.0);
      EXPECT_NEAR(s.values(r, c) * (hi - lo) + lo, t.values(r, c), 1e-12);
    }
  }
}

TEST(StFeatureTable, ManifestOrderAndMarkerOnlyColumns) {
  FrameRecord f = blank(8, 8);
  paint(f, 0, 0, 2, 2, 1, 9);
  auto inst = extract_st_features(f);
  const auto t = st_feature_table(inst);
  const std::vector<std::string> expect{"frame",     "centroid_0", "centroid_1", "intensity_min", "intensity_max",
                                        "intensity_mean", "area",  "major_axis", "minor_axis",    "bbox_min_0",
                                        "bbox_min_1", "bbox_max_0", "bbox_max_1"};
  EXPECT_EQ(t.names, expect);
  inst[0].has_mask = false;
  EXPECT_EQ(st_feature_table(inst).names.size(), 6u);
}
