#pragma once

// Per-instance measurements from a frame and its label map: the
// spatio-temporal (ST) feature table fed to the graph, and the fixed-length
// appearance descriptor fed to the metric-learning embedder.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "celltrack/errors.hpp"
#include "celltrack/tensor.hpp"

namespace celltrack {

/// Grid extent, slowest axis first. 2D frames have depth == 1.
struct GridShape {
  std::size_t depth = 1;
  std::size_t height = 0;
  std::size_t width = 0;

  int ndim() const { return depth > 1 ? 3 : 2; }
  std::size_t size() const { return depth * height * width; }
  friend bool operator==(const GridShape&, const GridShape&) = default;
};

/// One time point: intensity image and label map on the same grid.
/// Label 0 is background. `t` is 1-based.
struct FrameRecord {
  int t = 1;
  GridShape shape;
  std::vector<std::uint16_t> image;
  std::vector<std::uint16_t> labels;

  void validate() const {
    if (image.size() != shape.size() || labels.size() != shape.size()) {
      throw ConfigError("frame " + std::to_string(t) + ": image/label size does not match grid shape");
    }
  }
  friend bool operator==(const FrameRecord&, const FrameRecord&) = default;
};

using Point = std::array<double, 3>;

inline constexpr std::size_t kDescriptorSize = 24;
inline constexpr std::size_t kHistogramBins = 16;

struct CellInstance {
  int frame = 1;
  int label = 0;
  int k = 0;              // 1-based rank of the label within its frame
  std::size_t node = 0;   // global node index over the whole sequence
  int ndim = 2;
  Point centroid{};       // per axis, slowest first
  // Mask-derived measurements. False for marker-only label maps.
  bool has_mask = true;
  std::array<int, 3> bbox_min{};
  std::array<int, 3> bbox_max{};
  double area = 0.0;
  double major_axis = 0.0;  // 2D only
  double minor_axis = 0.0;  // 2D only
  double eccentricity = 0.0;
  double intensity_min = 0.0;
  double intensity_max = 0.0;
  double intensity_mean = 0.0;
  double intensity_std = 0.0;
  std::vector<double> descriptor;
  std::optional<int> gt_cell;
};

struct InstanceKey {
  int frame = 0;
  int label = 0;
  friend auto operator<=>(const InstanceKey&, const InstanceKey&) = default;
};

inline InstanceKey key_of(const CellInstance& c) { return {c.frame, c.label}; }

namespace detail {

struct BlobAccumulator {
  std::size_t count = 0;
  std::array<double, 3> sum{};
  std::array<double, 6> sum2{};  // zz zy zx yy yx xx
  std::array<int, 3> lo{INT32_MAX, INT32_MAX, INT32_MAX};
  std::array<int, 3> hi{INT32_MIN, INT32_MIN, INT32_MIN};
  double imin = 0.0, imax = 0.0, isum = 0.0, isum2 = 0.0;
  std::vector<double> intensities;
};

}  // namespace detail

/// One CellInstance per distinct nonzero label, ordered by label value.
/// `node` is left at 0; assign_node_indices sets it over a sequence.
inline std::vector<CellInstance> extract_st_features(const FrameRecord& frame, bool has_mask = true) {
  frame.validate();
  std::vector<int> slot(65536, -1);
  std::vector<std::uint16_t> present;
  for (std::uint16_t l : frame.labels) {
    if (l != 0 && slot[l] < 0) {
      slot[l] = 0;
      present.push_back(l);
    }
  }
  std::sort(present.begin(), present.end());
  for (std::size_t i = 0; i < present.size(); ++i) slot[present[i]] = static_cast<int>(i);

  std::vector<detail::BlobAccumulator> acc(present.size());
  const GridShape& s = frame.shape;
  std::size_t idx = 0;
  for (std::size_t z = 0; z < s.depth; ++z) {
    for (std::size_t y = 0; y < s.height; ++y) {
      for (std::size_t x = 0; x < s.width; ++x, ++idx) {
        const std::uint16_t l = frame.labels[idx];
        if (l == 0) continue;
        auto& a = acc[static_cast<std::size_t>(slot[l])];
        const double v = frame.image[idx];
        const std::array<double, 3> p{double(z), double(y), double(x)};
        if (a.count == 0) a.imin = a.imax = v;
        ++a.count;
        for (int d = 0; d < 3; ++d) {
          a.sum[d] += p[d];
          a.lo[d] = std::min(a.lo[d], static_cast<int>(p[d]));
          a.hi[d] = std::max(a.hi[d], static_cast<int>(p[d]));
        }
        a.sum2[0] += p[0] * p[0];
        a.sum2[1] += p[0] * p[1];
        a.sum2[2] += p[0] * p[2];
        a.sum2[3] += p[1] * p[1];
        a.sum2[4] += p[1] * p[2];
        a.sum2[5] += p[2] * p[2];
        a.imin = std::min(a.imin, v);
        a.imax = std::max(a.imax, v);
        a.isum += v;
        a.isum2 += v * v;
        a.intensities.push_back(v);
      }
    }
  }

  const int ndim = s.ndim();
  const int first_axis = ndim == 3 ? 0 : 1;  // 2D frames drop the unit z axis
  std::vector<CellInstance> out;
  out.reserve(acc.size());
  for (std::size_t i = 0; i < acc.size(); ++i) {
    const auto& a = acc[i];
    const double n = static_cast<double>(a.count);
    CellInstance c;
    c.frame = frame.t;
    c.label = present[i];
    c.k = static_cast<int>(i) + 1;
    c.ndim = ndim;
    c.has_mask = has_mask;
    for (int d = 0; d < ndim; ++d) {
      const int axis = first_axis + d;
      c.centroid[d] = a.sum[axis] / n;
      c.bbox_min[d] = a.lo[axis];
      c.bbox_max[d] = a.hi[axis];
    }
    c.area = n;
    c.intensity_min = a.imin;
    c.intensity_max = a.imax;
    c.intensity_mean = a.isum / n;
    c.intensity_std = std::sqrt(std::max(0.0, a.isum2 / n - c.intensity_mean * c.intensity_mean));

    if (ndim == 2) {
      const double my = a.sum[1] / n, mx = a.sum[2] / n;
      const double cyy = a.sum2[3] / n - my * my;
      const double cyx = a.sum2[4] / n - my * mx;
      const double cxx = a.sum2[5] / n - mx * mx;
      const double tr = cyy + cxx;
      const double disc = std::sqrt(std::max(0.0, (cyy - cxx) * (cyy - cxx) / 4.0 + cyx * cyx));
      const double l1 = std::max(0.0, tr / 2.0 + disc);
      const double l2 = std::max(0.0, tr / 2.0 - disc);
      c.major_axis = 4.0 * std::sqrt(l1);
      c.minor_axis = 4.0 * std::sqrt(l2);
      c.eccentricity = l1 > 0.0 ? std::sqrt(std::max(0.0, 1.0 - l2 / l1)) : 0.0;
    }

    // Appearance descriptor: histogram over the instance's own intensity
    // range, then size, extent, shape and intensity moments.
    std::vector<double> desc;
    desc.reserve(kDescriptorSize);
    std::array<double, kHistogramBins> hist{};
    const double span = a.imax - a.imin;
    for (double v : a.intensities) {
      std::size_t b = span > 0.0 ? static_cast<std::size_t>((v - a.imin) / span * kHistogramBins) : 0;
      hist[std::min(b, kHistogramBins - 1)] += 1.0 / n;
    }
    desc.insert(desc.end(), hist.begin(), hist.end());
    desc.push_back(n);
    for (int d = 0; d < ndim; ++d) desc.push_back(c.bbox_max[d] - c.bbox_min[d] + 1.0);
    if (ndim == 2) {
      desc.push_back(c.major_axis);
      desc.push_back(c.minor_axis);
      desc.push_back(c.eccentricity);
    }
    desc.push_back(c.intensity_mean);
    desc.push_back(c.intensity_std);
    desc.resize(kDescriptorSize, 0.0);
    c.descriptor = std::move(desc);
    out.push_back(std::move(c));
  }
  return out;
}

/// Sets node = running index over frames in order: i = sum_{t'<t} K_t' + (k-1).
/// Instances must already be sorted by (frame, k).
inline void assign_node_indices(std::vector<CellInstance>& instances) {
  for (std::size_t i = 0; i < instances.size(); ++i) {
    if (i > 0) {
      const auto& p = instances[i - 1];
      const auto& c = instances[i];
      if (c.frame < p.frame || (c.frame == p.frame && c.k <= p.k)) {
        throw ConfigError("assign_node_indices: instances not sorted by (frame, k)");
      }
    }
    instances[i].node = i;
  }
}

struct StFeatureTable {
  std::vector<std::string> names;
  Tensor2 values;
};

/// Builds the ST table. Mask-derived columns appear only when every instance
/// has a mask; ellipse axes only in 2D.
inline StFeatureTable st_feature_table(std::span<const CellInstance> instances) {
  StFeatureTable table;
  if (instances.empty()) return table;
  const int ndim = instances.front().ndim;
  const bool masks = std::all_of(instances.begin(), instances.end(), [](const CellInstance& c) { return c.has_mask; });
  auto& n = table.names;
  n.push_back("frame");
  for (int d = 0; d < ndim; ++d) n.push_back("centroid_" + std::to_string(d));
  n.insert(n.end(), {"intensity_min", "intensity_max", "intensity_mean"});
  if (masks) {
    n.push_back("area");
    if (ndim == 2) n.insert(n.end(), {"major_axis", "minor_axis"});
    for (int d = 0; d < ndim; ++d) n.push_back("bbox_min_" + std::to_string(d));
    for (int d = 0; d < ndim; ++d) n.push_back("bbox_max_" + std::to_string(d));
  }
  table.values = Tensor2(instances.size(), n.size());
  for (std::size_t r = 0; r < instances.size(); ++r) {
    const CellInstance& c = instances[r];
    if (c.ndim != ndim) throw ConfigError("st_feature_table: mixed dimensionality");
    std::vector<double> row{static_cast<double>(c.frame)};
    for (int d = 0; d < ndim; ++d) row.push_back(c.centroid[d]);
    row.insert(row.end(), {c.intensity_min, c.intensity_max, c.intensity_mean});
    if (masks) {
      row.push_back(c.area);
      if (ndim == 2) row.insert(row.end(), {c.major_axis, c.minor_axis});
      for (int d = 0; d < ndim; ++d) row.push_back(c.bbox_min[d]);
      for (int d = 0; d < ndim; ++d) row.push_back(c.bbox_max[d]);
    }
    std::copy(row.begin(), row.end(), table.values.row(r).begin());
  }
  return table;
}

/// Maps each column to [0,1]; constant columns map to 0.
inline StFeatureTable minmax_scale(StFeatureTable table) {
  Tensor2& v = table.values;
  for (std::size_t c = 0; c < v.cols(); ++c) {
    double lo = INFINITY, hi = -INFINITY;
    for (std::size_t r = 0; r < v.rows(); ++r) {
      lo = std::min(lo, v(r, c));
      hi = std::max(hi, v(r, c));
    }
    const double span = hi - lo;
    for (std::size_t r = 0; r < v.rows(); ++r) v(r, c) = span > 0.0 ? (v(r, c) - lo) / span : 0.0;
  }
  return table;
}

inline Tensor2 descriptor_table(std::span<const CellInstance> instances) {
  Tensor2 t(instances.size(), kDescriptorSize);
  for (std::size_t r = 0; r < instances.size(); ++r) {
    if (instances[r].descriptor.size() != kDescriptorSize) {
      throw ConfigError("descriptor_table: instance without a descriptor");
    }
    std::copy(instances[r].descriptor.begin(), instances[r].descriptor.end(), t.row(r).begin());
  }
  return t;
}

}  // namespace celltrack
