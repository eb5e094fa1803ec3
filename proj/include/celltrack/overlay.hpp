#pragma once

// Trajectory overlay raster: a grey background frame with every track drawn
// as a coloured polyline through its centroids, and parent-to-daughter joins.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "celltrack/forest.hpp"
#include "celltrack/st_features.hpp"

namespace celltrack {

struct RgbImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> rgb;  // row-major, 3 bytes per pixel

  RgbImage() = default;
  RgbImage(std::size_t w, std::size_t h) : width(w), height(h), rgb(w * h * 3, 0) {}

  void put(long x, long y, std::array<std::uint8_t, 3> c) {
    if (x < 0 || y < 0 || x >= static_cast<long>(width) || y >= static_cast<long>(height)) return;
    std::copy(c.begin(), c.end(), rgb.begin() + (static_cast<std::size_t>(y) * width + static_cast<std::size_t>(x)) * 3);
  }
};

/// Deterministic, well-spread colour per track index (golden-ratio hue walk).
inline std::array<std::uint8_t, 3> track_colour(int cell) {
  const double h = std::fmod(0.13 + 0.618033988749895 * cell, 1.0) * 6.0;
  const double f = h - std::floor(h);
  const double v = 1.0, s = 0.85;
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  std::array<double, 3> c{};
  switch (static_cast<int>(h) % 6) {
    case 0: c = {v, t, p}; break;
    case 1: c = {q, v, p}; break;
    case 2: c = {p, v, t}; break;
    case 3: c = {p, q, v}; break;
    case 4: c = {t, p, v}; break;
    default: c = {v, p, q}; break;
  }
  return {static_cast<std::uint8_t>(255 * c[0]), static_cast<std::uint8_t>(255 * c[1]), static_cast<std::uint8_t>(255 * c[2])};
}

inline void draw_line(RgbImage& img, double y0, double x0, double y1, double x1, std::array<std::uint8_t, 3> c) {
  const int steps = std::max(1, static_cast<int>(std::ceil(std::max(std::fabs(x1 - x0), std::fabs(y1 - y0)))));
  for (int i = 0; i <= steps; ++i) {
    const double a = static_cast<double>(i) / steps;
    img.put(std::lround(x0 + a * (x1 - x0)), std::lround(y0 + a * (y1 - y0)), c);
  }
}

/// Background is `frame`'s intensity image rescaled to 0..160 so tracks stay
/// visible; pass nullptr for black. 3D inputs are projected onto (y, x).
inline RgbImage render_overlay(const FrameRecord* frame, std::size_t height, std::size_t width, const LineageForest& forest,
                               std::span<const CellInstance> instances) {
  RgbImage img(width, height);
  if (frame != nullptr && frame->shape.depth == 1 && frame->shape.height == height && frame->shape.width == width &&
      !frame->image.empty()) {
    const auto [lo, hi] = std::minmax_element(frame->image.begin(), frame->image.end());
    const double span = std::max(1.0, static_cast<double>(*hi) - *lo);
    for (std::size_t i = 0; i < frame->image.size(); ++i) {
      const auto g = static_cast<std::uint8_t>(160.0 * (frame->image[i] - *lo) / span);
      std::fill_n(img.rgb.begin() + i * 3, 3, g);
    }
  }
  // Spatial axes are the last two of (z, y, x) / (y, x).
  auto yx = [&](std::size_t node) {
    const CellInstance& c = instances[node];
    return std::pair{c.centroid[c.ndim - 2], c.centroid[c.ndim - 1]};
  };
  for (const Trajectory& t : forest.tracks) {
    const auto colour = track_colour(t.cell);
    if (t.parent != 0) {
      if (const Trajectory* p = forest.find(t.parent); p != nullptr && !p->nodes.empty() && !t.nodes.empty()) {
        const auto [y0, x0] = yx(p->nodes.back());
        const auto [y1, x1] = yx(t.nodes.front());
        draw_line(img, y0, x0, y1, x1, {255, 255, 255});
      }
    }
    for (std::size_t i = 1; i < t.nodes.size(); ++i) {
      const auto [y0, x0] = yx(t.nodes[i - 1]);
      const auto [y1, x1] = yx(t.nodes[i]);
      draw_line(img, y0, x0, y1, x1, colour);
    }
    if (!t.nodes.empty()) {
      const auto [y, x] = yx(t.nodes.front());
      for (long dy = -1; dy <= 1; ++dy) {
        for (long dx = -1; dx <= 1; ++dx) img.put(std::lround(x) + dx, std::lround(y) + dy, colour);
      }
    }
  }
  return img;
}

}  // namespace celltrack
