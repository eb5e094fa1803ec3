#pragma once

// Synthetic microscopy-like sequences with exact ground-truth lineage:
// textured elliptical cells performing drifted random walks, dividing,
// leaving and entering. Deterministic for a fixed seed.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iostream>
#include <map>
#include <numbers>
#include <random>
#include <set>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "json.hpp"

#include "celltrack/forest.hpp"
#include "celltrack/st_features.hpp"

namespace celltrack {

struct SynthConfig {
  std::size_t height = 256;
  std::size_t width = 256;
  int frames = 30;
  int initial_cells = 15;
  double division_prob = 0.02;  // per cell per frame
  double exit_prob = 0.0;       // per cell per frame
  double entry_prob = 0.0;      // per frame
  double motion_sigma = 2.0;    // random-walk step, per axis
  double drift_max = 0.5;       // per-cell constant drift magnitude, uniform in [0, drift_max]
  double max_step = 8.0;        // steps larger than this on any axis are resampled
  double radius_min = 5.0;
  double radius_max = 9.0;
  double intensity_min = 60.0;
  double intensity_max = 220.0;
  double intensity_drift = 1.0;  // per-frame random walk of a cell's base intensity
  double noise_sigma = 3.0;
  double background = 20.0;
  int min_division_age = 3;
  bool allow_overlap = false;
  std::uint64_t seed = 7;

  void validate() const {
    auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
    if (!prob(division_prob) || !prob(exit_prob) || !prob(entry_prob)) throw ConfigError("synth: probabilities must lie in [0,1]");
    if (radius_min < 1.0 || radius_max < radius_min) throw ConfigError("synth: radii must satisfy 1 <= min <= max");
    if (frames < 1 || initial_cells < 0) throw ConfigError("synth: frames >= 1 and initial_cells >= 0 required");
    if (height < 4 * radius_max || width < 4 * radius_max) throw ConfigError("synth: grid too small for the radius range");
    if (motion_sigma < 0.0 || max_step < 0.0 || drift_max < 0.0) throw ConfigError("synth: negative motion parameter");
  }
};

/// Named profiles: desk (default), high-motion, mitosis, static.
inline SynthConfig synth_preset(const std::string& name) {
  SynthConfig c;
  if (name == "desk") return c;
  if (name == "high-motion") {
    c.initial_cells = 16;
    c.motion_sigma = 15.0;
    c.drift_max = 2.0;
    c.max_step = 34.0;
    c.radius_min = 4.0;
    c.radius_max = 7.0;
    return c;
  }
  if (name == "mitosis") {
    c.division_prob = 0.06;
    c.initial_cells = 10;
    return c;
  }
  if (name == "static") {
    c.motion_sigma = 0.0;
    c.drift_max = 0.0;
    c.division_prob = 0.0;
    c.intensity_drift = 0.0;
    return c;
  }
  throw ConfigError("unknown synth preset '" + name + "'");
}

inline nlohmann::json to_json(const SynthConfig& c) {
  return {{"height", c.height},
          {"width", c.width},
          {"frames", c.frames},
          {"initial_cells", c.initial_cells},
          {"division_prob", c.division_prob},
          {"exit_prob", c.exit_prob},
          {"entry_prob", c.entry_prob},
          {"motion_sigma", c.motion_sigma},
          {"drift_max", c.drift_max},
          {"max_step", c.max_step},
          {"radius_min", c.radius_min},
          {"radius_max", c.radius_max},
          {"intensity_min", c.intensity_min},
          {"intensity_max", c.intensity_max},
          {"intensity_drift", c.intensity_drift},
          {"noise_sigma", c.noise_sigma},
          {"background", c.background},
          {"min_division_age", c.min_division_age},
          {"allow_overlap", c.allow_overlap},
          {"seed", c.seed}};
}

/// Reads keys present in `j` over `base`.
inline SynthConfig synth_config_from_json(const nlohmann::json& j, SynthConfig base = {}) {
  SynthConfig c = base;
  c.height = j.value("height", c.height);
  c.width = j.value("width", c.width);
  c.frames = j.value("frames", c.frames);
  c.initial_cells = j.value("initial_cells", c.initial_cells);
  c.division_prob = j.value("division_prob", c.division_prob);
  c.exit_prob = j.value("exit_prob", c.exit_prob);
  c.entry_prob = j.value("entry_prob", c.entry_prob);
  c.motion_sigma = j.value("motion_sigma", c.motion_sigma);
  c.drift_max = j.value("drift_max", c.drift_max);
  c.max_step = j.value("max_step", c.max_step);
  c.radius_min = j.value("radius_min", c.radius_min);
  c.radius_max = j.value("radius_max", c.radius_max);
  c.intensity_min = j.value("intensity_min", c.intensity_min);
  c.intensity_max = j.value("intensity_max", c.intensity_max);
  c.intensity_drift = j.value("intensity_drift", c.intensity_drift);
  c.noise_sigma = j.value("noise_sigma", c.noise_sigma);
  c.background = j.value("background", c.background);
  c.min_division_age = j.value("min_division_age", c.min_division_age);
  c.allow_overlap = j.value("allow_overlap", c.allow_overlap);
  c.seed = j.value("seed", c.seed);
  return c;
}

struct SynthSequence {
  std::vector<FrameRecord> frames;
  TrackTable gt;
  int divisions = 0;
};

namespace detail {

struct SynthCell {
  int id = 0;
  int parent = 0;
  int born = 1;
  double y = 0, x = 0;
  double dy = 0, dx = 0;  // drift
  double a = 0, b = 0, angle = 0;
  double base = 0;
  double tex_amp = 0, tex_freq = 0, tex_phase = 0;

  double extent() const { return std::max(a, b); }
};

class SynthWorld {
 public:
  SynthWorld(const SynthConfig& cfg, std::ostream* warn) : cfg_(cfg), rng_(cfg.seed), warn_(warn) {}

  SynthSequence run() {
    SynthSequence out;
    for (int i = 0; i < cfg_.initial_cells; ++i) {
      if (!spawn_random(1)) {
        if (warn_) *warn_ << "warning: synth: overcrowded, placed " << i << " of " << cfg_.initial_cells << " cells\n";
        break;
      }
    }
    for (int t = 1; t <= cfg_.frames; ++t) {
      if (t > 1) step(t, out);
      render(t, out);
    }
    for (const auto& c : alive_) close_track(c, cfg_.frames);
    std::sort(tracks_.begin(), tracks_.end(), [](const TrackLine& a, const TrackLine& b) { return a.cell < b.cell; });
    out.gt.tracks = tracks_;
    return out;
  }

 private:
  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng_); }
  double normal(double sigma) { return sigma > 0.0 ? std::normal_distribution<double>(0.0, sigma)(rng_) : 0.0; }
  bool chance(double p) { return p > 0.0 && uniform(0.0, 1.0) < p; }

  bool in_bounds(double y, double x, double r) const {
    return y - r >= 1.0 && x - r >= 1.0 && y + r <= cfg_.height - 2.0 && x + r <= cfg_.width - 2.0;
  }

  bool free_at(double y, double x, double r, int ignore_a = 0, int ignore_b = 0) const {
    if (cfg_.allow_overlap) return true;
    auto clear = [&](const SynthCell& o) {
      if (o.id == ignore_a || o.id == ignore_b) return true;
      const double d = std::hypot(o.y - y, o.x - x);
      return d >= r + o.extent() + 2.0;
    };
    return std::all_of(alive_.begin(), alive_.end(), clear) && std::all_of(pending_.begin(), pending_.end(), clear);
  }

  SynthCell random_cell(int born) {
    SynthCell c;
    c.id = next_id_++;
    c.born = born;
    c.a = uniform(cfg_.radius_min, cfg_.radius_max);
    c.b = std::max(cfg_.radius_min * 0.6, c.a * uniform(0.6, 1.0));
    c.b = std::max(1.0, c.b);
    c.angle = uniform(0.0, std::numbers::pi);
    c.base = uniform(cfg_.intensity_min, cfg_.intensity_max);
    c.tex_amp = uniform(0.0, 0.35);
    c.tex_freq = uniform(1.0, 4.0);
    c.tex_phase = uniform(0.0, 2.0 * std::numbers::pi);
    const double heading = uniform(0.0, 2.0 * std::numbers::pi);
    const double speed = uniform(0.0, cfg_.drift_max);
    c.dy = speed * std::sin(heading);
    c.dx = speed * std::cos(heading);
    return c;
  }

  bool spawn_random(int born) {
    SynthCell c = random_cell(born);
    for (int attempt = 0; attempt < 200; ++attempt) {
      const double y = uniform(c.extent() + 1.0, cfg_.height - c.extent() - 2.0);
      const double x = uniform(c.extent() + 1.0, cfg_.width - c.extent() - 2.0);
      if (in_bounds(y, x, c.extent()) && free_at(y, x, c.extent())) {
        c.y = y;
        c.x = x;
        alive_.push_back(c);
        return true;
      }
    }
    --next_id_;
    return false;
  }

  void close_track(const SynthCell& c, int t_fin) { tracks_.push_back({c.id, c.born, t_fin, c.parent}); }

  bool try_divide(SynthCell& parent, int t, SynthSequence& out) {
    const double rd = std::max(cfg_.radius_min, parent.extent() * 0.8);
    for (int attempt = 0; attempt < 12; ++attempt) {
      const double theta = uniform(0.0, 2.0 * std::numbers::pi);
      const double off = rd + 1.5;
      SynthCell d1 = parent, d2 = parent;
      d1.y = parent.y + off * std::sin(theta);
      d1.x = parent.x + off * std::cos(theta);
      d2.y = parent.y - off * std::sin(theta);
      d2.x = parent.x - off * std::cos(theta);
      bool ok = true;
      for (const SynthCell* d : {&d1, &d2}) {
        ok = ok && in_bounds(d->y, d->x, rd) && free_at(d->y, d->x, rd, parent.id);
      }
      if (!ok) continue;
      for (SynthCell* d : {&d1, &d2}) {
        d->id = next_id_++;
        d->parent = parent.id;
        d->born = t;
        const double shrink = rd / parent.extent();
        d->a = std::max(1.0, parent.a * shrink);
        d->b = std::max(1.0, parent.b * shrink);
        d->angle = parent.angle + normal(0.3);
        d->base = std::clamp(parent.base + normal(15.0), cfg_.intensity_min, cfg_.intensity_max);
        d->tex_amp = std::clamp(parent.tex_amp + normal(0.05), 0.0, 0.4);
        d->tex_freq = std::clamp(parent.tex_freq + normal(0.3), 0.5, 5.0);
        const double heading = uniform(0.0, 2.0 * std::numbers::pi);
        const double speed = uniform(0.0, cfg_.drift_max);
        d->dy = speed * std::sin(heading);
        d->dx = speed * std::cos(heading);
        pending_.push_back(*d);
      }
      close_track(parent, t - 1);
      ++out.divisions;
      return true;
    }
    return false;
  }

  void move(SynthCell& c) {
    for (int attempt = 0; attempt < 30; ++attempt) {
      const double sy = c.dy + normal(cfg_.motion_sigma);
      const double sx = c.dx + normal(cfg_.motion_sigma);
      if (std::fabs(sy) > cfg_.max_step || std::fabs(sx) > cfg_.max_step) continue;
      const double ny = c.y + sy, nx = c.x + sx;
      if (in_bounds(ny, nx, c.extent()) && free_at(ny, nx, c.extent(), c.id)) {
        c.y = ny;
        c.x = nx;
        return;
      }
    }
    // Staying put is always collision-free: every cell that moved earlier
    // this frame checked against this cell's current position.
  }

  void step(int t, SynthSequence& out) {
    std::vector<SynthCell> survivors;
    pending_.clear();
    // Cells are processed in order; alive_ keeps the not-yet-processed ones
    // so collision checks see current positions.
    std::vector<SynthCell> queue = std::move(alive_);
    alive_.clear();
    for (std::size_t i = 0; i < queue.size(); ++i) {
      SynthCell c = queue[i];
      alive_.assign(queue.begin() + static_cast<std::ptrdiff_t>(i) + 1, queue.end());
      alive_.insert(alive_.end(), survivors.begin(), survivors.end());
      if (chance(cfg_.exit_prob)) {
        close_track(c, t - 1);
        continue;
      }
      if (t - c.born >= cfg_.min_division_age && chance(cfg_.division_prob) && try_divide(c, t, out)) continue;
      move(c);
      c.base = std::clamp(c.base + normal(cfg_.intensity_drift), cfg_.intensity_min, cfg_.intensity_max);
      survivors.push_back(c);
    }
    alive_ = std::move(survivors);
    alive_.insert(alive_.end(), pending_.begin(), pending_.end());
    pending_.clear();
    if (chance(cfg_.entry_prob)) spawn_random(t);
    std::sort(alive_.begin(), alive_.end(), [](const SynthCell& a, const SynthCell& b) { return a.id < b.id; });
  }

  void render(int t, SynthSequence& out) {
    FrameRecord f;
    f.t = t;
    f.shape = {1, cfg_.height, cfg_.width};
    std::vector<double> img(f.shape.size(), cfg_.background);
    f.labels.assign(f.shape.size(), 0);

    std::vector<int> labels(alive_.size());
    for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>(i) + 1;
    std::shuffle(labels.begin(), labels.end(), rng_);

    for (std::size_t i = 0; i < alive_.size(); ++i) {
      const SynthCell& c = alive_[i];
      const double r = c.extent();
      const double ca = std::cos(c.angle), sa = std::sin(c.angle);
      const auto y0 = static_cast<std::ptrdiff_t>(std::floor(c.y - r)), y1 = static_cast<std::ptrdiff_t>(std::ceil(c.y + r));
      const auto x0 = static_cast<std::ptrdiff_t>(std::floor(c.x - r)), x1 = static_cast<std::ptrdiff_t>(std::ceil(c.x + r));
      bool drawn = false;
      for (std::ptrdiff_t y = std::max<std::ptrdiff_t>(0, y0); y <= std::min<std::ptrdiff_t>(cfg_.height - 1, y1); ++y) {
        for (std::ptrdiff_t x = std::max<std::ptrdiff_t>(0, x0); x <= std::min<std::ptrdiff_t>(cfg_.width - 1, x1); ++x) {
          const double py = y - c.y, px = x - c.x;
          const double u = (px * ca + py * sa) / c.a;
          const double v = (-px * sa + py * ca) / c.b;
          const double rho2 = u * u + v * v;
          if (rho2 > 1.0) continue;
          const std::size_t idx = static_cast<std::size_t>(y) * cfg_.width + static_cast<std::size_t>(x);
          f.labels[idx] = static_cast<std::uint16_t>(labels[i]);
          img[idx] = c.base * (1.0 + c.tex_amp * std::cos(2.0 * std::numbers::pi * c.tex_freq * std::sqrt(rho2) + c.tex_phase));
          drawn = true;
        }
      }
      if (!drawn) {
        // Sub-pixel ellipse: claim the centre pixel so every cell is visible.
        const std::size_t idx = static_cast<std::size_t>(std::lround(c.y)) * cfg_.width + static_cast<std::size_t>(std::lround(c.x));
        f.labels[idx] = static_cast<std::uint16_t>(labels[i]);
        img[idx] = c.base;
      }
    }
    f.image.resize(img.size());
    for (std::size_t i = 0; i < img.size(); ++i) {
      f.image[i] = static_cast<std::uint16_t>(std::clamp(std::lround(img[i] + normal(cfg_.noise_sigma)), 0L, 65535L));
    }
    // With overlap allowed a cell can be fully painted over; it then leaves
    // the label map and the GT table for this frame.
    std::vector<std::uint8_t> seen(alive_.size() + 1, 0);
    for (std::uint16_t l : f.labels) seen[l] = 1;
    for (std::size_t i = 0; i < alive_.size(); ++i) {
      if (seen[static_cast<std::size_t>(labels[i])]) out.gt.cell_of[{t, labels[i]}] = alive_[i].id;
    }
    out.frames.push_back(std::move(f));
  }

  SynthConfig cfg_;
  std::mt19937_64 rng_;
  std::ostream* warn_;
  int next_id_ = 1;
  std::vector<SynthCell> alive_;
  std::vector<SynthCell> pending_;
  std::vector<TrackLine> tracks_;
};

}  // namespace detail

inline SynthSequence generate_sequence(const SynthConfig& cfg, std::ostream* warn = &std::cerr) {
  cfg.validate();
  return detail::SynthWorld(cfg, warn).run();
}

/// Greedy matching of consecutive frames by ascending centroid distance;
/// each instance gets at most one successor and one predecessor. Returns
/// node-index pairs.
inline std::vector<std::pair<std::size_t, std::size_t>> nearest_centroid_baseline(std::span<const CellInstance> instances,
                                                                                  double max_distance = INFINITY) {
  std::map<int, std::vector<std::size_t>> by_frame;
  for (std::size_t i = 0; i < instances.size(); ++i) by_frame[instances[i].frame].push_back(i);
  std::vector<std::pair<std::size_t, std::size_t>> links;
  for (const auto& [t, nodes] : by_frame) {
    auto next = by_frame.find(t + 1);
    if (next == by_frame.end()) continue;
    std::vector<std::tuple<double, std::size_t, std::size_t>> pairs;
    for (std::size_t i : nodes) {
      for (std::size_t j : next->second) {
        double s = 0.0;
        for (int d = 0; d < instances[i].ndim; ++d) {
          const double diff = instances[i].centroid[d] - instances[j].centroid[d];
          s += diff * diff;
        }
        const double dist = std::sqrt(s);
        if (dist <= max_distance) pairs.emplace_back(dist, i, j);
      }
    }
    std::sort(pairs.begin(), pairs.end());
    std::set<std::size_t> used_src, used_dst;
    for (const auto& [d, i, j] : pairs) {
      if (used_src.count(i) || used_dst.count(j)) continue;
      used_src.insert(i);
      used_dst.insert(j);
      links.emplace_back(i, j);
    }
  }
  std::sort(links.begin(), links.end());
  return links;
}

}  // namespace celltrack
