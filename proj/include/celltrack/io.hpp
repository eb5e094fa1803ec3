#pragma once

// Readers and writers for the on-disk formats: PGM frames and label maps,
// detection / embedding / per-instance CSVs, the track file and the dataset
// directory layout. Every writer has an exact inverse reader.

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "celltrack/errors.hpp"
#include "celltrack/forest.hpp"
#include "celltrack/st_features.hpp"
#include "celltrack/tensor.hpp"

namespace celltrack {

namespace fs = std::filesystem;

/// Shortest decimal form that parses back to the same double.
inline std::string format_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc{}) throw std::runtime_error("format_double failed");
  return std::string(buf, end);
}

namespace detail {

inline std::vector<std::string_view> split(std::string_view line, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t p = line.find(sep, start);
    out.push_back(line.substr(start, p == std::string_view::npos ? std::string_view::npos : p - start));
    if (p == std::string_view::npos) break;
    start = p + 1;
  }
  return out;
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

template <typename T>
T parse_number(std::string_view s, const std::string& file, std::size_t line) {
  s = trim(s);
  T v{};
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size()) {
    throw ParseError(file, line, "expected a number, got '" + std::string(s) + "'");
  }
  return v;
}

inline std::vector<std::string> read_lines(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

inline std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

/// Parses a CSV with a header row; returns the column index map and the
/// data rows with their 1-based line numbers.
struct CsvTable {
  std::map<std::string, std::size_t> column;
  std::vector<std::string> header;
  std::vector<std::pair<std::size_t, std::vector<std::string_view>>> rows;
  std::vector<std::string> storage;
};

inline CsvTable read_csv(const fs::path& path) {
  CsvTable t;
  t.storage = read_lines(path);
  if (t.storage.empty()) throw ParseError(path.string(), 1, "empty file, expected a header row");
  for (auto h : split(t.storage[0], ',')) {
    t.column[std::string(trim(h))] = t.header.size();
    t.header.emplace_back(trim(h));
  }
  for (std::size_t i = 1; i < t.storage.size(); ++i) {
    if (trim(t.storage[i]).empty()) continue;
    auto cells = split(t.storage[i], ',');
    if (cells.size() != t.header.size()) {
      throw ParseError(path.string(), i + 1,
                       "expected " + std::to_string(t.header.size()) + " fields, got " + std::to_string(cells.size()));
    }
    t.rows.emplace_back(i + 1, std::move(cells));
  }
  return t;
}

inline std::size_t require_column(const CsvTable& t, const std::string& name, const fs::path& path) {
  auto it = t.column.find(name);
  if (it == t.column.end()) throw ParseError(path.string(), 1, "missing column '" + name + "'");
  return it->second;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// PGM

struct PgmImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::uint16_t maxval = 0;
  std::vector<std::uint16_t> pixels;  // row-major
};

/// Reads P2 (ASCII) and P5 (binary, 8- or 16-bit big-endian) files.
inline PgmImage read_pgm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  const std::string file = path.string();
  std::size_t line = 1;

  auto next_token = [&]() {
    std::string tok;
    int c;
    while ((c = in.get()) != EOF) {
      if (c == '#') {
        while ((c = in.get()) != EOF && c != '\n') {
        }
        ++line;
        continue;
      }
      if (std::isspace(c)) {
        if (c == '\n') ++line;
        if (!tok.empty()) break;
        continue;
      }
      tok.push_back(static_cast<char>(c));
    }
    if (tok.empty()) throw ParseError(file, line, "unexpected end of file in PGM header");
    return tok;
  };
  auto header_number = [&](const char* what) {
    const std::string tok = next_token();
    std::size_t v = 0;
    auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (ec != std::errc{} || p != tok.data() + tok.size()) {
      throw ParseError(file, line, std::string("bad PGM ") + what + " '" + tok + "'");
    }
    return v;
  };

  const std::string magic = next_token();
  if (magic != "P2" && magic != "P5") throw ParseError(file, 1, "not a PGM file (magic '" + magic + "')");
  PgmImage img;
  img.width = header_number("width");
  img.height = header_number("height");
  const std::size_t maxval = header_number("maxval");
  if (img.width == 0 || img.height == 0) throw ParseError(file, line, "PGM has zero extent");
  if (maxval == 0 || maxval > 65535) throw ParseError(file, line, "PGM maxval out of range");
  img.maxval = static_cast<std::uint16_t>(maxval);
  const std::size_t n = img.width * img.height;
  img.pixels.resize(n);

  if (magic == "P2") {
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t v = header_number("pixel");
      if (v > maxval) throw ParseError(file, line, "pixel value exceeds maxval");
      img.pixels[i] = static_cast<std::uint16_t>(v);
    }
    return img;
  }
  // Exactly one whitespace byte separates maxval from the raster; the
  // tokenizer already consumed it.
  const std::size_t bytes = maxval > 255 ? 2 : 1;
  std::vector<unsigned char> raw(n * bytes);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (static_cast<std::size_t>(in.gcount()) != raw.size()) throw ParseError(file, line, "truncated PGM raster");
  for (std::size_t i = 0; i < n; ++i) {
    img.pixels[i] = bytes == 2 ? static_cast<std::uint16_t>((raw[2 * i] << 8) | raw[2 * i + 1]) : raw[i];
    if (img.pixels[i] > maxval) throw ParseError(file, line, "pixel value exceeds maxval");
  }
  return img;
}

/// Writes binary P5 with maxval = max(1, largest pixel); 16-bit samples are
/// big-endian.
inline void write_pgm(const fs::path& path, const PgmImage& img) {
  if (img.pixels.size() != img.width * img.height) throw ConfigError("write_pgm: pixel count mismatch");
  std::uint16_t maxval = 1;
  for (auto v : img.pixels) maxval = std::max(maxval, v);
  auto out = detail::open_out(path);
  out << "P5\n" << img.width << ' ' << img.height << '\n' << maxval << '\n';
  std::vector<unsigned char> raw;
  raw.reserve(img.pixels.size() * 2);
  for (auto v : img.pixels) {
    if (maxval > 255) raw.push_back(static_cast<unsigned char>(v >> 8));
    raw.push_back(static_cast<unsigned char>(v & 0xff));
  }
  out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
}

inline std::string frame_filename(int t) {
  std::ostringstream s;
  s << std::setw(4) << std::setfill('0') << t << ".pgm";
  return s.str();
}

// ---------------------------------------------------------------------------
// Track file and per-instance CSV

/// `n t_init t_fin parent` per line; the per-instance assignment goes to the
/// sibling `<stem>.csv` (frame,label,cell).
inline fs::path instance_csv_path(const fs::path& track_file) {
  fs::path p = track_file;
  return p.replace_extension(".csv");
}

inline void write_track_table(const fs::path& track_file, const TrackTable& table) {
  {
    auto out = detail::open_out(track_file);
    for (const auto& t : table.tracks) out << t.cell << ' ' << t.t_init << ' ' << t.t_fin << ' ' << t.parent << '\n';
  }
  auto out = detail::open_out(instance_csv_path(track_file));
  out << "frame,label,cell\n";
  for (const auto& [key, cell] : table.cell_of) out << key.frame << ',' << key.label << ',' << cell << '\n';
}

inline TrackTable read_track_table(const fs::path& track_file) {
  TrackTable table;
  const auto lines = detail::read_lines(track_file);
  const std::string file = track_file.string();
  for (std::size_t i = 0; i < lines.size(); ++i) {
    std::string_view l = detail::trim(lines[i]);
    if (l.empty()) continue;
    std::vector<std::string_view> f;
    for (auto tok : detail::split(l, ' ')) {
      if (!detail::trim(tok).empty()) f.push_back(tok);
    }
    if (f.size() != 4) throw ParseError(file, i + 1, "expected 'n t_init t_fin parent'");
    TrackLine t{detail::parse_number<int>(f[0], file, i + 1), detail::parse_number<int>(f[1], file, i + 1),
                detail::parse_number<int>(f[2], file, i + 1), detail::parse_number<int>(f[3], file, i + 1)};
    if (t.cell <= 0 || t.parent < 0 || t.t_init < 1 || t.t_fin < t.t_init) throw ParseError(file, i + 1, "invalid track line");
    table.tracks.push_back(t);
  }
  const fs::path csv = instance_csv_path(track_file);
  if (!fs::exists(csv)) throw std::runtime_error("missing per-instance file " + csv.string());
  const auto t = detail::read_csv(csv);
  const auto cf = detail::require_column(t, "frame", csv), cl = detail::require_column(t, "label", csv),
             cc = detail::require_column(t, "cell", csv);
  for (const auto& [line, cells] : t.rows) {
    const InstanceKey key{detail::parse_number<int>(cells[cf], csv.string(), line),
                          detail::parse_number<int>(cells[cl], csv.string(), line)};
    if (!table.cell_of.emplace(key, detail::parse_number<int>(cells[cc], csv.string(), line)).second) {
      throw ParseError(csv.string(), line, "duplicate (frame,label)");
    }
  }
  return table;
}

// ---------------------------------------------------------------------------
// Detections CSV (instances without label maps)

/// Columns: frame,label,centroid_0..,bbox_min_0..,bbox_max_0..,area,
/// major_axis,minor_axis,eccentricity,intensity_min,intensity_max,
/// intensity_mean,intensity_std,has_mask,desc_1..desc_24. Reading accepts any
/// subset beyond frame, label and the centroids; absent mask columns mark the
/// instance as mask-less.
inline void write_detections_csv(const fs::path& path, std::span<const CellInstance> instances) {
  const int ndim = instances.empty() ? 2 : instances.front().ndim;
  auto out = detail::open_out(path);
  out << "frame,label";
  for (int d = 0; d < ndim; ++d) out << ",centroid_" << d;
  for (int d = 0; d < ndim; ++d) out << ",bbox_min_" << d;
  for (int d = 0; d < ndim; ++d) out << ",bbox_max_" << d;
  out << ",area,major_axis,minor_axis,eccentricity,intensity_min,intensity_max,intensity_mean,intensity_std,has_mask";
  for (std::size_t k = 1; k <= kDescriptorSize; ++k) out << ",desc_" << k;
  out << '\n';
  for (const auto& c : instances) {
    out << c.frame << ',' << c.label;
    for (int d = 0; d < ndim; ++d) out << ',' << format_double(c.centroid[d]);
    for (int d = 0; d < ndim; ++d) out << ',' << c.bbox_min[d];
    for (int d = 0; d < ndim; ++d) out << ',' << c.bbox_max[d];
    for (double v : {c.area, c.major_axis, c.minor_axis, c.eccentricity, c.intensity_min, c.intensity_max,
                     c.intensity_mean, c.intensity_std}) {
      out << ',' << format_double(v);
    }
    out << ',' << (c.has_mask ? 1 : 0);
    for (std::size_t k = 0; k < kDescriptorSize; ++k) out << ',' << format_double(k < c.descriptor.size() ? c.descriptor[k] : 0.0);
    out << '\n';
  }
}

/// Instances come back sorted by (frame, label) with k and node assigned.
inline std::vector<CellInstance> read_detections_csv(const fs::path& path) {
  const auto t = detail::read_csv(path);
  const std::string file = path.string();
  const auto cf = detail::require_column(t, "frame", path), cl = detail::require_column(t, "label", path);
  int ndim = 0;
  while (t.column.count("centroid_" + std::to_string(ndim))) ++ndim;
  if (ndim < 2 || ndim > 3) throw ParseError(file, 1, "need centroid_0, centroid_1 [, centroid_2]");
  auto opt = [&](const std::string& name) -> std::optional<std::size_t> {
    auto it = t.column.find(name);
    return it == t.column.end() ? std::nullopt : std::optional(it->second);
  };
  bool have_bbox = true;
  for (int d = 0; d < ndim; ++d) {
    have_bbox = have_bbox && opt("bbox_min_" + std::to_string(d)) && opt("bbox_max_" + std::to_string(d));
  }
  const bool have_desc = opt("desc_1").has_value();

  std::vector<CellInstance> out;
  for (const auto& [line, cells] : t.rows) {
    auto num = [&](std::size_t col) { return detail::parse_number<double>(cells[col], file, line); };
    auto num_or = [&](const char* name, double fallback) {
      auto c = opt(name);
      return c ? num(*c) : fallback;
    };
    CellInstance c;
    c.frame = detail::parse_number<int>(cells[cf], file, line);
    c.label = detail::parse_number<int>(cells[cl], file, line);
    if (c.frame < 1 || c.label < 1) throw ParseError(file, line, "frame and label must be >= 1");
    c.ndim = ndim;
    for (int d = 0; d < ndim; ++d) c.centroid[d] = num(t.column.at("centroid_" + std::to_string(d)));
    c.has_mask = have_bbox && num_or("has_mask", 1.0) != 0.0;
    if (have_bbox) {
      for (int d = 0; d < ndim; ++d) {
        c.bbox_min[d] = detail::parse_number<int>(cells[t.column.at("bbox_min_" + std::to_string(d))], file, line);
        c.bbox_max[d] = detail::parse_number<int>(cells[t.column.at("bbox_max_" + std::to_string(d))], file, line);
      }
    }
    c.area = num_or("area", 0.0);
    c.major_axis = num_or("major_axis", 0.0);
    c.minor_axis = num_or("minor_axis", 0.0);
    c.eccentricity = num_or("eccentricity", 0.0);
    c.intensity_min = num_or("intensity_min", 0.0);
    c.intensity_max = num_or("intensity_max", 0.0);
    c.intensity_mean = num_or("intensity_mean", 0.0);
    c.intensity_std = num_or("intensity_std", 0.0);
    c.descriptor.assign(kDescriptorSize, 0.0);
    if (have_desc) {
      for (std::size_t k = 0; k < kDescriptorSize; ++k) {
        auto col = opt("desc_" + std::to_string(k + 1));
        if (!col) throw ParseError(file, 1, "descriptor columns must run desc_1..desc_24");
        c.descriptor[k] = num(*col);
      }
    } else {
      // Without a descriptor only the intensity moments are known.
      c.descriptor[kDescriptorSize - 2] = c.intensity_mean;
      c.descriptor[kDescriptorSize - 1] = c.intensity_std;
    }
    out.push_back(std::move(c));
  }
  std::sort(out.begin(), out.end(), [](const CellInstance& a, const CellInstance& b) { return key_of(a) < key_of(b); });
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (i > 0 && key_of(out[i]) == key_of(out[i - 1])) {
      throw ParseError(file, 1, "duplicate instance (frame " + std::to_string(out[i].frame) + ", label " +
                                    std::to_string(out[i].label) + ")");
    }
    out[i].k = (i > 0 && out[i - 1].frame == out[i].frame) ? out[i - 1].k + 1 : 1;
    out[i].node = i;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Embeddings CSV

inline void write_embeddings_csv(const fs::path& path, std::span<const CellInstance> instances, const Tensor2& emb) {
  if (emb.rows() != instances.size()) throw ConfigError("write_embeddings_csv: row count mismatch");
  auto out = detail::open_out(path);
  out << "frame,label";
  for (std::size_t k = 1; k <= emb.cols(); ++k) out << ",e_" << k;
  out << '\n';
  for (std::size_t i = 0; i < instances.size(); ++i) {
    out << instances[i].frame << ',' << instances[i].label;
    for (double v : emb.row(i)) out << ',' << format_double(v);
    out << '\n';
  }
}

struct EmbeddingTable {
  std::vector<InstanceKey> keys;
  Tensor2 values;
};

inline EmbeddingTable read_embeddings_csv(const fs::path& path) {
  const auto t = detail::read_csv(path);
  const std::string file = path.string();
  const auto cf = detail::require_column(t, "frame", path), cl = detail::require_column(t, "label", path);
  std::size_t dim = 0;
  while (t.column.count("e_" + std::to_string(dim + 1))) ++dim;
  EmbeddingTable out;
  out.values = Tensor2(t.rows.size(), dim);
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const auto& [line, cells] = t.rows[r];
    out.keys.push_back({detail::parse_number<int>(cells[cf], file, line), detail::parse_number<int>(cells[cl], file, line)});
    for (std::size_t k = 0; k < dim; ++k) {
      out.values(r, k) = detail::parse_number<double>(cells[t.column.at("e_" + std::to_string(k + 1))], file, line);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dataset directory

/// Layout: frames/NNNN.pgm (intensity), labels/NNNN.pgm (label maps) or
/// detections.csv, optional gt_tracks.txt + gt_tracks.csv.
struct Dataset {
  std::vector<FrameRecord> frames;                      // empty when only detections are given
  std::optional<std::vector<CellInstance>> detections;  // set when labels/ is absent
  std::optional<TrackTable> gt;
  int num_frames = 0;
};

inline void write_dataset(const fs::path& dir, const std::vector<FrameRecord>& frames, const std::optional<TrackTable>& gt) {
  fs::create_directories(dir / "frames");
  fs::create_directories(dir / "labels");
  for (const auto& f : frames) {
    f.validate();
    if (f.shape.depth != 1) throw ConfigError("write_dataset: PGM output supports 2D frames only");
    write_pgm(dir / "frames" / frame_filename(f.t), {f.shape.width, f.shape.height, 0, f.image});
    write_pgm(dir / "labels" / frame_filename(f.t), {f.shape.width, f.shape.height, 0, f.labels});
  }
  if (gt) write_track_table(dir / "gt_tracks.txt", *gt);
}

namespace detail {

inline std::map<int, fs::path> list_frames(const fs::path& dir) {
  std::map<int, fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file() || e.path().extension() != ".pgm") continue;
    const std::string stem = e.path().stem().string();
    int t = 0;
    auto [p, ec] = std::from_chars(stem.data(), stem.data() + stem.size(), t);
    if (ec != std::errc{} || p != stem.data() + stem.size()) {
      throw ParseError(e.path().string(), 1, "frame file name must be a zero-padded index");
    }
    out[t] = e.path();
  }
  int expect = 1;
  for (const auto& [t, path] : out) {
    if (t != expect++) throw ParseError(path.string(), 1, "frame indices must run 1..T without gaps");
  }
  return out;
}

}  // namespace detail

inline Dataset read_dataset(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw ConfigError("dataset directory not found: " + dir.string());
  Dataset ds;
  const bool have_labels = fs::is_directory(dir / "labels");
  const bool have_detections = fs::exists(dir / "detections.csv");
  if (have_labels) {
    const auto labels = detail::list_frames(dir / "labels");
    std::map<int, fs::path> images;
    if (fs::is_directory(dir / "frames")) images = detail::list_frames(dir / "frames");
    for (const auto& [t, lpath] : labels) {
      const PgmImage lab = read_pgm(lpath);
      FrameRecord f;
      f.t = t;
      f.shape = {1, lab.height, lab.width};
      f.labels = lab.pixels;
      auto it = images.find(t);
      if (it != images.end()) {
        PgmImage img = read_pgm(it->second);
        if (img.width != lab.width || img.height != lab.height) {
          throw ParseError(it->second.string(), 1, "image and label map shapes differ");
        }
        f.image = std::move(img.pixels);
      } else {
        f.image.assign(lab.pixels.size(), 0);
      }
      ds.frames.push_back(std::move(f));
    }
    ds.num_frames = static_cast<int>(ds.frames.size());
  } else if (have_detections) {
    ds.detections = read_detections_csv(dir / "detections.csv");
    for (const auto& c : *ds.detections) ds.num_frames = std::max(ds.num_frames, c.frame);
  } else {
    throw ConfigError("dataset " + dir.string() + " has neither labels/ nor detections.csv");
  }
  if (fs::exists(dir / "gt_tracks.txt")) ds.gt = read_track_table(dir / "gt_tracks.txt");
  return ds;
}

// ---------------------------------------------------------------------------
// Small writers

inline void write_json(const fs::path& path, const nlohmann::json& j) {
  auto out = detail::open_out(path);
  out << j.dump(2) << '\n';
}

inline nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(path.string(), 1, e.what());
  }
}

/// Header row then one row per record; doubles in shortest round-trip form.
inline void write_csv(const fs::path& path, const std::vector<std::string>& header,
                      const std::vector<std::vector<double>>& rows) {
  auto out = detail::open_out(path);
  for (std::size_t i = 0; i < header.size(); ++i) out << (i ? "," : "") << header[i];
  out << '\n';
  for (const auto& r : rows) {
    for (std::size_t i = 0; i < r.size(); ++i) out << (i ? "," : "") << format_double(r[i]);
    out << '\n';
  }
}

}  // namespace celltrack
