#pragma once

// JSON checkpoint container:
//   {"format": "celltrack-checkpoint", "version": 1, "meta": {...},
//    "tensors": [{"name": ..., "rows": R, "cols": C, "values": [...]}, ...]}
// Doubles are written in shortest round-trip form, so save/load is
// bit-exact.

#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "celltrack/autodiff.hpp"

namespace celltrack {

inline constexpr const char* kCheckpointFormat = "celltrack-checkpoint";
inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<ad::Parameter> tensors;

  const ad::Parameter* find(const std::string& name) const {
    for (const auto& t : tensors) {
      if (t.name == name) return &t;
    }
    return nullptr;
  }
};

inline nlohmann::json checkpoint_to_json(const nlohmann::json& meta, std::span<const ad::Parameter* const> params) {
  nlohmann::json j;
  j["format"] = kCheckpointFormat;
  j["version"] = kCheckpointVersion;
  j["meta"] = meta;
  auto& arr = j["tensors"] = nlohmann::json::array();
  for (const ad::Parameter* p : params) {
    arr.push_back({{"name", p->name},
                   {"rows", p->value.rows()},
                   {"cols", p->value.cols()},
                   {"values", std::vector<double>(p->value.values().begin(), p->value.values().end())}});
  }
  return j;
}

inline Checkpoint checkpoint_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != kCheckpointFormat) throw ConfigError("checkpoint: unknown format");
  if (j.value("version", 0) != kCheckpointVersion) {
    throw ConfigError("checkpoint: unsupported version " + std::to_string(j.value("version", 0)));
  }
  Checkpoint ck;
  ck.meta = j.value("meta", nlohmann::json::object());
  for (const auto& t : j.at("tensors")) {
    const auto rows = t.at("rows").get<std::size_t>();
    const auto cols = t.at("cols").get<std::size_t>();
    ck.tensors.push_back({t.at("name").get<std::string>(), Tensor2(rows, cols, t.at("values").get<std::vector<double>>())});
  }
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const nlohmann::json& meta,
                            std::span<const ad::Parameter* const> params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  out << checkpoint_to_json(meta, params).dump() << '\n';
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read checkpoint " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(path.string(), 1, e.what());
  }
  return checkpoint_from_json(j);
}

/// Copies tensors into `params` by name; every parameter must be present
/// with a matching shape.
inline void assign_parameters(const Checkpoint& ck, std::span<ad::Parameter* const> params) {
  for (ad::Parameter* p : params) {
    const ad::Parameter* src = ck.find(p->name);
    if (src == nullptr) throw ConfigError("checkpoint: missing tensor " + p->name);
    if (!src->value.same_shape(p->value)) {
      throw ConfigError("checkpoint: tensor " + p->name + " has shape " + src->value.shape_string() +
                        ", model expects " + p->value.shape_string());
    }
    p->value = src->value;
  }
}

}  // namespace celltrack
