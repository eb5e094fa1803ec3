#pragma once

// End-to-end glue: sequence preparation, sub-sequence windows, training of
// the embedder and the GNN, inference, model bundles on disk, and the JSON
// pipeline configuration.

#include <algorithm>
#include <filesystem>
#include <iostream>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "celltrack/checkpoint.hpp"
#include "celltrack/dml.hpp"
#include "celltrack/forest.hpp"
#include "celltrack/gnn.hpp"
#include "celltrack/graph.hpp"
#include "celltrack/io.hpp"
#include "celltrack/lineage.hpp"
#include "celltrack/metrics.hpp"
#include "celltrack/st_features.hpp"
#include "celltrack/synth.hpp"

namespace celltrack {

// ---------------------------------------------------------------------------
// Sequences

/// Sets gt_cell on every instance and attaches the validated GT forest.
inline void attach_ground_truth(Sequence& seq, const TrackTable& gt) {
  for (auto& c : seq.instances) {
    auto it = gt.cell_of.find(key_of(c));
    c.gt_cell = it == gt.cell_of.end() ? std::nullopt : std::optional<int>(it->second);
  }
  LineageForest forest = forest_from_table(gt, seq.instances);
  validate_forest(forest, seq.instances, seq.num_frames);
  seq.gt = std::move(forest);
}

/// Instances must be sorted by (frame, label); k and node are reassigned.
inline Sequence make_sequence(std::string name, std::vector<CellInstance> instances, int num_frames,
                              const std::optional<TrackTable>& gt) {
  std::sort(instances.begin(), instances.end(), [](const CellInstance& a, const CellInstance& b) { return key_of(a) < key_of(b); });
  for (std::size_t i = 0; i < instances.size(); ++i) {
    instances[i].k = (i > 0 && instances[i - 1].frame == instances[i].frame) ? instances[i - 1].k + 1 : 1;
  }
  assign_node_indices(instances);
  Sequence seq{std::move(name), num_frames, std::move(instances), std::nullopt};
  if (gt) attach_ground_truth(seq, *gt);
  return seq;
}

inline Sequence make_sequence(std::string name, std::span<const FrameRecord> frames, const std::optional<TrackTable>& gt) {
  std::vector<CellInstance> all;
  int num_frames = 0;
  for (const auto& f : frames) {
    auto inst = extract_st_features(f);
    all.insert(all.end(), inst.begin(), inst.end());
    num_frames = std::max(num_frames, f.t);
  }
  return make_sequence(std::move(name), std::move(all), num_frames, gt);
}

inline Sequence make_sequence(std::string name, const Dataset& ds) {
  if (ds.detections) return make_sequence(std::move(name), *ds.detections, ds.num_frames, ds.gt);
  return make_sequence(std::move(name), std::span<const FrameRecord>(ds.frames), ds.gt);
}

inline Sequence make_sequence(std::string name, const SynthSequence& s) {
  return make_sequence(std::move(name), std::span<const FrameRecord>(s.frames), std::optional<TrackTable>(s.gt));
}

/// The instances of frames [first, last] as their own sequence. Frame
/// numbers are kept; GT tracks are clipped to the window and a parent is
/// dropped when it ends before the window starts.
inline Sequence window(const Sequence& seq, int first, int last) {
  std::vector<CellInstance> inst;
  for (const auto& c : seq.instances) {
    if (c.frame >= first && c.frame <= last) inst.push_back(c);
  }
  std::optional<TrackTable> gt;
  if (seq.gt) {
    TrackTable full = to_track_table(*seq.gt, seq.instances);
    TrackTable clipped;
    std::map<int, TrackLine> lines;
    for (const auto& t : full.tracks) lines[t.cell] = t;
    for (const auto& [key, cell] : full.cell_of) {
      if (key.frame >= first && key.frame <= last) clipped.cell_of[key] = cell;
    }
    for (auto t : full.tracks) {
      if (t.t_fin < first || t.t_init > last) continue;
      t.t_init = std::max(t.t_init, first);
      t.t_fin = std::min(t.t_fin, last);
      if (t.parent != 0 && lines.at(t.parent).t_fin < first) t.parent = 0;
      clipped.tracks.push_back(t);
    }
    gt = std::move(clipped);
  }
  // Frames stay absolute, so validation runs against the last frame index.
  return make_sequence(seq.name + "[" + std::to_string(first) + ":" + std::to_string(last) + "]", std::move(inst), last, gt);
}

/// Windows of `length` frames starting every `stride` frames; the last
/// window is aligned to the final frame so every frame-to-frame
/// association falls inside some window when stride < length.
inline std::vector<Sequence> subsequences(const Sequence& seq, int length, int stride) {
  if (length < 2) throw ConfigError("subsequence length must be >= 2");
  if (stride < 1) throw ConfigError("subsequence stride must be >= 1");
  std::vector<Sequence> out;
  if (seq.num_frames <= length) {
    out.push_back(window(seq, 1, seq.num_frames));
    return out;
  }
  int first = 1;
  for (; first + length - 1 < seq.num_frames; first += stride) out.push_back(window(seq, first, first + length - 1));
  out.push_back(window(seq, seq.num_frames - length + 1, seq.num_frames));
  return out;
}

// ---------------------------------------------------------------------------
// Configuration

struct PipelineConfig {
  DmlConfig dml;
  GnnConfig gnn;
  GnnTrainConfig train;
  double alpha = 2.0;
  int subsequence = 10;
  int stride = 2;  // start offset between training windows
  std::string synth_preset = "desk";
  SynthConfig synth;
  std::uint64_t seed = 7;

  /// Derives every stochastic component's seed from `seed`.
  void propagate_seed() {
    synth.seed = seed;
    dml.seed = seed * 1000003ULL + 1;
    train.seed = seed * 1000003ULL + 2;
  }
  std::uint64_t init_seed() const { return seed * 1000003ULL + 3; }
};

inline nlohmann::json to_json(const AdamConfig& a) {
  return {{"lr", a.lr}, {"weight_decay", a.weight_decay}, {"beta1", a.beta1}, {"beta2", a.beta2}, {"eps", a.eps}};
}

inline AdamConfig adam_config_from_json(const nlohmann::json& j, AdamConfig a) {
  a.lr = j.value("lr", a.lr);
  a.weight_decay = j.value("weight_decay", a.weight_decay);
  a.beta1 = j.value("beta1", a.beta1);
  a.beta2 = j.value("beta2", a.beta2);
  a.eps = j.value("eps", a.eps);
  return a;
}

inline nlohmann::json to_json(const PipelineConfig& c) {
  return {{"seed", c.seed},
          {"alpha", c.alpha},
          {"subsequence", c.subsequence},
          {"stride", c.stride},
          {"synth_preset", c.synth_preset},
          {"synth", to_json(c.synth)},
          {"dml",
           {{"kappa", c.dml.kappa},
            {"m", c.dml.m},
            {"alpha_ms", c.dml.alpha_ms},
            {"beta_ms", c.dml.beta_ms},
            {"lambda_ms", c.dml.lambda_ms},
            {"epsilon", c.dml.epsilon},
            {"steps", c.dml.steps},
            {"hidden", c.dml.hidden},
            {"dim", c.dml.dim},
            {"trunk_adam", to_json(c.dml.trunk_adam)},
            {"head_adam", to_json(c.dml.head_adam)}}},
          {"gnn", to_json(c.gnn)},
          {"train",
           {{"adam", to_json(c.train.adam)},
            {"epochs", c.train.epochs},
            {"joint_dml", c.train.joint_dml},
            {"dml_noise", c.train.dml_noise},
            {"lr_floor", c.train.lr_floor},
            {"dml_adam", to_json(c.train.dml_adam)}}}};
}

/// Keys absent from `j` keep their defaults. Unknown top-level keys are a
/// configuration error.
inline PipelineConfig pipeline_config_from_json(const nlohmann::json& j) {
  static const std::set<std::string> known{"seed", "alpha", "subsequence", "stride", "synth_preset", "synth", "dml", "gnn", "train"};
  if (!j.is_object()) throw ConfigError("pipeline config must be a JSON object");
  for (const auto& [k, v] : j.items()) {
    if (!known.count(k)) throw ConfigError("unknown config key '" + k + "'");
  }
  PipelineConfig c;
  try {
    c.seed = j.value("seed", c.seed);
    c.alpha = j.value("alpha", c.alpha);
    c.subsequence = j.value("subsequence", c.subsequence);
    c.stride = j.value("stride", c.stride);
    c.synth_preset = j.value("synth_preset", c.synth_preset);
    c.synth = synth_config_from_json(j.value("synth", nlohmann::json::object()), synth_preset(c.synth_preset));
    const auto d = j.value("dml", nlohmann::json::object());
    c.dml.kappa = d.value("kappa", c.dml.kappa);
    c.dml.m = d.value("m", c.dml.m);
    c.dml.alpha_ms = d.value("alpha_ms", c.dml.alpha_ms);
    c.dml.beta_ms = d.value("beta_ms", c.dml.beta_ms);
    c.dml.lambda_ms = d.value("lambda_ms", c.dml.lambda_ms);
    c.dml.epsilon = d.value("epsilon", c.dml.epsilon);
    c.dml.steps = d.value("steps", c.dml.steps);
    c.dml.hidden = d.value("hidden", c.dml.hidden);
    c.dml.dim = d.value("dim", c.dml.dim);
    c.dml.trunk_adam = adam_config_from_json(d.value("trunk_adam", nlohmann::json::object()), c.dml.trunk_adam);
    c.dml.head_adam = adam_config_from_json(d.value("head_adam", nlohmann::json::object()), c.dml.head_adam);
    c.gnn = gnn_config_from_json(j.value("gnn", nlohmann::json::object()));
    const auto t = j.value("train", nlohmann::json::object());
    c.train.adam = adam_config_from_json(t.value("adam", nlohmann::json::object()), c.train.adam);
    c.train.epochs = t.value("epochs", c.train.epochs);
    c.train.joint_dml = t.value("joint_dml", c.train.joint_dml);
    c.train.dml_noise = t.value("dml_noise", c.train.dml_noise);
    c.train.lr_floor = t.value("lr_floor", c.train.lr_floor);
    c.train.dml_adam = adam_config_from_json(t.value("dml_adam", nlohmann::json::object()), c.train.dml_adam);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad config value: ") + e.what());
  }
  if (!(c.alpha > 0.0)) throw ConfigError("alpha must be positive");
  if (c.subsequence < 2) throw ConfigError("subsequence must be >= 2");
  if (c.stride < 1) throw ConfigError("stride must be >= 1");
  if (!(c.train.dml_noise >= 0.0)) throw ConfigError("train.dml_noise must be >= 0");
  if (!(c.train.lr_floor >= 0.0 && c.train.lr_floor <= 1.0)) throw ConfigError("train.lr_floor must be in [0, 1]");
  c.propagate_seed();
  return c;
}

// ---------------------------------------------------------------------------
// Model files

inline nlohmann::json rule_to_json(const NeighborhoodRule& r) {
  return {{"alpha", r.alpha}, {"ndim", r.ndim}, {"threshold", std::vector<double>(r.threshold.begin(), r.threshold.begin() + r.ndim)}};
}

inline NeighborhoodRule rule_from_json(const nlohmann::json& j) {
  NeighborhoodRule r;
  r.alpha = j.at("alpha").get<double>();
  r.ndim = j.at("ndim").get<int>();
  const auto th = j.at("threshold").get<std::vector<double>>();
  if (r.ndim < 2 || r.ndim > 3 || th.size() != static_cast<std::size_t>(r.ndim)) throw ConfigError("bad neighborhood rule");
  std::copy(th.begin(), th.end(), r.threshold.begin());
  return r;
}

inline nlohmann::json embedder_meta(const EmbedderParams& e) {
  return {{"hidden", e.trunk.output_dim()},
          {"dim", e.head.output_dim()},
          {"input_mean", e.input_mean},
          {"input_scale", e.input_scale}};
}

inline EmbedderParams embedder_from_checkpoint(const Checkpoint& ck, const nlohmann::json& meta) {
  DmlConfig cfg;
  cfg.hidden = meta.at("hidden").get<std::size_t>();
  cfg.dim = meta.at("dim").get<std::size_t>();
  std::mt19937_64 rng(0);
  EmbedderParams e = make_embedder(cfg, rng);
  e.input_mean = meta.at("input_mean").get<std::vector<double>>();
  e.input_scale = meta.at("input_scale").get<std::vector<double>>();
  if (e.input_mean.size() != kDescriptorSize || e.input_scale.size() != kDescriptorSize) {
    throw ConfigError("embedder: standardisation vectors must have " + std::to_string(kDescriptorSize) + " entries");
  }
  assign_parameters(ck, e.parameters());
  return e;
}

inline void save_embedder(const fs::path& path, const EmbedderParams& e) {
  nlohmann::json meta = {{"kind", "embedder"}, {"embedder", embedder_meta(e)}};
  const auto params = e.parameters();
  save_checkpoint(path, meta, params);
}

inline EmbedderParams load_embedder(const fs::path& path) {
  const Checkpoint ck = load_checkpoint(path);
  if (ck.meta.value("kind", "") != "embedder" && ck.meta.value("kind", "") != "tracker") {
    throw ConfigError(path.string() + " does not contain an embedder");
  }
  return embedder_from_checkpoint(ck, ck.meta.at("embedder"));
}

/// Everything inference needs: embedder, GNN and the fitted gate.
struct TrackerBundle {
  EmbedderParams embedder;
  GnnModel gnn;
  NeighborhoodRule rule;
};

inline void save_tracker(const fs::path& path, const TrackerBundle& b) {
  nlohmann::json meta = {{"kind", "tracker"},
                         {"embedder", embedder_meta(b.embedder)},
                         {"gnn", to_json(b.gnn.config)},
                         {"rule", rule_to_json(b.rule)}};
  auto params = b.embedder.parameters();
  const auto g = b.gnn.parameters();
  params.insert(params.end(), g.begin(), g.end());
  save_checkpoint(path, meta, params);
}

inline TrackerBundle load_tracker(const fs::path& path) {
  const Checkpoint ck = load_checkpoint(path);
  if (ck.meta.value("kind", "") != "tracker") throw ConfigError(path.string() + " is not a tracker model");
  TrackerBundle b;
  try {
    b.embedder = embedder_from_checkpoint(ck, ck.meta.at("embedder"));
    std::mt19937_64 rng(0);
    b.gnn = make_gnn(gnn_config_from_json(ck.meta.at("gnn")), rng);
    assign_parameters(ck, b.gnn.parameters());
    b.rule = rule_from_json(ck.meta.at("rule"));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": bad model metadata: " + e.what());
  }
  return b;
}

// ---------------------------------------------------------------------------
// Training and inference

/// Node inputs for one graph: descriptors, DML embeddings and the per-graph
/// min-max scaled ST table.
struct NodeInputs {
  Tensor2 descriptors;
  Tensor2 v_dml;
  Tensor2 v_st;
};

inline NodeInputs node_inputs(const Sequence& seq, const EmbedderParams& embedder) {
  NodeInputs in;
  in.descriptors = descriptor_table(seq.instances);
  in.v_dml = embed(embedder, in.descriptors);
  in.v_st = minmax_scale(st_feature_table(seq.instances)).values;
  return in;
}

inline GraphSample make_graph_sample(const Sequence& seq, const EmbedderParams& embedder, const NeighborhoodRule& rule) {
  if (!seq.gt) throw ConfigError("training sequence '" + seq.name + "' has no ground truth");
  GraphSample s;
  s.name = seq.name;
  s.graph = build_graph(seq.instances, rule);
  NodeInputs in = node_inputs(seq, embedder);
  s.descriptors = std::move(in.descriptors);
  s.v_dml = std::move(in.v_dml);
  s.v_st = std::move(in.v_st);
  s.labels = edge_labels(s.graph, *seq.gt);
  return s;
}

inline std::vector<DmlStepStats> train_dml_stage(EmbedderParams& embedder, std::span<const Sequence> training,
                                                 const PipelineConfig& cfg) {
  std::mt19937_64 rng(cfg.dml.seed);
  embedder = make_embedder(cfg.dml, rng);
  const DmlDataset ds = make_dml_dataset(training);
  return train_embedder(embedder, ds, cfg.dml);
}

struct GnnStageResult {
  GnnModel model;
  NeighborhoodRule rule;
  std::vector<EpochStats> history;
};

inline GnnStageResult train_gnn_stage(EmbedderParams& embedder, std::span<const Sequence> training, const PipelineConfig& cfg,
                                      std::ostream* log = nullptr) {
  GnnStageResult r;
  r.rule = fit_neighborhood(training, cfg.alpha);
  std::vector<GraphSample> samples;
  for (const Sequence& seq : training) {
    for (const Sequence& w : subsequences(seq, cfg.subsequence, cfg.stride)) samples.push_back(make_graph_sample(w, embedder, r.rule));
  }
  if (samples.empty()) throw ConfigError("no training graphs");
  GnnConfig gc = cfg.gnn;
  gc.d_dml = samples.front().v_dml.cols();
  gc.d_st = samples.front().v_st.cols();
  std::mt19937_64 rng(cfg.init_seed());
  r.model = make_gnn(gc, rng);
  r.history = train_gnn(r.model, samples, &embedder, cfg.train);
  if (log != nullptr) {
    for (const auto& e : r.history) {
      *log << "epoch " << e.epoch << " loss " << e.loss << " P " << e.precision << " R " << e.recall << '\n';
    }
  }
  return r;
}

/// Both stages in order.
inline TrackerBundle train_tracker(std::span<const Sequence> training, const PipelineConfig& cfg, std::ostream* log = nullptr) {
  TrackerBundle b;
  train_dml_stage(b.embedder, training, cfg);
  GnnStageResult g = train_gnn_stage(b.embedder, training, cfg, log);
  b.gnn = std::move(g.model);
  b.rule = g.rule;
  return b;
}

struct InferenceResult {
  TrackedGraph graph;
  NodeInputs inputs;
  std::vector<double> probs;
  LineageForest forest;
  TrackTable tracks;
};

inline InferenceResult run_inference(const Sequence& seq, const TrackerBundle& b) {
  InferenceResult r;
  r.graph = build_graph(seq.instances, b.rule);
  r.inputs = node_inputs(seq, b.embedder);
  if (r.inputs.v_st.cols() != b.gnn.config.d_st) {
    throw ConfigError("sequence '" + seq.name + "' yields " + std::to_string(r.inputs.v_st.cols()) +
                      " ST features, model expects " + std::to_string(b.gnn.config.d_st));
  }
  r.probs = r.graph.num_edges() > 0 ? predict_edges(b.gnn, r.graph, r.inputs.v_dml, r.inputs.v_st) : std::vector<double>{};
  r.forest = infer_lineage(r.probs, r.graph, seq.instances, b.rule);
  r.tracks = to_track_table(r.forest, seq.instances);
  return r;
}

/// Tracks from the nearest-centroid baseline links.
inline TrackTable baseline_tracks(const Sequence& seq) {
  const auto links = nearest_centroid_baseline(seq.instances);
  TrackedGraph g;
  g.num_nodes = seq.instances.size();
  for (const auto& c : seq.instances) g.node_frame.push_back(c.frame);
  for (const auto& [a, b] : links) {
    g.src.push_back(a);
    g.dst.push_back(b);
  }
  const std::vector<std::uint8_t> active(links.size(), 1);
  return to_track_table(build_tracks(g, active, seq.instances), seq.instances);
}

}  // namespace celltrack
