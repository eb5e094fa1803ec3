// celltrack: synthetic data, training, inference, evaluation and gradient
// checks from the command line.
//
// Exit codes: 0 success, 1 runtime failure (including a failed gradient
// check), 2 bad configuration or arguments.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <png.h>

#include "CLI11.hpp"

#include "celltrack/gradcheck_suite.hpp"
#include "celltrack/io.hpp"
#include "celltrack/overlay.hpp"
#include "celltrack/pipeline.hpp"

namespace fs = std::filesystem;
using namespace celltrack;

namespace {

void write_png(const fs::path& path, const RgbImage& img) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::FILE* fp = std::fopen(path.string().c_str(), "wb");
  if (fp == nullptr) throw std::runtime_error("cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png != nullptr ? png_create_info_struct(png) : nullptr;
  if (png == nullptr || info == nullptr || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw std::runtime_error("libpng failed writing " + path.string());
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t y = 0; y < img.height; ++y) {
    png_write_row(png, const_cast<png_bytep>(img.rgb.data() + y * img.width * 3));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

/// "model.json" -> "model_loss.csv" in the same directory.
fs::path loss_path(const fs::path& out) {
  fs::path p = out;
  p.replace_filename(out.stem().string() + "_loss.csv");
  return p;
}

struct CommonOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
};

PipelineConfig load_config(const CommonOptions& o) {
  PipelineConfig cfg;
  if (!o.config.empty()) {
    if (!fs::exists(o.config)) throw ConfigError("config file not found: " + o.config);
    nlohmann::json j;
    try {
      j = read_json(o.config);
    } catch (const ParseError& e) {
      throw ConfigError(e.what());
    }
    cfg = pipeline_config_from_json(j);
  }
  if (o.seed) cfg.seed = *o.seed;
  cfg.propagate_seed();
  return cfg;
}

void add_common(CLI::App* sub, CommonOptions& o) {
  sub->add_option("--config", o.config, "Pipeline config JSON");
  sub->add_option("--seed", o.seed, "Seed for every stochastic component (overrides the config)");
}

std::vector<Sequence> load_sequences(const std::vector<std::string>& dirs, bool need_gt) {
  std::vector<Sequence> out;
  for (const auto& d : dirs) {
    Dataset ds = read_dataset(d);
    if (need_gt && !ds.gt) throw ConfigError("dataset " + d + " has no gt_tracks.txt; training needs ground truth");
    out.push_back(make_sequence(fs::path(d).filename().string(), ds));
  }
  return out;
}

// ---------------------------------------------------------------------------

struct SynthOptions {
  CommonOptions common;
  std::string preset;
  std::string out;
};

int run_synth(const SynthOptions& o) {
  PipelineConfig cfg = load_config(o.common);
  SynthConfig sc = cfg.synth;
  if (!o.preset.empty()) {
    sc = synth_preset(o.preset);
    sc.seed = cfg.synth.seed;
  }
  const SynthSequence s = generate_sequence(sc);
  write_dataset(o.out, s.frames, s.gt);
  write_json(fs::path(o.out) / "synth_config.json", to_json(sc));
  std::cout << "wrote " << s.frames.size() << " frames, " << s.gt.tracks.size() << " tracks, " << s.divisions
            << " divisions to " << o.out << '\n';
  return 0;
}

struct TrainDmlOptions {
  CommonOptions common;
  std::vector<std::string> data;
  std::string out;
};

int run_train_dml(const TrainDmlOptions& o) {
  const PipelineConfig cfg = load_config(o.common);
  const auto seqs = load_sequences(o.data, true);
  EmbedderParams emb;
  const auto history = train_dml_stage(emb, seqs, cfg);
  save_embedder(o.out, emb);
  std::vector<std::vector<double>> rows;
  for (const auto& h : history) rows.push_back({double(h.step), h.loss, double(h.hard_pairs)});
  write_csv(loss_path(o.out), {"step", "loss", "hard_pairs"}, rows);
  const DmlDataset ds = make_dml_dataset(seqs);
  const RetrievalMetrics m = retrieval_metrics(embed(emb, ds.descriptors), ds.labels);
  std::cout << "embedder: " << o.out << "  final loss " << (history.empty() ? 0.0 : history.back().loss) << "  train P@1 "
            << m.p_at_1 << "  RP " << m.r_precision << "  MAP@R " << m.map_at_r << '\n';
  return 0;
}

struct TrainGnnOptions {
  CommonOptions common;
  std::vector<std::string> data;
  std::string embedder;
  std::string out;
};

int run_train_gnn(const TrainGnnOptions& o) {
  const PipelineConfig cfg = load_config(o.common);
  const auto seqs = load_sequences(o.data, true);
  TrackerBundle b;
  b.embedder = load_embedder(o.embedder);
  GnnStageResult r = train_gnn_stage(b.embedder, seqs, cfg);
  b.gnn = std::move(r.model);
  b.rule = r.rule;
  save_tracker(o.out, b);
  std::vector<std::vector<double>> rows;
  for (const auto& e : r.history) rows.push_back({double(e.epoch), e.loss, e.precision, e.recall, e.f1});
  write_csv(loss_path(o.out), {"epoch", "loss", "precision", "recall", "f1"}, rows);
  const auto& last = r.history.back();
  std::cout << "tracker: " << o.out << "  final loss " << last.loss << "  edge P " << last.precision << "  R " << last.recall
            << '\n';
  return 0;
}

struct InferOptions {
  std::string data;
  std::string model;
  std::string out;
  bool overlay = false;
};

int run_infer(const InferOptions& o) {
  const Dataset ds = read_dataset(o.data);
  const Sequence seq = make_sequence(fs::path(o.data).filename().string(), ds);
  const TrackerBundle b = load_tracker(o.model);
  const InferenceResult r = run_inference(seq, b);
  const fs::path out(o.out);
  write_track_table(out / "tracks.txt", r.tracks);
  write_embeddings_csv(out / "embeddings.csv", seq.instances, r.inputs.v_dml);

  const std::vector<int> y = seq.gt ? edge_labels(r.graph, *seq.gt) : std::vector<int>{};
  std::vector<std::vector<double>> rows;
  for (std::size_t e = 0; e < r.graph.num_edges(); ++e) {
    const CellInstance& a = seq.instances[r.graph.src[e]];
    const CellInstance& c = seq.instances[r.graph.dst[e]];
    rows.push_back({double(a.frame), double(a.label), double(c.frame), double(c.label), r.probs[e], y.empty() ? -1.0 : double(y[e])});
  }
  write_csv(out / "edges.csv", {"src_frame", "src_label", "dst_frame", "dst_label", "prob", "gt_label"}, rows);

  if (o.overlay) {
    std::size_t h = 0, w = 0;
    const FrameRecord* bg = ds.frames.empty() ? nullptr : &ds.frames.front();
    if (bg != nullptr) {
      h = bg->shape.height;
      w = bg->shape.width;
    } else {
      for (const auto& c : seq.instances) {
        h = std::max<std::size_t>(h, c.bbox_max[c.ndim - 2] + 2);
        w = std::max<std::size_t>(w, c.bbox_max[c.ndim - 1] + 2);
      }
    }
    write_png(out / "overlay.png", render_overlay(bg, h, w, r.forest, seq.instances));
  }
  std::cout << "tracks: " << (out / "tracks.txt").string() << "  " << r.tracks.tracks.size() << " trajectories over "
            << seq.num_frames << " frames, " << r.graph.num_edges() << " candidate edges\n";
  return 0;
}

struct EvalOptions {
  std::string pred;
  std::string gt;
  std::string out;
};

int run_eval(const EvalOptions& o) {
  if (!fs::exists(o.gt)) throw ConfigError("ground truth not found: " + o.gt + " (evaluation needs ground truth)");
  if (!fs::exists(o.pred)) throw ConfigError("prediction not found: " + o.pred);
  const TrackingReport rep = evaluate_tracks(read_track_table(o.pred), read_track_table(o.gt));
  const nlohmann::json j = to_json(rep);
  if (!o.out.empty()) write_json(o.out, j);
  std::cout << "aa " << format_double(rep.aa) << "  te " << format_double(rep.te.instance_weighted) << "  link precision "
            << format_double(rep.link_precision) << '\n';
  return 0;
}

struct GradcheckOptions {
  std::uint64_t seed = 11;
};

int run_gradcheck(const GradcheckOptions& o) {
  bool ok = true;
  for (const auto& e : run_gradient_suite(o.seed)) {
    ok = ok && e.report.passed();
    std::printf("%-14s %s  checked %6zu  failed %4zu  max rel err %.3e  %.1fs\n", e.component.c_str(),
                e.report.passed() ? "ok  " : "FAIL", e.report.checked, e.report.failed, e.report.max_rel_error, e.seconds);
    for (const auto& f : e.report.failures) {
      std::printf("    %s[%zu] analytic %.12e numeric %.12e rel %.3e\n", f.parameter.c_str(), f.index, f.analytic, f.numeric,
                  f.rel_error);
    }
  }
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cell tracking with an edge-classifying graph neural network"};
  app.require_subcommand(1);

  SynthOptions synth;
  auto* s = app.add_subcommand("synth", "Generate a synthetic sequence with ground truth");
  add_common(s, synth.common);
  s->add_option("--preset", synth.preset, "desk | high-motion | mitosis | static (default: the config's synth section)");
  s->add_option("--out", synth.out, "Output dataset directory")->required();

  TrainDmlOptions tdml;
  auto* td = app.add_subcommand("train-dml", "Train the instance embedder");
  add_common(td, tdml.common);
  td->add_option("--data", tdml.data, "Training dataset directories")->required()->expected(1, -1);
  td->add_option("--out", tdml.out, "Embedder checkpoint (JSON)")->required();

  TrainGnnOptions tgnn;
  auto* tg = app.add_subcommand("train-gnn", "Train the graph network on top of a trained embedder");
  add_common(tg, tgnn.common);
  tg->add_option("--data", tgnn.data, "Training dataset directories")->required()->expected(1, -1);
  tg->add_option("--embedder", tgnn.embedder, "Embedder checkpoint from train-dml")->required();
  tg->add_option("--out", tgnn.out, "Tracker checkpoint (JSON)")->required();

  InferOptions inf;
  auto* in = app.add_subcommand("infer", "Track a sequence with a trained model");
  in->add_option("--data", inf.data, "Dataset directory")->required();
  in->add_option("--model", inf.model, "Tracker checkpoint from train-gnn")->required();
  in->add_option("--out", inf.out, "Output directory")->required();
  in->add_flag("--overlay", inf.overlay, "Also write overlay.png");

  EvalOptions ev;
  auto* e = app.add_subcommand("eval", "Score predicted tracks against ground truth");
  e->add_option("--pred", ev.pred, "Predicted track file")->required();
  e->add_option("--gt", ev.gt, "Ground-truth track file")->required();
  e->add_option("--out", ev.out, "Metrics JSON output");

  GradcheckOptions gc;
  auto* g = app.add_subcommand("gradcheck", "Finite-difference check of every learnable component");
  g->add_option("--seed", gc.seed, "Seed for the random test point");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int rc = app.exit(err);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*s) return run_synth(synth);
    if (*td) return run_train_dml(tdml);
    if (*tg) return run_train_gnn(tgnn);
    if (*in) return run_infer(inf);
    if (*e) return run_eval(ev);
    if (*g) return run_gradcheck(gc);
  } catch (const ConfigError& err) {
    std::cerr << "config error: " << err.what() << '\n';
    return 2;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return 1;
  }
  return 2;
}
