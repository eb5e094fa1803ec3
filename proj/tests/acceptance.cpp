// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fail.

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <random>
#include <sstream>
#include <string>

#include "celltrack/gradcheck_suite.hpp"
#include "celltrack/io.hpp"
#include "celltrack/lineage.hpp"
#include "celltrack/metrics.hpp"
#include "celltrack/pipeline.hpp"
#include "celltrack/synth.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace celltrack;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

int failures = 0;

void report(const char* name, bool ok, const std::string& detail) {
  std::printf("%s  %-22s %s\n", ok ? "PASS" : "FAIL", name, detail.c_str());
  std::fflush(stdout);
  failures += ok ? 0 : 1;
}

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

TrackedGraph layered_graph(const std::vector<int>& widths, double p, std::mt19937_64& rng) {
  TrackedGraph g;
  std::vector<std::vector<std::size_t>> layer;
  for (std::size_t t = 0; t < widths.size(); ++t) {
    layer.emplace_back();
    for (int i = 0; i < widths[t]; ++i) {
      layer.back().push_back(g.num_nodes++);
      g.node_frame.push_back(static_cast<int>(t) + 1);
    }
  }
  std::uniform_real_distribution<double> u(0, 1);
  for (std::size_t t = 0; t + 1 < layer.size(); ++t) {
    for (std::size_t i : layer[t]) {
      for (std::size_t j : layer[t + 1]) {
        if (u(rng) < p) {
          g.src.push_back(i);
          g.dst.push_back(j);
        }
      }
    }
  }
  return g;
}

Tensor2 logits(const GnnModel& m, const TrackedGraph& g, const Tensor2& dml, const Tensor2& st) {
  ad::Tape tape(ad::Mode::Eval);
  return gnn_forward(tape, m, g, tape.constant(dml), tape.constant(st)).logits.value();
}

// ---------------------------------------------------------------------------

void gradient_suite() {
  const auto t0 = Clock::now();
  const auto entries = run_gradient_suite();
  const double secs = since(t0);
  bool ok = secs < 120.0;
  std::size_t checked = 0, failed = 0;
  double worst = 0.0;
  for (const auto& e : entries) {
    ok = ok && e.report.passed();
    checked += e.report.checked;
    failed += e.report.failed;
    worst = std::max(worst, e.report.max_rel_error);
  }
  report("gradient-suite", ok,
         fmt("%zu components, %zu entries, %zu failed, max rel err %.2e (< 1e-4), %.1fs (< 120s)", entries.size(), checked,
             failed, worst, secs));
}

void equation_oracles() {
  std::mt19937_64 rng(4);
  GnnConfig c;
  c.d_dml = 8;
  c.d_st = 5;
  c.blocks = 1;
  const GnnModel m = make_gnn(c, rng);
  TrackedGraph g;
  g.num_nodes = 3;
  g.node_frame = {1, 2, 3};
  g.src = {0, 1};
  g.dst = {1, 2};
  const Tensor2 dml = test::random_tensor(3, 8, rng), st = test::random_tensor(3, 5, rng, 0, 1);
  const auto probs = predict_edges(m, g, dml, st);
  const auto ref = oracle::gnn_probs(m, g, dml, st);
  double err = 0.0;
  for (std::size_t e = 0; e < ref.size(); ++e) err = std::max(err, std::fabs(probs[e] - ref[e]));
  report("oracle-gnn-L1", probs.size() == 2 && err <= 1e-10, fmt("3-node path graph, max |p - p_ref| %.2e (<= 1e-10)", err));

  std::uniform_int_distribution<int> dim(1, 64);
  std::normal_distribution<double> nd(0, 1);
  double ds_err = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> a(dim(rng)), b(a.size());
    for (std::size_t k = 0; k < a.size(); ++k) {
      a[k] = nd(rng);
      b[k] = nd(rng);
    }
    const auto got = ds_vector(a, b);
    double dot = 0, na = 0, nb = 0;
    for (std::size_t k = 0; k < a.size(); ++k) {
      ds_err = std::max(ds_err, std::fabs(got[k] - std::fabs(a[k] - b[k])));
      dot += a[k] * b[k];
      na += a[k] * a[k];
      nb += b[k] * b[k];
    }
    ds_err = std::max(ds_err, std::fabs(got.back() - dot / (std::sqrt(na) * std::sqrt(nb))));
  }
  report("oracle-ds-vector", ds_err <= 1e-12, fmt("1000 random pairs, max abs err %.2e (<= 1e-12)", ds_err));
}

/// Nodes with a directed path of exactly `hops` edges into `node`.
std::vector<bool> upstream(const TrackedGraph& g, std::size_t node, int hops) {
  std::vector<bool> cur(g.num_nodes);
  cur[node] = true;
  for (int h = 0; h < hops; ++h) {
    std::vector<bool> next(g.num_nodes);
    for (std::size_t e = 0; e < g.num_edges(); ++e) {
      if (cur[g.dst[e]]) next[g.src[e]] = true;
    }
    cur = std::move(next);
  }
  return cur;
}

// The edge's source sits at frame L+2, so frames 2 and 1 are exactly L and
// L+1 frames upstream of it. Every node of the chosen frame is perturbed.
// Graphs where no frame-2 node reaches the source are redrawn: with nothing
// upstream there is nothing to propagate.
void locality() {
  std::mt19937_64 rng(31);
  std::normal_distribution<double> nd(0, 1);
  bool ok = true;
  std::string detail;
  for (int L = 1; L <= 3; ++L) {
    GnnConfig c;
    c.d_dml = 8;
    c.d_st = 5;
    c.blocks = L;
    const int trials = 200;
    int changed = 0, redrawn = 0;
    double far_delta = 0.0;
    for (int trial = 0; trial < trials; ++trial) {
      const GnnModel m = make_gnn(c, rng);
      std::vector<int> widths(L + 3);
      for (int& w : widths) w = 1 + static_cast<int>(rng() % 3);
      TrackedGraph g = layered_graph(widths, 0.7, rng);
      std::vector<std::size_t> probe;
      for (std::size_t e = 0; e < g.num_edges(); ++e) {
        if (g.node_frame[g.src[e]] == L + 2) probe.push_back(e);
      }
      if (probe.empty()) {
        --trial;
        continue;
      }
      const std::size_t e = probe[rng() % probe.size()];
      const auto up = upstream(g, g.src[e], L);
      if (std::find(up.begin(), up.end(), true) == up.end()) {
        ++redrawn;
        --trial;
        continue;
      }
      const Tensor2 dml = test::unit_rows(test::random_tensor(g.num_nodes, 8, rng)), st = test::random_tensor(g.num_nodes, 5, rng, 0, 1);
      const double base = logits(m, g, dml, st)(e, 0);
      auto perturbed = [&](int frame) {
        Tensor2 d = dml, s = st;
        for (std::size_t n = 0; n < g.num_nodes; ++n) {
          if (g.node_frame[n] != frame) continue;
          for (double& v : d.row(n)) v += nd(rng);
          for (double& v : s.row(n)) v += nd(rng);
        }
        return std::fabs(logits(m, g, test::unit_rows(d), s)(e, 0) - base);
      };
      far_delta = std::max(far_delta, perturbed(1));
      changed += perturbed(2) > 1e-9;
    }
    const double rate = static_cast<double>(changed) / trials;
    ok = ok && far_delta <= 1e-9 && rate >= 0.95;
    detail += fmt("L=%d: |d| at L+1 %.1e, changed at L %.3f (%d unconnected redrawn); ", L, far_delta, rate, redrawn);
  }
  report("locality", ok, detail + "(<= 1e-9, >= 0.95)");
}

void inference_invariants() {
  std::mt19937_64 rng(41);
  std::uniform_int_distribution<int> frames(2, 6), width(1, 5);
  std::uniform_real_distribution<double> u(0, 1);
  int bad_degree = 0, bad_partition = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<int> widths(frames(rng));
    for (int& w : widths) w = width(rng);
    const TrackedGraph g = layered_graph(widths, 0.6, rng);
    std::vector<CellInstance> inst;
    for (std::size_t n = 0; n < g.num_nodes; ++n) inst.push_back(test::instance(g.node_frame[n], n, 10.0 * n, 0.0));
    std::vector<double> p(g.num_edges());
    for (double& v : p) v = u(rng) < 0.1 ? 0.75 : u(rng);
    const auto active = resolve_edges(p, g);
    std::vector<int> in(g.num_nodes), out(g.num_nodes);
    for (std::size_t e = 0; e < active.size(); ++e) {
      if (!active[e]) continue;
      ++in[g.dst[e]];
      ++out[g.src[e]];
    }
    for (std::size_t n = 0; n < g.num_nodes; ++n) bad_degree += in[n] > 1 || out[n] > 2;
    try {
      const LineageForest f = build_tracks(g, active, inst);
      validate_forest(f, inst, static_cast<int>(widths.size()));
      bad_partition += f.total_length() != g.num_nodes;
    } catch (const std::exception&) {
      ++bad_partition;
    }
  }
  report("inference-invariants", bad_degree == 0 && bad_partition == 0,
         fmt("1000 trials, degree violations %d, partition violations %d", bad_degree, bad_partition));
}

struct Benchmark {
  std::vector<TrackingReport> gnn, baseline;
};

Benchmark benchmark(const std::string& preset) {
  std::vector<Sequence> train, held_out;
  for (int i = 0; i < 7; ++i) {
    SynthConfig sc = synth_preset(preset);
    sc.seed = 100 + i;
    (i < 5 ? train : held_out).push_back(make_sequence(preset + std::to_string(i), generate_sequence(sc, nullptr)));
  }
  PipelineConfig cfg;
  cfg.seed = 7;
  cfg.propagate_seed();
  const TrackerBundle b = train_tracker(train, cfg);
  Benchmark out;
  for (const auto& seq : held_out) {
    const TrackTable gt = to_track_table(*seq.gt, seq.instances);
    out.gnn.push_back(evaluate_tracks(run_inference(seq, b).tracks, gt));
    out.baseline.push_back(evaluate_tracks(baseline_tracks(seq), gt));
  }
  return out;
}

void end_to_end() {
  const auto t0 = Clock::now();
  const Benchmark desk = benchmark("desk");
  bool desk_ok = true;
  std::string d;
  for (const auto& r : desk.gnn) {
    desk_ok = desk_ok && r.aa >= 0.95 && r.te.instance_weighted >= 0.90;
    d += fmt("AA %.3f TE %.3f; ", r.aa, r.te.instance_weighted);
  }
  report("e2e-desk", desk_ok, "held-out " + d + "(AA >= 0.95, TE >= 0.90)");

  const Benchmark hm = benchmark("high-motion");
  bool hm_ok = true;
  std::string h;
  for (std::size_t i = 0; i < hm.gnn.size(); ++i) {
    const auto &g = hm.gnn[i], &b = hm.baseline[i];
    hm_ok = hm_ok && g.aa > b.aa && g.te.instance_weighted > b.te.instance_weighted && b.aa < 0.85;
    h += fmt("AA %.3f vs %.3f, TE %.3f vs %.3f; ", g.aa, b.aa, g.te.instance_weighted, b.te.instance_weighted);
  }
  report("e2e-high-motion", hm_ok, "GNN vs baseline " + h + "(GNN > baseline, baseline AA < 0.85)");

  const double secs = since(t0);
  report("e2e-runtime", secs < 900.0, fmt("%.0fs for both presets (< 900s)", secs));
}

void dml_suite() {
  const DmlDataset ds = test::separable_dataset(24, 10, 15, 0.3);
  DmlConfig cfg;
  cfg.steps = 1500;
  cfg.seed = 3;
  std::mt19937_64 rng(4);
  EmbedderParams emb = make_embedder(cfg, rng);
  const auto hist = train_embedder(emb, ds, cfg);
  std::size_t hard = 0;
  for (std::size_t s = hist.size() - 100; s < hist.size(); ++s) hard += hist[s].hard_pairs;
  const RetrievalMetrics rm = retrieval_metrics(embed(emb, ds.descriptors), ds.labels);
  report("dml-training", hard == 0 && rm.p_at_1 >= 0.9,
         fmt("hard pairs over last 100 batches %zu (== 0), P@1 %.3f (>= 0.9), RP %.3f, MAP@R %.3f", hard, rm.p_at_1,
             rm.r_precision, rm.map_at_r));

  std::mt19937_64 r2(10);
  const MsLossParams m;
  double err = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const Tensor2 a = affinity(test::unit_rows(test::random_tensor(32, 6, r2)));
    std::vector<int> y(32);
    for (std::size_t i = 0; i < 32; ++i) y[i] = static_cast<int>(i / 4);
    const MinedPairs p = mine_hard_pairs(a, y, 0.1);
    ad::Tape tape(ad::Mode::Eval);
    err = std::max(err, std::fabs(multi_similarity_loss(tape.constant(a), p, m).scalar() - oracle::ms_loss(a, p, m)));
  }
  report("dml-ms-loss-oracle", err <= 1e-10, fmt("100 random batches, max abs err %.2e (<= 1e-10)", err));
}

// GT forests with parents removed; every triplet that is the only gated
// candidate for its tracks must get its parent back.
void mitosis() {
  SynthConfig cfg = synth_preset("mitosis");
  int sequences = 0, checked = 0, recovered = 0;
  for (std::uint64_t seed = 1; seed <= 30; ++seed) {
    cfg.seed = seed;
    const SynthSequence s = generate_sequence(cfg, nullptr);
    if (s.divisions < 3) continue;
    ++sequences;
    const Sequence seq = make_sequence("m", s);
    const NeighborhoodRule rule = fit_neighborhood(std::span(&seq, 1), 2.0, nullptr);
    const LineageForest gt = canonical_numbering(*seq.gt, seq.instances);
    LineageForest stripped = gt;
    for (auto& t : stripped.tracks) t.parent = 0;
    const auto cands = oracle::mitosis_candidates(stripped, seq.instances, rule);
    const LineageForest found = detect_mitosis(stripped, seq.instances, rule);
    for (const auto& [mother, kids] : gt.children()) {
      const oracle::Triplet t{mother, std::min(kids[0], kids[1]), std::max(kids[0], kids[1])};
      if (kids.size() != 2 || !oracle::unambiguous(t, cands)) continue;
      ++checked;
      recovered += found.find(kids[0])->parent == mother && found.find(kids[1])->parent == mother;
    }
  }
  report("mitosis", checked >= 3 && recovered == checked,
         fmt("%d sequences with >= 3 divisions, %d/%d unambiguous divisions recovered", sequences, recovered, checked));
}

int cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(CELLTRACK_CLI) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// Full CLI pipeline, twice from scratch in separate directories.
void determinism() {
  const fs::path root = fs::temp_directory_path() / "celltrack_acceptance";
  fs::remove_all(root);
  fs::create_directories(root);
  std::ofstream(root / "cfg.json") << R"({"seed": 9, "synth": {"frames": 16, "initial_cells": 10}, "dml": {"steps": 300},
  "train": {"epochs": 4}})";
  const std::string cfg = " --config " + (root / "cfg.json").string();
  auto run = [&](const fs::path& dir) {
    const fs::path log = dir / "log";
    fs::create_directories(dir);
    const std::string p = dir.string() + "/";
    return cli("synth" + cfg + " --out " + p + "a", log) == 0 && cli("synth" + cfg + " --seed 10 --out " + p + "b", log) == 0 &&
           cli("synth" + cfg + " --seed 11 --out " + p + "c", log) == 0 &&
           cli("train-dml" + cfg + " --data " + p + "a " + p + "b --out " + p + "emb.json", log) == 0 &&
           cli("train-gnn" + cfg + " --data " + p + "a " + p + "b --embedder " + p + "emb.json --out " + p + "model.json", log) ==
               0 &&
           cli("infer --data " + p + "c --model " + p + "model.json --out " + p + "run", log) == 0 &&
           cli("eval --pred " + p + "run/tracks.txt --gt " + p + "c/gt_tracks.txt --out " + p + "metrics.json", log) == 0;
  };
  const bool ran = run(root / "1") && run(root / "2");
  int differ = 0;
  for (const char* f : {"run/tracks.txt", "run/tracks.csv", "metrics.json", "model.json", "emb.json"}) {
    const std::string a = slurp(root / "1" / f), b = slurp(root / "2" / f);
    differ += a.empty() || a != b;
  }
  report("determinism", ran && differ == 0,
         fmt("two CLI pipeline runs: %s, %d of 5 outputs differ (tracks txt/csv, metrics, both checkpoints)",
             ran ? "completed" : "a step failed", differ));
}

}  // namespace

int main() {
  const auto t0 = Clock::now();
  gradient_suite();
  equation_oracles();
  locality();
  inference_invariants();
  dml_suite();
  mitosis();
  determinism();
  end_to_end();
  std::printf("%d failed, %.0fs total\n", failures, since(t0));
  return failures == 0 ? 0 : 1;
}
