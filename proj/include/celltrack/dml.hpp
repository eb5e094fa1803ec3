#pragma once

// Metric learning for cell-instance appearance: an MLP embedder trained with
// the multi-similarity loss on hard pairs mined from an affinity matrix of
// cosine similarities, fed by an m-per-class sampler over temporally
// adjacent instances.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <random>
#include <span>
#include <utility>
#include <vector>

#include "celltrack/adam.hpp"
#include "celltrack/autodiff.hpp"
#include "celltrack/forest.hpp"
#include "celltrack/mlp.hpp"
#include "celltrack/st_features.hpp"

namespace celltrack {

struct DmlConfig {
  std::size_t kappa = 8;  // classes per batch
  std::size_t m = 4;      // instances per class
  double alpha_ms = 2.0;
  double beta_ms = 50.0;
  double lambda_ms = 0.5;
  double epsilon = 0.1;  // mining margin
  std::size_t steps = 3000;
  std::size_t hidden = 128;
  std::size_t dim = 128;
  AdamConfig trunk_adam{1e-5, 1e-4};
  AdamConfig head_adam{1e-4, 1e-4};
  std::uint64_t seed = 1;
};

/// Descriptor standardisation followed by trunk and head MLPs; the output
/// rows are unit-normalised.
struct EmbedderParams {
  std::vector<double> input_mean;
  std::vector<double> input_scale;
  MlpParams trunk;
  MlpParams head;

  std::size_t output_dim() const { return head.output_dim(); }

  std::vector<ad::Parameter*> parameters() {
    auto out = trunk.parameters();
    auto h = head.parameters();
    out.insert(out.end(), h.begin(), h.end());
    return out;
  }
  std::vector<const ad::Parameter*> parameters() const {
    auto out = trunk.parameters();
    auto h = head.parameters();
    out.insert(out.end(), h.begin(), h.end());
    return out;
  }
};

inline EmbedderParams make_embedder(const DmlConfig& cfg, std::mt19937_64& rng) {
  EmbedderParams p;
  p.input_mean.assign(kDescriptorSize, 0.0);
  p.input_scale.assign(kDescriptorSize, 1.0);
  p.trunk = make_mlp("dml.trunk", {kDescriptorSize, cfg.hidden}, {Activation::ReLU}, rng);
  p.head = make_mlp("dml.head", {cfg.hidden, cfg.dim}, {Activation::None}, rng);
  return p;
}

/// Per-column mean and standard deviation (1 for constant columns).
inline void fit_standardization(EmbedderParams& p, const Tensor2& descriptors) {
  const std::size_t c = descriptors.cols(), n = descriptors.rows();
  p.input_mean.assign(c, 0.0);
  p.input_scale.assign(c, 1.0);
  if (n == 0) return;
  for (std::size_t j = 0; j < c; ++j) {
    double s = 0.0, s2 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      s += descriptors(i, j);
      s2 += descriptors(i, j) * descriptors(i, j);
    }
    const double mean = s / n;
    const double var = std::max(0.0, s2 / n - mean * mean);
    p.input_mean[j] = mean;
    p.input_scale[j] = var > 1e-12 ? std::sqrt(var) : 1.0;
  }
}

inline Tensor2 standardize(const EmbedderParams& p, const Tensor2& descriptors) {
  if (descriptors.cols() != p.input_mean.size()) throw ConfigError("embedder: descriptor width mismatch");
  Tensor2 out = descriptors;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto r = out.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] = (r[j] - p.input_mean[j]) / p.input_scale[j];
  }
  return out;
}

inline ad::Var embed(ad::Tape& tape, const EmbedderParams& p, const Tensor2& descriptors) {
  ad::Var x = tape.constant(standardize(p, descriptors));
  return ad::l2_normalize_rows(mlp_forward(tape, p.head, mlp_forward(tape, p.trunk, x)));
}

inline Tensor2 embed(const EmbedderParams& p, const Tensor2& descriptors) {
  ad::Tape tape(ad::Mode::Eval);
  return embed(tape, p, descriptors).value();
}

// ---------------------------------------------------------------------------
// Dataset and sampling

/// Instances grouped into classes (one class per biological cell per
/// sequence); members of each class are sorted by frame.
struct DmlDataset {
  Tensor2 descriptors;
  std::vector<int> labels;
  std::vector<int> frames;
  std::vector<std::vector<std::size_t>> classes;
};

inline DmlDataset make_dml_dataset(std::span<const Sequence> sequences) {
  std::vector<std::vector<double>> rows;
  DmlDataset ds;
  for (std::size_t s = 0; s < sequences.size(); ++s) {
    const Sequence& seq = sequences[s];
    if (!seq.gt) continue;
    for (const Trajectory& t : seq.gt->tracks) {
      std::vector<std::size_t> members;
      for (std::size_t n : t.nodes) {
        members.push_back(rows.size());
        rows.push_back(seq.instances[n].descriptor);
        ds.labels.push_back(static_cast<int>(ds.classes.size()));
        ds.frames.push_back(seq.instances[n].frame);
      }
      ds.classes.push_back(std::move(members));
    }
  }
  ds.descriptors = Tensor2(rows.size(), kDescriptorSize);
  for (std::size_t i = 0; i < rows.size(); ++i) std::copy(rows[i].begin(), rows[i].end(), ds.descriptors.row(i).begin());
  return ds;
}

struct DmlBatch {
  Tensor2 descriptors;
  std::vector<int> labels;
  std::vector<int> frames;
  std::vector<std::size_t> rows;  // dataset row of each batch row
};

/// kappa distinct classes, each contributing a window of m consecutive
/// appearances whose start is drawn uniformly.
inline DmlBatch sample_batch(const DmlDataset& ds, std::size_t kappa, std::size_t m, std::mt19937_64& rng) {
  if (kappa == 0 || m == 0) throw ConfigError("sample_batch: kappa and m must be positive");
  std::vector<std::size_t> eligible;
  for (std::size_t c = 0; c < ds.classes.size(); ++c) {
    if (ds.classes[c].size() >= m) eligible.push_back(c);
  }
  if (eligible.size() < kappa) {
    throw ConfigError("sample_batch: need " + std::to_string(kappa) + " classes with >= " + std::to_string(m) +
                      " instances, dataset has " + std::to_string(eligible.size()));
  }
  for (std::size_t i = 0; i < kappa; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, eligible.size() - 1);
    std::swap(eligible[i], eligible[pick(rng)]);
  }
  DmlBatch b;
  b.descriptors = Tensor2(kappa * m, ds.descriptors.cols());
  std::size_t r = 0;
  for (std::size_t i = 0; i < kappa; ++i) {
    const auto& members = ds.classes[eligible[i]];
    std::uniform_int_distribution<std::size_t> start_dist(0, members.size() - m);
    const std::size_t start = start_dist(rng);
    for (std::size_t j = 0; j < m; ++j, ++r) {
      const std::size_t row = members[start + j];
      std::copy(ds.descriptors.row(row).begin(), ds.descriptors.row(row).end(), b.descriptors.row(r).begin());
      b.labels.push_back(ds.labels[row]);
      b.frames.push_back(ds.frames[row]);
      b.rows.push_back(row);
    }
  }
  return b;
}

// ---------------------------------------------------------------------------
// Affinity, mining, loss

/// A[i][j] = e_i . e_j for unit-normalised rows.
inline Tensor2 affinity(const Tensor2& embeddings) {
  for (std::size_t i = 0; i < embeddings.rows(); ++i) {
    double n = 0.0;
    for (double v : embeddings.row(i)) n += v * v;
    if (std::fabs(std::sqrt(n) - 1.0) > 1e-9) {
      throw NumericError("affinity: row " + std::to_string(i) + " is not unit-normalised");
    }
  }
  Tensor2 a(embeddings.rows(), embeddings.rows());
  a.mat().noalias() = embeddings.mat() * embeddings.mat().transpose();
  return a;
}

inline ad::Var affinity(ad::Var embeddings) { return ad::matmul_nt(embeddings, embeddings); }

struct MinedPairs {
  std::vector<std::pair<std::size_t, std::size_t>> positive;  // (anchor, other)
  std::vector<std::pair<std::size_t, std::size_t>> negative;

  std::size_t size() const { return positive.size() + negative.size(); }
};

/// Hard negative (i,j): different class and A[i][j] > min_pos(i) - eps.
/// Hard positive (i,l): same class and A[i][l] < max_neg(i) + eps.
/// An anchor without positives (or negatives) yields no hard negatives (or
/// positives).
inline MinedPairs mine_hard_pairs(const Tensor2& a, std::span<const int> labels, double eps) {
  if (a.rows() != labels.size() || a.cols() != labels.size()) throw ConfigError("mine_hard_pairs: label count mismatch");
  const std::size_t n = labels.size();
  MinedPairs out;
  for (std::size_t i = 0; i < n; ++i) {
    double min_pos = INFINITY, max_neg = -INFINITY;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      if (labels[j] == labels[i]) {
        min_pos = std::min(min_pos, a(i, j));
      } else {
        max_neg = std::max(max_neg, a(i, j));
      }
    }
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      if (labels[j] == labels[i]) {
        if (a(i, j) < max_neg + eps) out.positive.emplace_back(i, j);
      } else {
        if (a(i, j) > min_pos - eps) out.negative.emplace_back(i, j);
      }
    }
  }
  return out;
}

struct MsLossParams {
  double alpha = 2.0;
  double beta = 50.0;
  double lambda = 0.5;
};

/// (1/n) sum_i [ 1/alpha log(1 + sum_P exp(-alpha (S_ip - lambda)))
///             + 1/beta  log(1 + sum_N exp( beta (S_in - lambda))) ]
inline ad::Var multi_similarity_loss(ad::Var a, const MinedPairs& pairs, const MsLossParams& p) {
  if (!a.valid()) throw UsageError("multi_similarity_loss: untaped affinity");
  ad::Tape& tape = *a.tape();
  const std::size_t n = a.rows();
  if (a.cols() != n) throw ConfigError("multi_similarity_loss: affinity must be square");
  const Tensor2& s = a.value();
  std::vector<double> pos_sum(n, 0.0), neg_sum(n, 0.0);
  for (auto [i, j] : pairs.positive) pos_sum[i] += std::exp(-p.alpha * (s(i, j) - p.lambda));
  for (auto [i, j] : pairs.negative) neg_sum[i] += std::exp(p.beta * (s(i, j) - p.lambda));
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    total += std::log1p(pos_sum[i]) / p.alpha + std::log1p(neg_sum[i]) / p.beta;
  }
  const double inv_n = n > 0 ? 1.0 / static_cast<double>(n) : 0.0;
  return tape.record(Tensor2(1, 1, total * inv_n), {a},
                     [a, pairs, p, pos_sum, neg_sum, inv_n](ad::Tape& t, const Tensor2& g) {
                       const Tensor2& s = a.value();
                       Tensor2& buf = t.grad_buffer(a);
                       const double up = g(0, 0) * inv_n;
                       for (auto [i, j] : pairs.positive) {
                         buf(i, j) -= up * std::exp(-p.alpha * (s(i, j) - p.lambda)) / (1.0 + pos_sum[i]);
                       }
                       for (auto [i, j] : pairs.negative) {
                         buf(i, j) += up * std::exp(p.beta * (s(i, j) - p.lambda)) / (1.0 + neg_sum[i]);
                       }
                     });
}

// ---------------------------------------------------------------------------
// Retrieval metrics

struct RetrievalMetrics {
  double p_at_1 = 0.0;
  double r_precision = 0.0;
  double map_at_r = 0.0;
  std::size_t queries = 0;
};

/// Exact cosine ranking, query excluded, R = class size - 1. Queries from
/// singleton classes are skipped. Ties rank the lower row index first.
inline RetrievalMetrics retrieval_metrics(const Tensor2& embeddings, std::span<const int> labels) {
  const std::size_t n = embeddings.rows();
  if (labels.size() != n) throw ConfigError("retrieval_metrics: label count mismatch");
  std::map<int, std::size_t> class_size;
  for (int l : labels) ++class_size[l];
  RetrievalMetrics out;
  std::vector<std::pair<double, std::size_t>> ranked;
  for (std::size_t q = 0; q < n; ++q) {
    const std::size_t r = class_size[labels[q]] - 1;
    if (r == 0) continue;
    ranked.clear();
    for (std::size_t j = 0; j < n; ++j) {
      if (j != q) ranked.emplace_back(ad::cosine_similarity(embeddings.row(q), embeddings.row(j)), j);
    }
    std::sort(ranked.begin(), ranked.end(), [](const auto& x, const auto& y) {
      return x.first != y.first ? x.first > y.first : x.second < y.second;
    });
    std::size_t hits = 0;
    double ap = 0.0;
    for (std::size_t k = 0; k < r; ++k) {
      if (labels[ranked[k].second] == labels[q]) {
        ++hits;
        ap += static_cast<double>(hits) / static_cast<double>(k + 1);
      }
    }
    out.p_at_1 += labels[ranked[0].second] == labels[q] ? 1.0 : 0.0;
    out.r_precision += static_cast<double>(hits) / static_cast<double>(r);
    out.map_at_r += ap / static_cast<double>(r);
    ++out.queries;
  }
  if (out.queries > 0) {
    const double q = static_cast<double>(out.queries);
    out.p_at_1 /= q;
    out.r_precision /= q;
    out.map_at_r /= q;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training

struct DmlStepStats {
  std::size_t step = 0;
  double loss = 0.0;
  std::size_t hard_pairs = 0;
};

/// Standardisation is fitted on the dataset, then `cfg.steps` batches are
/// drawn. Trunk and head have separate Adam optimisers.
inline std::vector<DmlStepStats> train_embedder(EmbedderParams& params, const DmlDataset& ds, const DmlConfig& cfg) {
  fit_standardization(params, ds.descriptors);
  std::mt19937_64 rng(cfg.seed);
  AdamState trunk_opt(cfg.trunk_adam), head_opt(cfg.head_adam);
  const auto trunk_params = params.trunk.parameters();
  const auto head_params = params.head.parameters();
  const MsLossParams ms{cfg.alpha_ms, cfg.beta_ms, cfg.lambda_ms};
  std::vector<DmlStepStats> history;
  history.reserve(cfg.steps);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    DmlBatch batch = sample_batch(ds, cfg.kappa, cfg.m, rng);
    ad::Tape tape;
    ad::Var e = embed(tape, params, batch.descriptors);
    ad::Var a = affinity(e);
    MinedPairs mined = mine_hard_pairs(a.value(), batch.labels, cfg.epsilon);
    ad::Var loss = multi_similarity_loss(a, mined, ms);
    if (!std::isfinite(loss.scalar())) throw NumericError("train_embedder: non-finite loss at step " + std::to_string(step));
    history.push_back({step, loss.scalar(), mined.size()});
    if (mined.size() == 0) continue;
    ad::Gradients grads = tape.backward(loss);
    adam_step(trunk_opt, trunk_params, grads);
    adam_step(head_opt, head_params, grads);
  }
  return history;
}

}  // namespace celltrack
