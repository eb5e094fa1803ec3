#pragma once

// Tape-based reverse-mode differentiation over Tensor2 values.
//
// A Tape records every operation applied to Vars created on it. In
// Mode::Eval nothing but the forward values is kept, so the same model code
// serves training and inference. Gradients are returned keyed by Parameter
// address; parameters are never mutated by the tape.

#include <algorithm>
#include <cmath>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "celltrack/errors.hpp"
#include "celltrack/tensor.hpp"

namespace celltrack::ad {

/// A named learnable tensor.
struct Parameter {
  std::string name;
  Tensor2 value;
};

class Gradients {
 public:
  /// Gradient for `p`, or zeros of its shape when it was not reached.
  Tensor2 of(const Parameter& p) const {
    auto it = grads_.find(&p);
    if (it == grads_.end()) return Tensor2(p.value.rows(), p.value.cols());
    return it->second;
  }

  const Tensor2* find(const Parameter& p) const {
    auto it = grads_.find(&p);
    return it == grads_.end() ? nullptr : &it->second;
  }

  void add(const Parameter& p, const Tensor2& g) {
    auto [it, inserted] = grads_.try_emplace(&p, g);
    if (!inserted) it->second += g;
  }

  std::size_t size() const noexcept { return grads_.size(); }

 private:
  std::unordered_map<const Parameter*, Tensor2> grads_;
};

enum class Mode { Train, Eval };

class Tape;

/// Handle to a value recorded on a Tape.
class Var {
 public:
  Var() = default;

  bool valid() const noexcept { return tape_ != nullptr; }
  Tape* tape() const noexcept { return tape_; }
  std::size_t id() const noexcept { return id_; }

  inline const Tensor2& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  double scalar() const { return value()(0, 0); }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor2& out_grad)>;

  explicit Tape(Mode mode = Mode::Train) : mode_(mode) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Mode mode() const noexcept { return mode_; }
  bool recording() const noexcept { return mode_ == Mode::Train; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Smallest |input| seen by a non-differentiable point (relu, abs) on this
  /// tape. Finite differences are only meaningful when this exceeds eps.
  double kink_distance() const noexcept { return kink_distance_; }
  void note_kinks(std::span<const double> xs) noexcept {
    for (double x : xs) kink_distance_ = std::min(kink_distance_, std::fabs(x));
  }

  Var constant(Tensor2 value) {
    nodes_.push_back(Node{std::move(value), {}, {}, nullptr, false});
    return Var(this, nodes_.size() - 1);
  }

  /// The parameter is referenced, not copied: it must stay unchanged while
  /// this tape is in use.
  Var parameter(const Parameter& p) {
    nodes_.push_back(Node{Tensor2(), {}, {}, &p, recording()});
    return Var(this, nodes_.size() - 1);
  }

  /// Records the output of an operation. `fn` is kept only when some input
  /// needs a gradient.
  Var record(Tensor2 value, std::initializer_list<Var> inputs, BackwardFn fn) {
    return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(fn));
  }

  Var record(Tensor2 value, std::span<const Var> inputs, BackwardFn fn) {
    bool needs = false;
    for (const Var& in : inputs) {
      check_owned(in);
      needs = needs || nodes_[in.id_].requires_grad;
    }
    nodes_.push_back(Node{std::move(value), {}, needs ? std::move(fn) : BackwardFn{}, nullptr, needs});
    return Var(this, nodes_.size() - 1);
  }

  const Tensor2& value(Var v) const {
    check_owned(v);
    return nodes_[v.id_].current();
  }

  bool requires_grad(Var v) const {
    check_owned(v);
    return nodes_[v.id_].requires_grad;
  }

  /// Zero-initialised gradient buffer of `v`, for in-place accumulation by
  /// backward functions. Only call when requires_grad(v).
  Tensor2& grad_buffer(Var v) {
    Node& n = nodes_[v.id_];
    const Tensor2& value = n.current();
    if (n.grad.empty() && !value.empty()) n.grad = Tensor2(value.rows(), value.cols());
    return n.grad;
  }

  void accumulate(Var v, const Tensor2& g) {
    if (!nodes_[v.id_].requires_grad) return;
    Tensor2& buf = grad_buffer(v);
    if (buf.empty()) return;
    buf += g;
  }

  /// Reverse sweep from a 1x1 loss. Every parameter placed on the tape gets
  /// an entry, zero when the loss does not depend on it.
  Gradients backward(Var loss) {
    if (loss.tape_ != this) throw UsageError("backward: value was not recorded on this tape");
    if (!recording()) throw UsageError("backward: tape is in eval mode, nothing was recorded");
    if (loss.rows() != 1 || loss.cols() != 1) {
      throw UsageError("backward: loss must be 1x1, got " + loss.value().shape_string());
    }
    for (Node& n : nodes_) n.grad = Tensor2();
    Gradients out;
    if (nodes_[loss.id_].requires_grad) {
      grad_buffer(loss)(0, 0) = 1.0;
      for (std::size_t i = loss.id_ + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (n.backward && !n.grad.empty()) {
          Tensor2 g = std::move(n.grad);
          n.backward(*this, g);
          n.grad = std::move(g);
        }
      }
    }
    for (Node& n : nodes_) {
      if (n.param == nullptr) continue;
      if (n.grad.empty()) {
        out.add(*n.param, Tensor2(n.param->value.rows(), n.param->value.cols()));
      } else {
        out.add(*n.param, n.grad);
      }
    }
    return out;
  }

 private:
  struct Node {
    Tensor2 value;
    Tensor2 grad;
    BackwardFn backward;
    const Parameter* param;
    bool requires_grad;

    const Tensor2& current() const { return param != nullptr ? param->value : value; }
  };

  void check_owned(Var v) const {
    if (v.tape_ != this || v.id_ >= nodes_.size()) {
      throw UsageError("Var does not belong to this tape");
    }
  }

  std::deque<Node> nodes_;
  Mode mode_;
  double kink_distance_ = INFINITY;
};

inline const Tensor2& Var::value() const {
  if (tape_ == nullptr) throw UsageError("Var::value on an untaped value");
  return tape_->value(*this);
}

// ---------------------------------------------------------------------------
// Operations

namespace detail {

[[noreturn]] inline void fail(const char* op, const std::string& what) { throw ConfigError(std::string(op) + ": " + what); }

inline void require(bool ok, const char* op, const char* what) {
  if (!ok) fail(op, what);
}

/// dst += lhs * rhs. Small products skip Eigen's blocked GEMM, whose packing
/// overhead dominates at a handful of rows.
template <class Dst, class Lhs, class Rhs>
void product_add(Dst&& dst, const Lhs& lhs, const Rhs& rhs) {
  if (lhs.rows() * lhs.cols() * rhs.cols() <= 65536) {
    dst.noalias() += lhs.lazyProduct(rhs);
  } else {
    dst.noalias() += lhs * rhs;
  }
}

inline Tape& tape_of(Var a) {
  if (!a.valid()) throw UsageError("operation on an untaped value");
  return *a.tape();
}

template <class F>
Var unary(Var a, F&& f, Tape::BackwardFn back) {
  Tape& t = tape_of(a);
  const Tensor2& x = a.value();
  Tensor2 y(x.rows(), x.cols());
  auto xs = x.values();
  auto ys = y.values();
  for (std::size_t i = 0; i < xs.size(); ++i) ys[i] = f(xs[i]);
  return t.record(std::move(y), {a}, std::move(back));
}

}  // namespace detail

inline Var matmul(Var a, Var b) {
  Tape& t = detail::tape_of(a);
  if (a.cols() != b.rows()) detail::fail("matmul", a.value().shape_string() + " * " + b.value().shape_string());
  Tensor2 y(a.rows(), b.cols());
  detail::product_add(y.mat(), a.value().mat(), b.value().mat());
  return t.record(std::move(y), {a, b}, [a, b](Tape& t, const Tensor2& g) {
    if (t.requires_grad(a)) detail::product_add(t.grad_buffer(a).mat(), g.mat(), b.value().mat().transpose());
    if (t.requires_grad(b)) detail::product_add(t.grad_buffer(b).mat(), a.value().mat().transpose(), g.mat());
  });
}

/// a * b^T
inline Var matmul_nt(Var a, Var b) {
  Tape& t = detail::tape_of(a);
  if (a.cols() != b.cols()) {
    detail::fail("matmul_nt", a.value().shape_string() + " * (" + b.value().shape_string() + ")^T");
  }
  Tensor2 y(a.rows(), b.rows());
  detail::product_add(y.mat(), a.value().mat(), b.value().mat().transpose());
  return t.record(std::move(y), {a, b}, [a, b](Tape& t, const Tensor2& g) {
    if (t.requires_grad(a)) detail::product_add(t.grad_buffer(a).mat(), g.mat(), b.value().mat());
    if (t.requires_grad(b)) detail::product_add(t.grad_buffer(b).mat(), g.mat().transpose(), a.value().mat());
  });
}

/// Adds a 1xC row to every row of `a`.
inline Var add_row(Var a, Var bias) {
  Tape& t = detail::tape_of(a);
  if (bias.rows() != 1 || bias.cols() != a.cols()) {
    detail::fail("add_row", a.value().shape_string() + " + " + bias.value().shape_string());
  }
  Tensor2 y = a.value();
  y.mat().rowwise() += bias.value().mat().row(0);
  return t.record(std::move(y), {a, bias}, [a, bias](Tape& t, const Tensor2& g) {
    if (t.requires_grad(a)) t.grad_buffer(a) += g;
    if (t.requires_grad(bias)) t.grad_buffer(bias).mat() += g.mat().colwise().sum();
  });
}

inline Var add(Var a, Var b) {
  Tape& t = detail::tape_of(a);
  detail::require(a.value().same_shape(b.value()), "add", "shape mismatch");
  Tensor2 y = a.value();
  y += b.value();
  return t.record(std::move(y), {a, b}, [a, b](Tape& t, const Tensor2& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

inline Var sub(Var a, Var b) {
  Tape& t = detail::tape_of(a);
  detail::require(a.value().same_shape(b.value()), "sub", "shape mismatch");
  Tensor2 y = a.value();
  y.mat() -= b.value().mat();
  return t.record(std::move(y), {a, b}, [a, b](Tape& t, const Tensor2& g) {
    t.accumulate(a, g);
    if (t.requires_grad(b)) t.grad_buffer(b).mat() -= g.mat();
  });
}

inline Var mul(Var a, Var b) {
  Tape& t = detail::tape_of(a);
  detail::require(a.value().same_shape(b.value()), "mul", "shape mismatch");
  Tensor2 y(a.rows(), a.cols());
  y.mat() = a.value().mat().cwiseProduct(b.value().mat());
  return t.record(std::move(y), {a, b}, [a, b](Tape& t, const Tensor2& g) {
    if (t.requires_grad(a)) t.grad_buffer(a).mat() += g.mat().cwiseProduct(b.value().mat());
    if (t.requires_grad(b)) t.grad_buffer(b).mat() += g.mat().cwiseProduct(a.value().mat());
  });
}

inline Var scale(Var a, double s) {
  return detail::unary(a, [s](double x) { return s * x; }, [a, s](Tape& t, const Tensor2& g) {
    t.grad_buffer(a).mat() += s * g.mat();
  });
}

inline Var relu(Var a) {
  detail::tape_of(a).note_kinks(a.value().values());
  return detail::unary(a, [](double x) { return x > 0.0 ? x : 0.0; }, [a](Tape& t, const Tensor2& g) {
    auto gs = g.values();
    auto xs = a.value().values();
    auto out = t.grad_buffer(a).values();
    for (std::size_t i = 0; i < gs.size(); ++i) {
      if (xs[i] > 0.0) out[i] += gs[i];
    }
  });
}

inline double sigmoid_scalar(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Var sigmoid(Var a) {
  Tape& t = detail::tape_of(a);
  const Tensor2& x = a.value();
  Tensor2 y(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) y.values()[i] = sigmoid_scalar(x.values()[i]);
  // The output id is not known until recorded; recompute from the input.
  return t.record(std::move(y), {a}, [a](Tape& t, const Tensor2& g) {
    auto xs = a.value().values();
    auto out = t.grad_buffer(a).values();
    for (std::size_t i = 0; i < xs.size(); ++i) {
      const double s = sigmoid_scalar(xs[i]);
      out[i] += g.values()[i] * s * (1.0 - s);
    }
  });
}

inline Var abs(Var a) {
  detail::tape_of(a).note_kinks(a.value().values());
  return detail::unary(a, [](double x) { return std::fabs(x); }, [a](Tape& t, const Tensor2& g) {
    auto xs = a.value().values();
    auto out = t.grad_buffer(a).values();
    for (std::size_t i = 0; i < xs.size(); ++i) {
      const double sign = xs[i] > 0.0 ? 1.0 : (xs[i] < 0.0 ? -1.0 : 0.0);
      out[i] += g.values()[i] * sign;
    }
  });
}

inline Var log(Var a) {
  return detail::unary(a, [](double x) { return std::log(x); }, [a](Tape& t, const Tensor2& g) {
    auto xs = a.value().values();
    auto out = t.grad_buffer(a).values();
    for (std::size_t i = 0; i < xs.size(); ++i) out[i] += g.values()[i] / xs[i];
  });
}

inline Var sum(Var a) {
  Tape& t = detail::tape_of(a);
  Tensor2 y(1, 1, a.value().mat().sum());
  return t.record(std::move(y), {a}, [a](Tape& t, const Tensor2& g) {
    t.grad_buffer(a).mat().array() += g(0, 0);
  });
}

inline Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  if (n == 0.0) throw ConfigError("mean: empty tensor");
  return scale(sum(a), 1.0 / n);
}

/// Column-wise concatenation; all parts share the row count.
inline Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ConfigError("concat_cols: no inputs");
  Tape& t = detail::tape_of(parts.front());
  const std::size_t rows = parts.front().rows();
  std::size_t cols = 0;
  for (const Var& p : parts) {
    detail::require(p.rows() == rows, "concat_cols", "row count mismatch");
    cols += p.cols();
  }
  Tensor2 y(rows, cols);
  std::size_t off = 0;
  for (const Var& p : parts) {
    const std::size_t c = p.cols();
    if (rows > 0 && c > 0) y.mat().middleCols(static_cast<Eigen::Index>(off), static_cast<Eigen::Index>(c)) = p.value().mat();
    off += c;
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return t.record(std::move(y), parts, [inputs](Tape& t, const Tensor2& g) {
    std::size_t off = 0;
    for (const Var& p : inputs) {
      const std::size_t c = p.cols();
      if (t.requires_grad(p) && g.rows() > 0 && c > 0) {
        t.grad_buffer(p).mat() += g.mat().middleCols(static_cast<Eigen::Index>(off), static_cast<Eigen::Index>(c));
      }
      off += c;
    }
  });
}

inline Var concat_cols(std::initializer_list<Var> parts) {
  return concat_cols(std::span<const Var>(parts.begin(), parts.size()));
}

/// out[r] = a[index[r]]
inline Var gather_rows(Var a, std::span<const std::size_t> index) {
  Tape& t = detail::tape_of(a);
  const Tensor2& x = a.value();
  Tensor2 y(index.size(), x.cols());
  for (std::size_t r = 0; r < index.size(); ++r) {
    detail::require(index[r] < x.rows(), "gather_rows", "index out of range");
    std::copy(x.row(index[r]).begin(), x.row(index[r]).end(), y.row(r).begin());
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  return t.record(std::move(y), {a}, [a, idx = std::move(idx)](Tape& t, const Tensor2& g) {
    Tensor2& buf = t.grad_buffer(a);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      auto dst = buf.row(idx[r]);
      auto src = g.row(r);
      for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
    }
  });
}

/// out[index[r]] += a[r], out has `out_rows` rows.
inline Var scatter_add_rows(Var a, std::span<const std::size_t> index, std::size_t out_rows) {
  Tape& t = detail::tape_of(a);
  const Tensor2& x = a.value();
  detail::require(index.size() == x.rows(), "scatter_add_rows", "index length != row count");
  Tensor2 y(out_rows, x.cols());
  for (std::size_t r = 0; r < index.size(); ++r) {
    detail::require(index[r] < out_rows, "scatter_add_rows", "index out of range");
    auto dst = y.row(index[r]);
    auto src = x.row(r);
    for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  return t.record(std::move(y), {a}, [a, idx = std::move(idx)](Tape& t, const Tensor2& g) {
    Tensor2& buf = t.grad_buffer(a);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      auto dst = buf.row(r);
      auto src = g.row(idx[r]);
      for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
    }
  });
}

/// Multiplies row r of `a` by w[r]; `w` is Nx1.
inline Var row_scale(Var a, Var w) {
  Tape& t = detail::tape_of(a);
  if (w.cols() != 1 || w.rows() != a.rows()) {
    detail::fail("row_scale", a.value().shape_string() + " by " + w.value().shape_string());
  }
  Tensor2 y = a.value();
  for (std::size_t r = 0; r < y.rows(); ++r) {
    const double s = w.value()(r, 0);
    for (double& v : y.row(r)) v *= s;
  }
  return t.record(std::move(y), {a, w}, [a, w](Tape& t, const Tensor2& g) {
    if (t.requires_grad(a)) {
      Tensor2& buf = t.grad_buffer(a);
      for (std::size_t r = 0; r < g.rows(); ++r) {
        const double s = w.value()(r, 0);
        auto dst = buf.row(r);
        auto src = g.row(r);
        for (std::size_t c = 0; c < src.size(); ++c) dst[c] += s * src[c];
      }
    }
    if (t.requires_grad(w)) {
      Tensor2& buf = t.grad_buffer(w);
      for (std::size_t r = 0; r < g.rows(); ++r) {
        auto x = a.value().row(r);
        auto src = g.row(r);
        double acc = 0.0;
        for (std::size_t c = 0; c < src.size(); ++c) acc += x[c] * src[c];
        buf(r, 0) += acc;
      }
    }
  });
}

/// Scalar cosine similarity. Zero when either vector has zero norm.
inline double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

/// Row-wise cosine similarity, Nx1. Rows with a zero-norm side give 0 and
/// pass no gradient.
inline Var row_cosine(Var a, Var b) {
  Tape& t = detail::tape_of(a);
  detail::require(a.value().same_shape(b.value()), "row_cosine", "shape mismatch");
  Tensor2 y(a.rows(), 1);
  for (std::size_t r = 0; r < a.rows(); ++r) y(r, 0) = cosine_similarity(a.value().row(r), b.value().row(r));
  return t.record(std::move(y), {a, b}, [a, b](Tape& t, const Tensor2& g) {
    const bool ga = t.requires_grad(a), gb = t.requires_grad(b);
    for (std::size_t r = 0; r < g.rows(); ++r) {
      auto x = a.value().row(r);
      auto z = b.value().row(r);
      double dot = 0.0, nx = 0.0, nz = 0.0;
      for (std::size_t c = 0; c < x.size(); ++c) {
        dot += x[c] * z[c];
        nx += x[c] * x[c];
        nz += z[c] * z[c];
      }
      if (nx == 0.0 || nz == 0.0) continue;
      const double lx = std::sqrt(nx), lz = std::sqrt(nz);
      const double cos = dot / (lx * lz);
      const double up = g(r, 0);
      if (ga) {
        auto dst = t.grad_buffer(a).row(r);
        for (std::size_t c = 0; c < x.size(); ++c) dst[c] += up * (z[c] / (lx * lz) - cos * x[c] / nx);
      }
      if (gb) {
        auto dst = t.grad_buffer(b).row(r);
        for (std::size_t c = 0; c < z.size(); ++c) dst[c] += up * (x[c] / (lx * lz) - cos * z[c] / nz);
      }
    }
  });
}

/// Divides every row by its Euclidean norm. A zero row is an error.
inline Var l2_normalize_rows(Var a) {
  Tape& t = detail::tape_of(a);
  Tensor2 y = a.value();
  std::vector<double> norms(y.rows());
  for (std::size_t r = 0; r < y.rows(); ++r) {
    double n = 0.0;
    for (double v : y.row(r)) n += v * v;
    n = std::sqrt(n);
    if (!(n > 0.0)) throw NumericError("l2_normalize_rows: row " + std::to_string(r) + " has zero norm");
    norms[r] = n;
    for (double& v : y.row(r)) v /= n;
  }
  return t.record(std::move(y), {a}, [a, norms = std::move(norms)](Tape& t, const Tensor2& g) {
    Tensor2& buf = t.grad_buffer(a);
    for (std::size_t r = 0; r < g.rows(); ++r) {
      auto x = a.value().row(r);
      auto up = g.row(r);
      const double n = norms[r];
      double yg = 0.0;
      for (std::size_t c = 0; c < x.size(); ++c) yg += x[c] / n * up[c];
      auto dst = buf.row(r);
      for (std::size_t c = 0; c < x.size(); ++c) dst[c] += (up[c] - (x[c] / n) * yg) / n;
    }
  });
}

}  // namespace celltrack::ad
