#pragma once

// Minimal reverse-mode tape over dense matrices. Each op records its output
// value and a closure that maps the output gradient to input gradients.
// Custom ops in the model modules reuse the same mechanism with their own
// hand-derived vector-Jacobian products.

#include "dsagc/common.hpp"

#include <functional>
#include <string>
#include <vector>

namespace dsagc::ad {

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

class Tape;
using Backward = std::function<void(Tape&, const Matrix& out_grad)>;

class Tape {
 public:
  Var constant(Matrix value) { return push(std::move(value), false, nullptr); }
  Var variable(Matrix value) { return push(std::move(value), true, nullptr); }

  Var record(Matrix value, std::initializer_list<Var> inputs, Backward fn) {
    bool needs = false;
    for (Var v : inputs) needs = needs || nodes_[v.id].requires_grad;
    return push(std::move(value), needs, needs ? std::move(fn) : nullptr);
  }

  Var record_if(Matrix value, bool needs, Backward fn) {
    return push(std::move(value), needs, needs ? std::move(fn) : nullptr);
  }

  const Matrix& value(Var v) const { return nodes_.at(v.id).value; }
  double scalar(Var v) const { return nodes_.at(v.id).value(0, 0); }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

  // Gradient of the last backward() root with respect to v; zero if v was
  // unreachable.
  Matrix grad(Var v) const {
    const auto& n = nodes_.at(v.id);
    return n.has_grad ? n.grad : Matrix::Zero(n.value.rows(), n.value.cols());
  }

  void accumulate(Var v, const Matrix& g) {
    auto& n = nodes_[v.id];
    if (!n.requires_grad) return;
    if (!n.has_grad) {
      n.grad = g;
      n.has_grad = true;
    } else {
      n.grad += g;
    }
  }

  void backward(Var root) {
    if (value(root).size() != 1) throw ShapeError("backward: root must be a scalar");
    for (auto& n : nodes_) n.has_grad = false;
    accumulate(root, Matrix::Ones(1, 1));
    for (int i = root.id; i >= 0; --i) {
      auto& n = nodes_[i];
      if (!n.has_grad || !n.backward) continue;
      // The closure may append to nodes_' elements' grads but never to nodes_.
      const Matrix g = n.grad;
      n.backward(*this, g);
    }
  }

  std::size_t size() const { return nodes_.size(); }

  // Training mode enables dropout; inference uses deterministic paths.
  bool training = true;

  // Kink bookkeeping for gradient checks: every piecewise-linear op reports
  // its pre-activations when tracking is on.
  bool track_kinks = false;
  std::size_t near_kinks = 0;
  std::uint64_t sign_hash = 1469598103934665603ULL;
  void note_preactivation(double x) {
    if (!track_kinks) return;
    if (std::abs(x) < 1e-6) ++near_kinks;
    const unsigned char bit = x > 0.0 ? 1 : 0;
    sign_hash = fnv1a(&bit, 1, sign_hash);
  }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    bool has_grad = false;
    Backward backward;
  };

  Var push(Matrix value, bool requires_grad, Backward fn) {
    nodes_.push_back(Node{std::move(value), Matrix(), requires_grad, false, std::move(fn)});
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Elementary ops.

inline Var matmul(Tape& t, Var a, Var b) {
  Matrix out = t.value(a) * t.value(b);
  return t.record(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g) {
    if (t.requires_grad(a)) t.accumulate(a, g * t.value(b).transpose());
    if (t.requires_grad(b)) t.accumulate(b, t.value(a).transpose() * g);
  });
}

// x * W + 1 b, with b a 1 x out row.
inline Var affine(Tape& t, Var x, Var w, Var b) {
  Matrix out = t.value(x) * t.value(w);
  out.rowwise() += t.value(b).row(0);
  return t.record(std::move(out), {x, w, b}, [x, w, b](Tape& t, const Matrix& g) {
    if (t.requires_grad(x)) t.accumulate(x, g * t.value(w).transpose());
    if (t.requires_grad(w)) t.accumulate(w, t.value(x).transpose() * g);
    if (t.requires_grad(b)) t.accumulate(b, g.colwise().sum());
  });
}

inline Var relu(Tape& t, Var x) {
  const Matrix& xv = t.value(x);
  if (t.track_kinks)
    for (Eigen::Index i = 0; i < xv.size(); ++i) t.note_preactivation(xv.data()[i]);
  Matrix out = xv.cwiseMax(0.0);
  return t.record(std::move(out), {x}, [x](Tape& t, const Matrix& g) {
    t.accumulate(x, (t.value(x).array() > 0.0).select(g, 0.0));
  });
}

inline Var add(Tape& t, Var a, Var b) {
  Matrix out = t.value(a) + t.value(b);
  return t.record(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

inline Var scale(Tape& t, Var x, double s) {
  Matrix out = s * t.value(x);
  return t.record(std::move(out), {x}, [x, s](Tape& t, const Matrix& g) { t.accumulate(x, s * g); });
}

// Weighted sum of scalar nodes; terms with zero weight are skipped entirely.
inline Var weighted_sum(Tape& t, const std::vector<std::pair<Var, double>>& terms) {
  double total = 0.0;
  std::vector<std::pair<Var, double>> live;
  for (const auto& [v, wt] : terms) {
    if (wt == 0.0 || !v.valid()) continue;
    total += wt * t.scalar(v);
    live.emplace_back(v, wt);
  }
  Matrix out(1, 1);
  out(0, 0) = total;
  bool needs = false;
  for (const auto& [v, wt] : live) needs = needs || t.requires_grad(v);
  return t.record_if(std::move(out), needs, [live](Tape& t, const Matrix& g) {
    for (const auto& [v, wt] : live) t.accumulate(v, wt * g);
  });
}

inline Var concat_cols(Tape& t, Var a, Var b) {
  const Matrix& av = t.value(a);
  const Matrix& bv = t.value(b);
  if (av.rows() != bv.rows()) throw ShapeError("concat_cols: row count mismatch");
  Matrix out(av.rows(), av.cols() + bv.cols());
  out << av, bv;
  const Eigen::Index ca = av.cols(), cb = bv.cols();
  return t.record(std::move(out), {a, b}, [a, b, ca, cb](Tape& t, const Matrix& g) {
    if (t.requires_grad(a)) t.accumulate(a, g.leftCols(ca));
    if (t.requires_grad(b)) t.accumulate(b, g.rightCols(cb));
  });
}

inline Var slice_rows(Tape& t, Var x, Eigen::Index begin, Eigen::Index count) {
  const Matrix& xv = t.value(x);
  if (begin < 0 || count < 0 || begin + count > xv.rows()) throw ShapeError("slice_rows: range out of bounds");
  Matrix out = xv.middleRows(begin, count);
  const Eigen::Index rows = xv.rows();
  return t.record(std::move(out), {x}, [x, begin, count, rows](Tape& t, const Matrix& g) {
    Matrix full = Matrix::Zero(rows, g.cols());
    full.middleRows(begin, count) = g;
    t.accumulate(x, full);
  });
}

// Row-wise softmax. Columns flagged in `masked` receive probability exactly 0.
inline Matrix softmax_rows(const Eigen::Ref<const Matrix>& logits, const std::vector<bool>& masked = {}) {
  Matrix p(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < logits.cols(); ++j)
      if (masked.empty() || !masked[j]) mx = std::max(mx, logits(i, j));
    double sum = 0.0;
    for (Eigen::Index j = 0; j < logits.cols(); ++j) {
      const double e = (masked.empty() || !masked[j]) ? std::exp(logits(i, j) - mx) : 0.0;
      p(i, j) = e;
      sum += e;
    }
    p.row(i) /= sum;
  }
  return p;
}

inline Matrix softmax_rows_backward(const Eigen::Ref<const Matrix>& p, const Eigen::Ref<const Matrix>& dp) {
  Matrix dx = p.cwiseProduct(dp);
  for (Eigen::Index i = 0; i < p.rows(); ++i) dx.row(i) -= p.row(i) * p.row(i).dot(dp.row(i));
  return dx;
}

inline Var softmax(Tape& t, Var logits, std::vector<bool> masked = {}) {
  Matrix out = softmax_rows(t.value(logits), masked);
  const int id = static_cast<int>(t.size());
  return t.record(std::move(out), {logits}, [logits, id](Tape& t, const Matrix& g) {
    t.accumulate(logits, softmax_rows_backward(t.value(Var{id}), g));
  });
}

// Multiplies by a fixed mask already scaled by 1/keep (inverted dropout).
inline Var apply_mask(Tape& t, Var x, Matrix mask) {
  Matrix out = t.value(x).cwiseProduct(mask);
  return t.record(std::move(out), {x},
                  [x, mask = std::move(mask)](Tape& t, const Matrix& g) { t.accumulate(x, g.cwiseProduct(mask)); });
}

// ---------------------------------------------------------------------------
// Parameters.

struct Parameter {
  std::string name;
  Matrix value;
};

// Binds parameters to tape leaves for one forward/backward pass.
class Binding {
 public:
  Binding(Tape& t, const std::vector<Parameter>& params) : tape_(t) {
    vars_.reserve(params.size());
    for (const auto& p : params) vars_.push_back(t.variable(p.value));
  }
  Var operator[](std::size_t i) const { return vars_.at(i); }
  std::vector<Matrix> grads() const {
    std::vector<Matrix> out;
    out.reserve(vars_.size());
    for (Var v : vars_) out.push_back(tape_.grad(v));
    return out;
  }

 private:
  Tape& tape_;
  std::vector<Var> vars_;
};

}  // namespace dsagc::ad
