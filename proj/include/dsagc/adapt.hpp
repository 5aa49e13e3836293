#pragma once

// Gradient-reversal feature alignment across the labeled source (S),
// unlabeled source (U) and target (T) domains, with a discriminator that is
// two-way (S/T) before the stage switch and three-way afterwards.

#include "dsagc/autodiff.hpp"

namespace dsagc::adapt {

enum class Domain : int { S = 0, U = 1, T = 2 };
inline constexpr int kDomainCount = 3;
inline constexpr double kLogClamp = 1e-12;

inline const char* domain_name(Domain d) {
  switch (d) {
    case Domain::S: return "S";
    case Domain::U: return "U";
    case Domain::T: return "T";
  }
  return "?";
}

// One-hot domain label row.
inline RowVector one_hot(Domain d) {
  RowVector v = RowVector::Zero(kDomainCount);
  v[static_cast<int>(d)] = 1.0;
  return v;
}

// Identity forward; backward multiplies the incoming gradient by -mu.
inline ad::Var grad_reverse(ad::Tape& t, ad::Var x, double mu) {
  if (mu < 0.0) throw ConfigError("grad_reverse: mu must be >= 0");
  Matrix out = t.value(x);
  return t.record(std::move(out), {x}, [x, mu](ad::Tape& t, const Matrix& g) { t.accumulate(x, -mu * g); });
}

inline void check_stage(int stage) {
  if (stage != 2 && stage != 3) throw ConfigError("domain stage must be 2 or 3");
}

// Column mask for the discriminator softmax: U is unavailable in stage 2.
inline std::vector<bool> stage_mask(int stage) {
  check_stage(stage);
  return {false, stage == 2, false};
}

// Mean cross-entropy between one-hot domain labels and discriminator
// probabilities. `probs` columns are either {S, T} (two-way outputs) or
// {S, U, T}.
inline double domain_loss(const Eigen::Ref<const Matrix>& probs, const std::vector<Domain>& labels) {
  if (probs.rows() != static_cast<Eigen::Index>(labels.size())) throw ShapeError("domain_loss: one label per row");
  if (probs.cols() != 2 && probs.cols() != 3) throw ShapeError("domain_loss: expected 2 or 3 domain columns");
  double total = 0.0;
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    int col = static_cast<int>(labels[i]);
    if (probs.cols() == 2) {
      if (labels[i] == Domain::U) throw ProtocolError("domain_loss: U row in two-way discrimination");
      col = labels[i] == Domain::S ? 0 : 1;
    }
    total -= std::log(std::max(probs(i, col), kLogClamp));
  }
  return probs.rows() ? total / static_cast<double>(probs.rows()) : 0.0;
}

inline Matrix domain_loss_backward(const Eigen::Ref<const Matrix>& probs, const std::vector<Domain>& labels,
                                   double dloss) {
  Matrix d = Matrix::Zero(probs.rows(), probs.cols());
  const double inv = 1.0 / static_cast<double>(probs.rows());
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    int col = static_cast<int>(labels[i]);
    if (probs.cols() == 2) col = labels[i] == Domain::S ? 0 : 1;
    const double p = probs(i, col);
    if (p > kLogClamp) d(i, col) = -dloss * inv / p;
  }
  return d;
}

// Masked softmax over the three-way discriminator logits followed by the
// mean domain cross-entropy. Stage 2 rejects U rows and gives U exactly zero
// probability.
inline ad::Var domain_loss_op(ad::Tape& t, ad::Var logits, std::vector<Domain> labels, int stage) {
  check_stage(stage);
  if (stage == 2)
    for (Domain d : labels)
      if (d == Domain::U) throw ProtocolError("domain_loss: U rows present before the stage switch");
  ad::Var probs = ad::softmax(t, logits, stage_mask(stage));
  Matrix out(1, 1);
  out(0, 0) = domain_loss(t.value(probs), labels);
  return t.record(std::move(out), {probs}, [probs, labels = std::move(labels)](ad::Tape& t, const Matrix& g) {
    t.accumulate(probs, domain_loss_backward(t.value(probs), labels, g(0, 0)));
  });
}

}  // namespace dsagc::adapt
