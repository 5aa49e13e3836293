#pragma once

// Node-drop graph augmentation and the normalized temperature-scaled
// cross-entropy (NT-Xent) contrastive loss.

#include "dsagc/autodiff.hpp"

#include <algorithm>
#include <numeric>
#include <random>

namespace dsagc::contrast {

inline constexpr int kProjectionHidden = 64;
inline constexpr int kProjectionOut = 32;

struct AugmentedView {
  IndexList kept_nodes;  // strictly increasing
  RowVector flat;        // kept_nodes.size() * C_de, channel-major, band-minor
};

// Chooses `n - drop_count` survivors uniformly without replacement (partial
// Fisher-Yates) and returns them sorted.
template <typename Rng>
IndexList sample_kept_nodes(int n_nodes, int drop_count, Rng& rng) {
  if (drop_count < 0 || drop_count >= n_nodes)
    throw ConfigError("node_drop: drop_count must satisfy 0 <= drop_count < N_G (got " + std::to_string(drop_count) +
                      " for " + std::to_string(n_nodes) + " nodes)");
  IndexList idx(n_nodes);
  std::iota(idx.begin(), idx.end(), 0);
  for (int i = 0; i < drop_count; ++i) {
    std::uniform_int_distribution<int> pick(i, n_nodes - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  IndexList kept(idx.begin() + drop_count, idx.end());
  std::sort(kept.begin(), kept.end());
  return kept;
}

inline RowVector gather_nodes(const Eigen::Ref<const Matrix>& conv_out, const IndexList& kept) {
  const Eigen::Index c = conv_out.cols();
  RowVector flat(static_cast<Eigen::Index>(kept.size()) * c);
  for (std::size_t i = 0; i < kept.size(); ++i) flat.segment(static_cast<Eigen::Index>(i) * c, c) = conv_out.row(kept[i]);
  return flat;
}

template <typename Rng>
AugmentedView node_drop(const Eigen::Ref<const Matrix>& conv_out, int drop_count, Rng& rng) {
  AugmentedView v;
  v.kept_nodes = sample_kept_nodes(static_cast<int>(conv_out.rows()), drop_count, rng);
  v.flat = gather_nodes(conv_out, v.kept_nodes);
  return v;
}

// Batched node drop on the tape: row b of `x` is a flattened N_G x C_de
// block; the output keeps kept[b] nodes of it.
inline ad::Var node_drop_op(ad::Tape& t, ad::Var x, int n_bands, std::vector<IndexList> kept) {
  const Matrix& xv = t.value(x);
  const Eigen::Index keep = static_cast<Eigen::Index>(kept.front().size());
  Matrix out(xv.rows(), keep * n_bands);
  for (Eigen::Index b = 0; b < xv.rows(); ++b)
    for (Eigen::Index i = 0; i < keep; ++i)
      out.row(b).segment(i * n_bands, n_bands) = xv.row(b).segment(kept[b][i] * n_bands, n_bands);
  const Eigen::Index cols = xv.cols();
  return t.record(std::move(out), {x}, [x, kept = std::move(kept), n_bands, cols, keep](ad::Tape& t, const Matrix& g) {
    Matrix full = Matrix::Zero(g.rows(), cols);
    for (Eigen::Index b = 0; b < g.rows(); ++b)
      for (Eigen::Index i = 0; i < keep; ++i)
        full.row(b).segment(kept[b][i] * n_bands, n_bands) = g.row(b).segment(i * n_bands, n_bands);
    t.accumulate(x, full);
  });
}

namespace detail {

inline Matrix normalized_rows(const Eigen::Ref<const Matrix>& z, Vector& norms) {
  norms = z.rowwise().norm();
  for (Eigen::Index i = 0; i < norms.size(); ++i)
    if (!(norms[i] > 0.0)) throw NumericError("nt_xent: zero-norm row " + std::to_string(i));
  return norms.cwiseInverse().asDiagonal() * z;
}

// One direction: anchors a, positives p. Returns the mean anchor loss and,
// when requested, accumulates scaled gradients w.r.t. the unit rows.
inline double one_direction(const Matrix& ua, const Matrix& up, double tau, double gscale, Matrix* dua, Matrix* dup) {
  const Eigen::Index b = ua.rows();
  const Matrix sim = ua * ua.transpose() / tau;
  double total = 0.0;
  RowVector p(b);
  for (Eigen::Index i = 0; i < b; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (Eigen::Index k = 0; k < b; ++k)
      if (k != i) mx = std::max(mx, sim(i, k));
    double sum = 0.0;
    for (Eigen::Index k = 0; k < b; ++k) {
      p[k] = k == i ? 0.0 : std::exp(sim(i, k) - mx);
      sum += p[k];
    }
    p /= sum;
    const double pos = ua.row(i).dot(up.row(i)) / tau;
    total += -pos + mx + std::log(sum);
    if (dua) {
      dua->row(i) += gscale * (-up.row(i) + p * ua) / tau;
      for (Eigen::Index k = 0; k < b; ++k)
        if (k != i) dua->row(k) += (gscale * p[k] / tau) * ua.row(i);
      dup->row(i) -= (gscale / tau) * ua.row(i);
    }
  }
  return total / static_cast<double>(b);
}

inline Matrix unit_backward(const Matrix& u, const Vector& norms, const Matrix& du) {
  Matrix dz = du;
  for (Eigen::Index i = 0; i < u.rows(); ++i) dz.row(i) = (du.row(i) - u.row(i) * u.row(i).dot(du.row(i))) / norms[i];
  return dz;
}

}  // namespace detail

inline void check_nt_xent_args(const Eigen::Ref<const Matrix>& z1, const Eigen::Ref<const Matrix>& z2, double tau) {
  if (z1.rows() != z2.rows() || z1.cols() != z2.cols()) throw ShapeError("nt_xent: views must have identical shape");
  if (z1.rows() < 2) throw ConfigError("nt_xent: batch size must be >= 2");
  if (!(tau > 0.0)) throw ConfigError("nt_xent: temperature must be > 0");
}

// Anchor z_i (row i of one view), positive row i of the other view,
// negatives the other B-1 rows of the anchor's own view, cosine similarity.
// Mean over anchors, averaged over both directions.
inline double nt_xent(const Eigen::Ref<const Matrix>& z1, const Eigen::Ref<const Matrix>& z2, double tau) {
  check_nt_xent_args(z1, z2, tau);
  Vector n1, n2;
  const Matrix u1 = detail::normalized_rows(z1, n1);
  const Matrix u2 = detail::normalized_rows(z2, n2);
  return 0.5 * (detail::one_direction(u1, u2, tau, 0.0, nullptr, nullptr) +
                detail::one_direction(u2, u1, tau, 0.0, nullptr, nullptr));
}

struct NtXentGrad {
  Matrix dz1;
  Matrix dz2;
};

inline NtXentGrad nt_xent_backward(const Eigen::Ref<const Matrix>& z1, const Eigen::Ref<const Matrix>& z2, double tau,
                                   double dloss) {
  check_nt_xent_args(z1, z2, tau);
  Vector n1, n2;
  const Matrix u1 = detail::normalized_rows(z1, n1);
  const Matrix u2 = detail::normalized_rows(z2, n2);
  Matrix du1 = Matrix::Zero(u1.rows(), u1.cols());
  Matrix du2 = Matrix::Zero(u2.rows(), u2.cols());
  const double gscale = dloss * 0.5 / static_cast<double>(z1.rows());
  detail::one_direction(u1, u2, tau, gscale, &du1, &du2);
  detail::one_direction(u2, u1, tau, gscale, &du2, &du1);
  return {detail::unit_backward(u1, n1, du1), detail::unit_backward(u2, n2, du2)};
}

inline ad::Var nt_xent_op(ad::Tape& t, ad::Var z1, ad::Var z2, double tau) {
  Matrix out(1, 1);
  out(0, 0) = nt_xent(t.value(z1), t.value(z2), tau);
  return t.record(std::move(out), {z1, z2}, [z1, z2, tau](ad::Tape& t, const Matrix& g) {
    auto grads = nt_xent_backward(t.value(z1), t.value(z2), tau, g(0, 0));
    t.accumulate(z1, grads.dz1);
    t.accumulate(z2, grads.dz2);
  });
}

}  // namespace dsagc::contrast
