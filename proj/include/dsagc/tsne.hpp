#pragma once

// Exact t-SNE (dense O(n^2) affinities and gradients).

#include "dsagc/common.hpp"

#include <random>

namespace dsagc::viz {

struct TsneOptions {
  double perplexity = 30.0;
  int iterations = 1000;
  double learning_rate = 0.0;  // 0 = max(n / early_exaggeration / 4, 50)
  double early_exaggeration = 12.0;
  int exaggeration_iters = 250;
  std::uint64_t seed = 0;
};

struct Embedding {
  Matrix y;  // n x 2
  bool used_pca = false;
  std::string warning;
};

// Projection on the two leading principal directions, signs fixed so that
// the largest-magnitude loading of each direction is positive.
inline Matrix pca2(const Eigen::Ref<const Matrix>& x) {
  const Eigen::Index n = x.rows();
  Matrix centered = x.rowwise() - x.colwise().mean();
  Matrix y = Matrix::Zero(n, 2);
  if (n == 0) return y;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(Eigen::MatrixXd(centered.transpose() * centered));
  const Eigen::Index d = x.cols();
  for (int k = 0; k < 2 && k < d; ++k) {
    Vector dir = es.eigenvectors().col(d - 1 - k);
    Eigen::Index arg = 0;
    dir.cwiseAbs().maxCoeff(&arg);
    if (dir[arg] < 0) dir = -dir;
    y.col(k) = centered * dir;
  }
  return y;
}

namespace detail {

// Row-conditional affinities with per-row precision found by bisection so
// that each row's entropy matches log(perplexity).
inline Matrix conditional_p(const Matrix& d2, double perplexity) {
  const Eigen::Index n = d2.rows();
  const double target = std::log(perplexity);
  Matrix p = Matrix::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    double beta = 1.0, lo = 0.0, hi = std::numeric_limits<double>::infinity();
    for (int it = 0; it < 200; ++it) {
      double sum = 0.0, weighted = 0.0;
      for (Eigen::Index j = 0; j < n; ++j) {
        if (j == i) continue;
        const double e = std::exp(-beta * d2(i, j));
        p(i, j) = e;
        sum += e;
        weighted += d2(i, j) * e;
      }
      if (sum <= 0.0) sum = std::numeric_limits<double>::min();
      const double entropy = std::log(sum) + beta * weighted / sum;
      p.row(i) /= sum;
      const double diff = entropy - target;
      if (std::abs(diff) < 1e-5) break;
      if (diff > 0) {
        lo = beta;
        beta = std::isinf(hi) ? beta * 2.0 : 0.5 * (beta + hi);
      } else {
        hi = beta;
        beta = 0.5 * (beta + lo);
      }
    }
  }
  return p;
}

}  // namespace detail

inline Embedding tsne(const Eigen::Ref<const Matrix>& x, const TsneOptions& opts = {}) {
  const Eigen::Index n = x.rows();
  Embedding out;
  if (n <= 3) {
    out.y = pca2(x);
    out.used_pca = true;
    out.warning = "t-SNE skipped for " + std::to_string(n) + " points; showing the first two principal directions";
    return out;
  }
  // Perplexity cannot exceed what the neighbourhood size supports.
  const double perplexity = std::min(opts.perplexity, static_cast<double>(n - 1) / 3.0);

  Matrix d2(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) d2(i, j) = (x.row(i) - x.row(j)).squaredNorm();
  Matrix p = detail::conditional_p(d2, std::max(perplexity, 1.0 + 1e-9));
  p = (p + p.transpose()).eval() / (2.0 * static_cast<double>(n));
  p = p.cwiseMax(1e-12);
  p.diagonal().setZero();

  std::mt19937_64 rng(opts.seed);
  std::normal_distribution<double> gauss(0.0, 1e-4);
  Matrix y(n, 2);
  for (Eigen::Index i = 0; i < y.size(); ++i) y.data()[i] = gauss(rng);
  // Identical inputs are tied to one embedded position. Left free, the pair
  // is unstable whenever p_ij < 1/Z and roundoff pushes it apart.
  std::vector<Eigen::Index> rep(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    rep[i] = i;
    for (Eigen::Index j = 0; j < i; ++j)
      if (d2(i, j) == 0.0) {
        rep[i] = rep[j];
        break;
      }
    y.row(i) = y.row(rep[i]);
  }
  Matrix update = Matrix::Zero(n, 2);
  Matrix gains = Matrix::Ones(n, 2);
  Matrix num(n, n), grad(n, 2);
  // A fixed rate of 200 makes small inputs oscillate apart.
  const double lr = opts.learning_rate > 0.0
                        ? opts.learning_rate
                        : std::max(static_cast<double>(n) / opts.early_exaggeration / 4.0, 50.0);

  for (int it = 0; it < opts.iterations; ++it) {
    const double exag = it < opts.exaggeration_iters ? opts.early_exaggeration : 1.0;
    const double momentum = it < opts.exaggeration_iters ? 0.5 : 0.8;
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < n; ++j) num(i, j) = i == j ? 0.0 : 1.0 / (1.0 + (y.row(i) - y.row(j)).squaredNorm());
    const double z = num.sum();
    // dC/dy_i = 4 sum_j (exag p_ij - q_ij) num_ij (y_i - y_j)
    const Matrix w = ((exag * p).array() - num.array() / z).matrix().cwiseProduct(num);
    const Vector wsum = w.rowwise().sum();
    grad = 4.0 * (wsum.asDiagonal() * y - w * y);
    for (Eigen::Index i = 0; i < grad.size(); ++i) {
      double& g = gains.data()[i];
      const bool same = (grad.data()[i] > 0) == (update.data()[i] > 0);
      g = same ? std::max(g * 0.8, 0.01) : g + 0.2;
      update.data()[i] = momentum * update.data()[i] - lr * g * grad.data()[i];
    }
    y += update;
    for (Eigen::Index i = 0; i < n; ++i)
      if (rep[i] != i) {
        y.row(i) = y.row(rep[i]);
        update.row(i) = update.row(rep[i]);
        gains.row(i) = gains.row(rep[i]);
      }
    y.rowwise() -= y.colwise().mean();
  }
  out.y = std::move(y);
  return out;
}

}  // namespace dsagc::viz
