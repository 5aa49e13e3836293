#include "dsagc/graph.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

using namespace dsagc;
using dsagc::testing::max_rel_error;
using dsagc::testing::numeric_grad;
using dsagc::testing::random_matrix;
using dsagc::testing::random_vector;

namespace {

// Row softmax of -ReLU(w^T |psi_j - psi_k|), written out longhand.
Matrix adjacency_oracle(const Matrix& psi, const Vector& w) {
  const auto n = psi.rows();
  Matrix a(n, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    double z = 0.0;
    for (Eigen::Index k = 0; k < n; ++k) {
      double s = 0.0;
      for (Eigen::Index c = 0; c < psi.cols(); ++c) s += w[c] * std::abs(psi(j, c) - psi(k, c));
      a(j, k) = std::exp(-std::max(s, 0.0));
      z += a(j, k);
    }
    a.row(j) /= z;
  }
  return a;
}

double reg_loss_oracle(const Matrix& psi, const Matrix& a, double lambda) {
  double dist = 0.0, fro = 0.0;
  for (Eigen::Index j = 0; j < psi.rows(); ++j)
    for (Eigen::Index k = 0; k < psi.rows(); ++k) {
      double d2 = 0.0;
      for (Eigen::Index c = 0; c < psi.cols(); ++c) d2 += (psi(j, c) - psi(k, c)) * (psi(j, c) - psi(k, c));
      dist += d2 * a(j, k);
      fro += a(j, k) * a(j, k);
    }
  return lambda * dist + fro;
}

// Chebyshev filter evaluated in the eigenbasis of L_tilde.
Matrix spectral_oracle(const Matrix& lt, const Matrix& x, const Vector& theta) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es{Eigen::MatrixXd(lt)};
  const Vector lam = es.eigenvalues();
  Vector filt = Vector::Zero(lam.size());
  for (Eigen::Index i = 0; i < lam.size(); ++i) {
    const double l = std::clamp(lam[i], -1.0, 1.0);
    for (Eigen::Index p = 0; p < theta.size(); ++p) filt[i] += theta[p] * std::cos(static_cast<double>(p) * std::acos(l));
  }
  const Eigen::MatrixXd u = es.eigenvectors();
  return Matrix(u * filt.asDiagonal() * u.transpose() * Eigen::MatrixXd(x));
}

Matrix random_adjacency(int n, std::mt19937_64& rng) {
  return graph::dynamic_adjacency(random_matrix(n, 3, rng), random_vector(3, rng).cwiseAbs());
}

}  // namespace

TEST(DynamicAdjacency, ThreeNodeHandValue) {
  Matrix psi(3, 1);
  psi << 0, 1, 3;
  Vector w(1);
  w << 1;
  const Matrix a = graph::dynamic_adjacency(psi, w);
  EXPECT_NEAR(a(0, 0), 0.7053845126982412, 1e-15);
  EXPECT_NEAR((a - adjacency_oracle(psi, w)).cwiseAbs().maxCoeff(), 0.0, 1e-15);
}

TEST(DynamicAdjacency, IdenticalRowsGiveUniform) {
  std::mt19937_64 rng(1);
  const RowVector row = random_matrix(1, 5, rng);
  const Matrix psi = row.replicate(7, 1);
  const Matrix a = graph::dynamic_adjacency(psi, random_vector(5, rng));
  EXPECT_LT((a.array() - 1.0 / 7.0).abs().maxCoeff(), 1e-15);
}

TEST(DynamicAdjacency, ZeroWeightGivesUniform) {
  std::mt19937_64 rng(2);
  const Matrix a = graph::dynamic_adjacency(random_matrix(6, 5, rng), Vector::Zero(5));
  EXPECT_LT((a.array() - 1.0 / 6.0).abs().maxCoeff(), 1e-15);
}

TEST(DynamicAdjacency, RowsStochasticWithDominantDiagonal) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 2 + trial % 12;
    const Matrix psi = random_matrix(n, 5, rng, 2.0);
    const Vector w = random_vector(5, rng);
    const Matrix a = graph::dynamic_adjacency(psi, w);
    EXPECT_LT((a.rowwise().sum().array() - 1.0).abs().maxCoeff(), 1e-6);
    EXPECT_GT(a.minCoeff(), 0.0);
    EXPECT_LE(a.maxCoeff(), 1.0);
    for (int j = 0; j < n; ++j) EXPECT_DOUBLE_EQ(a(j, j), a.row(j).maxCoeff());
    EXPECT_LT((a - adjacency_oracle(psi, w)).cwiseAbs().maxCoeff(), 1e-14);
  }
}

TEST(DynamicAdjacency, RejectsNonFiniteInput) {
  Matrix psi = Matrix::Zero(3, 2);
  psi(1, 1) = std::nan("");
  EXPECT_THROW(graph::dynamic_adjacency(psi, Vector::Ones(2)), InputError);
  EXPECT_THROW(graph::dynamic_adjacency(Matrix::Zero(3, 2), Vector::Ones(3)), ShapeError);
}

TEST(GraphRegLoss, UniformAdjacencyAndIdenticalFeatures) {
  const Matrix psi = Matrix::Ones(9, 5);
  const Matrix a = graph::dynamic_adjacency(psi, Vector::Ones(5));
  EXPECT_NEAR(graph::graph_reg_loss(psi, a, 1.0), 1.0, 1e-12);
}

TEST(GraphRegLoss, LambdaZeroLeavesFrobeniusTerm) {
  std::mt19937_64 rng(4);
  const Matrix psi = random_matrix(6, 5, rng);
  const Matrix a = graph::dynamic_adjacency(psi, Vector::Ones(5));
  EXPECT_NEAR(graph::graph_reg_loss(psi, a, 0.0), a.squaredNorm(), 1e-14);
}

TEST(GraphRegLoss, MatchesDoubleLoopOracle) {
  Matrix psi(3, 1);
  psi << 0, 1, 3;
  const Matrix a = graph::dynamic_adjacency(psi, Vector::Ones(1));
  EXPECT_NEAR(graph::graph_reg_loss(psi, a, 0.01), reg_loss_oracle(psi, a, 0.01), 1e-9);
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const Matrix p = random_matrix(2 + trial % 9, 5, rng);
    const Matrix ar = graph::dynamic_adjacency(p, random_vector(5, rng));
    EXPECT_NEAR(graph::graph_reg_loss(p, ar, 0.01), reg_loss_oracle(p, ar, 0.01), 1e-9);
  }
}

TEST(GraphRegLoss, MonotoneInLambda) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    const Matrix psi = random_matrix(6, 5, rng);
    const Matrix a = graph::dynamic_adjacency(psi, random_vector(5, rng));
    double prev = graph::graph_reg_loss(psi, a, 0.0);
    for (double lam : {0.001, 0.01, 0.1, 1.0, 10.0}) {
      const double cur = graph::graph_reg_loss(psi, a, lam);
      EXPECT_GE(cur, prev);
      EXPECT_GE(cur, 0.0);
      prev = cur;
    }
  }
}

TEST(ScaledLaplacian, SelfLoopsHitZeroGuard) {
  const auto sl = graph::scaled_laplacian(Matrix::Identity(4, 4));
  EXPECT_TRUE(sl.degenerate);
  EXPECT_EQ(sl.lambda_max, 1.0);
  EXPECT_EQ(sl.lt, Matrix(-Matrix::Identity(4, 4)));
}

TEST(ScaledLaplacian, TwoNodeUniform) {
  const Matrix a = Matrix::Constant(2, 2, 0.5);
  const auto sl = graph::scaled_laplacian(a);
  Matrix lap(2, 2), lt(2, 2);
  lap << 0.5, -0.5, -0.5, 0.5;
  lt << 0, -1, -1, 0;
  EXPECT_LT((sl.lap - lap).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_NEAR(sl.lambda_max, 1.0, 1e-12);
  EXPECT_LT((sl.lt - lt).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(ScaledLaplacian, SpectrumInUnitIntervalAndSymmetric) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 3 + trial % 10;
    const Matrix a = random_adjacency(n, rng);
    const auto sl = graph::scaled_laplacian(a);
    EXPECT_EQ(sl.lt, Matrix(sl.lt.transpose()));
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es{Eigen::MatrixXd(sl.lt)};
    EXPECT_GE(es.eigenvalues().minCoeff(), -1.0 - 1e-6);
    EXPECT_LE(es.eigenvalues().maxCoeff(), 1.0 + 1e-6);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> el{Eigen::MatrixXd(sl.lap)};
    EXPECT_NEAR(sl.lambda_max, el.eigenvalues().maxCoeff(), 1e-9 * el.eigenvalues().maxCoeff());
  }
}

TEST(ScaledLaplacian, ClusteredSpectrumStillResolved) {
  // 62 nodes with nearly identical features: the top eigenvalues bunch up and
  // plain power iteration needs far more than 500 iterations.
  std::mt19937_64 rng(8);
  const Matrix psi = random_matrix(62, 5, rng, 0.05);
  const Matrix a = graph::dynamic_adjacency(psi, Vector::Ones(5));
  const auto sl = graph::scaled_laplacian(a);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> el{Eigen::MatrixXd(sl.lap)};
  EXPECT_NEAR(sl.lambda_max, el.eigenvalues().maxCoeff(), 1e-12);
}

TEST(PowerIteration, NonConvergenceReportsIterationCount) {
  std::mt19937_64 rng(9);
  const Matrix m = random_matrix(8, 8, rng);
  graph::PowerIterationOptions opts;
  opts.max_iter = 3;
  opts.tol = 1e-300;
  try {
    graph::power_iteration(Matrix(m * m.transpose()), opts);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("3 iterations"), std::string::npos) << e.what();
  }
  opts.dense_fallback = false;
  Matrix a = random_adjacency(8, rng);
  EXPECT_THROW(graph::scaled_laplacian(a, opts), NumericError);
}

TEST(ChebConv, LowOrderCases) {
  std::mt19937_64 rng(10);
  const Matrix x = random_matrix(5, 5, rng);
  const auto sl = graph::scaled_laplacian(random_adjacency(5, rng));
  EXPECT_EQ(graph::cheb_conv(x, sl.lt, Vector::Ones(1)), x);
  Vector t(2);
  t << 0, 1;
  EXPECT_LT((graph::cheb_conv(x, sl.lt, t) - sl.lt * x).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_THROW(graph::cheb_conv(x, sl.lt, Vector(0)), ShapeError);
  EXPECT_THROW(graph::cheb_conv(x, Matrix::Identity(4, 4), t), ShapeError);
}

TEST(ChebConv, MatchesSpectralEvaluation) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 60; ++trial) {
    const int n = 2 + trial % 7;
    const auto sl = graph::scaled_laplacian(random_adjacency(n, rng));
    const Matrix x = random_matrix(n, 5, rng);
    const Vector theta = random_vector(1 + trial % 5, rng);
    EXPECT_LT((graph::cheb_conv(x, sl.lt, theta) - spectral_oracle(sl.lt, x, theta)).cwiseAbs().maxCoeff(), 1e-8);
  }
}

TEST(GraphGradients, RegLossThroughAdjacency) {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 5; ++trial) {
    const Matrix psi = random_matrix(6, 5, rng);
    const Vector w = random_vector(5, rng).cwiseAbs();
    const double lam = 0.3;
    auto f = [&](const Matrix& p, const Vector& ww) {
      return graph::graph_reg_loss(p, graph::dynamic_adjacency(p, ww), lam);
    };
    const Matrix a = graph::dynamic_adjacency(psi, w);
    const auto g = graph::graph_reg_loss_backward(psi, a, lam, 1.0);
    const auto ga = graph::dynamic_adjacency_backward(psi, w, a, g.da);
    const Matrix dpsi = g.dpsi + ga.dpsi;
    EXPECT_LT(max_rel_error(dpsi, numeric_grad([&](const Matrix& p) { return f(p, w); }, psi)), 1e-4);
    const Matrix nw = numeric_grad([&](const Matrix& ww) { return f(psi, ww.col(0)); }, Matrix(w));
    EXPECT_LT(max_rel_error(Matrix(ga.dw), nw), 1e-4);
  }
}

TEST(GraphGradients, ChebConvThroughLaplacian) {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 5; ++trial) {
    const Matrix psi = random_matrix(6, 5, rng);
    const Vector w = random_vector(5, rng).cwiseAbs();
    const Matrix x = random_matrix(6, 5, rng);
    const Vector theta = random_vector(3, rng);
    const Matrix probe = random_matrix(6, 5, rng);
    auto f = [&](const Matrix& xx, const Vector& ww, const Vector& th) {
      const auto sl = graph::scaled_laplacian(graph::dynamic_adjacency(psi, ww));
      return (graph::cheb_conv(xx, sl.lt, th).array() * probe.array()).sum();
    };
    const Matrix a = graph::dynamic_adjacency(psi, w);
    const auto sl = graph::scaled_laplacian(a);
    const auto g = graph::cheb_conv_backward(x, sl.lt, theta, probe);
    const Matrix da = graph::scaled_laplacian_backward(sl, g.dlt);
    const auto gw = graph::dynamic_adjacency_backward(psi, w, a, da);
    EXPECT_LT(max_rel_error(g.dx, numeric_grad([&](const Matrix& xx) { return f(xx, w, theta); }, x)), 1e-4);
    EXPECT_LT(max_rel_error(Matrix(g.dtheta),
                            numeric_grad([&](const Matrix& th) { return f(x, w, th.col(0)); }, Matrix(theta))),
              1e-4);
    EXPECT_LT(max_rel_error(Matrix(gw.dw), numeric_grad([&](const Matrix& ww) { return f(x, ww.col(0), theta); },
                                                        Matrix(w))),
              1e-4);
  }
}
