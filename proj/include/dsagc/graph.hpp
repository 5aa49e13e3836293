#pragma once

// Learned channel graphs: dynamic adjacency, graph regularization loss,
// scaled Laplacian and Chebyshev polynomial graph convolution. Every forward
// has a matching vector-Jacobian product so the training tape can chain them.

#include "dsagc/autodiff.hpp"

#include <algorithm>
#include <memory>
#include <string>

namespace dsagc::graph {

struct LearnedGraph {
  Matrix psi;      // N_G x C_de node features
  Vector w;        // C_de adjacency weight
  Matrix A;        // N_G x N_G, row-stochastic
  Vector theta;    // Chebyshev coefficients, length phi_order
  double lambda_reg = 0.01;
  int phi_order = 3;
};

namespace detail {

// s_jk = w^T |psi_j - psi_k|, symmetric with zero diagonal.
inline Matrix weighted_l1(const Eigen::Ref<const Matrix>& psi, const Eigen::Ref<const Vector>& w) {
  const Eigen::Index n = psi.rows();
  const Eigen::Index c = psi.cols();
  Matrix s = Matrix::Zero(n, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    const double* pj = psi.data() + j * psi.outerStride();
    for (Eigen::Index k = j + 1; k < n; ++k) {
      const double* pk = psi.data() + k * psi.outerStride();
      double acc = 0.0;
      for (Eigen::Index b = 0; b < c; ++b) acc += w[b] * std::abs(pj[b] - pk[b]);
      s(j, k) = acc;
      s(k, j) = acc;
    }
  }
  return s;
}

}  // namespace detail

// A_jk = softmax_k( -ReLU(w^T |psi_j - psi_k|) ), row-wise.
inline Matrix dynamic_adjacency(const Eigen::Ref<const Matrix>& psi, const Eigen::Ref<const Vector>& w) {
  if (w.size() != psi.cols()) throw ShapeError("dynamic_adjacency: w length must equal feature width");
  if (!psi.allFinite() || !w.allFinite()) throw InputError("dynamic_adjacency: non-finite input");
  // Logits are <= 0 with the diagonal at exactly 0, so exp never overflows.
  Matrix a = (-detail::weighted_l1(psi, w).cwiseMax(0.0)).array().exp().matrix();
  const Vector sums = a.rowwise().sum();
  return sums.cwiseInverse().asDiagonal() * a;
}

struct AdjacencyGrad {
  Matrix dpsi;
  Vector dw;
};

inline AdjacencyGrad dynamic_adjacency_backward(const Eigen::Ref<const Matrix>& psi, const Eigen::Ref<const Vector>& w,
                                                const Eigen::Ref<const Matrix>& a, const Eigen::Ref<const Matrix>& da) {
  const Eigen::Index n = psi.rows();
  const Eigen::Index c = psi.cols();
  AdjacencyGrad g{Matrix::Zero(n, c), Vector::Zero(c)};
  // d loss / d s_jk through the row softmax; d logit / d s = -1 where the
  // ReLU is active.
  const Vector dots = a.cwiseProduct(da).rowwise().sum();
  Matrix ds = -(a.array() * (da.colwise() - dots).array()).matrix();
  const Matrix s = detail::weighted_l1(psi, w);
  for (Eigen::Index j = 0; j < n; ++j) {
    const double* pj = psi.data() + j * psi.outerStride();
    for (Eigen::Index k = j + 1; k < n; ++k) {
      if (s(j, k) <= 0.0) continue;  // ReLU inactive
      const double both = ds(j, k) + ds(k, j);
      const double* pk = psi.data() + k * psi.outerStride();
      for (Eigen::Index b = 0; b < c; ++b) {
        const double diff = pj[b] - pk[b];
        g.dw[b] += both * std::abs(diff);
        const double sgn = diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0);
        g.dpsi(j, b) += both * w[b] * sgn;
        g.dpsi(k, b) -= both * w[b] * sgn;
      }
    }
  }
  return g;
}

namespace detail {

inline Matrix squared_distances(const Eigen::Ref<const Matrix>& psi) {
  const Eigen::Index n = psi.rows();
  const Eigen::Index c = psi.cols();
  Matrix d2 = Matrix::Zero(n, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    const double* pj = psi.data() + j * psi.outerStride();
    for (Eigen::Index k = j + 1; k < n; ++k) {
      const double* pk = psi.data() + k * psi.outerStride();
      double acc = 0.0;
      for (Eigen::Index b = 0; b < c; ++b) acc += (pj[b] - pk[b]) * (pj[b] - pk[b]);
      d2(j, k) = acc;
      d2(k, j) = acc;
    }
  }
  return d2;
}

}  // namespace detail

// lambda * sum_jk ||psi_j - psi_k||^2 A_jk + ||A||_F^2
inline double graph_reg_loss(const Eigen::Ref<const Matrix>& psi, const Eigen::Ref<const Matrix>& a, double lambda_reg) {
  if (lambda_reg < 0.0) throw ConfigError("graph_reg_loss: lambda must be >= 0");
  return lambda_reg * detail::squared_distances(psi).cwiseProduct(a).sum() + a.squaredNorm();
}

struct RegLossGrad {
  Matrix dpsi;
  Matrix da;
};

inline RegLossGrad graph_reg_loss_backward(const Eigen::Ref<const Matrix>& psi, const Eigen::Ref<const Matrix>& a,
                                           double lambda_reg, double dloss) {
  RegLossGrad g;
  g.da = dloss * (lambda_reg * detail::squared_distances(psi) + 2.0 * a);
  // d/dpsi_j sum_jk A_jk ||psi_j - psi_k||^2 = 2 sum_k (A_jk + A_kj)(psi_j - psi_k)
  Matrix lap = -(a + a.transpose());
  const Vector row_sums = lap.rowwise().sum();
  lap.diagonal() -= row_sums;
  g.dpsi = (2.0 * dloss * lambda_reg) * (lap * psi);
  return g;
}

struct PowerIterationOptions {
  double tol = 1e-9;   // relative eigenvalue change that counts as converged
  int max_iter = 500;
  // scaled_laplacian only: resolve the spectrum densely when power iteration
  // stalls instead of raising.
  bool dense_fallback = true;
};

struct PowerIterationResult {
  double lambda = 0.0;
  Vector v;
  int iterations = 0;
  bool polished = false;  // reached machine-precision stationarity within budget
};

struct ScaledLaplacian {
  Matrix lt;             // 2 L / lambda_max - I
  Matrix lap;            // L = D - A_sym
  double lambda_max = 1.0;
  Vector eigvec;         // unit eigenvector for lambda_max (empty when degenerate)
  bool degenerate = false;
  bool dense = false;    // lambda_max came from the dense fallback
  int iterations = 0;
};

inline constexpr double kZeroLaplacianNorm = 1e-12;
// Stationarity target past the convergence tolerance; keeps finite
// differences of lambda_max at step 1e-5 accurate to ~1e-8.
inline constexpr double kPolishTol = 1e-13;

// Largest eigenvalue of a symmetric positive semidefinite matrix by power
// iteration. Iteration continues past `tol` toward machine precision while
// budget remains so that lambda_max is a smooth function of its input;
// failing to reach `tol` within `max_iter` is an error.
inline PowerIterationResult power_iteration(const Matrix& m, const PowerIterationOptions& opts = {}) {
  const Eigen::Index n = m.rows();
  PowerIterationResult r;
  Vector v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = 1.0 + 0.5 * std::sin(1.3 * static_cast<double>(i) + 0.7);
  v.normalize();
  double lambda = 0.0;
  bool converged = false;
  int it = 0;
  for (; it < opts.max_iter; ++it) {
    Vector mv = m * v;
    const double next = v.dot(mv);
    const double norm = mv.norm();
    if (!(norm > 0.0) || !std::isfinite(norm))
      throw NumericError("power iteration: iterate collapsed after " + std::to_string(it) + " iterations");
    const double change = std::abs(next - lambda);
    lambda = next;
    v = mv / norm;
    if (it > 0 && change <= opts.tol * std::max(std::abs(lambda), 1e-300)) converged = true;
    if (converged && change <= kPolishTol * std::abs(lambda)) {
      r.polished = true;
      ++it;
      break;
    }
  }
  if (!converged)
    throw NumericError("power iteration did not converge within " + std::to_string(opts.max_iter) + " iterations");
  r.lambda = lambda;
  r.v = std::move(v);
  r.iterations = it;
  return r;
}

inline ScaledLaplacian scaled_laplacian(const Eigen::Ref<const Matrix>& a, const PowerIterationOptions& opts = {}) {
  if (a.rows() != a.cols()) throw ShapeError("scaled_laplacian: adjacency must be square");
  const Matrix sym = 0.5 * (a + a.transpose());
  ScaledLaplacian out;
  out.lap = -sym;
  out.lap.diagonal() += sym.rowwise().sum();
  if (out.lap.norm() < kZeroLaplacianNorm) {
    out.degenerate = true;
    out.lambda_max = 1.0;
  } else {
    bool need_dense = false;
    try {
      // L is PSD with lambda_max >= max_j L_jj, so shifting by half the
      // largest diagonal keeps lambda_max dominant and widens the relative
      // gap to the next eigenvalue.
      const double shift = 0.5 * out.lap.diagonal().maxCoeff();
      Matrix shifted = out.lap;
      shifted.diagonal().array() -= shift;
      auto r = power_iteration(shifted, opts);
      out.lambda_max = r.lambda + shift;
      out.eigvec = std::move(r.v);
      out.iterations = r.iterations;
      need_dense = !r.polished && opts.dense_fallback;
    } catch (const NumericError&) {
      if (!opts.dense_fallback) throw;
      out.iterations = opts.max_iter;
      need_dense = true;
    }
    if (need_dense) {
      // Clustered top eigenvalues make power iteration slow; the dense
      // symmetric solver gives the same quantity to machine precision.
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(Eigen::MatrixXd(out.lap));
      if (es.info() != Eigen::Success) throw NumericError("scaled_laplacian: dense eigensolver failed");
      const Eigen::Index top = out.lap.rows() - 1;
      out.lambda_max = es.eigenvalues()[top];
      out.eigvec = es.eigenvectors().col(top);
      out.dense = true;
    }
  }
  out.lt = (2.0 / out.lambda_max) * out.lap;
  out.lt.diagonal().array() -= 1.0;
  return out;
}

// d loss / d A given d loss / d L_tilde.
inline Matrix scaled_laplacian_backward(const ScaledLaplacian& sl, const Eigen::Ref<const Matrix>& dlt) {
  const double lam = sl.lambda_max;
  Matrix dlap = (2.0 / lam) * dlt;
  if (!sl.degenerate) {
    const double dlam = -(2.0 / (lam * lam)) * (dlt.array() * sl.lap.array()).sum();
    dlap.noalias() += dlam * sl.eigvec * sl.eigvec.transpose();
  }
  // L = D - A_sym with D_jj = sum_k A_sym_jk
  Matrix dsym = -dlap;
  dsym.colwise() += dlap.diagonal();
  return 0.5 * (dsym + dsym.transpose());
}

// sum_phi theta_phi * xbar_phi with xbar_0 = x, xbar_1 = Lt x,
// xbar_phi = 2 Lt xbar_{phi-1} - xbar_{phi-2}.
inline Matrix cheb_conv(const Eigen::Ref<const Matrix>& x, const Eigen::Ref<const Matrix>& lt,
                        const Eigen::Ref<const Vector>& theta) {
  if (theta.size() < 1) throw ShapeError("cheb_conv: theta must have at least one coefficient");
  if (lt.rows() != x.rows() || lt.cols() != x.rows()) throw ShapeError("cheb_conv: Laplacian does not match node count");
  Matrix prev2 = x;
  Matrix out = theta[0] * x;
  if (theta.size() == 1) return out;
  Matrix prev1 = lt * x;
  out += theta[1] * prev1;
  for (Eigen::Index p = 2; p < theta.size(); ++p) {
    Matrix cur = 2.0 * (lt * prev1) - prev2;
    out += theta[p] * cur;
    prev2 = std::move(prev1);
    prev1 = std::move(cur);
  }
  return out;
}

struct ChebGrad {
  Matrix dx;
  Matrix dlt;
  Vector dtheta;
};

inline ChebGrad cheb_conv_backward(const Eigen::Ref<const Matrix>& x, const Eigen::Ref<const Matrix>& lt,
                                   const Eigen::Ref<const Vector>& theta, const Eigen::Ref<const Matrix>& dout) {
  const Eigen::Index order = theta.size();
  std::vector<Matrix> xb(order);
  xb[0] = x;
  if (order > 1) xb[1] = lt * x;
  for (Eigen::Index p = 2; p < order; ++p) xb[p] = 2.0 * (lt * xb[p - 1]) - xb[p - 2];

  ChebGrad g{Matrix(), Matrix::Zero(lt.rows(), lt.cols()), Vector(order)};
  std::vector<Matrix> dxb(order);
  for (Eigen::Index p = 0; p < order; ++p) {
    g.dtheta[p] = (dout.array() * xb[p].array()).sum();
    dxb[p] = theta[p] * dout;
  }
  for (Eigen::Index p = order - 1; p >= 2; --p) {
    g.dlt.noalias() += 2.0 * dxb[p] * xb[p - 1].transpose();
    dxb[p - 1].noalias() += 2.0 * lt.transpose() * dxb[p];
    dxb[p - 2] -= dxb[p];
  }
  if (order > 1) {
    g.dlt.noalias() += dxb[1] * xb[0].transpose();
    dxb[0].noalias() += lt.transpose() * dxb[1];
  }
  g.dx = std::move(dxb[0]);
  return g;
}

// ---------------------------------------------------------------------------
// Batched tape ops. Row b of `x` is sample b's N_G x C_de block flattened
// row-major; adjacency and Laplacian nodes hold one flattened N_G x N_G
// matrix per row. `w` is 1 x C_de and `theta` is 1 x order.

namespace detail {

using ConstBlock = Eigen::Map<const Matrix>;

inline ConstBlock block(const Matrix& m, Eigen::Index row, Eigen::Index r, Eigen::Index c) {
  return ConstBlock(m.row(row).data(), r, c);
}

inline void put_block(Matrix& m, Eigen::Index row, const Matrix& value) {
  m.row(row) = Eigen::Map<const RowVector>(value.data(), value.size());
}

}  // namespace detail

inline ad::Var adjacency_op(ad::Tape& t, ad::Var x, ad::Var w, int n_nodes, int n_feat) {
  const Matrix& xv = t.value(x);
  const Vector wv = t.value(w).row(0).transpose();
  Matrix out(xv.rows(), static_cast<Eigen::Index>(n_nodes) * n_nodes);
  for (Eigen::Index b = 0; b < xv.rows(); ++b) {
    const auto psi = detail::block(xv, b, n_nodes, n_feat);
    detail::put_block(out, b, dynamic_adjacency(psi, wv));
    if (t.track_kinks) {
      for (int j = 0; j < n_nodes; ++j)
        for (int k = 0; k < n_nodes; ++k)
          if (j != k) t.note_preactivation(wv.dot((psi.row(j) - psi.row(k)).cwiseAbs().transpose()));
    }
  }
  const int id = static_cast<int>(t.size());
  return t.record(std::move(out), {x, w}, [x, w, id, n_nodes, n_feat](ad::Tape& t, const Matrix& g) {
    const Matrix& xv = t.value(x);
    const Matrix& av = t.value(ad::Var{id});
    const Vector wv = t.value(w).row(0).transpose();
    Matrix dx = Matrix::Zero(xv.rows(), xv.cols());
    RowVector dw = RowVector::Zero(wv.size());
    for (Eigen::Index b = 0; b < xv.rows(); ++b) {
      auto gr = dynamic_adjacency_backward(detail::block(xv, b, n_nodes, n_feat), wv, detail::block(av, b, n_nodes, n_nodes),
                                           detail::block(g, b, n_nodes, n_nodes));
      detail::put_block(dx, b, gr.dpsi);
      dw += gr.dw.transpose();
    }
    t.accumulate(x, dx);
    t.accumulate(w, dw);
  });
}

// Mean of graph_reg_loss over the batch.
inline ad::Var graph_reg_op(ad::Tape& t, ad::Var x, ad::Var a, double lambda_reg, int n_nodes, int n_feat) {
  const Matrix& xv = t.value(x);
  const Matrix& av = t.value(a);
  double total = 0.0;
  for (Eigen::Index b = 0; b < xv.rows(); ++b)
    total += graph_reg_loss(detail::block(xv, b, n_nodes, n_feat), detail::block(av, b, n_nodes, n_nodes), lambda_reg);
  Matrix out(1, 1);
  out(0, 0) = total / static_cast<double>(xv.rows());
  return t.record(std::move(out), {x, a}, [x, a, lambda_reg, n_nodes, n_feat](ad::Tape& t, const Matrix& g) {
    const Matrix& xv = t.value(x);
    const Matrix& av = t.value(a);
    const double scale = g(0, 0) / static_cast<double>(xv.rows());
    Matrix dx(xv.rows(), xv.cols()), da(av.rows(), av.cols());
    for (Eigen::Index b = 0; b < xv.rows(); ++b) {
      auto gr = graph_reg_loss_backward(detail::block(xv, b, n_nodes, n_feat), detail::block(av, b, n_nodes, n_nodes),
                                        lambda_reg, scale);
      detail::put_block(dx, b, gr.dpsi);
      detail::put_block(da, b, gr.da);
    }
    t.accumulate(x, dx);
    t.accumulate(a, da);
  });
}

inline ad::Var scaled_laplacian_op(ad::Tape& t, ad::Var a, int n_nodes, const PowerIterationOptions& opts) {
  const Matrix& av = t.value(a);
  auto cache = std::make_shared<std::vector<ScaledLaplacian>>();
  cache->reserve(av.rows());
  Matrix out(av.rows(), av.cols());
  for (Eigen::Index b = 0; b < av.rows(); ++b) {
    cache->push_back(scaled_laplacian(detail::block(av, b, n_nodes, n_nodes), opts));
    detail::put_block(out, b, cache->back().lt);
  }
  return t.record(std::move(out), {a}, [a, cache, n_nodes](ad::Tape& t, const Matrix& g) {
    Matrix da(g.rows(), g.cols());
    for (Eigen::Index b = 0; b < g.rows(); ++b)
      detail::put_block(da, b, scaled_laplacian_backward((*cache)[b], detail::block(g, b, n_nodes, n_nodes)));
    t.accumulate(a, da);
  });
}

inline ad::Var cheb_conv_op(ad::Tape& t, ad::Var x, ad::Var lt, ad::Var theta, int n_nodes, int n_feat) {
  const Matrix& xv = t.value(x);
  const Matrix& lv = t.value(lt);
  const Vector th = t.value(theta).row(0).transpose();
  Matrix out(xv.rows(), xv.cols());
  for (Eigen::Index b = 0; b < xv.rows(); ++b)
    detail::put_block(out, b, cheb_conv(detail::block(xv, b, n_nodes, n_feat), detail::block(lv, b, n_nodes, n_nodes), th));
  return t.record(std::move(out), {x, lt, theta}, [x, lt, theta, n_nodes, n_feat](ad::Tape& t, const Matrix& g) {
    const Matrix& xv = t.value(x);
    const Matrix& lv = t.value(lt);
    const Vector th = t.value(theta).row(0).transpose();
    Matrix dx(xv.rows(), xv.cols()), dl(lv.rows(), lv.cols());
    RowVector dth = RowVector::Zero(th.size());
    for (Eigen::Index b = 0; b < xv.rows(); ++b) {
      auto gr = cheb_conv_backward(detail::block(xv, b, n_nodes, n_feat), detail::block(lv, b, n_nodes, n_nodes), th,
                                   detail::block(g, b, n_nodes, n_feat));
      detail::put_block(dx, b, gr.dx);
      detail::put_block(dl, b, gr.dlt);
      dth += gr.dtheta.transpose();
    }
    t.accumulate(x, dx);
    t.accumulate(lt, dl);
    t.accumulate(theta, dth);
  });
}

}  // namespace dsagc::graph
