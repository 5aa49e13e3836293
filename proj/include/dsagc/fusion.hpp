#pragma once

// Self-attentive fusion of the two stream embeddings, target-similarity
// sample weights and the weighted classification loss.
//
// Attention runs across the batch axis: row b of Q/K/V is sample b, and each
// of the H heads attends over all B samples within its d = width / H column
// slice. Outputs therefore depend on batch composition; evaluation uses
// fixed-composition target batches.

#include "dsagc/autodiff.hpp"

#include <memory>

namespace dsagc::fusion {

inline constexpr double kNormClamp = 1e-12;
inline constexpr double kLogClamp = 1e-12;

struct AttentionCache {
  std::vector<Matrix> probs;  // per head, B x B
};

inline void check_heads(Eigen::Index width, int heads) {
  if (heads < 1 || width % heads != 0)
    throw ConfigError("mha: width " + std::to_string(width) + " is not divisible by " + std::to_string(heads) + " heads");
}

// concat_h softmax(Q_h K_h^T / sqrt(d)) V_h
inline Matrix attention(const Eigen::Ref<const Matrix>& q, const Eigen::Ref<const Matrix>& k,
                        const Eigen::Ref<const Matrix>& v, int heads, AttentionCache* cache = nullptr) {
  check_heads(q.cols(), heads);
  const Eigen::Index d = q.cols() / heads;
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  Matrix out(q.rows(), v.cols());
  if (cache) cache->probs.resize(heads);
  for (int h = 0; h < heads; ++h) {
    const Matrix scores = (q.middleCols(h * d, d) * k.middleCols(h * d, d).transpose()) * inv_sqrt_d;
    Matrix p = ad::softmax_rows(scores);
    out.middleCols(h * d, d).noalias() = p * v.middleCols(h * d, d);
    if (cache) cache->probs[h] = std::move(p);
  }
  return out;
}

struct AttentionGrad {
  Matrix dq, dk, dv;
};

inline AttentionGrad attention_backward(const Eigen::Ref<const Matrix>& q, const Eigen::Ref<const Matrix>& k,
                                        const Eigen::Ref<const Matrix>& v, int heads, const AttentionCache& cache,
                                        const Eigen::Ref<const Matrix>& dout) {
  const Eigen::Index d = q.cols() / heads;
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  AttentionGrad g{Matrix(q.rows(), q.cols()), Matrix(k.rows(), k.cols()), Matrix(v.rows(), v.cols())};
  for (int h = 0; h < heads; ++h) {
    const Matrix& p = cache.probs[h];
    const auto dout_h = dout.middleCols(h * d, d);
    g.dv.middleCols(h * d, d).noalias() = p.transpose() * dout_h;
    const Matrix dp = dout_h * v.middleCols(h * d, d).transpose();
    const Matrix ds = ad::softmax_rows_backward(p, dp) * inv_sqrt_d;
    g.dq.middleCols(h * d, d).noalias() = ds * k.middleCols(h * d, d);
    g.dk.middleCols(h * d, d).noalias() = ds.transpose() * q.middleCols(h * d, d);
  }
  return g;
}

struct MhaParams {
  Matrix wq, wk, wv;        // width x width
  RowVector bq, bk, bv;     // 1 x width
};

inline Matrix mha(const Eigen::Ref<const Matrix>& x, const MhaParams& p, int heads) {
  check_heads(x.cols(), heads);
  Matrix q = x * p.wq, k = x * p.wk, v = x * p.wv;
  q.rowwise() += p.bq;
  k.rowwise() += p.bk;
  v.rowwise() += p.bv;
  return attention(q, k, v, heads);
}

inline ad::Var attention_op(ad::Tape& t, ad::Var q, ad::Var k, ad::Var v, int heads) {
  auto cache = std::make_shared<AttentionCache>();
  Matrix out = attention(t.value(q), t.value(k), t.value(v), heads, cache.get());
  return t.record(std::move(out), {q, k, v}, [q, k, v, heads, cache](ad::Tape& t, const Matrix& g) {
    auto grads = attention_backward(t.value(q), t.value(k), t.value(v), heads, *cache, g);
    t.accumulate(q, grads.dq);
    t.accumulate(k, grads.dk);
    t.accumulate(v, grads.dv);
  });
}

// ---------------------------------------------------------------------------
// Similarity-based sample weights.

struct SampleWeights {
  Vector similarity;  // mean cosine similarity of each source row to the target rows
  Vector weights;     // softmax of `similarity`
};

namespace detail {

inline Matrix unit_rows(const Eigen::Ref<const Matrix>& r, Vector& norms) {
  norms = r.rowwise().norm().cwiseMax(kNormClamp);
  return norms.cwiseInverse().asDiagonal() * r;
}

inline Matrix unit_rows_backward(const Matrix& r, const Matrix& u, const Vector& norms, const Matrix& du) {
  Matrix dr(du.rows(), du.cols());
  for (Eigen::Index i = 0; i < u.rows(); ++i) {
    if (r.row(i).norm() > kNormClamp)
      dr.row(i) = (du.row(i) - u.row(i) * u.row(i).dot(du.row(i))) / norms[i];
    else
      dr.row(i) = du.row(i) / norms[i];
  }
  return dr;
}

inline Vector softmax(const Vector& s) {
  const double mx = s.maxCoeff();
  Vector e = (s.array() - mx).exp();
  return e / e.sum();
}

}  // namespace detail

inline SampleWeights sample_similarity(const Eigen::Ref<const Matrix>& rs, const Eigen::Ref<const Matrix>& rt) {
  if (rs.cols() != rt.cols()) throw ShapeError("sample_similarity: source and target widths differ");
  if (rs.rows() < 1 || rt.rows() < 1) throw ShapeError("sample_similarity: empty batch");
  Vector ns, nt;
  const Matrix us = detail::unit_rows(rs, ns);
  const Matrix ut = detail::unit_rows(rt, nt);
  const RowVector mean_t = ut.colwise().mean();
  SampleWeights out;
  out.similarity = us * mean_t.transpose();
  out.weights = detail::softmax(out.similarity);
  return out;
}

struct SimilarityGrad {
  Matrix drs, drt;
};

inline SimilarityGrad sample_similarity_backward(const Eigen::Ref<const Matrix>& rs, const Eigen::Ref<const Matrix>& rt,
                                                 const SampleWeights& fwd, const Vector& dweights) {
  Vector ns, nt;
  const Matrix us = detail::unit_rows(rs, ns);
  const Matrix ut = detail::unit_rows(rt, nt);
  const RowVector mean_t = ut.colwise().mean();
  const Vector& w = fwd.weights;
  const Vector dsim = w.cwiseProduct(dweights) - w * w.dot(dweights);
  const Matrix dus = dsim * mean_t;
  const RowVector dmean = dsim.transpose() * us;
  const Matrix dut = dmean.replicate(ut.rows(), 1) / static_cast<double>(ut.rows());
  return {detail::unit_rows_backward(rs, us, ns, dus), detail::unit_rows_backward(rt, ut, nt, dut)};
}

// Returns a B_s x 1 node of weights.
inline ad::Var sample_similarity_op(ad::Tape& t, ad::Var rs, ad::Var rt) {
  auto fwd = std::make_shared<SampleWeights>(sample_similarity(t.value(rs), t.value(rt)));
  Matrix out = fwd->weights;
  return t.record(std::move(out), {rs, rt}, [rs, rt, fwd](ad::Tape& t, const Matrix& g) {
    auto grads = sample_similarity_backward(t.value(rs), t.value(rt), *fwd, g.col(0));
    t.accumulate(rs, grads.drs);
    t.accumulate(rt, grads.drt);
  });
}

// ---------------------------------------------------------------------------
// Weighted cross-entropy.

enum class CeMode { inside_log, outside_log };

inline const char* ce_mode_name(CeMode m) { return m == CeMode::inside_log ? "inside_log" : "outside_log"; }

inline CeMode parse_ce_mode(const std::string& s) {
  if (s == "inside_log") return CeMode::inside_log;
  if (s == "outside_log") return CeMode::outside_log;
  throw ConfigError("unknown ce mode '" + s + "' (expected inside_log or outside_log)");
}

inline void check_weighted_ce(const Eigen::Ref<const Matrix>& probs, const std::vector<int>& labels,
                              const Eigen::Ref<const Vector>& weights) {
  if (weights.size() != probs.rows()) throw ShapeError("weighted_ce: weights length must equal batch size");
  if (static_cast<Eigen::Index>(labels.size()) != probs.rows()) throw ShapeError("weighted_ce: one label per row");
  for (int l : labels)
    if (l < 0 || l >= probs.cols()) throw InputError("weighted_ce: label out of range");
}

// inside_log:  -(1/B) sum_b log(w_b * p_b[y_b])
// outside_log: -(1/B) sum_b w_b * log(p_b[y_b])
inline double weighted_ce(const Eigen::Ref<const Matrix>& probs, const std::vector<int>& labels,
                          const Eigen::Ref<const Vector>& weights, CeMode mode) {
  check_weighted_ce(probs, labels, weights);
  double total = 0.0;
  for (Eigen::Index b = 0; b < probs.rows(); ++b) {
    const double p = probs(b, labels[b]);
    total -= mode == CeMode::inside_log ? std::log(std::max(weights[b] * p, kLogClamp))
                                        : weights[b] * std::log(std::max(p, kLogClamp));
  }
  return total / static_cast<double>(probs.rows());
}

struct WeightedCeGrad {
  Matrix dprobs;
  Vector dweights;
};

inline WeightedCeGrad weighted_ce_backward(const Eigen::Ref<const Matrix>& probs, const std::vector<int>& labels,
                                           const Eigen::Ref<const Vector>& weights, CeMode mode, double dloss) {
  WeightedCeGrad g{Matrix::Zero(probs.rows(), probs.cols()), Vector::Zero(probs.rows())};
  const double inv = dloss / static_cast<double>(probs.rows());
  for (Eigen::Index b = 0; b < probs.rows(); ++b) {
    const double p = probs(b, labels[b]);
    if (mode == CeMode::inside_log) {
      if (weights[b] * p > kLogClamp) {
        g.dprobs(b, labels[b]) = -inv / p;
        g.dweights[b] = -inv / weights[b];
      }
    } else {
      if (p > kLogClamp) g.dprobs(b, labels[b]) = -inv * weights[b] / p;
      g.dweights[b] = -inv * std::log(std::max(p, kLogClamp));
    }
  }
  return g;
}

// `weights` may be an invalid Var, meaning unit weights (plain cross-entropy).
inline ad::Var weighted_ce_op(ad::Tape& t, ad::Var probs, std::vector<int> labels, ad::Var weights, CeMode mode) {
  const Vector w = weights.valid() ? Vector(t.value(weights).col(0)) : Vector::Ones(t.value(probs).rows());
  Matrix out(1, 1);
  out(0, 0) = weighted_ce(t.value(probs), labels, w, mode);
  const bool needs = t.requires_grad(probs) || (weights.valid() && t.requires_grad(weights));
  return t.record_if(std::move(out), needs,
                     [probs, weights, w, mode, labels = std::move(labels)](ad::Tape& t, const Matrix& g) {
                       auto grads = weighted_ce_backward(t.value(probs), labels, w, mode, g(0, 0));
                       t.accumulate(probs, grads.dprobs);
                       if (weights.valid()) t.accumulate(weights, grads.dweights);
                     });
}

}  // namespace dsagc::fusion
