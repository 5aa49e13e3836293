#pragma once

// Model assembly: parameter layout, the dual-stream forward pass and the
// combined training objective.

#include "dsagc/adapt.hpp"
#include "dsagc/contrast.hpp"
#include "dsagc/featio.hpp"
#include "dsagc/fusion.hpp"
#include "dsagc/graph.hpp"

#include <array>
#include <random>

namespace dsagc::engine {

inline constexpr int kStreamWidth = 64;      // F_NS and F_S output width
inline constexpr int kSimilarityWidth = 64;  // phi(.) output width

// RNG stream tags for derive_seed.
enum Stream : std::uint64_t { kStreamInit = 1, kStreamShuffle = 2, kStreamAug = 3, kStreamDropout = 4 };

struct Ablation {
  bool no_disc = false;
  bool no_contrastive = false;
  bool no_attn_fusion = false;
  bool no_sample_weights = false;

  bool any() const { return no_disc || no_contrastive || no_attn_fusion || no_sample_weights; }
  bool operator==(const Ablation&) const = default;
};

inline constexpr std::array<const char*, 4> kAblationNames = {"no_disc", "no_contrastive", "no_attn_fusion",
                                                              "no_sample_weights"};

inline void set_ablation(Ablation& a, const std::string& name) {
  if (name == "no_disc") a.no_disc = true;
  else if (name == "no_contrastive") a.no_contrastive = true;
  else if (name == "no_attn_fusion") a.no_attn_fusion = true;
  else if (name == "no_sample_weights") a.no_sample_weights = true;
  else throw ConfigError("unknown ablation '" + name + "'");
}

inline std::string ablation_tag(const Ablation& a) {
  std::string tag;
  auto add = [&](bool on, const char* n) {
    if (!on) return;
    if (!tag.empty()) tag += "+";
    tag += n;
  };
  add(a.no_disc, "no_disc");
  add(a.no_contrastive, "no_contrastive");
  add(a.no_attn_fusion, "no_attn_fusion");
  add(a.no_sample_weights, "no_sample_weights");
  return tag;
}

struct TrainConfig {
  double lr = 1e-3;
  int batch_size = 48;  // per-domain sub-batch
  int e_t = 30;         // last epoch of the two-domain stage
  int max_epochs = 100;
  double tau = 0.5;
  double lambda_reg = 0.01;
  int cheb_order = 3;  // number of Chebyshev terms (polynomial degree + 1)
  int heads = 64;
  int drop_count = 13;
  double alpha_disc = 1.0;
  double alpha_gcn = 1.0;
  double alpha_gcl = 1.0;
  std::uint64_t seed = 0;
  fusion::CeMode ce_mode = fusion::CeMode::inside_log;
  Ablation ablate;
  double grl_mu = 1.0;
  double dropout = 0.5;
  double rms_decay = 0.99;
  double rms_eps = 1e-8;
  double power_tol = 1e-9;
  int power_max_iter = 500;
  int eval_views = 1;
  int snapshot_epoch = 30;
  bool capture_embeddings = false;
  int embed_max_per_domain = 200;

  bool operator==(const TrainConfig&) const = default;

  void validate() const {
    if (!(lr > 0.0)) throw ConfigError("lr must be > 0");
    if (batch_size < 2) throw ConfigError("batch_size must be >= 2");
    if (max_epochs < 0 || e_t < 0 || e_t > max_epochs) throw ConfigError("need 0 <= e_t <= max_epochs");
    if (!(tau > 0.0)) throw ConfigError("tau must be > 0");
    if (lambda_reg < 0.0) throw ConfigError("lambda_reg must be >= 0");
    if (cheb_order < 1) throw ConfigError("cheb_order must be >= 1");
    if (heads < 1) throw ConfigError("heads must be >= 1");
    if (drop_count < 0) throw ConfigError("drop_count must be >= 0");
    if (alpha_disc < 0.0 || alpha_gcn < 0.0 || alpha_gcl < 0.0) throw ConfigError("loss weights must be >= 0");
    if (grl_mu < 0.0) throw ConfigError("grl_mu must be >= 0");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must be in [0, 1)");
    if (!(rms_decay >= 0.0 && rms_decay < 1.0) || !(rms_eps > 0.0)) throw ConfigError("invalid RMSprop constants");
    if (eval_views < 1) throw ConfigError("eval_views must be >= 1");
  }
};

struct ModelDims {
  int n_channels = 62;
  int n_bands = 5;
  int n_classes = 3;
  int drop_count = 13;
  int cheb_order = 3;

  int flat_width() const { return n_channels * n_bands; }
  int kept_width() const { return (n_channels - drop_count) * n_bands; }
  bool operator==(const ModelDims&) const = default;
};

inline ModelDims dims_for(const featio::DatasetManifest& m, const TrainConfig& cfg) {
  ModelDims d{m.n_channels(), m.n_bands(), m.n_classes, cfg.drop_count, cfg.cheb_order};
  if (d.drop_count >= d.n_channels) throw ConfigError("drop_count must be smaller than the channel count");
  return d;
}

// Parameter slots, in payload order.
enum Slot : int {
  kNsW1, kNsB1, kNsW2, kNsB2, kNsW3, kNsB3,
  kAdjW, kChebTheta,
  kSW1, kSB1, kSW2, kSB2, kSW3, kSB3,
  kPW1, kPB1, kPW2, kPB2,
  kDW1, kDB1, kDW2, kDB2, kDW3, kDB3,
  kWq, kBq, kWk, kBk, kWv, kBv,
  kPhiW, kPhiB, kClsW, kClsB,
  kSlotCount
};

struct ModelParams {
  ModelDims dims;
  std::vector<ad::Parameter> tensors;

  Matrix& operator[](Slot s) { return tensors[s].value; }
  const Matrix& operator[](Slot s) const { return tensors[s].value; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += static_cast<std::size_t>(t.value.size());
    return n;
  }
  bool all_finite() const {
    for (const auto& t : tensors)
      if (!t.value.allFinite()) return false;
    return true;
  }
};

// Affine weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero. The
// adjacency weight starts at all-ones and theta at the identity filter.
template <typename Rng>
ModelParams init_params(const ModelDims& d, Rng& rng) {
  ModelParams p;
  p.dims = d;
  p.tensors.resize(kSlotCount);
  auto affine = [&](Slot w, Slot b, const char* name, int in, int out) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    std::uniform_real_distribution<double> u(-bound, bound);
    Matrix m(in, out);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
    p.tensors[w] = {std::string(name) + ".weight", std::move(m)};
    p.tensors[b] = {std::string(name) + ".bias", Matrix::Zero(1, out)};
  };
  const int h = kStreamWidth;
  const int fused = 2 * kStreamWidth;
  affine(kNsW1, kNsB1, "ns.fc1", d.flat_width(), h);
  affine(kNsW2, kNsB2, "ns.fc2", h, h);
  affine(kNsW3, kNsB3, "ns.fc3", h, h);
  p.tensors[kAdjW] = {"graph.adjacency_w", Matrix::Ones(1, d.n_bands)};
  Matrix theta = Matrix::Zero(1, d.cheb_order);
  theta(0, 0) = 1.0;
  p.tensors[kChebTheta] = {"graph.cheb_theta", theta};
  affine(kSW1, kSB1, "s.fc1", d.kept_width(), h);
  affine(kSW2, kSB2, "s.fc2", h, h);
  affine(kSW3, kSB3, "s.fc3", h, h);
  affine(kPW1, kPB1, "proj.fc1", h, contrast::kProjectionHidden);
  affine(kPW2, kPB2, "proj.fc2", contrast::kProjectionHidden, contrast::kProjectionOut);
  affine(kDW1, kDB1, "disc.fc1", h, h);
  affine(kDW2, kDB2, "disc.fc2", h, h);
  affine(kDW3, kDB3, "disc.fc3", h, adapt::kDomainCount);
  affine(kWq, kBq, "mha.q", fused, fused);
  affine(kWk, kBk, "mha.k", fused, fused);
  affine(kWv, kBv, "mha.v", fused, fused);
  affine(kPhiW, kPhiB, "phi", fused, kSimilarityWidth);
  affine(kClsW, kClsB, "classifier", fused, d.n_classes);
  return p;
}

// ---------------------------------------------------------------------------
// Batches.

struct RecordId {
  int subject = 0;
  int trial = 0;
  int segment = 0;
};

// Rows are laid out [S | U | T].
struct DomainBatch {
  Matrix x;  // rows x (N_G * C_de)
  std::vector<adapt::Domain> domains;
  std::vector<int> labels;  // class labels of the S rows
  std::vector<RecordId> ids;
  int n_s = 0, n_u = 0, n_t = 0;
  int stage = 3;

  int rows() const { return n_s + n_u + n_t; }
};

inline RowVector flatten(const Matrix& de) { return Eigen::Map<const RowVector>(de.data(), de.size()); }

inline DomainBatch make_batch(const std::vector<const featio::FeatureRecord*>& s,
                              const std::vector<const featio::FeatureRecord*>& u,
                              const std::vector<const featio::FeatureRecord*>& t, int stage) {
  adapt::check_stage(stage);
  if (stage == 2 && !u.empty()) throw ProtocolError("make_batch: U rows requested before the stage switch");
  DomainBatch b;
  b.stage = stage;
  b.n_s = static_cast<int>(s.size());
  b.n_u = static_cast<int>(u.size());
  b.n_t = static_cast<int>(t.size());
  const auto* first = !s.empty() ? s.front() : (!u.empty() ? u.front() : t.front());
  b.x.resize(b.rows(), first->de.size());
  int row = 0;
  auto put = [&](const std::vector<const featio::FeatureRecord*>& recs, adapt::Domain d) {
    for (const auto* r : recs) {
      b.x.row(row++) = flatten(r->de);
      b.domains.push_back(d);
      b.ids.push_back({r->subject, r->trial, r->segment});
      if (d == adapt::Domain::S) {
        if (!r->label) throw ProtocolError("make_batch: S record without label");
        b.labels.push_back(*r->label);
      }
    }
  };
  put(s, adapt::Domain::S);
  put(u, adapt::Domain::U);
  put(t, adapt::Domain::T);
  return b;
}

// ---------------------------------------------------------------------------
// Forward pass.

struct ForwardOutputs {
  ad::Var logits, probs;
  ad::Var features_ns, features_s, fused;
  ad::Var z1, z2;
  ad::Var weights;
  ad::Var l_ce, l_disc, l_gcn, l_gcl;  // invalid when not computed
};

struct ForwardOptions {
  bool compute_losses = true;
  // Inference uses one deterministic augmentation per record, seeded by the
  // record id and this view index.
  int eval_view = 0;
};

inline IndexList eval_kept_nodes(const RecordId& id, int view, int n_channels, int drop_count, std::uint64_t seed) {
  std::mt19937_64 rng(derive_seed(seed, id.subject, id.trial, id.segment, view));
  return contrast::sample_kept_nodes(n_channels, drop_count, rng);
}

inline ad::Var mlp3(ad::Tape& t, const ad::Binding& p, ad::Var x, Slot first) {
  auto h = ad::relu(t, ad::affine(t, x, p[first], p[first + 1]));
  h = ad::relu(t, ad::affine(t, h, p[first + 2], p[first + 3]));
  return ad::affine(t, h, p[first + 4], p[first + 5]);
}

// Non-structural stream, structural stream with contrastive views, fusion,
// classifier, and (in training) the four partial losses. `aug_rng` drives
// node dropping and `drop_rng` the discriminator dropout.
template <typename Rng>
ForwardOutputs forward(ad::Tape& t, const ad::Binding& p, const ModelDims& d, const DomainBatch& batch,
                       const TrainConfig& cfg, Rng& aug_rng, Rng& drop_rng, const ForwardOptions& opt = {}) {
  if (batch.x.cols() != d.flat_width()) throw ShapeError("forward: batch width does not match model");
  ForwardOutputs out;
  const ad::Var x = t.constant(batch.x);
  const int rows = batch.rows();

  // Non-structural stream.
  out.features_ns = mlp3(t, p, x, kNsW1);

  // Structural stream: per-sample learned graph, Chebyshev filtering, node drop.
  const graph::PowerIterationOptions pio{cfg.power_tol, cfg.power_max_iter};
  const ad::Var adj = graph::adjacency_op(t, x, p[kAdjW], d.n_channels, d.n_bands);
  if (opt.compute_losses) out.l_gcn = graph::graph_reg_op(t, x, adj, cfg.lambda_reg, d.n_channels, d.n_bands);
  const ad::Var lt = graph::scaled_laplacian_op(t, adj, d.n_channels, pio);
  const ad::Var conv = graph::cheb_conv_op(t, x, lt, p[kChebTheta], d.n_channels, d.n_bands);

  std::vector<IndexList> kept1(rows), kept2;
  if (t.training) {
    kept2.resize(rows);
    for (int b = 0; b < rows; ++b) kept1[b] = contrast::sample_kept_nodes(d.n_channels, d.drop_count, aug_rng);
    for (int b = 0; b < rows; ++b) kept2[b] = contrast::sample_kept_nodes(d.n_channels, d.drop_count, aug_rng);
  } else {
    for (int b = 0; b < rows; ++b) kept1[b] = eval_kept_nodes(batch.ids[b], opt.eval_view, d.n_channels, d.drop_count, cfg.seed);
  }
  const ad::Var view1 = contrast::node_drop_op(t, conv, d.n_bands, std::move(kept1));
  out.features_s = mlp3(t, p, view1, kSW1);
  if (t.training && opt.compute_losses) {
    const ad::Var view2 = contrast::node_drop_op(t, conv, d.n_bands, std::move(kept2));
    const ad::Var g2 = mlp3(t, p, view2, kSW1);
    auto project = [&](ad::Var g) {
      const auto h = ad::relu(t, ad::affine(t, g, p[kPW1], p[kPB1]));
      return ad::affine(t, h, p[kPW2], p[kPB2]);
    };
    if (!cfg.ablate.no_contrastive && cfg.alpha_gcl > 0.0 && rows >= 2) {
      out.z1 = project(out.features_s);
      out.z2 = project(g2);
      out.l_gcl = contrast::nt_xent_op(t, out.z1, out.z2, cfg.tau);
    }
  }

  // Fusion and classification.
  const ad::Var tokens = ad::concat_cols(t, out.features_ns, out.features_s);
  if (cfg.ablate.no_attn_fusion) {
    out.fused = tokens;
  } else {
    const ad::Var q = ad::affine(t, tokens, p[kWq], p[kBq]);
    const ad::Var k = ad::affine(t, tokens, p[kWk], p[kBk]);
    const ad::Var v = ad::affine(t, tokens, p[kWv], p[kBv]);
    out.fused = fusion::attention_op(t, q, k, v, cfg.heads);
  }
  out.logits = ad::affine(t, out.fused, p[kClsW], p[kClsB]);
  out.probs = ad::softmax(t, out.logits);
  if (!opt.compute_losses) return out;

  // Classification loss on S rows only, weighted by similarity to T rows.
  if (batch.n_s > 0) {
    const ad::Var probs_s = ad::slice_rows(t, out.probs, 0, batch.n_s);
    ad::Var weights;
    if (!cfg.ablate.no_sample_weights && batch.n_t > 0) {
      const ad::Var r = ad::affine(t, out.fused, p[kPhiW], p[kPhiB]);
      const ad::Var rs = ad::slice_rows(t, r, 0, batch.n_s);
      const ad::Var rt = ad::slice_rows(t, r, batch.n_s + batch.n_u, batch.n_t);
      weights = fusion::sample_similarity_op(t, rs, rt);
      out.weights = weights;
    }
    out.l_ce = fusion::weighted_ce_op(t, probs_s, batch.labels, weights, cfg.ce_mode);
  }

  // Domain discrimination through gradient reversal.
  if (!cfg.ablate.no_disc && cfg.alpha_disc > 0.0) {
    const ad::Var rev = adapt::grad_reverse(t, out.features_ns, cfg.grl_mu);
    ad::Var h = ad::relu(t, ad::affine(t, rev, p[kDW1], p[kDB1]));
    if (t.training && cfg.dropout > 0.0) {
      const double keep = 1.0 - cfg.dropout;
      std::bernoulli_distribution bern(keep);
      Matrix mask(rows, kStreamWidth);
      for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = bern(drop_rng) ? 1.0 / keep : 0.0;
      h = ad::apply_mask(t, h, std::move(mask));
    }
    h = ad::affine(t, h, p[kDW2], p[kDB2]);
    const ad::Var dlogits = ad::affine(t, h, p[kDW3], p[kDB3]);
    out.l_disc = adapt::domain_loss_op(t, dlogits, batch.domains, batch.stage);
  }
  return out;
}

// L = L_ce + a_disc L_disc + a_gcn L_gcn + a_gcl L_gcl, with ablated terms
// removed.
inline ad::Var total_loss(ad::Tape& t, const ForwardOutputs& o, const TrainConfig& cfg) {
  return ad::weighted_sum(t, {{o.l_ce, 1.0},
                              {o.l_disc, cfg.ablate.no_disc ? 0.0 : cfg.alpha_disc},
                              {o.l_gcn, cfg.alpha_gcn},
                              {o.l_gcl, cfg.ablate.no_contrastive ? 0.0 : cfg.alpha_gcl}});
}

}  // namespace dsagc::engine
