#pragma once

// Central finite-difference verification of analytic gradients.

#include "dsagc/model.hpp"

#include <algorithm>
#include <functional>
#include <numeric>
#include <random>
#include <string>

namespace dsagc::engine {

struct GradCheckOptions {
  double step = 1e-5;
  std::size_t coordinates = 200;  // sampled coordinates (all if fewer exist)
  double tolerance = 1e-4;
  // Denominator floor of the relative error. Central differences at step
  // 1e-5 carry ~eps*|f|/h ~ 1e-10 of roundoff, so gradients below the floor
  // are compared on an absolute scale instead.
  double denominator_floor = 1e-5;
  std::uint64_t seed = 0;
};

// One evaluation of the objective. `parts` are the scalar terms the numeric
// side differentiates; `grads` the analytic gradients of the tape root.
struct Evaluation {
  std::vector<double> parts;
  std::vector<Matrix> grads;
  std::uint64_t sign_hash = 0;  // ReLU activation pattern
};

using Objective = std::function<Evaluation(const std::vector<Matrix>& params, bool need_grad)>;
// Numeric objective seen by coordinates of a given tensor.
using Combine = std::function<double(std::size_t tensor, const std::vector<double>& parts)>;

struct GradCheckReport {
  std::size_t checked = 0;
  std::size_t skipped_kinks = 0;
  double max_rel_error = 0.0;
  std::string worst;  // "tensor[index]" of the largest error
  bool passed(double tolerance) const { return checked > 0 && max_rel_error < tolerance; }
};

inline double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

inline GradCheckReport grad_check(const Objective& f, std::vector<Matrix> params, const GradCheckOptions& opts,
                                  const std::vector<std::string>& names = {}, const Combine& combine = {}) {
  const auto value = [&](std::size_t tensor, const Evaluation& e) {
    return combine ? combine(tensor, e.parts) : e.parts.at(0);
  };
  const Evaluation base = f(params, true);
  // Round-robin over tensors so that small tensors are always covered.
  std::mt19937_64 rng(opts.seed);
  std::vector<std::vector<Eigen::Index>> pools(params.size());
  std::size_t total = 0;
  for (std::size_t t = 0; t < params.size(); ++t) {
    pools[t].resize(static_cast<std::size_t>(params[t].size()));
    std::iota(pools[t].begin(), pools[t].end(), Eigen::Index{0});
    std::shuffle(pools[t].begin(), pools[t].end(), rng);
    total += pools[t].size();
  }
  std::vector<std::pair<std::size_t, Eigen::Index>> coords;
  const std::size_t want = std::min(total, opts.coordinates);
  for (std::size_t round = 0; coords.size() < want; ++round)
    for (std::size_t t = 0; t < params.size() && coords.size() < want; ++t)
      if (round < pools[t].size()) coords.emplace_back(t, pools[t][round]);
  std::sort(coords.begin(), coords.end());

  GradCheckReport rep;
  for (const auto& [t, i] : coords) {
    double& p = params[t].data()[i];
    const double saved = p;
    p = saved + opts.step;
    const Evaluation plus = f(params, false);
    p = saved - opts.step;
    const Evaluation minus = f(params, false);
    p = saved;
    // A ReLU pre-activation crossing zero inside the stencil makes the
    // difference quotient meaningless.
    if (plus.sign_hash != base.sign_hash || minus.sign_hash != base.sign_hash) {
      ++rep.skipped_kinks;
      continue;
    }
    const double numeric = (value(t, plus) - value(t, minus)) / (2.0 * opts.step);
    const double analytic = base.grads[t].data()[i];
    const double err = relative_error(analytic, numeric, opts.denominator_floor);
    ++rep.checked;
    if (err > rep.max_rel_error || rep.worst.empty()) {
      rep.max_rel_error = err;
      rep.worst = (t < names.size() ? names[t] : "tensor" + std::to_string(t)) + "[" + std::to_string(i) + "]";
    }
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Model objectives.

enum class LossTerm { ce, disc, gcn, gcl, total };

inline const char* loss_term_name(LossTerm t) {
  switch (t) {
    case LossTerm::ce: return "L_ce";
    case LossTerm::disc: return "L_disc";
    case LossTerm::gcn: return "L_gcn";
    case LossTerm::gcl: return "L_gcl";
    case LossTerm::total: return "L_total";
  }
  return "?";
}

inline bool is_ns_extractor(std::size_t tensor) { return tensor <= static_cast<std::size_t>(kNsB3); }

// Runs the model forward/backward on a frozen batch with fixed RNG streams.
// parts = {ce, disc, gcn, gcl}, 0 where not computed.
inline Objective model_objective(const ModelParams& proto, const DomainBatch& batch, const TrainConfig& cfg,
                                 LossTerm term) {
  return [proto, batch, cfg, term](const std::vector<Matrix>& values, bool need_grad) {
    ModelParams p = proto;
    for (std::size_t i = 0; i < values.size(); ++i) p.tensors[i].value = values[i];
    ad::Tape tape;
    tape.track_kinks = true;
    ad::Binding bind(tape, p.tensors);
    std::mt19937_64 aug(derive_seed(cfg.seed, kStreamAug)), drop(derive_seed(cfg.seed, kStreamDropout));
    const auto out = forward(tape, bind, p.dims, batch, cfg, aug, drop);
    auto val = [&](ad::Var v) { return v.valid() ? tape.scalar(v) : 0.0; };
    Evaluation e;
    e.parts = {val(out.l_ce), val(out.l_disc), val(out.l_gcn), val(out.l_gcl)};
    e.sign_hash = tape.sign_hash;
    if (need_grad) {
      ad::Var root;
      switch (term) {
        case LossTerm::ce: root = out.l_ce; break;
        case LossTerm::disc: root = out.l_disc; break;
        case LossTerm::gcn: root = out.l_gcn; break;
        case LossTerm::gcl: root = out.l_gcl; break;
        case LossTerm::total: root = total_loss(tape, out, cfg); break;
      }
      if (!root.valid()) throw ConfigError(std::string("grad check: ") + loss_term_name(term) + " is not computed");
      tape.backward(root);
      e.grads = bind.grads();
    }
    return e;
  };
}

// Numeric counterpart of `term`. Gradient reversal makes the extractor's
// analytic gradient that of -mu * L_disc rather than L_disc.
inline Combine model_combine(const TrainConfig& cfg, LossTerm term) {
  const double mu = cfg.grl_mu;
  const double a_disc = cfg.ablate.no_disc ? 0.0 : cfg.alpha_disc;
  const double a_gcn = cfg.alpha_gcn;
  const double a_gcl = cfg.ablate.no_contrastive ? 0.0 : cfg.alpha_gcl;
  return [=](std::size_t tensor, const std::vector<double>& parts) {
    const double disc_sign = is_ns_extractor(tensor) ? -mu : 1.0;
    switch (term) {
      case LossTerm::ce: return parts[0];
      case LossTerm::disc: return disc_sign * parts[1];
      case LossTerm::gcn: return parts[2];
      case LossTerm::gcl: return parts[3];
      case LossTerm::total: return parts[0] + a_disc * disc_sign * parts[1] + a_gcn * parts[2] + a_gcl * parts[3];
    }
    return 0.0;
  };
}

}  // namespace dsagc::engine
