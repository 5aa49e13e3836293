#pragma once

#include "dsagc/autodiff.hpp"

namespace dsagc::engine {

struct RmsPropConfig {
  double lr = 1e-3;
  double decay = 0.99;
  double eps = 1e-8;
};

struct RmsPropState {
  std::vector<Matrix> square_avg;

  static RmsPropState zeros_like(const std::vector<ad::Parameter>& params) {
    RmsPropState s;
    for (const auto& p : params) s.square_avg.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
    return s;
  }
};

// s <- rho s + (1 - rho) g^2;  p <- p - lr g / (sqrt(s) + eps). No momentum.
inline void rmsprop_step(std::vector<ad::Parameter>& params, const std::vector<Matrix>& grads, RmsPropState& state,
                         const RmsPropConfig& cfg) {
  if (grads.size() != params.size() || state.square_avg.size() != params.size())
    throw ShapeError("rmsprop_step: parameter, gradient and state counts differ");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Matrix& g = grads[i];
    if (g.rows() != params[i].value.rows() || g.cols() != params[i].value.cols() ||
        state.square_avg[i].rows() != g.rows() || state.square_avg[i].cols() != g.cols())
      throw ShapeError("rmsprop_step: shape mismatch for parameter '" + params[i].name + "'");
    if (!g.allFinite()) {
      Eigen::Index bad = 0;
      while (bad < g.size() && std::isfinite(g.data()[bad])) ++bad;
      throw NumericError("rmsprop_step: non-finite gradient for parameter '" + params[i].name + "' at flat index " +
                         std::to_string(bad));
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    Matrix& s = state.square_avg[i];
    const Matrix& g = grads[i];
    s = cfg.decay * s + (1.0 - cfg.decay) * g.cwiseAbs2();
    params[i].value.array() -= cfg.lr * g.array() / (s.array().sqrt() + cfg.eps);
  }
}

}  // namespace dsagc::engine
