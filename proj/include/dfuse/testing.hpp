#pragma once

// Deterministic generators and independent reference solutions used by the
// test suites and the selftest command.

#include <Eigen/Dense>
#include <cmath>
#include <random>
#include <vector>

#include "dfuse/fusion.hpp"
#include "dfuse/predictions.hpp"
#include "dfuse/semidense.hpp"

namespace dfuse::testing {

struct TestProblem {
  FusionState state;
  SemiDenseMap semi;
  PredictionSet pred;
};

struct RandomProblemOptions {
  double semi_fraction = 0.6;
  double depth_lo = 0.5, depth_hi = 5.0;
  double outlier_fraction = 0.0;  // fraction of wildly wrong predictions
};

inline TestProblem make_random_problem(std::uint64_t seed, int w, int h,
                                       RandomProblemOptions opt = {}) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * u01(rng); };

  TestProblem p;
  p.state.log_depth = Raster<double>(w, h, 0.0);
  p.semi = SemiDenseMap::empty(w, h);
  p.pred.log_depth = Raster<double>(w, h, 0.0);
  p.pred.log_depth_var = Raster<double>(w, h, 1.0);
  p.pred.grad_x = Raster<double>(w, h, 0.0);
  p.pred.grad_x_var = Raster<double>(w, h, 1.0);
  p.pred.grad_y = Raster<double>(w, h, 0.0);
  p.pred.grad_y_var = Raster<double>(w, h, 1.0);
  p.pred.source_focal = 200.0;

  for (std::size_t i = 0; i < p.state.log_depth.size(); ++i) {
    p.state.log_depth[i] = std::log(uniform(opt.depth_lo, opt.depth_hi));
    p.pred.log_depth[i] = std::log(uniform(opt.depth_lo, opt.depth_hi));
    if (opt.outlier_fraction > 0.0 && u01(rng) < opt.outlier_fraction)
      p.pred.log_depth[i] += uniform(-4.0, 4.0);
    p.pred.log_depth_var[i] = uniform(0.05, 1.0);
    p.pred.grad_x[i] = uniform(-0.2, 0.2);
    p.pred.grad_x_var[i] = uniform(0.005, 0.1);
    p.pred.grad_y[i] = uniform(-0.2, 0.2);
    p.pred.grad_y_var[i] = uniform(0.005, 0.1);
    if (u01(rng) < opt.semi_fraction) {
      p.semi.valid[i] = 1;
      p.semi.depth[i] = uniform(opt.depth_lo, opt.depth_hi);
      p.semi.variance[i] = uniform(1e-4, 5e-2);
      p.semi.inlier_count += 1;
    }
  }
  p.state.scale = uniform(0.5, 2.0);
  return p;
}

inline Eigen::MatrixXd dense_stencil(const StencilMatrix& H) {
  const int w = H.width, h = H.height;
  const int n = w * h;
  Eigen::MatrixXd M = Eigen::MatrixXd::Zero(n, n);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int i = y * w + x;
      M(i, i) = H.diag[i];
      if (x + 1 < w) {
        M(i, i + 1) = H.right[i];
        M(i + 1, i) = H.right[i];
      }
      if (y + 1 < h) {
        M(i, i + w) = H.down[i];
        M(i + w, i) = H.down[i];
      }
    }
  }
  return M;
}

/// Closed-form weighted least-squares solution of the quadratic (delta = inf)
/// problem with the scale fixed, built row by row from the residual
/// definitions -- an independent route around the stencil assembly and CG.
inline Eigen::VectorXd dense_wls_solution(const SemiDenseMap& semi, const PredictionSet& pred,
                                          double scale, FusionMode mode) {
  const int w = pred.log_depth.width(), h = pred.log_depth.height();
  const int n = w * h;
  const bool use_net = mode != FusionMode::LeastSquaresScale;
  const bool use_grad = mode != FusionMode::NoPairwise;
  const double ln_s = mode == FusionMode::LeastSquaresScale ? 0.0 : std::log(scale);

  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(n, n);
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(n);
  auto add_row = [&](const std::vector<std::pair<int, double>>& coeffs, double target,
                     double weight) {
    for (const auto& [i, ci] : coeffs)
      for (const auto& [j, cj] : coeffs) A(i, j) += weight * ci * cj;
    for (const auto& [i, ci] : coeffs) rhs(i) += weight * ci * target;
  };

  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int i = y * w + x;
      if (use_net) add_row({{i, 1.0}}, pred.log_depth[i], 1.0 / pred.log_depth_var[i]);
      if (semi.valid[i])
        add_row({{i, 1.0}}, ln_s + std::log(semi.depth[i]),
                1.0 / semi_log_variance(semi.variance[i], semi.depth[i]));
      if (use_grad && x + 1 < w)
        add_row({{i + 1, 1.0}, {i, -1.0}}, pred.grad_x[i], 1.0 / pred.grad_x_var[i]);
      if (use_grad && y + 1 < h)
        add_row({{i + w, 1.0}, {i, -1.0}}, pred.grad_y[i], 1.0 / pred.grad_y_var[i]);
    }
  }
  return A.ldlt().solve(rhs);
}

struct FdGradient {
  std::vector<double> wrt_log_depth;
  double wrt_ln_scale = 0.0;
};

/// Central finite differences of the total robustified cost.
inline FdGradient fd_cost_gradient(const FusionState& state, const SemiDenseMap& semi,
                                   const PredictionSet& pred, const RobustConfig& cfg,
                                   FusionMode mode, double h = 1e-5) {
  FdGradient g;
  g.wrt_log_depth.assign(state.log_depth.size(), 0.0);
  FusionState probe = state;
  for (std::size_t i = 0; i < state.log_depth.size(); ++i) {
    probe.log_depth[i] = state.log_depth[i] + h;
    const double up = total_cost(probe, semi, pred, cfg, mode);
    probe.log_depth[i] = state.log_depth[i] - h;
    const double dn = total_cost(probe, semi, pred, cfg, mode);
    probe.log_depth[i] = state.log_depth[i];
    g.wrt_log_depth[i] = (up - dn) / (2.0 * h);
  }
  const double ln_s = std::log(state.scale);
  probe.scale = std::exp(ln_s + h);
  const double up = total_cost(probe, semi, pred, cfg, mode);
  probe.scale = std::exp(ln_s - h);
  const double dn = total_cost(probe, semi, pred, cfg, mode);
  g.wrt_ln_scale = (up - dn) / (2.0 * h);
  return g;
}

/// True when the residual at any term sits within `margin` of its Huber
/// threshold (FD comparisons are unreliable across the kink).
inline bool near_huber_kink(const FusionState& state, const SemiDenseMap& semi,
                            const PredictionSet& pred, const RobustConfig& cfg, FusionMode mode,
                            std::size_t i, double margin = 1e-3) {
  const int w = state.log_depth.width(), h = state.log_depth.height();
  const int x = static_cast<int>(i) % w, y = static_cast<int>(i) / w;
  const bool use_net = mode != FusionMode::LeastSquaresScale;
  const bool use_grad = mode != FusionMode::NoPairwise;
  const double ln_s = mode == FusionMode::LeastSquaresScale ? 0.0 : std::log(state.scale);
  auto near = [&](double r, double delta) { return std::abs(std::abs(r) - delta) <= margin; };

  if (use_net && near(state.log_depth[i] - pred.log_depth[i], cfg.delta_net)) return true;
  if (semi.valid[i] &&
      near(state.log_depth[i] - ln_s - std::log(semi.depth[i]), cfg.delta_semi))
    return true;
  if (use_grad) {
    if (x + 1 < w &&
        near(state.log_depth[i + 1] - state.log_depth[i] - pred.grad_x[i], cfg.delta_grad))
      return true;
    if (x > 0 &&
        near(state.log_depth[i] - state.log_depth[i - 1] - pred.grad_x[i - 1], cfg.delta_grad))
      return true;
    if (y + 1 < h &&
        near(state.log_depth[i + w] - state.log_depth[i] - pred.grad_y[i], cfg.delta_grad))
      return true;
    if (y > 0 &&
        near(state.log_depth[i] - state.log_depth[i - w] - pred.grad_y[i - w], cfg.delta_grad))
      return true;
  }
  return false;
}

}  // namespace dfuse::testing
