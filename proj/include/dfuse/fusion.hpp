#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "dfuse/predictions.hpp"
#include "dfuse/raster.hpp"
#include "dfuse/semidense.hpp"

namespace dfuse {

/// Dense log-depth map being estimated plus the scale correction factor
/// reconciling the scale-ambiguous stereo depths with it.
struct FusionState {
  Raster<double> log_depth;
  double scale = 1.0;
  int iteration = 0;
};

struct RobustConfig {
  double delta_semi = 0.3;  // Huber thresholds, logspace
  double delta_net = 0.3;
  double delta_grad = 0.1;
  int gn_iterations = 10;
  double cg_tol = 1e-6;  // relative residual
  int cg_max_iters = 200;
  bool estimate_scale = true;
};

enum class FusionMode { Full, NoPairwise, LeastSquaresScale };

inline const char* to_string(FusionMode m) {
  switch (m) {
    case FusionMode::Full: return "full";
    case FusionMode::NoPairwise: return "nopairwise";
    case FusionMode::LeastSquaresScale: return "lsscale";
  }
  return "?";
}

inline FusionState init_state(const PredictionSet& pred) {
  return {pred.log_depth, 1.0, 0};
}

// ---------------------------------------------------------------------------
// Residuals and robustifier

inline double residual_semi(double ln_d, double s, double d_semi) {
  return ln_d - std::log(s) - std::log(d_semi);
}

inline double residual_net(double ln_d, double ln_d_net) { return ln_d - ln_d_net; }

inline double residual_grad(double ln_d_nbr, double ln_d, double g) {
  return ln_d_nbr - ln_d - g;
}

enum class GradAxis { X, Y };

/// Raster-indexed pairwise residual; rejects pixels whose neighbour does not
/// exist (last column for X, last row for Y).
inline double residual_grad_at(const Raster<double>& log_depth, int x, int y, GradAxis axis,
                               double g) {
  if (axis == GradAxis::X) {
    if (x + 1 >= log_depth.width())
      throw Error(Err::BorderPixel, "no right neighbour at x=" + std::to_string(x));
    return residual_grad(log_depth.at(x + 1, y), log_depth.at(x, y), g);
  }
  if (y + 1 >= log_depth.height())
    throw Error(Err::BorderPixel, "no lower neighbour at y=" + std::to_string(y));
  return residual_grad(log_depth.at(x, y + 1), log_depth.at(x, y), g);
}

/// IRLS weight of the Huber loss: 1 inside the quadratic region, delta/|r|
/// beyond it.
inline double huber_weight(double r, double delta) {
  if (delta <= 0.0) throw Error(Err::InvalidArgument, "huber delta must be > 0");
  const double a = std::abs(r);
  return a <= delta ? 1.0 : delta / a;
}

/// Huber loss in the r^2 convention (quadratic branch is exactly r^2), so
/// that rho'(r) = 2 * huber_weight(r) * r.
inline double huber_cost(double r, double delta) {
  const double a = std::abs(r);
  return a <= delta ? r * r : delta * (2.0 * a - delta);
}

/// Aliased stereo matches can report near-zero variance through Jacobians
/// that say nothing about match correctness; the floor (1% relative depth)
/// bounds the influence any single pixel can exert on the solve.
inline constexpr double kSemiLogVarianceFloor = 1e-4;

/// First-order propagation of the stereo depth variance into logspace.
inline double semi_log_variance(double variance, double depth) {
  return std::max(variance / (depth * depth), kSemiLogVarianceFloor);
}

// ---------------------------------------------------------------------------
// Normal equations on the 5-point pixel-grid stencil

/// Symmetric matrix with the sparsity of the pixel grid: a diagonal plus
/// couplings to the right (i, i+1) and downward (i, i+W) neighbours.
struct StencilMatrix {
  int width = 0, height = 0;
  std::vector<double> diag, right, down;

  StencilMatrix() = default;
  StencilMatrix(int w, int h)
      : width(w), height(h),
        diag(static_cast<std::size_t>(w) * h, 0.0),
        right(static_cast<std::size_t>(w) * h, 0.0),
        down(static_cast<std::size_t>(w) * h, 0.0) {}

  std::size_t size() const { return diag.size(); }

  void apply(const double* x, double* y) const {
    const int w = width, h = height;
#pragma omp parallel for schedule(static)
    for (int yy = 0; yy < h; ++yy) {
      const std::size_t row = static_cast<std::size_t>(yy) * w;
      for (int xx = 0; xx < w; ++xx) {
        const std::size_t i = row + xx;
        double v = diag[i] * x[i];
        if (xx + 1 < w) v += right[i] * x[i + 1];
        if (xx > 0) v += right[i - 1] * x[i - 1];
        if (yy + 1 < h) v += down[i] * x[i + w];
        if (yy > 0) v += down[i - w] * x[i - w];
        y[i] = v;
      }
    }
  }
};

struct NormalEquations {
  StencilMatrix H;
  std::vector<double> b;
};

namespace detail {

struct TermSelection {
  bool net = true;
  bool grad = true;
  bool scale = true;  // whether r_semi carries the -ln s term
};

inline TermSelection terms_for(FusionMode mode) {
  switch (mode) {
    case FusionMode::Full: return {true, true, true};
    case FusionMode::NoPairwise: return {true, false, true};
    case FusionMode::LeastSquaresScale: return {false, true, false};
  }
  return {};
}

inline void check_dimensions(const FusionState& state, const SemiDenseMap& semi,
                             const PredictionSet& pred) {
  require_same_size(state.log_depth, semi.depth, "fusion state vs semi-dense map");
  require_same_size(state.log_depth, pred.log_depth, "fusion state vs predictions");
}

}  // namespace detail

/// Gauss-Newton normal equations of the robustified cost at the current
/// state, scale held fixed. Each residual enters with weight
/// huber_weight(r, delta) / R.
inline NormalEquations assemble_normal_equations(const FusionState& state,
                                                 const SemiDenseMap& semi,
                                                 const PredictionSet& pred,
                                                 const RobustConfig& cfg, FusionMode mode) {
  detail::check_dimensions(state, semi, pred);
  const auto sel = detail::terms_for(mode);
  const int w = state.log_depth.width(), h = state.log_depth.height();
  NormalEquations eq;
  eq.H = StencilMatrix(w, h);
  eq.b.assign(eq.H.size(), 0.0);
  const double ln_s = sel.scale ? std::log(state.scale) : 0.0;

  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const std::size_t i = state.log_depth.index(x, y);
      const double ld = state.log_depth[i];

      if (sel.net) {
        const double r = residual_net(ld, pred.log_depth[i]);
        const double wi = huber_weight(r, cfg.delta_net) / pred.log_depth_var[i];
        eq.H.diag[i] += wi;
        eq.b[i] -= wi * r;
      }
      if (semi.valid[i]) {
        const double r = ld - ln_s - std::log(semi.depth[i]);
        const double R = semi_log_variance(semi.variance[i], semi.depth[i]);
        const double wi = huber_weight(r, cfg.delta_semi) / R;
        eq.H.diag[i] += wi;
        eq.b[i] -= wi * r;
      }
      if (sel.grad && x + 1 < w) {
        const double r = residual_grad(state.log_depth[i + 1], ld, pred.grad_x[i]);
        const double wi = huber_weight(r, cfg.delta_grad) / pred.grad_x_var[i];
        eq.H.diag[i] += wi;
        eq.H.diag[i + 1] += wi;
        eq.H.right[i] -= wi;
        eq.b[i] += wi * r;
        eq.b[i + 1] -= wi * r;
      }
      if (sel.grad && y + 1 < h) {
        const double r = residual_grad(state.log_depth[i + w], ld, pred.grad_y[i]);
        const double wi = huber_weight(r, cfg.delta_grad) / pred.grad_y_var[i];
        eq.H.diag[i] += wi;
        eq.H.diag[i + w] += wi;
        eq.H.down[i] -= wi;
        eq.b[i] += wi * r;
        eq.b[i + w] -= wi * r;
      }
    }
  }
  return eq;
}

/// Total robustified cost at the state (the objective the GN steps descend).
inline double total_cost(const FusionState& state, const SemiDenseMap& semi,
                         const PredictionSet& pred, const RobustConfig& cfg, FusionMode mode) {
  detail::check_dimensions(state, semi, pred);
  const auto sel = detail::terms_for(mode);
  const int w = state.log_depth.width(), h = state.log_depth.height();
  const double ln_s = sel.scale ? std::log(state.scale) : 0.0;
  double cost = 0.0;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const std::size_t i = state.log_depth.index(x, y);
      const double ld = state.log_depth[i];
      if (sel.net)
        cost += huber_cost(residual_net(ld, pred.log_depth[i]), cfg.delta_net) /
                pred.log_depth_var[i];
      if (semi.valid[i])
        cost += huber_cost(ld - ln_s - std::log(semi.depth[i]), cfg.delta_semi) /
                semi_log_variance(semi.variance[i], semi.depth[i]);
      if (sel.grad && x + 1 < w)
        cost += huber_cost(residual_grad(state.log_depth[i + 1], ld, pred.grad_x[i]),
                           cfg.delta_grad) /
                pred.grad_x_var[i];
      if (sel.grad && y + 1 < h)
        cost += huber_cost(residual_grad(state.log_depth[i + w], ld, pred.grad_y[i]),
                           cfg.delta_grad) /
                pred.grad_y_var[i];
    }
  }
  return cost;
}

struct CostGradient {
  double cost = 0.0;
  std::vector<double> wrt_log_depth;
  double wrt_ln_scale = 0.0;
};

/// Analytic gradient of the total robustified cost, using
/// rho'(r) = 2 huber_weight(r) r.
inline CostGradient cost_gradient(const FusionState& state, const SemiDenseMap& semi,
                                  const PredictionSet& pred, const RobustConfig& cfg,
                                  FusionMode mode) {
  detail::check_dimensions(state, semi, pred);
  const auto sel = detail::terms_for(mode);
  const int w = state.log_depth.width(), h = state.log_depth.height();
  const double ln_s = sel.scale ? std::log(state.scale) : 0.0;
  CostGradient g;
  g.wrt_log_depth.assign(state.log_depth.size(), 0.0);
  auto rho_prime = [](double r, double delta) { return 2.0 * huber_weight(r, delta) * r; };

  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const std::size_t i = state.log_depth.index(x, y);
      const double ld = state.log_depth[i];
      if (sel.net) {
        const double r = residual_net(ld, pred.log_depth[i]);
        g.cost += huber_cost(r, cfg.delta_net) / pred.log_depth_var[i];
        g.wrt_log_depth[i] += rho_prime(r, cfg.delta_net) / pred.log_depth_var[i];
      }
      if (semi.valid[i]) {
        const double R = semi_log_variance(semi.variance[i], semi.depth[i]);
        const double r = ld - ln_s - std::log(semi.depth[i]);
        g.cost += huber_cost(r, cfg.delta_semi) / R;
        const double d = rho_prime(r, cfg.delta_semi) / R;
        g.wrt_log_depth[i] += d;
        if (sel.scale) g.wrt_ln_scale -= d;
      }
      if (sel.grad && x + 1 < w) {
        const double r = residual_grad(state.log_depth[i + 1], ld, pred.grad_x[i]);
        g.cost += huber_cost(r, cfg.delta_grad) / pred.grad_x_var[i];
        const double d = rho_prime(r, cfg.delta_grad) / pred.grad_x_var[i];
        g.wrt_log_depth[i + 1] += d;
        g.wrt_log_depth[i] -= d;
      }
      if (sel.grad && y + 1 < h) {
        const double r = residual_grad(state.log_depth[i + w], ld, pred.grad_y[i]);
        g.cost += huber_cost(r, cfg.delta_grad) / pred.grad_y_var[i];
        const double d = rho_prime(r, cfg.delta_grad) / pred.grad_y_var[i];
        g.wrt_log_depth[i + w] += d;
        g.wrt_log_depth[i] -= d;
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Solvers

/// Jacobi-preconditioned conjugate gradients on H delta = b. Stops at
/// relative residual cg_tol or cg_max_iters; aborts when the residual grows
/// for 10 consecutive iterations.
inline std::vector<double> solve_depth_step(const NormalEquations& eq, const RobustConfig& cfg) {
  const std::size_t n = eq.b.size();
  std::vector<double> x(n, 0.0);
  double bnorm2 = 0.0;
  for (double v : eq.b) bnorm2 += v * v;
  if (bnorm2 == 0.0) return x;

  const std::vector<double>& diag = eq.H.diag;
  for (std::size_t i = 0; i < n; ++i)
    if (!(diag[i] > 0.0))
      throw Error(Err::CgDivergence, "non-positive diagonal; system not positive definite");

  std::vector<double> r = eq.b, z(n), p(n), q(n);
  for (std::size_t i = 0; i < n; ++i) z[i] = r[i] / diag[i];
  p = z;
  double rz = 0.0;
  for (std::size_t i = 0; i < n; ++i) rz += r[i] * z[i];

  const double tol2 = cfg.cg_tol * cfg.cg_tol * bnorm2;
  double prev_rnorm2 = bnorm2;
  int growth_streak = 0;

  for (int it = 0; it < cfg.cg_max_iters; ++it) {
    eq.H.apply(p.data(), q.data());
    double pq = 0.0;
    for (std::size_t i = 0; i < n; ++i) pq += p[i] * q[i];
    if (!(pq > 0.0)) throw Error(Err::CgDivergence, "curvature lost at iteration " + std::to_string(it));
    const double alpha = rz / pq;
    double rnorm2 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      x[i] += alpha * p[i];
      r[i] -= alpha * q[i];
      rnorm2 += r[i] * r[i];
    }
    if (rnorm2 <= tol2) return x;
    if (rnorm2 > prev_rnorm2) {
      if (++growth_streak >= 10)
        throw Error(Err::CgDivergence, "residual grew for 10 consecutive iterations");
    } else {
      growth_streak = 0;
    }
    prev_rnorm2 = rnorm2;
    double rz_new = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      z[i] = r[i] / diag[i];
      rz_new += r[i] * z[i];
    }
    const double beta = rz_new / rz;
    rz = rz_new;
    for (std::size_t i = 0; i < n; ++i) p[i] = z[i] + beta * p[i];
  }
  return x;
}

/// Closed-form IRLS update of the scale factor with the depth map fixed:
/// the Huber-weighted mean of (ln d_i - ln d_semi,i), three reweighting
/// rounds.
inline double solve_scale_step(const FusionState& state, const SemiDenseMap& semi,
                               const RobustConfig& cfg) {
  if (semi.inlier_count <= 0)
    throw Error(Err::NoSemiDenseSupport, "no valid semi-dense pixels");
  double ln_s = std::log(state.scale);
  for (int round = 0; round < 3; ++round) {
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < semi.valid.size(); ++i) {
      if (!semi.valid[i]) continue;
      const double offset = state.log_depth[i] - std::log(semi.depth[i]);
      const double R = semi_log_variance(semi.variance[i], semi.depth[i]);
      const double wi = huber_weight(offset - ln_s, cfg.delta_semi) / R;
      num += wi * offset;
      den += wi;
    }
    ln_s = num / den;
  }
  return std::exp(ln_s);
}

/// Alternating Gauss-Newton: one scale step then one depth step per
/// iteration, with step halving so the accepted cost never increases. The
/// scale goes first because its closed form lands on the conditional
/// optimum immediately; solving depth first instead lets the common
/// (depth, scale) gauge mode decay only by a factor of roughly
/// I_semi/(I_semi + I_net) per round, which stalls for tight stereo
/// variances. In LeastSquaresScale mode the depth problem is solved
/// scale-free (semi and pairwise terms only) and the scale comes from a
/// post-hoc least-squares fit to the predicted log-depths.
inline FusionState optimize(const FusionState& state, const SemiDenseMap& semi,
                            const PredictionSet& pred, const RobustConfig& cfg, FusionMode mode) {
  detail::check_dimensions(state, semi, pred);
  FusionState st = state;
  const bool ls_mode = (mode == FusionMode::LeastSquaresScale);
  const bool depth_solvable = !ls_mode || semi.inlier_count > 0;

  FusionState trial = st;
  for (int it = 0; it < cfg.gn_iterations; ++it) {
    if (!ls_mode && cfg.estimate_scale && semi.inlier_count > 0) {
      const double s_new = solve_scale_step(st, semi, cfg);
      const double c0 = total_cost(st, semi, pred, cfg, mode);
      const double dlns = std::log(s_new) - std::log(st.scale);
      double step = 1.0;
      for (int half = 0; half <= 5; ++half) {
        trial.log_depth = st.log_depth;
        trial.scale = std::exp(std::log(st.scale) + step * dlns);
        if (total_cost(trial, semi, pred, cfg, mode) <= c0) {
          st.scale = trial.scale;
          break;
        }
        step *= 0.5;
      }
    }
    if (depth_solvable) {
      const NormalEquations eq = assemble_normal_equations(st, semi, pred, cfg, mode);
      const std::vector<double> delta = solve_depth_step(eq, cfg);
      const double c0 = total_cost(st, semi, pred, cfg, mode);
      double step = 1.0;
      for (int half = 0; half <= 5; ++half) {
        trial.log_depth = st.log_depth;
        for (std::size_t i = 0; i < delta.size(); ++i) trial.log_depth[i] += step * delta[i];
        trial.scale = st.scale;
        if (total_cost(trial, semi, pred, cfg, mode) <= c0) {
          st.log_depth = trial.log_depth;
          break;
        }
        step *= 0.5;
      }
    }
    st.iteration += 1;
  }

  if (ls_mode) {
    double sum = 0.0;
    for (std::size_t i = 0; i < st.log_depth.size(); ++i)
      sum += pred.log_depth[i] - st.log_depth[i];
    const double offset = sum / static_cast<double>(st.log_depth.size());
    for (std::size_t i = 0; i < st.log_depth.size(); ++i) st.log_depth[i] += offset;
    st.scale = std::exp(offset);
  }
  return st;
}

}  // namespace dfuse
