#pragma once

// Built-in invariant suite behind the `selftest` subcommand: one line per
// check, nonzero failure count when anything breaks.

#include <Eigen/Dense>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <ostream>
#include <random>
#include <sstream>

#include "dfuse/datasets.hpp"
#include "dfuse/eval.hpp"
#include "dfuse/fusion.hpp"
#include "dfuse/geometry.hpp"
#include "dfuse/predictions.hpp"
#include "dfuse/semidense.hpp"
#include "dfuse/testing.hpp"

namespace dfuse {

class SelfTest {
 public:
  explicit SelfTest(std::ostream& out) : out_(out) {}

  void check(const char* name, bool ok) {
    out_ << (ok ? "[ ok ] " : "[FAIL] ") << name << "\n";
    if (!ok) ++failures_;
  }

  int failures() const { return failures_; }

 private:
  std::ostream& out_;
  int failures_ = 0;
};

inline int run_selftest(std::ostream& out) {
  namespace fs = std::filesystem;
  SelfTest t(out);
  std::mt19937_64 rng(20240817);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * u01(rng); };
  auto random_pose = [&]() {
    Eigen::Quaterniond q(uniform(-1, 1), uniform(-1, 1), uniform(-1, 1), uniform(-1, 1));
    return Pose{q.normalized(), Eigen::Vector3d(uniform(-2, 2), uniform(-2, 2), uniform(-2, 2))};
  };

  // geometry: projection round trip
  {
    CameraIntrinsics K{210.0, 208.0, 127.5, 95.5, 256, 192};
    bool ok = true;
    for (int i = 0; i < 1000 && ok; ++i) {
      const PixelCoord x{uniform(0, K.width - 1), uniform(0, K.height - 1)};
      const double d = uniform(0.2, 20.0);
      const auto back = project(K, backproject(x, d, K));
      ok = back && std::abs(back->x - x.x) < 1e-9 && std::abs(back->y - x.y) < 1e-9;
    }
    t.check("geometry: project(backproject) round trip", ok);
  }

  // geometry: pose group laws
  {
    bool ok = true;
    for (int i = 0; i < 100 && ok; ++i) {
      const Pose a = random_pose(), b = random_pose(), c = random_pose();
      const auto lhs = compose(compose(a, b), c).matrix();
      const auto rhs = compose(a, compose(b, c)).matrix();
      ok = (lhs - rhs).cwiseAbs().maxCoeff() < 1e-9;
      const auto id = compose(a, a.inverse()).matrix();
      ok = ok && (id - Pose::identity().matrix()).cwiseAbs().maxCoeff() < 1e-9;
    }
    t.check("geometry: pose associativity and inverse", ok);
  }

  // raster neighbour arithmetic
  {
    Raster<int> r(7, 5);
    bool ok = true;
    for (std::size_t i = 0; i < r.size() && ok; ++i) {
      const int x = r.x_of(i), y = r.y_of(i);
      if (x + 1 < r.width()) ok = ok && r.y_of(i + 1) == y;
      if (y + 1 < r.height()) ok = ok && r.x_of(i + r.width()) == x;
    }
    t.check("raster: i+1 shares the row, i+W shares the column", ok);
  }

  // robustifier and residuals
  {
    bool ok = huber_weight(0.0, 0.3) == 1.0 && huber_weight(0.3, 0.3) == 1.0 &&
              std::abs(huber_weight(0.9, 0.3) - 1.0 / 3.0) < 1e-15;
    ok = ok && std::abs(residual_semi(std::log(4.0), 2.0, 2.0)) < 1e-15;
    ok = ok && std::abs(residual_grad(std::log(2.0), 0.0, 0.0) - std::log(2.0)) < 1e-15;
    const double r1 = residual_net(0.7, 0.2);
    ok = ok && std::abs(residual_net(0.7 + 5.0, 0.2 + 5.0) - r1) < 1e-14;
    t.check("fusion: huber weights and residual identities", ok);
  }

  // pairwise translation invariance
  {
    auto p = testing::make_random_problem(11, 6, 4);
    Raster<double> shifted = p.state.log_depth;
    for (std::size_t i = 0; i < shifted.size(); ++i) shifted[i] += 3.25;
    bool ok = true;
    for (int y = 0; y < 4 && ok; ++y)
      for (int x = 0; x + 1 < 6 && ok; ++x) {
        const double g = p.pred.grad_x[y * 6 + x];
        const double r0 = residual_grad_at(p.state.log_depth, x, y, GradAxis::X, g);
        ok = std::abs(residual_grad_at(shifted, x, y, GradAxis::X, g) - r0) < 1e-14;
      }
    t.check("fusion: pairwise residuals invariant to constant shifts", ok);
  }

  // gradient check against finite differences
  {
    bool ok = true;
    for (int inst = 0; inst < 3 && ok; ++inst) {
      auto p = testing::make_random_problem(100 + inst, 6, 4, {.outlier_fraction = 0.1});
      RobustConfig cfg;
      const auto analytic = cost_gradient(p.state, p.semi, p.pred, cfg, FusionMode::Full);
      const auto fd = testing::fd_cost_gradient(p.state, p.semi, p.pred, cfg, FusionMode::Full);
      for (std::size_t i = 0; i < analytic.wrt_log_depth.size(); ++i) {
        if (testing::near_huber_kink(p.state, p.semi, p.pred, cfg, FusionMode::Full, i)) continue;
        const double err = std::abs(analytic.wrt_log_depth[i] - fd.wrt_log_depth[i]) /
                           std::max(std::abs(fd.wrt_log_depth[i]), 1e-2);
        ok = ok && err < 1e-4;
      }
    }
    t.check("fusion: analytic cost gradient matches finite differences", ok);
  }

  // dense weighted-least-squares equivalence
  {
    auto p = testing::make_random_problem(7, 3, 3);
    RobustConfig cfg;
    cfg.delta_semi = cfg.delta_net = cfg.delta_grad = 1e9;
    cfg.estimate_scale = false;
    cfg.cg_tol = 1e-12;
    cfg.cg_max_iters = 500;
    const FusionState solved = optimize(p.state, p.semi, p.pred, cfg, FusionMode::Full);
    const Eigen::VectorXd ref =
        testing::dense_wls_solution(p.semi, p.pred, p.state.scale, FusionMode::Full);
    double max_err = 0.0;
    for (int i = 0; i < ref.size(); ++i)
      max_err = std::max(max_err, std::abs(solved.log_depth[i] - ref[i]));
    t.check("fusion: quadratic fixed point equals dense WLS solution", max_err < 1e-8);
  }

  // assembled system: Gershgorin positivity (row sums of off-diagonal
  // magnitudes stay below the diagonal)
  {
    const int w = 8, h = 6;
    auto p = testing::make_random_problem(21, w, h);
    const auto eq = assemble_normal_equations(p.state, p.semi, p.pred, {}, FusionMode::Full);
    bool ok = true;
    for (int y = 0; y < h && ok; ++y)
      for (int x = 0; x < w && ok; ++x) {
        const std::size_t i = p.state.log_depth.index(x, y);
        double off = 0.0;
        if (x + 1 < w) off += std::abs(eq.H.right[i]);
        if (x > 0) off += std::abs(eq.H.right[i - 1]);
        if (y + 1 < h) off += std::abs(eq.H.down[i]);
        if (y > 0) off += std::abs(eq.H.down[i - w]);
        ok = eq.H.diag[i] > off;
      }
    t.check("fusion: assembled normal equations diagonally dominant", ok);
  }

  // PCG matches dense solve
  {
    auto p = testing::make_random_problem(31, 8, 6);
    RobustConfig cfg;
    cfg.cg_tol = 1e-10;
    cfg.cg_max_iters = 500;
    const auto eq = assemble_normal_equations(p.state, p.semi, p.pred, cfg, FusionMode::Full);
    const auto delta = solve_depth_step(eq, cfg);
    const Eigen::MatrixXd H = testing::dense_stencil(eq.H);
    const Eigen::VectorXd b = Eigen::Map<const Eigen::VectorXd>(eq.b.data(), eq.b.size());
    const Eigen::VectorXd ref = H.ldlt().solve(b);
    double rel = 0.0;
    for (int i = 0; i < ref.size(); ++i) rel = std::max(rel, std::abs(delta[i] - ref[i]));
    t.check("fusion: PCG agrees with a dense direct solve", rel < 1e-6);
  }

  // scale equivariance
  {
    auto p = testing::make_random_problem(41, 6, 4);
    RobustConfig cfg;
    cfg.cg_tol = 1e-10;
    cfg.cg_max_iters = 500;
    const FusionState a = optimize(p.state, p.semi, p.pred, cfg, FusionMode::Full);
    SemiDenseMap scaled = p.semi;
    const double alpha = 0.5;
    for (std::size_t i = 0; i < scaled.depth.size(); ++i)
      if (scaled.valid[i]) {
        scaled.depth[i] *= alpha;
        scaled.variance[i] *= alpha * alpha;
      }
    FusionState start = p.state;
    start.scale = p.state.scale / alpha;  // transform the whole problem
    const FusionState b = optimize(start, scaled, p.pred, cfg, FusionMode::Full);
    double max_err = 0.0;
    for (std::size_t i = 0; i < a.log_depth.size(); ++i)
      max_err = std::max(max_err, std::abs(a.log_depth[i] - b.log_depth[i]));
    const bool ok = max_err < 1e-5 && std::abs(b.scale - a.scale / alpha) < 1e-5 * a.scale / alpha;
    t.check("fusion: semi-depth scaling moves only the scale factor", ok);
  }

  // monotone cost
  {
    auto p = testing::make_random_problem(51, 8, 6, {.outlier_fraction = 0.15});
    RobustConfig cfg;
    const double c0 = total_cost(p.state, p.semi, p.pred, cfg, FusionMode::Full);
    const FusionState solved = optimize(p.state, p.semi, p.pred, cfg, FusionMode::Full);
    const double c1 = total_cost(solved, p.semi, p.pred, cfg, FusionMode::Full);
    t.check("fusion: optimize never increases the robust cost", c1 <= c0);
  }

  // predictions: focal composition and serialisation
  {
    auto p = testing::make_random_problem(61, 5, 4);
    const PredictionSet base = p.pred;
    const PredictionSet ab = focal_adjust(focal_adjust(base, 300.0), 450.0);
    const PredictionSet direct = focal_adjust(base, 450.0);
    double max_err = 0.0;
    for (std::size_t i = 0; i < base.log_depth.size(); ++i)
      max_err = std::max(max_err, std::abs(ab.log_depth[i] - direct.log_depth[i]));
    bool ok = max_err < 1e-12;
    for (std::size_t i = 0; i < base.grad_x.size(); ++i)
      ok = ok && ab.grad_x[i] == base.grad_x[i];

    Raster<double> gt(16, 12, 0.0);
    for (std::size_t i = 0; i < gt.size(); ++i) gt[i] = uniform(0.5, 4.0);
    const PredictionSet oracle = synth_oracle(gt, 0.2, 0.05, 9, 210.0);
    const fs::path tmp = fs::temp_directory_path() / "dfuse_selftest.dfpred";
    save_predictions(oracle, tmp.string());
    const PredictionSet back = load_predictions(tmp.string());
    fs::remove(tmp);
    ok = ok && back.log_depth == oracle.log_depth && back.grad_y_var == oracle.grad_y_var &&
         back.source_focal == oracle.source_focal;
    const PredictionSet again = synth_oracle(gt, 0.2, 0.05, 9, 210.0);
    ok = ok && again.log_depth == oracle.log_depth;
    t.check("predictions: focal composition, DFPRED round trip, determinism", ok);
  }

  // predictions: logspace gradient identity under global rescaling
  {
    Raster<double> gt(10, 8, 0.0);
    for (std::size_t i = 0; i < gt.size(); ++i) gt[i] = uniform(0.5, 4.0);
    Raster<double> gt2 = gt;
    for (std::size_t i = 0; i < gt2.size(); ++i) gt2[i] *= 3.7;
    const PredictionSet a = synth_oracle(gt, 0.0, 0.0, 1, 210.0);
    const PredictionSet b = synth_oracle(gt2, 0.0, 0.0, 1, 210.0);
    double max_err = 0.0;
    for (std::size_t i = 0; i < a.grad_x.size(); ++i)
      max_err = std::max(max_err, std::abs(a.grad_x[i] - b.grad_x[i]));
    t.check("predictions: log-depth gradients are scale invariant", max_err < 1e-6);
  }

  // stereo pieces
  {
    std::array<double, 5> J{1, 1, 1, 1, 1};
    bool ok = std::abs(observation_variance(J) - 0.2) < 1e-15;
    J = {2, 0, 0, 0, 0};
    ok = ok && std::abs(observation_variance(J) - 0.25) < 1e-15;
    J = {0, 0, 0, 0, 0};
    ok = ok && observation_variance(J) < 0.0;
    SemiDenseMap map = SemiDenseMap::empty(4, 3);
    map = update_semidense(std::move(map), {{{1, 1}, 2.0, {}, {}, 0.04}});
    map = update_semidense(std::move(map), {{{1, 1}, 2.2, {}, {}, 0.04}});
    ok = ok && std::abs(map.depth.at(1, 1) - 2.1) < 1e-12 &&
         std::abs(map.variance.at(1, 1) - 0.02) < 1e-12;
    map = update_semidense(std::move(map), {{{1, 1}, 10.0, {}, {}, 0.04}});
    ok = ok && std::abs(map.depth.at(1, 1) - 2.1) < 1e-12;
    t.check("semidense: variance, fusion and outlier gate", ok);
  }

  // metric
  {
    DepthImage gt{Raster<double>(3, 1, 1.0), Mask(3, 1, 1)};
    Raster<double> est(3, 1, 1.0);
    est[1] = 1.05;
    est[2] = 1.2;
    bool ok = std::abs(pct_within_10(est, gt) - 200.0 / 3.0) < 1e-9;
    Raster<double> boundary(3, 1, 1.10);
    ok = ok && pct_within_10(boundary, gt) == 100.0;
    Raster<double> beyond(3, 1, 1.101);
    ok = ok && pct_within_10(beyond, gt) == 0.0;
    t.check("eval: within-10% metric and its boundary", ok);
  }

  // dataset round trips
  {
    std::vector<FrameRef> refs(3);
    for (int i = 0; i < 3; ++i) refs[i].pose.translation = Eigen::Vector3d(i + 1.0, 0, -i * 0.5);
    auto copy = refs;
    inject_pose_scale(copy, 0.5);
    inject_pose_scale(copy, 2.0);
    bool ok = true;
    for (int i = 0; i < 3; ++i)
      ok = ok && (copy[i].pose.translation - refs[i].pose.translation).norm() < 1e-12;

    Raster<double> metres(8, 6, 0.0);
    for (std::size_t i = 0; i < metres.size(); ++i) metres[i] = uniform(0.4, 8.0);
    const fs::path tmp = fs::temp_directory_path() / "dfuse_selftest_depth.png";
    save_depth_png(metres, nullptr, tmp.string());
    const DepthImage back = load_depth_png(tmp.string());
    fs::remove(tmp);
    for (std::size_t i = 0; i < metres.size(); ++i)
      ok = ok && std::abs(back.metres[i] - metres[i]) <= 0.5 / kTumDepthScale + 1e-12;
    t.check("datasets: pose-scale and depth-image round trips", ok);
  }

  return t.failures();
}

}  // namespace dfuse
