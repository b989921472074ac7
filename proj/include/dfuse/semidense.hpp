#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <utility>
#include <vector>

#include "dfuse/geometry.hpp"
#include "dfuse/image.hpp"
#include "dfuse/raster.hpp"

namespace dfuse {

/// Scale-ambiguous per-pixel depth estimates with variances (depth^2 units).
struct SemiDenseMap {
  Raster<double> depth;
  Raster<double> variance;
  Mask valid;
  int inlier_count = 0;

  static SemiDenseMap empty(int width, int height) {
    return {Raster<double>(width, height, 0.0), Raster<double>(width, height, 0.0),
            Mask(width, height, 0), 0};
  }
};

struct KeyframePolicy {
  double lambda_trans = 0.07;  // translation / median keyframe depth
  int lambda_inliers = 1500;
};

struct EpipolarObservation {
  PixelCoord pixel;
  double depth = 0.0;
  std::array<double, 5> error5{};
  std::array<double, 5> jacobian{};
  double variance = 0.0;
};

enum class EpipolarStatus {
  Ok,
  DegenerateBaseline,
  OutOfBounds,
  BehindCamera,
  NoMinimum,
  DegenerateJacobian,
};

struct EpipolarResult {
  EpipolarStatus status = EpipolarStatus::Ok;
  EpipolarObservation obs;
  bool ok() const { return status == EpipolarStatus::Ok; }
};

struct DepthPrior {
  double depth = 0.0;
  double sigma = 0.0;
};

struct SearchConfig {
  double min_depth = 0.25;  // priorless search range, metres (scene units)
  double max_depth = 50.0;
  // acceptance gate on the matched residual: mismatched texture produces
  // confident-looking but wrong depths, so minima worse than this RMS
  // intensity error per stencil point are discarded
  double max_rms_error = 0.05;
};

/// True where the central-difference gradient magnitude exceeds the
/// threshold; the 1-pixel border is always false.
inline Mask texture_mask(const IntensityImage& img, double threshold) {
  if (threshold <= 0.0) throw Error(Err::InvalidArgument, "texture threshold must be > 0");
  const int w = img.width(), h = img.height();
  Mask mask(w, h, 0);
  const Raster<float>& v = img.raster();
  const double t2 = threshold * threshold;
  for (int y = 1; y < h - 1; ++y) {
    for (int x = 1; x < w - 1; ++x) {
      const double gx = 0.5 * (v.at(x + 1, y) - v.at(x - 1, y));
      const double gy = 0.5 * (v.at(x, y + 1) - v.at(x, y - 1));
      if (gx * gx + gy * gy > t2) mask.at(x, y) = 1;
    }
  }
  return mask;
}

/// Relative two-view quantities reused across every pixel of a frame pair.
struct EpipolarGeometry {
  Eigen::Matrix3d R_10;      // rotation, keyframe camera -> reference camera
  Eigen::Vector3d t_10;      // translation of the same transform
  Eigen::Vector3d t_01;      // reference camera centre in keyframe coordinates
  CameraIntrinsics K;
};

inline EpipolarGeometry make_epipolar_geometry(const Pose& T0, const Pose& T1,
                                               const CameraIntrinsics& K) {
  const Pose T10 = compose(T1.inverse(), T0);
  const Pose T01 = compose(T0.inverse(), T1);
  return {T10.rotation.toRotationMatrix(), T10.translation, T01.translation, K};
}

namespace detail {

/// Epipolar line direction in the keyframe at pixel x: the direction towards
/// the epipole (projection of the other camera centre), expressed so it stays
/// finite when the epipole is at infinity.
inline Eigen::Vector2d epipolar_dir_in_keyframe(const EpipolarGeometry& g, const PixelCoord& x) {
  return {g.K.fx * g.t_01.x() + (g.K.cx - x.x) * g.t_01.z(),
          g.K.fy * g.t_01.y() + (g.K.cy - x.y) * g.t_01.z()};
}

/// Per-pixel stencil state: five keyframe sample points 1 px apart along the
/// epipolar direction, their intensities, and their rotated view rays.
struct Stencil5 {
  std::array<Eigen::Vector3d, 5> rays;  // R_10 * K^-1 * (x_j, 1)
  std::array<double, 5> ref_intensity;
  Eigen::Vector3d center_ray;           // rotated ray of the centre pixel
};

inline bool make_stencil(const EpipolarGeometry& g, const IntensityImage& I0, const PixelCoord& x,
                         const Eigen::Vector2d& dir0_unit, Stencil5& out) {
  for (int j = 0; j < 5; ++j) {
    const double off = static_cast<double>(j - 2);
    const double px = x.x + off * dir0_unit.x();
    const double py = x.y + off * dir0_unit.y();
    if (!I0.can_sample(px, py)) return false;
    out.ref_intensity[j] = I0.sample_unchecked(px, py);
    const Eigen::Vector3d ray((px - g.K.cx) / g.K.fx, (py - g.K.cy) / g.K.fy, 1.0);
    out.rays[j] = g.R_10 * ray;
  }
  out.center_ray = out.rays[2];
  return true;
}

enum class StepStatus { Ok, Behind, OutOfBounds };

/// Photometric residuals of the 5-point stencil at depth hypothesis d.
inline StepStatus stencil_error(const EpipolarGeometry& g, const IntensityImage& I1,
                                const Stencil5& s, double d, std::array<double, 5>& e) {
  for (int j = 0; j < 5; ++j) {
    const Eigen::Vector3d p = d * s.rays[j] + g.t_10;
    if (p.z() <= 0.0) return StepStatus::Behind;
    const double u = g.K.fx * p.x() / p.z() + g.K.cx;
    const double v = g.K.fy * p.y() / p.z() + g.K.cy;
    if (!I1.can_sample(u, v)) return StepStatus::OutOfBounds;
    e[j] = I1.sample_unchecked(u, v) - s.ref_intensity[j];
  }
  return StepStatus::Ok;
}

/// Projection of the centre ray at depth d into the reference image.
inline bool project_center(const EpipolarGeometry& g, const Eigen::Vector3d& center_ray, double d,
                           PixelCoord& out) {
  const Eigen::Vector3d p = d * center_ray + g.t_10;
  if (p.z() <= 0.0) return false;
  out = {g.K.fx * p.x() / p.z() + g.K.cx, g.K.fy * p.y() / p.z() + g.K.cy};
  return true;
}

/// Invert the centre-ray projection: depth hypothesis for a point on the
/// epipolar line. Uses the image axis along which the line moves fastest.
inline bool depth_from_position(const EpipolarGeometry& g, const Eigen::Vector3d& a,
                                const PixelCoord& u, const Eigen::Vector2d& line_dir, double& d) {
  double num, den;
  if (std::abs(line_dir.x()) >= std::abs(line_dir.y())) {
    const double alpha = u.x - g.K.cx;
    num = g.K.fx * g.t_10.x() - alpha * g.t_10.z();
    den = alpha * a.z() - g.K.fx * a.x();
  } else {
    const double beta = u.y - g.K.cy;
    num = g.K.fy * g.t_10.y() - beta * g.t_10.z();
    den = beta * a.z() - g.K.fy * a.y();
  }
  if (std::abs(den) < 1e-15) return false;
  d = num / den;
  return std::isfinite(d) && d > 0.0;
}

/// Liang-Barsky clip of the segment p0 + t*(p1-p0), t in [0,1], to a
/// rectangle. Returns the clipped parameter interval.
inline bool clip_segment(const PixelCoord& p0, const PixelCoord& p1, double xmin, double xmax,
                         double ymin, double ymax, double& t0, double& t1) {
  t0 = 0.0;
  t1 = 1.0;
  const double dx = p1.x - p0.x, dy = p1.y - p0.y;
  const double p[4] = {-dx, dx, -dy, dy};
  const double q[4] = {p0.x - xmin, xmax - p0.x, p0.y - ymin, ymax - p0.y};
  for (int i = 0; i < 4; ++i) {
    if (p[i] == 0.0) {
      if (q[i] < 0.0) return false;
    } else {
      const double r = q[i] / p[i];
      if (p[i] < 0.0) {
        if (r > t1) return false;
        if (r > t0) t0 = r;
      } else {
        if (r < t0) return false;
        if (r < t1) t1 = r;
      }
    }
  }
  return true;
}

}  // namespace detail

/// Reference-image endpoints of the epipolar segment spanned by the two
/// depth hypotheses (no clipping). Empty if either projects behind camera.
inline std::optional<std::pair<PixelCoord, PixelCoord>> epipolar_segment(
    const EpipolarGeometry& g, const PixelCoord& x, double d_lo, double d_hi) {
  const Eigen::Vector3d ray((x.x - g.K.cx) / g.K.fx, (x.y - g.K.cy) / g.K.fy, 1.0);
  const Eigen::Vector3d a = g.R_10 * ray;
  PixelCoord u_lo, u_hi;
  if (!detail::project_center(g, a, d_lo, u_lo)) return std::nullopt;
  if (!detail::project_center(g, a, d_hi, u_hi)) return std::nullopt;
  return std::make_pair(u_lo, u_hi);
}

/// Photometric residuals (Eq. 2 form) of the five stencil points, all
/// back-projected at the same depth hypothesis d.
inline EpipolarStatus photometric_error_5pt(const EpipolarGeometry& g, const IntensityImage& I0,
                                            const IntensityImage& I1, const PixelCoord& x,
                                            double d, std::array<double, 5>& e) {
  Eigen::Vector2d dir0 = detail::epipolar_dir_in_keyframe(g, x);
  const double n = dir0.norm();
  // Zero baseline leaves the direction undefined; any stencil works then
  // because every point reprojects onto itself.
  dir0 = (n < 1e-12) ? Eigen::Vector2d(1.0, 0.0) : Eigen::Vector2d(dir0 / n);
  detail::Stencil5 s;
  if (!detail::make_stencil(g, I0, x, dir0, s)) return EpipolarStatus::OutOfBounds;
  switch (detail::stencil_error(g, I1, s, d, e)) {
    case detail::StepStatus::Behind: return EpipolarStatus::BehindCamera;
    case detail::StepStatus::OutOfBounds: return EpipolarStatus::OutOfBounds;
    case detail::StepStatus::Ok: break;
  }
  return EpipolarStatus::Ok;
}

inline EpipolarStatus photometric_error_5pt(const IntensityImage& I0, const IntensityImage& I1,
                                            const PixelCoord& x, double d, const Pose& T0,
                                            const Pose& T1, const CameraIntrinsics& K,
                                            std::array<double, 5>& e) {
  return photometric_error_5pt(make_epipolar_geometry(T0, T1, K), I0, I1, x, d, e);
}

/// Finite-difference Jacobian of the 5-point error between two depth steps.
inline std::array<double, 5> jacobian_fd(const std::array<double, 5>& e_lo,
                                         const std::array<double, 5>& e_hi, double d_lo,
                                         double d_hi) {
  if (d_hi == d_lo) throw Error(Err::ZeroBaselineStep, "identical depths");
  std::array<double, 5> J;
  const double inv = 1.0 / (d_hi - d_lo);
  for (int j = 0; j < 5; ++j) J[j] = (e_hi[j] - e_lo[j]) * inv;
  return J;
}

inline constexpr double kMinJacobianNormSq = 1e-12;

/// Measurement variance 1/(J^T J), depth^2 units. Negative return means the
/// Jacobian is degenerate (textureless or ambiguous match).
inline double observation_variance(const std::array<double, 5>& J) {
  double jtj = 0.0;
  for (double v : J) jtj += v * v;
  if (jtj < kMinJacobianNormSq) return -1.0;
  return 1.0 / jtj;
}

/// Epipolar line search for the depth minimising the 5-point SSD, with
/// parabolic sub-pixel refinement. With a prior the search covers depths
/// d +- 2 sigma, otherwise the configured depth range.
inline EpipolarResult search_depth(const EpipolarGeometry& g, const IntensityImage& I0,
                                   const IntensityImage& I1, const PixelCoord& x,
                                   std::optional<DepthPrior> prior,
                                   const SearchConfig& cfg = {}) {
  EpipolarResult res;
  auto fail = [&res](EpipolarStatus st) {
    res.status = st;
    return res;
  };

  if (g.t_10.norm() < 1e-12) return fail(EpipolarStatus::DegenerateBaseline);

  Eigen::Vector2d dir0 = detail::epipolar_dir_in_keyframe(g, x);
  const double dir0_norm = dir0.norm();
  if (dir0_norm < 1e-9) return fail(EpipolarStatus::DegenerateBaseline);
  dir0 /= dir0_norm;

  detail::Stencil5 s;
  if (!detail::make_stencil(g, I0, x, dir0, s)) return fail(EpipolarStatus::OutOfBounds);

  double d_lo, d_hi;
  if (prior) {
    d_lo = std::max(prior->depth - 2.0 * prior->sigma, 1e-4);
    d_hi = prior->depth + 2.0 * prior->sigma;
  } else {
    d_lo = cfg.min_depth;
    d_hi = cfg.max_depth;
  }
  if (!(d_hi > d_lo)) return fail(EpipolarStatus::NoMinimum);

  PixelCoord u_lo, u_hi;
  if (!detail::project_center(g, s.center_ray, d_lo, u_lo) ||
      !detail::project_center(g, s.center_ray, d_hi, u_hi))
    return fail(EpipolarStatus::BehindCamera);

  const double seg_len = std::hypot(u_hi.x - u_lo.x, u_hi.y - u_lo.y);
  if (seg_len < 2.0) return fail(EpipolarStatus::DegenerateBaseline);

  double t0, t1;
  if (!detail::clip_segment(u_lo, u_hi, 1.0, g.K.width - 2.0, 1.0, g.K.height - 2.0, t0, t1))
    return fail(EpipolarStatus::OutOfBounds);
  const double s_begin = t0 * seg_len;
  const double s_end = t1 * seg_len;
  if (s_end - s_begin < 2.0) return fail(EpipolarStatus::OutOfBounds);

  const Eigen::Vector2d e1((u_hi.x - u_lo.x) / seg_len, (u_hi.y - u_lo.y) / seg_len);
  const int n_steps = static_cast<int>(std::floor(s_end - s_begin)) + 1;

  std::vector<double> ssd(n_steps), depths(n_steps);
  std::vector<std::uint8_t> step_ok(n_steps, 0);
  std::array<double, 5> e;
  for (int k = 0; k < n_steps; ++k) {
    const double sk = s_begin + k;
    const PixelCoord uk{u_lo.x + sk * e1.x(), u_lo.y + sk * e1.y()};
    double dk;
    if (!detail::depth_from_position(g, s.center_ray, uk, e1, dk)) continue;
    if (detail::stencil_error(g, I1, s, dk, e) != detail::StepStatus::Ok) continue;
    double sum = 0.0;
    for (double v : e) sum += v * v;
    ssd[k] = sum;
    depths[k] = dk;
    step_ok[k] = 1;
  }

  // Global SSD minimum; a minimum on the segment boundary cannot be
  // refined (and usually means the true match lies outside), so the pixel
  // is skipped rather than matched to a secondary dip.
  int best = -1;
  double best_ssd = std::numeric_limits<double>::infinity();
  for (int k = 0; k < n_steps; ++k) {
    if (step_ok[k] && ssd[k] < best_ssd) {
      best = k;
      best_ssd = ssd[k];
    }
  }
  if (best <= 0 || best + 1 >= n_steps || !step_ok[best - 1] || !step_ok[best + 1])
    return fail(EpipolarStatus::NoMinimum);
  if (std::sqrt(best_ssd / 5.0) > cfg.max_rms_error) return fail(EpipolarStatus::NoMinimum);

  const double denom = ssd[best - 1] - 2.0 * ssd[best] + ssd[best + 1];
  if (denom <= 0.0) return fail(EpipolarStatus::NoMinimum);
  const double offset = 0.5 * (ssd[best - 1] - ssd[best + 1]) / denom;

  const double s_star = s_begin + best + offset;
  const PixelCoord u_star{u_lo.x + s_star * e1.x(), u_lo.y + s_star * e1.y()};
  double d_star;
  if (!detail::depth_from_position(g, s.center_ray, u_star, e1, d_star))
    return fail(EpipolarStatus::NoMinimum);

  // Jacobian from the two steps spanning the minimum (Eq. 3 endpoints).
  std::array<double, 5> e_lo5, e_hi5;
  if (detail::stencil_error(g, I1, s, depths[best - 1], e_lo5) != detail::StepStatus::Ok ||
      detail::stencil_error(g, I1, s, depths[best + 1], e_hi5) != detail::StepStatus::Ok)
    return fail(EpipolarStatus::OutOfBounds);
  if (depths[best + 1] == depths[best - 1]) return fail(EpipolarStatus::DegenerateJacobian);
  const std::array<double, 5> J = jacobian_fd(e_lo5, e_hi5, depths[best - 1], depths[best + 1]);
  const double var = observation_variance(J);
  if (var <= 0.0) return fail(EpipolarStatus::DegenerateJacobian);

  detail::stencil_error(g, I1, s, depths[best], e);
  res.obs = {x, d_star, e, J, var};
  return res;
}

inline EpipolarResult search_depth(const IntensityImage& I0, const IntensityImage& I1,
                                   const PixelCoord& x, std::optional<DepthPrior> prior,
                                   const Pose& T0, const Pose& T1, const CameraIntrinsics& K,
                                   const SearchConfig& cfg = {}) {
  return search_depth(make_epipolar_geometry(T0, T1, K), I0, I1, x, prior, cfg);
}

inline constexpr double kOutlierGateSigmas = 5.0;

/// Inverse-variance fusion of new observations into the map. Pixels observed
/// for the first time are installed; observations further than 5 sigma from a
/// valid prior are dropped as outliers.
inline SemiDenseMap update_semidense(SemiDenseMap map,
                                     const std::vector<EpipolarObservation>& observations) {
  for (const auto& obs : observations) {
    const int px = static_cast<int>(std::lround(obs.pixel.x));
    const int py = static_cast<int>(std::lround(obs.pixel.y));
    if (!map.depth.in_bounds(px, py))
      throw Error(Err::OutOfBounds, "observation outside the keyframe raster");
    const std::size_t i = map.depth.index(px, py);
    if (!map.valid[i]) {
      map.depth[i] = obs.depth;
      map.variance[i] = obs.variance;
      map.valid[i] = 1;
      continue;
    }
    const double sigma_prior = std::sqrt(map.variance[i]);
    if (std::abs(obs.depth - map.depth[i]) > kOutlierGateSigmas * sigma_prior) continue;
    const double info = 1.0 / map.variance[i] + 1.0 / obs.variance;
    map.depth[i] = (map.depth[i] / map.variance[i] + obs.depth / obs.variance) / info;
    map.variance[i] = 1.0 / info;
  }
  int count = 0;
  for (std::size_t i = 0; i < map.valid.size(); ++i) count += map.valid[i] ? 1 : 0;
  map.inlier_count = count;
  return map;
}

inline bool should_create_keyframe(const Pose& T_kf, const Pose& T_cur, double median_depth,
                                   const SemiDenseMap& map, const KeyframePolicy& policy) {
  if (median_depth <= 0.0) throw Error(Err::NonPositiveDepth, "median depth");
  const double trans = compose(T_kf.inverse(), T_cur).translation.norm();
  return trans / median_depth > policy.lambda_trans || map.inlier_count < policy.lambda_inliers;
}

}  // namespace dfuse
