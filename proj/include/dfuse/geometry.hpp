#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <cmath>
#include <optional>

#include "dfuse/errors.hpp"

namespace dfuse {

/// Continuous pixel coordinates; integer coordinates are pixel centres.
struct PixelCoord {
  double x = 0.0;
  double y = 0.0;
};

struct CameraIntrinsics {
  double fx = 0.0, fy = 0.0;
  double cx = 0.0, cy = 0.0;
  int width = 0, height = 0;

  void validate() const {
    if (fx <= 0.0 || fy <= 0.0)
      throw Error(Err::InvalidArgument, "focal lengths must be positive");
    if (width <= 0 || height <= 0)
      throw Error(Err::InvalidArgument, "image dimensions must be positive");
    if (cx < 0.0 || cx >= width || cy < 0.0 || cy >= height)
      throw Error(Err::InvalidArgument, "principal point outside the raster");
  }

  CameraIntrinsics rescaled(int new_width, int new_height) const {
    const double sx = static_cast<double>(new_width) / width;
    const double sy = static_cast<double>(new_height) / height;
    return {fx * sx, fy * sy, cx * sx, cy * sy, new_width, new_height};
  }

  bool in_bounds(const PixelCoord& p) const {
    return p.x >= 0.0 && p.x <= width - 1.0 && p.y >= 0.0 && p.y <= height - 1.0;
  }
};

/// Rigid body transform, world-from-camera by convention (T_WC).
struct Pose {
  Eigen::Quaterniond rotation = Eigen::Quaterniond::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  static Pose identity() { return {}; }

  Pose normalized() const { return {rotation.normalized(), translation}; }

  Pose inverse() const {
    const Eigen::Quaterniond qi = rotation.conjugate();
    return {qi, -(qi * translation)};
  }

  Eigen::Matrix<double, 3, 4> matrix() const {
    Eigen::Matrix<double, 3, 4> m;
    m.leftCols<3>() = rotation.toRotationMatrix();
    m.col(3) = translation;
    return m;
  }
};

inline Pose compose(const Pose& a, const Pose& b) {
  return {(a.rotation * b.rotation).normalized(), a.rotation * b.translation + a.translation};
}

/// Back-projection: homogeneous 3D point for pixel x at z-depth d.
inline Eigen::Vector4d backproject(const PixelCoord& x, double d, const CameraIntrinsics& K) {
  if (d <= 0.0) throw Error(Err::NonPositiveDepth, "depth " + std::to_string(d));
  return {d * (x.x - K.cx) / K.fx, d * (x.y - K.cy) / K.fy, d, 1.0};
}

/// Projection and dehomogenisation; empty when the point is not in front of
/// the camera (the pixel is skipped).
inline std::optional<PixelCoord> project(const CameraIntrinsics& K, const Eigen::Vector4d& P) {
  if (P.z() <= 0.0) return std::nullopt;
  return PixelCoord{K.fx * P.x() / P.z() + K.cx, K.fy * P.y() / P.z() + K.cy};
}

/// Rigid transform of a homogeneous point; the fourth coordinate is preserved.
inline Eigen::Vector4d transform(const Pose& T, const Eigen::Vector4d& P) {
  Eigen::Vector4d out;
  out.head<3>() = T.rotation * P.head<3>() + P.w() * T.translation;
  out.w() = P.w();
  return out;
}

}  // namespace dfuse
