#pragma once

#include <cmath>
#include <optional>

#include "dfuse/raster.hpp"

namespace dfuse {

/// Grayscale intensity image, values in [0,1], bilinear sampling at
/// continuous coordinates. Integer coordinates are pixel centres.
class IntensityImage {
 public:
  IntensityImage() = default;
  explicit IntensityImage(Raster<float> values) : values_(std::move(values)) {}
  IntensityImage(int width, int height, float fill = 0.f) : values_(width, height, fill) {}

  int width() const { return values_.width(); }
  int height() const { return values_.height(); }
  const Raster<float>& raster() const { return values_; }
  Raster<float>& raster() { return values_; }

  bool can_sample(double x, double y) const {
    return x >= 0.0 && x <= width() - 1.0 && y >= 0.0 && y <= height() - 1.0;
  }

  /// Bilinear sample; caller guarantees can_sample(x, y).
  double sample_unchecked(double x, double y) const {
    const int x0 = static_cast<int>(std::floor(x));
    const int y0 = static_cast<int>(std::floor(y));
    const double ax = x - x0;
    const double ay = y - y0;
    const int x1 = (ax > 0.0) ? x0 + 1 : x0;
    const int y1 = (ay > 0.0) ? y0 + 1 : y0;
    const double v00 = values_.at(x0, y0);
    const double v10 = values_.at(x1, y0);
    const double v01 = values_.at(x0, y1);
    const double v11 = values_.at(x1, y1);
    return (1.0 - ay) * ((1.0 - ax) * v00 + ax * v10) + ay * ((1.0 - ax) * v01 + ax * v11);
  }

  /// Bilinear sample; empty outside bounds (never clamped).
  std::optional<double> sample(double x, double y) const {
    if (!can_sample(x, y)) return std::nullopt;
    return sample_unchecked(x, y);
  }

 private:
  Raster<float> values_;
};

}  // namespace dfuse
