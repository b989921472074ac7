#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "dfuse/raster.hpp"

namespace dfuse {

/// Metric depth raster with a validity mask (sensor holes excluded).
struct DepthImage {
  Raster<double> metres;
  Mask valid;
};

inline constexpr double kTumDepthScale = 5000.0;  // stored units per metre

/// 16-bit depth image in the TUM convention: stored = metres * scale,
/// stored 0 = hole. Optionally resampled (nearest neighbour) to a target
/// size.
inline DepthImage load_depth_png(const std::string& path, double depth_scale = kTumDepthScale,
                                 int target_w = 0, int target_h = 0) {
  if (!std::filesystem::exists(path)) throw Error(Err::MissingFile, path);
  cv::Mat img = cv::imread(path, cv::IMREAD_UNCHANGED);
  if (img.empty()) throw Error(Err::BadImageFormat, path + ": unreadable image");
  if (img.type() != CV_16UC1)
    throw Error(Err::BadImageFormat, path + ": expected 16-bit single channel");
  if (target_w > 0 && target_h > 0 && (img.cols != target_w || img.rows != target_h))
    cv::resize(img, img, cv::Size(target_w, target_h), 0, 0, cv::INTER_NEAREST);

  DepthImage out{Raster<double>(img.cols, img.rows, 0.0), Mask(img.cols, img.rows, 0)};
  for (int y = 0; y < img.rows; ++y) {
    const std::uint16_t* row = img.ptr<std::uint16_t>(y);
    for (int x = 0; x < img.cols; ++x) {
      if (row[x] == 0) continue;  // hole
      out.metres.at(x, y) = static_cast<double>(row[x]) / depth_scale;
      out.valid.at(x, y) = 1;
    }
  }
  return out;
}

/// Inverse of load_depth_png; values saturate at 65535, invalid pixels are
/// stored as 0.
inline void save_depth_png(const Raster<double>& metres, const Mask* valid,
                           const std::string& path, double depth_scale = kTumDepthScale) {
  cv::Mat img(metres.height(), metres.width(), CV_16UC1);
  for (int y = 0; y < metres.height(); ++y) {
    std::uint16_t* row = img.ptr<std::uint16_t>(y);
    for (int x = 0; x < metres.width(); ++x) {
      if (valid && !valid->at(x, y)) {
        row[x] = 0;
        continue;
      }
      const double stored = std::round(metres.at(x, y) * depth_scale);
      row[x] = static_cast<std::uint16_t>(std::clamp(stored, 0.0, 65535.0));
    }
  }
  if (!cv::imwrite(path, img)) throw Error(Err::IoError, "cannot write " + path);
}

}  // namespace dfuse
