#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "dfuse/raster.hpp"

namespace dfuse {

/// Per-pixel log-depth / log-depth-gradient predictions with variances.
/// Values are kept at float32 precision (the DFPRED file precision) even
/// though the rasters hold doubles, so serialisation round-trips exactly.
struct PredictionSet {
  Raster<double> log_depth;
  Raster<double> log_depth_var;
  Raster<double> grad_x;
  Raster<double> grad_x_var;
  Raster<double> grad_y;
  Raster<double> grad_y_var;
  double source_focal = 0.0;  // focal length (px) the log-depths are normalised to

  int width() const { return log_depth.width(); }
  int height() const { return log_depth.height(); }
};

namespace dfpred {

inline constexpr char kMagic[4] = {'D', 'F', 'P', 'R'};
inline constexpr std::uint32_t kVersion = 1;
inline constexpr std::uint32_t kChannelCount = 6;
inline constexpr std::size_t kHeaderBytes = 24;

inline const char* channel_name(int c) {
  static const char* names[6] = {"log_depth",  "log_depth_var", "grad_x",
                                 "grad_x_var", "grad_y",        "grad_y_var"};
  return names[c];
}

}  // namespace dfpred

namespace detail {

inline std::uint32_t read_u32_le(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
         static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}

inline void write_u32_le(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline Raster<double>* channel_of(PredictionSet& p, int c) {
  Raster<double>* chans[6] = {&p.log_depth, &p.log_depth_var, &p.grad_x,
                              &p.grad_x_var, &p.grad_y,       &p.grad_y_var};
  return chans[c];
}

}  // namespace detail

inline PredictionSet load_predictions(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Err::MissingFile, path);

  unsigned char header[dfpred::kHeaderBytes];
  in.read(reinterpret_cast<char*>(header), dfpred::kHeaderBytes);
  if (in.gcount() != static_cast<std::streamsize>(dfpred::kHeaderBytes))
    throw Error(Err::TruncatedFile, path + ": header, read " + std::to_string(in.gcount()) +
                                        " of " + std::to_string(dfpred::kHeaderBytes) + " bytes");
  if (std::memcmp(header, dfpred::kMagic, 4) != 0)
    throw Error(Err::BadMagic, path + ": bad magic at byte 0");
  const std::uint32_t version = detail::read_u32_le(header + 4);
  if (version != dfpred::kVersion)
    throw Error(Err::BadMagic, path + ": unsupported version " + std::to_string(version) +
                                   " at byte 4");
  const std::uint32_t width = detail::read_u32_le(header + 8);
  const std::uint32_t height = detail::read_u32_le(header + 12);
  const std::uint32_t channels = detail::read_u32_le(header + 16);
  const std::uint32_t focal_milli = detail::read_u32_le(header + 20);
  if (width == 0 || height == 0 || width > 65536 || height > 65536)
    throw Error(Err::DimensionMismatch,
                path + ": " + std::to_string(width) + "x" + std::to_string(height) + " at byte 8");
  if (channels != dfpred::kChannelCount)
    throw Error(Err::DimensionMismatch,
                path + ": channel_count " + std::to_string(channels) + " at byte 16");
  if (focal_milli == 0) throw Error(Err::NonPositiveFocal, path + ": source_focal at byte 20");

  PredictionSet p;
  const int w = static_cast<int>(width), h = static_cast<int>(height);
  const std::size_t n = static_cast<std::size_t>(w) * h;
  std::vector<float> buf(n);
  for (int c = 0; c < 6; ++c) {
    Raster<double>* chan = detail::channel_of(p, c);
    *chan = Raster<double>(w, h, 0.0);
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n * 4));
    if (in.gcount() != static_cast<std::streamsize>(n * 4))
      throw Error(Err::TruncatedFile,
                  path + ": channel " + dfpred::channel_name(c) + ", at byte " +
                      std::to_string(dfpred::kHeaderBytes + static_cast<std::size_t>(c) * n * 4 +
                                     static_cast<std::size_t>(in.gcount())));
    const bool is_variance = (c == 1 || c == 3 || c == 5);
    for (std::size_t i = 0; i < n; ++i) {
      const double v = static_cast<double>(buf[i]);
      if (is_variance && !(v > 0.0 && std::isfinite(v)))
        throw Error(Err::NonPositiveVariance,
                    path + ": " + std::string(dfpred::channel_name(c)) + "[" + std::to_string(i) +
                        "] at byte " +
                        std::to_string(dfpred::kHeaderBytes + static_cast<std::size_t>(c) * n * 4 +
                                       i * 4));
      (*chan)[i] = v;
    }
  }
  p.source_focal = static_cast<double>(focal_milli) / 1000.0;
  return p;
}

inline void save_predictions(const PredictionSet& p, const std::string& path) {
  if (p.source_focal <= 0.0) throw Error(Err::NonPositiveFocal, "source_focal");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(Err::IoError, "cannot open " + path + " for writing");
  out.write(dfpred::kMagic, 4);
  detail::write_u32_le(out, dfpred::kVersion);
  detail::write_u32_le(out, static_cast<std::uint32_t>(p.width()));
  detail::write_u32_le(out, static_cast<std::uint32_t>(p.height()));
  detail::write_u32_le(out, dfpred::kChannelCount);
  detail::write_u32_le(out, static_cast<std::uint32_t>(std::lround(p.source_focal * 1000.0)));
  const std::size_t n = static_cast<std::size_t>(p.width()) * p.height();
  std::vector<float> buf(n);
  const Raster<double>* chans[6] = {&p.log_depth, &p.log_depth_var, &p.grad_x,
                                    &p.grad_x_var, &p.grad_y,       &p.grad_y_var};
  for (const Raster<double>* chan : chans) {
    for (std::size_t i = 0; i < n; ++i) buf[i] = static_cast<float>((*chan)[i]);
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(n * 4));
  }
  if (!out) throw Error(Err::IoError, "short write to " + path);
}

/// Shift log-depths to a new focal length; gradients (depth ratios) and all
/// uncertainties are focal-invariant.
inline PredictionSet focal_adjust(const PredictionSet& p, double test_focal) {
  if (test_focal <= 0.0 || p.source_focal <= 0.0)
    throw Error(Err::NonPositiveFocal, "focal_adjust requires positive focal lengths");
  PredictionSet out = p;
  if (test_focal == p.source_focal) return out;
  const double shift = std::log(test_focal / p.source_focal);
  for (std::size_t i = 0; i < out.log_depth.size(); ++i) out.log_depth[i] += shift;
  out.source_focal = test_focal;
  return out;
}

/// Fill non-positive entries with the nearest valid value in scanline order
/// (previous valid pixel; a forward pass resolves leading holes).
inline Raster<double> fill_holes_scanline(const Raster<double>& gt) {
  Raster<double> out = gt;
  const std::size_t n = out.size();
  double last_valid = -1.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (out[i] > 0.0)
      last_valid = out[i];
    else if (last_valid > 0.0)
      out[i] = last_valid;
  }
  // Leading holes take the first valid value behind them.
  last_valid = -1.0;
  for (std::size_t i = n; i-- > 0;) {
    if (gt[i] > 0.0)
      last_valid = out[i];
    else if (out[i] <= 0.0 && last_valid > 0.0)
      out[i] = last_valid;
  }
  for (std::size_t i = 0; i < n; ++i)
    if (out[i] <= 0.0)
      throw Error(Err::NonPositiveGroundTruth, "no valid depth anywhere in the raster");
  return out;
}

inline constexpr double kVarianceFloor = 1e-12;

/// Synthetic prediction provider: ground truth plus Gaussian noise in
/// logspace, with the sampling variances declared (scaled by kappa when
/// emulating a miscalibrated predictor). Deterministic for a fixed seed.
inline PredictionSet synth_oracle(const Raster<double>& gt_depth, double sigma_d, double sigma_g,
                                  std::uint64_t seed, double source_focal, double kappa = 1.0) {
  if (sigma_d < 0.0 || sigma_g < 0.0)
    throw Error(Err::InvalidArgument, "noise scales must be non-negative");
  if (kappa <= 0.0) throw Error(Err::InvalidArgument, "kappa must be positive");
  const Raster<double> gt = fill_holes_scanline(gt_depth);
  const int w = gt.width(), h = gt.height();

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> unit(0.0, 1.0);
  auto noise = [&](double sigma) { return sigma > 0.0 ? sigma * unit(rng) : 0.0; };
  // Quantise through float so the values survive DFPRED serialisation
  // bit-exactly.
  auto q = [](double v) { return static_cast<double>(static_cast<float>(v)); };

  PredictionSet p;
  p.log_depth = Raster<double>(w, h, 0.0);
  p.log_depth_var = Raster<double>(w, h, q(std::max(kappa * sigma_d * sigma_d, kVarianceFloor)));
  p.grad_x = Raster<double>(w, h, 0.0);
  p.grad_x_var = Raster<double>(w, h, q(std::max(kappa * sigma_g * sigma_g, kVarianceFloor)));
  p.grad_y = Raster<double>(w, h, 0.0);
  p.grad_y_var = Raster<double>(w, h, q(std::max(kappa * sigma_g * sigma_g, kVarianceFloor)));
  p.source_focal = source_focal;

  for (std::size_t i = 0; i < gt.size(); ++i) p.log_depth[i] = q(std::log(gt[i]) + noise(sigma_d));
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (x + 1 < w)
        p.grad_x.at(x, y) = q(std::log(gt.at(x + 1, y)) - std::log(gt.at(x, y)) + noise(sigma_g));
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (y + 1 < h)
        p.grad_y.at(x, y) = q(std::log(gt.at(x, y + 1)) - std::log(gt.at(x, y)) + noise(sigma_g));
  return p;
}

struct GradientConsistency {
  double fraction_x = 0.0;  // pixels where grad_x strays from the log-depth forward difference
  double fraction_y = 0.0;
};

inline GradientConsistency gradient_consistency_check(const PredictionSet& p, double tol) {
  const int w = p.width(), h = p.height();
  std::size_t bad_x = 0, bad_y = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x + 1 < w; ++x)
      if (std::abs(p.grad_x.at(x, y) - (p.log_depth.at(x + 1, y) - p.log_depth.at(x, y))) > tol)
        ++bad_x;
  for (int y = 0; y + 1 < h; ++y)
    for (int x = 0; x < w; ++x)
      if (std::abs(p.grad_y.at(x, y) - (p.log_depth.at(x, y + 1) - p.log_depth.at(x, y))) > tol)
        ++bad_y;
  GradientConsistency r;
  const std::size_t nx = static_cast<std::size_t>(h) * (w - 1);
  const std::size_t ny = static_cast<std::size_t>(w) * (h - 1);
  r.fraction_x = nx ? static_cast<double>(bad_x) / nx : 0.0;
  r.fraction_y = ny ? static_cast<double>(bad_y) / ny : 0.0;
  return r;
}

}  // namespace dfuse
