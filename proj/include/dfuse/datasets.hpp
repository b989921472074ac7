#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "dfuse/depth_io.hpp"
#include "dfuse/geometry.hpp"
#include "dfuse/image.hpp"

namespace dfuse {

inline constexpr double kDefaultAssocTolerance = 0.02;  // seconds

template <class T>
struct Stamped {
  double timestamp = 0.0;
  T value{};
};

/// Parsed TUM-format sequence listing: rgb.txt, depth.txt, groundtruth.txt.
struct SequenceIndex {
  std::vector<Stamped<std::string>> rgb;
  std::vector<Stamped<std::string>> depth;
  std::vector<Stamped<Pose>> poses;
};

/// One associated rgb/depth/pose triple, prior to pixel loading.
struct FrameRef {
  double timestamp = 0.0;  // rgb timestamp
  std::string rgb_path;
  std::string depth_path;
  double depth_timestamp = 0.0;
  double pose_timestamp = 0.0;
  Pose pose;
};

struct Frame {
  double timestamp = 0.0;
  IntensityImage intensity;
  Raster<std::array<std::uint8_t, 3>> color;
  DepthImage gt_depth;
  Pose pose;
};

namespace detail {

inline bool parse_double(std::string_view tok, double& out) {
  const char* begin = tok.data();
  const char* end = begin + tok.size();
  auto [ptr, ec] = std::from_chars(begin, end, out);
  return ec == std::errc() && ptr == end && std::isfinite(out);
}

inline std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> toks;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t')) ++i;
    std::size_t j = i;
    while (j < line.size() && line[j] != ' ' && line[j] != '\t') ++j;
    if (j > i) toks.push_back(line.substr(i, j - i));
    i = j;
  }
  return toks;
}

inline std::string strip_cr(std::string line) {
  while (!line.empty() && (line.back() == '\r' || line.back() == '\n')) line.pop_back();
  return line;
}

}  // namespace detail

/// "timestamp tx ty tz qx qy qz qw"; the quaternion is normalised after a
/// sanity check on its norm.
inline Stamped<Pose> parse_pose_line(const std::string& line) {
  const auto toks = detail::split_ws(line);
  if (toks.size() != 8) throw Error(Err::MalformedLine, "expected 8 tokens, got " +
                                                            std::to_string(toks.size()));
  double v[8];
  for (int i = 0; i < 8; ++i)
    if (!detail::parse_double(toks[i], v[i]))
      throw Error(Err::MalformedLine, "token " + std::to_string(i + 1) + " not numeric");
  Eigen::Quaterniond q(v[7], v[4], v[5], v[6]);  // (w, x, y, z)
  const double norm = q.norm();
  if (std::abs(norm - 1.0) > 1e-3)
    throw Error(Err::NonUnitQuaternion, "norm " + std::to_string(norm));
  Stamped<Pose> out;
  out.timestamp = v[0];
  out.value = Pose{q.normalized(), Eigen::Vector3d(v[1], v[2], v[3])};
  return out;
}

inline SequenceIndex parse_index(const std::string& sequence_dir) {
  namespace fs = std::filesystem;
  SequenceIndex index;

  auto read_lines = [&](const std::string& name, auto&& on_line) {
    const fs::path path = fs::path(sequence_dir) / name;
    std::ifstream in(path);
    if (!in) throw Error(Err::MissingFile, path.string());
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      line = detail::strip_cr(line);
      const auto first = line.find_first_not_of(" \t");
      if (first == std::string::npos || line[first] == '#') continue;
      try {
        on_line(line);
      } catch (const Error& e) {
        if (e.code() != Err::MalformedLine && e.code() != Err::NonUnitQuaternion) throw;
        throw Error(e.code(), path.string() + ":" + std::to_string(line_no) + ": " + e.what());
      }
    }
  };

  auto parse_payload = [&](const std::string& line) -> Stamped<std::string> {
    const auto toks = detail::split_ws(line);
    if (toks.size() != 2)
      throw Error(Err::MalformedLine, "expected 2 tokens, got " + std::to_string(toks.size()));
    double t;
    if (!detail::parse_double(toks[0], t)) throw Error(Err::MalformedLine, "bad timestamp");
    return {t, std::string(toks[1])};
  };

  read_lines("rgb.txt", [&](const std::string& l) { index.rgb.push_back(parse_payload(l)); });
  read_lines("depth.txt", [&](const std::string& l) { index.depth.push_back(parse_payload(l)); });
  read_lines("groundtruth.txt",
             [&](const std::string& l) { index.poses.push_back(parse_pose_line(l)); });

  auto by_time = [](const auto& a, const auto& b) { return a.timestamp < b.timestamp; };
  std::stable_sort(index.rgb.begin(), index.rgb.end(), by_time);
  std::stable_sort(index.depth.begin(), index.depth.end(), by_time);
  std::stable_sort(index.poses.begin(), index.poses.end(), by_time);
  return index;
}

namespace detail {

/// Greedy best-first timestamp matching (the TUM association convention):
/// all pairs within tolerance, closest first, each entry used at most once.
/// Returns index pairs (a, b).
template <class A, class B>
std::vector<std::pair<std::size_t, std::size_t>> greedy_associate(
    const std::vector<Stamped<A>>& as, const std::vector<Stamped<B>>& bs, double tolerance) {
  struct Cand {
    double dt;
    double ta;
    std::size_t ia, ib;
  };
  std::vector<Cand> cands;
  std::size_t lo = 0;
  for (std::size_t ia = 0; ia < as.size(); ++ia) {
    const double t = as[ia].timestamp;
    while (lo < bs.size() && bs[lo].timestamp < t - tolerance) ++lo;
    for (std::size_t ib = lo; ib < bs.size() && bs[ib].timestamp <= t + tolerance; ++ib)
      cands.push_back({std::abs(bs[ib].timestamp - t), t, ia, ib});
  }
  std::sort(cands.begin(), cands.end(), [](const Cand& x, const Cand& y) {
    if (x.dt != y.dt) return x.dt < y.dt;
    if (x.ta != y.ta) return x.ta < y.ta;
    return x.ib < y.ib;
  });
  std::vector<char> used_a(as.size(), 0), used_b(bs.size(), 0);
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (const Cand& c : cands) {
    if (used_a[c.ia] || used_b[c.ib]) continue;
    used_a[c.ia] = used_b[c.ib] = 1;
    out.emplace_back(c.ia, c.ib);
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace detail

inline std::vector<FrameRef> associate(const SequenceIndex& index,
                                       double tolerance = kDefaultAssocTolerance) {
  const auto rgb_depth = detail::greedy_associate(index.rgb, index.depth, tolerance);
  // Match the surviving rgb entries against poses by rgb timestamp.
  std::vector<Stamped<std::size_t>> rgb_taken;
  rgb_taken.reserve(rgb_depth.size());
  for (std::size_t k = 0; k < rgb_depth.size(); ++k)
    rgb_taken.push_back({index.rgb[rgb_depth[k].first].timestamp, k});
  const auto with_pose = detail::greedy_associate(rgb_taken, index.poses, tolerance);

  std::vector<FrameRef> out;
  out.reserve(with_pose.size());
  for (const auto& [k, ip] : with_pose) {
    const auto& [ir, id] = rgb_depth[rgb_taken[k].value];
    FrameRef ref;
    ref.timestamp = index.rgb[ir].timestamp;
    ref.rgb_path = index.rgb[ir].value;
    ref.depth_path = index.depth[id].value;
    ref.depth_timestamp = index.depth[id].timestamp;
    ref.pose_timestamp = index.poses[ip].timestamp;
    ref.pose = index.poses[ip].value;
    out.push_back(std::move(ref));
  }
  std::sort(out.begin(), out.end(),
            [](const FrameRef& a, const FrameRef& b) { return a.timestamp < b.timestamp; });
  return out;
}

struct LoadedImage {
  IntensityImage intensity;
  Raster<std::array<std::uint8_t, 3>> color;
};

/// Greyscale conversion by Rec.601 luminance; 8-bit colour, 8-bit grey and
/// 16-bit grey inputs are accepted. Optionally resampled by area averaging.
inline LoadedImage load_intensity_image(const std::string& path, int target_w = 0,
                                        int target_h = 0) {
  if (!std::filesystem::exists(path)) throw Error(Err::MissingFile, path);
  cv::Mat img = cv::imread(path, cv::IMREAD_UNCHANGED);
  if (img.empty()) throw Error(Err::BadImageFormat, path + ": unreadable image");
  if (target_w > 0 && target_h > 0 && (img.cols != target_w || img.rows != target_h))
    cv::resize(img, img, cv::Size(target_w, target_h), 0, 0, cv::INTER_AREA);

  LoadedImage out{IntensityImage(img.cols, img.rows),
                  Raster<std::array<std::uint8_t, 3>>(img.cols, img.rows)};
  Raster<float>& v = out.intensity.raster();
  if (img.type() == CV_8UC3) {
    for (int y = 0; y < img.rows; ++y) {
      const cv::Vec3b* row = img.ptr<cv::Vec3b>(y);
      for (int x = 0; x < img.cols; ++x) {
        const double b = row[x][0], g = row[x][1], r = row[x][2];
        v.at(x, y) = static_cast<float>((0.299 * r + 0.587 * g + 0.114 * b) / 255.0);
        out.color.at(x, y) = {row[x][2], row[x][1], row[x][0]};
      }
    }
  } else if (img.type() == CV_8UC1) {
    for (int y = 0; y < img.rows; ++y) {
      const std::uint8_t* row = img.ptr<std::uint8_t>(y);
      for (int x = 0; x < img.cols; ++x) {
        v.at(x, y) = static_cast<float>(row[x] / 255.0);
        out.color.at(x, y) = {row[x], row[x], row[x]};
      }
    }
  } else if (img.type() == CV_16UC1) {
    for (int y = 0; y < img.rows; ++y) {
      const std::uint16_t* row = img.ptr<std::uint16_t>(y);
      for (int x = 0; x < img.cols; ++x) {
        v.at(x, y) = static_cast<float>(row[x] / 65535.0);
        const auto g8 = static_cast<std::uint8_t>(row[x] >> 8);
        out.color.at(x, y) = {g8, g8, g8};
      }
    }
  } else {
    throw Error(Err::BadImageFormat, path + ": unsupported pixel type " +
                                         std::to_string(img.type()));
  }
  return out;
}

inline Frame load_frame(const std::string& sequence_dir, const FrameRef& ref, int proc_w,
                        int proc_h, double depth_scale = kTumDepthScale) {
  namespace fs = std::filesystem;
  Frame frame;
  frame.timestamp = ref.timestamp;
  frame.pose = ref.pose;
  LoadedImage img =
      load_intensity_image((fs::path(sequence_dir) / ref.rgb_path).string(), proc_w, proc_h);
  frame.intensity = std::move(img.intensity);
  frame.color = std::move(img.color);
  frame.gt_depth = load_depth_png((fs::path(sequence_dir) / ref.depth_path).string(), depth_scale,
                                  proc_w, proc_h);
  return frame;
}

/// Uniformly scale trajectory translations, emulating the arbitrary scale of
/// a monocular tracker.
inline void inject_pose_scale(std::vector<FrameRef>& frames, double alpha) {
  if (alpha <= 0.0) throw Error(Err::NonPositiveScale, std::to_string(alpha));
  for (FrameRef& f : frames) f.pose.translation *= alpha;
}

inline void inject_pose_scale(std::vector<Frame>& frames, double alpha) {
  if (alpha <= 0.0) throw Error(Err::NonPositiveScale, std::to_string(alpha));
  for (Frame& f : frames) f.pose.translation *= alpha;
}

inline std::string sequence_name(const std::string& sequence_dir) {
  namespace fs = std::filesystem;
  fs::path p(sequence_dir);
  if (!p.has_filename()) p = p.parent_path();
  return p.filename().string();
}

}  // namespace dfuse
