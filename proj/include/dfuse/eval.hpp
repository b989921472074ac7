#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "dfuse/depth_io.hpp"
#include "dfuse/fusion.hpp"
#include "dfuse/raster.hpp"

namespace dfuse {

struct KeyframeScore {
  std::string sequence;
  int keyframe = 0;
  std::string mode;
  double pct_correct = 0.0;
  int n_evaluated = 0;
  double median_abs_rel = 0.0;
};

/// Boundary-inclusive 10% threshold with enough slack to keep exactly-10%
/// ratios on the correct side of floating-point rounding.
inline constexpr double kWithinThreshold = 0.10 + 1e-12;

/// Percentage of estimated depths within 10% of ground truth, over the
/// valid-ground-truth pixels. Pixels where the estimate is undefined count
/// as incorrect, which keeps the metric sensitive to density.
inline double pct_within_10(const Raster<double>& est, const Mask* est_valid,
                            const DepthImage& gt) {
  require_same_size(est, gt.metres, "estimate vs ground truth");
  if (est_valid) require_same_size(est, *est_valid, "estimate vs estimate mask");
  std::size_t n_gt = 0, n_correct = 0;
  for (std::size_t i = 0; i < est.size(); ++i) {
    if (!gt.valid[i]) continue;
    ++n_gt;
    if (est_valid && !(*est_valid)[i]) continue;
    if (std::abs(est[i] - gt.metres[i]) / gt.metres[i] <= kWithinThreshold) ++n_correct;
  }
  if (n_gt == 0) throw Error(Err::NoValidGroundTruth, "empty ground-truth mask");
  return 100.0 * static_cast<double>(n_correct) / static_cast<double>(n_gt);
}

inline double pct_within_10(const Raster<double>& est, const DepthImage& gt) {
  return pct_within_10(est, nullptr, gt);
}

/// Median of |est - gt| / gt over pixels where both are defined.
inline double median_abs_rel(const Raster<double>& est, const Mask* est_valid,
                             const DepthImage& gt) {
  require_same_size(est, gt.metres, "estimate vs ground truth");
  std::vector<double> ratios;
  ratios.reserve(est.size());
  for (std::size_t i = 0; i < est.size(); ++i) {
    if (!gt.valid[i]) continue;
    if (est_valid && !(*est_valid)[i]) continue;
    ratios.push_back(std::abs(est[i] - gt.metres[i]) / gt.metres[i]);
  }
  if (ratios.empty()) return 0.0;
  const std::size_t mid = ratios.size() / 2;
  std::nth_element(ratios.begin(), ratios.begin() + mid, ratios.end());
  return ratios[mid];
}

// ---------------------------------------------------------------------------
// Mode comparison (ablation reports)

struct ModeComparison {
  struct SequenceMeans {
    std::string sequence;
    std::map<std::string, double> mean_pct;  // mode -> mean over keyframes
  };
  struct PairWins {
    std::string mode_a, mode_b;
    int wins_a = 0, wins_b = 0, ties = 0;  // per matched keyframe
  };
  std::vector<SequenceMeans> sequences;
  std::vector<PairWins> pairs;
};

/// Per-sequence mean score per mode plus per-keyframe win counts between
/// each pair of modes. All modes must cover the same keyframe sets.
inline ModeComparison compare_modes(const std::vector<KeyframeScore>& scores) {
  std::map<std::string, std::map<std::string, std::map<int, double>>> table;  // seq -> mode -> kf
  std::set<std::string> modes;
  for (const auto& s : scores) {
    table[s.sequence][s.mode][s.keyframe] = s.pct_correct;
    modes.insert(s.mode);
  }
  // Identical keyframe sets per mode within every sequence.
  for (const auto& [seq, by_mode] : table) {
    const auto& ref = by_mode.begin()->second;
    for (const auto& [mode, kfs] : by_mode) {
      if (kfs.size() != ref.size() ||
          !std::equal(kfs.begin(), kfs.end(), ref.begin(),
                      [](const auto& a, const auto& b) { return a.first == b.first; }))
        throw Error(Err::MismatchedKeyframeSets, seq + ": mode " + mode);
    }
    if (by_mode.size() != modes.size())
      throw Error(Err::MismatchedKeyframeSets, seq + ": missing modes");
  }

  ModeComparison cmp;
  for (const auto& [seq, by_mode] : table) {
    ModeComparison::SequenceMeans row;
    row.sequence = seq;
    for (const auto& [mode, kfs] : by_mode) {
      double sum = 0.0;
      for (const auto& [_, pct] : kfs) sum += pct;
      row.mean_pct[mode] = kfs.empty() ? 0.0 : sum / static_cast<double>(kfs.size());
    }
    cmp.sequences.push_back(std::move(row));
  }
  std::vector<std::string> mode_list(modes.begin(), modes.end());
  for (std::size_t a = 0; a < mode_list.size(); ++a) {
    for (std::size_t b = a + 1; b < mode_list.size(); ++b) {
      ModeComparison::PairWins pw{mode_list[a], mode_list[b], 0, 0, 0};
      for (const auto& [seq, by_mode] : table) {
        const auto& ka = by_mode.at(mode_list[a]);
        const auto& kb = by_mode.at(mode_list[b]);
        for (const auto& [kf, pct_a] : ka) {
          const double pct_b = kb.at(kf);
          if (pct_a > pct_b)
            ++pw.wins_a;
          else if (pct_b > pct_a)
            ++pw.wins_b;
          else
            ++pw.ties;
        }
      }
      cmp.pairs.push_back(std::move(pw));
    }
  }
  return cmp;
}

// ---------------------------------------------------------------------------
// CSV report

inline constexpr const char* kReportHeader =
    "sequence,keyframe,mode,pct_correct,n_evaluated,median_abs_rel";

namespace detail {

inline std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

/// Deterministic CSV: one row per keyframe per mode, ordered by
/// (sequence, keyframe, mode). Doubles carry full precision so the file
/// parses back exactly.
inline std::string report_to_string(std::vector<KeyframeScore> scores) {
  std::sort(scores.begin(), scores.end(), [](const KeyframeScore& a, const KeyframeScore& b) {
    if (a.sequence != b.sequence) return a.sequence < b.sequence;
    if (a.keyframe != b.keyframe) return a.keyframe < b.keyframe;
    return a.mode < b.mode;
  });
  std::string out(kReportHeader);
  out += "\n";
  for (const auto& s : scores) {
    out += s.sequence + ',' + std::to_string(s.keyframe) + ',' + s.mode + ',' +
           detail::fmt_double(s.pct_correct) + ',' + std::to_string(s.n_evaluated) + ',' +
           detail::fmt_double(s.median_abs_rel) + "\n";
  }
  return out;
}

inline void write_report(std::vector<KeyframeScore> scores, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(Err::IoError, "cannot write " + path);
  out << report_to_string(std::move(scores));
  if (!out) throw Error(Err::IoError, "short write to " + path);
}

inline std::vector<KeyframeScore> read_report(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(Err::MissingFile, path);
  std::string line;
  if (!std::getline(in, line)) throw Error(Err::MalformedLine, path + ": empty file");
  while (!line.empty() && (line.back() == '\r' || line.back() == '\n')) line.pop_back();
  if (line != kReportHeader) throw Error(Err::MalformedLine, path + ": bad header");
  std::vector<KeyframeScore> scores;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    while (!line.empty() && (line.back() == '\r' || line.back() == '\n')) line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::size_t start = 0;
    for (std::size_t i = 0; i <= line.size(); ++i) {
      if (i == line.size() || line[i] == ',') {
        cols.push_back(line.substr(start, i - start));
        start = i + 1;
      }
    }
    if (cols.size() != 6)
      throw Error(Err::MalformedLine, path + ":" + std::to_string(line_no));
    KeyframeScore s;
    s.sequence = cols[0];
    s.keyframe = std::stoi(cols[1]);
    s.mode = cols[2];
    s.pct_correct = std::stod(cols[3]);
    s.n_evaluated = std::stoi(cols[4]);
    s.median_abs_rel = std::stod(cols[5]);
    scores.push_back(std::move(s));
  }
  return scores;
}

/// 16-bit depth image of the fused state: stored = exp(log_depth) * scale,
/// saturating at 65535.
inline void export_depth_image(const FusionState& state, const std::string& path,
                               double depth_scale = kTumDepthScale) {
  Raster<double> metres(state.log_depth.width(), state.log_depth.height(), 0.0);
  for (std::size_t i = 0; i < metres.size(); ++i) metres[i] = std::exp(state.log_depth[i]);
  save_depth_png(metres, nullptr, path, depth_scale);
}

}  // namespace dfuse
