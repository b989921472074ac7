#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "dfuse/config.hpp"
#include "dfuse/datasets.hpp"
#include "dfuse/eval.hpp"
#include "dfuse/fusion.hpp"
#include "dfuse/predictions.hpp"
#include "dfuse/semidense.hpp"

namespace dfuse {

/// Per-keyframe bundle the pipeline iterates on.
struct Keyframe {
  int id = 0;
  Frame frame;
  Mask texture;
  SemiDenseMap semidense;
  PredictionSet predictions;  // focal-adjusted to the processing camera
  FusionState fusion;
  int stereo_frames = 0;  // frames that contributed stereo observations
};

struct PipelineWorld {
  std::optional<Keyframe> active;
  int next_id = 0;
};

struct StageStats {
  double total_ms = 0.0;
  double min_ms = std::numeric_limits<double>::infinity();
  double max_ms = 0.0;
  int count = 0;

  void add(double ms) {
    total_ms += ms;
    min_ms = std::min(min_ms, ms);
    max_ms = std::max(max_ms, ms);
    ++count;
  }
  double mean_ms() const { return count ? total_ms / count : 0.0; }
  double min_or_zero() const { return count ? min_ms : 0.0; }
};

struct RunStats {
  StageStats semidense, optimise, prediction, frame;
  int frames = 0;
};

struct KeyframeInfo {
  int id = 0;
  double timestamp = 0.0;
  double scale = 1.0;
  int stereo_frames = 0;
  int inliers = 0;
  double pct_within_10 = 0.0;
  int n_evaluated = 0;
};

struct RunResult {
  std::vector<KeyframeScore> scores;
  std::vector<KeyframeInfo> keyframes;
  RunStats stats;
  std::string scores_path;
  std::string manifest_path;
};

struct ProcessOutcome {
  bool created_keyframe = false;
  int observations = 0;
  std::optional<Keyframe> retired;
};

namespace detail {

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + (salt + 1) * 0x9E3779B97F4A7C15ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline double median_predicted_depth(const PredictionSet& pred) {
  std::vector<double> vals(pred.log_depth.data(), pred.log_depth.data() + pred.log_depth.size());
  const std::size_t mid = vals.size() / 2;
  std::nth_element(vals.begin(), vals.begin() + mid, vals.end());
  return std::exp(vals[mid]);
}

class StageTimer {
 public:
  explicit StageTimer(StageStats* stats) : stats_(stats), start_(clock::now()) {}
  ~StageTimer() {
    if (stats_) stats_->add(elapsed_ms());
  }
  double elapsed_ms() const {
    return std::chrono::duration<double, std::milli>(clock::now() - start_).count();
  }

 private:
  using clock = std::chrono::steady_clock;
  StageStats* stats_;
  clock::time_point start_;
};

}  // namespace detail

inline std::string format_timestamp(double t) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", t);
  return buf;
}

inline Keyframe make_keyframe(int id, Frame frame, const PipelineConfig& cfg,
                              RunStats* stats = nullptr) {
  const CameraIntrinsics camera = cfg.proc_camera();
  Keyframe kf;
  kf.id = id;
  {
    detail::StageTimer timer(stats ? &stats->prediction : nullptr);
    PredictionSet pred;
    if (!cfg.predictions_dir.empty()) {
      namespace fs = std::filesystem;
      const fs::path path =
          fs::path(cfg.predictions_dir) / (format_timestamp(frame.timestamp) + ".dfpred");
      pred = load_predictions(path.string());
      if (!pred.log_depth.same_size(camera.width, camera.height))
        throw Error(Err::DimensionMismatch,
                    path.string() + " does not match the processing resolution");
    } else {
      pred = synth_oracle(frame.gt_depth.metres, cfg.sigma_depth, cfg.sigma_grad,
                          detail::mix_seed(cfg.seed, static_cast<std::uint64_t>(id)), camera.fx,
                          cfg.oracle_kappa);
    }
    kf.predictions = focal_adjust(pred, camera.fx);
  }
  kf.texture = texture_mask(frame.intensity, cfg.texture_threshold);
  kf.semidense = SemiDenseMap::empty(camera.width, camera.height);
  kf.fusion = init_state(kf.predictions);
  kf.frame = std::move(frame);
  return kf;
}

/// Epipolar search over the keyframe's texture pixels against one new frame.
/// Results are collected per pixel, so the outcome is order-independent.
inline std::vector<EpipolarObservation> stereo_scan(const Keyframe& kf, const Frame& frame,
                                                    const CameraIntrinsics& camera,
                                                    const PipelineConfig& cfg) {
  const EpipolarGeometry g = make_epipolar_geometry(kf.frame.pose, frame.pose, camera);
  if (g.t_10.norm() < 1e-12) return {};

  const int w = camera.width, h = camera.height;
  std::vector<EpipolarObservation> slots(static_cast<std::size_t>(w) * h);
  std::vector<std::uint8_t> got(slots.size(), 0);

#pragma omp parallel for schedule(dynamic, 4)
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (!kf.texture.at(x, y)) continue;
      const std::size_t i = kf.texture.index(x, y);
      std::optional<DepthPrior> prior;
      if (kf.semidense.valid[i])
        prior = DepthPrior{kf.semidense.depth[i], std::sqrt(kf.semidense.variance[i])};
      const EpipolarResult r = search_depth(g, kf.frame.intensity, frame.intensity,
                                            PixelCoord{static_cast<double>(x),
                                                       static_cast<double>(y)},
                                            prior, cfg.search);
      if (r.ok()) {
        slots[i] = r.obs;
        got[i] = 1;
      }
    }
  }
  std::vector<EpipolarObservation> obs;
  obs.reserve(slots.size() / 4);
  for (std::size_t i = 0; i < slots.size(); ++i)
    if (got[i]) obs.push_back(slots[i]);
  return obs;
}

/// One frame through the system: stereo update of the active keyframe, the
/// keyframe decision, then either a new keyframe or one fusion solve.
inline ProcessOutcome process_frame(PipelineWorld& world, Frame frame, const PipelineConfig& cfg,
                                    RunStats* stats = nullptr) {
  ProcessOutcome outcome;
  if (!world.active) {
    world.active = make_keyframe(world.next_id++, std::move(frame), cfg, stats);
    outcome.created_keyframe = true;
    return outcome;
  }

  Keyframe& kf = *world.active;
  const CameraIntrinsics camera = cfg.proc_camera();
  {
    detail::StageTimer timer(stats ? &stats->semidense : nullptr);
    const std::vector<EpipolarObservation> obs = stereo_scan(kf, frame, camera, cfg);
    outcome.observations = static_cast<int>(obs.size());
    if (!obs.empty()) {
      kf.semidense = update_semidense(std::move(kf.semidense), obs);
      kf.stereo_frames += 1;
    }
  }

  const double median_depth = detail::median_predicted_depth(kf.predictions);
  if (should_create_keyframe(kf.frame.pose, frame.pose, median_depth, kf.semidense, cfg.policy)) {
    outcome.retired = std::move(*world.active);
    world.active = make_keyframe(world.next_id++, std::move(frame), cfg, stats);
    outcome.created_keyframe = true;
    return outcome;
  }

  {
    detail::StageTimer timer(stats ? &stats->optimise : nullptr);
    kf.fusion = optimize(kf.fusion, kf.semidense, kf.predictions, cfg.robust, cfg.mode);
  }
  return outcome;
}

namespace detail {

inline void finalize_keyframe(const Keyframe& kf, const PipelineConfig& cfg,
                              const std::string& seq_name, RunResult& result) {
  Raster<double> est(kf.fusion.log_depth.width(), kf.fusion.log_depth.height(), 0.0);
  for (std::size_t i = 0; i < est.size(); ++i) est[i] = std::exp(kf.fusion.log_depth[i]);

  int n_gt = 0;
  for (std::size_t i = 0; i < kf.frame.gt_depth.valid.size(); ++i)
    n_gt += kf.frame.gt_depth.valid[i] ? 1 : 0;

  KeyframeScore score;
  score.sequence = seq_name;
  score.keyframe = kf.id;
  score.mode = to_string(cfg.mode);
  score.pct_correct = pct_within_10(est, kf.frame.gt_depth);
  score.n_evaluated = n_gt;
  score.median_abs_rel = median_abs_rel(est, nullptr, kf.frame.gt_depth);
  result.scores.push_back(score);

  KeyframeInfo info;
  info.id = kf.id;
  info.timestamp = kf.frame.timestamp;
  info.scale = kf.fusion.scale;
  info.stereo_frames = kf.stereo_frames;
  info.inliers = kf.semidense.inlier_count;
  info.pct_within_10 = score.pct_correct;
  info.n_evaluated = n_gt;
  result.keyframes.push_back(info);

  if (!cfg.out_dir.empty()) {
    namespace fs = std::filesystem;
    const fs::path out(cfg.out_dir);
    export_depth_image(kf.fusion, (out / ("kf_" + std::to_string(kf.id) + ".png")).string(),
                       cfg.depth_scale);
    save_predictions(kf.predictions,
                     (out / ("kf_" + std::to_string(kf.id) + ".dfpred")).string());
  }
}

inline void write_stage(std::ofstream& out, const char* name, const StageStats& s) {
  out << name << "_mean_ms = " << detail::fmt_g17(s.mean_ms()) << "\n";
  out << name << "_min_ms = " << detail::fmt_g17(s.min_or_zero()) << "\n";
  out << name << "_max_ms = " << detail::fmt_g17(s.max_ms) << "\n";
  out << name << "_count = " << s.count << "\n";
}

}  // namespace detail

inline void write_manifest(const PipelineConfig& cfg, const RunResult& result,
                           const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(Err::IoError, "cannot write " + path);
  out << "# config\n";
  for (const auto& [key, value] : echo_config(cfg)) out << key << " = " << value << "\n";
  out << "# run\n";
  out << "frames = " << result.stats.frames << "\n";
  out << "keyframes = " << result.keyframes.size() << "\n";
  detail::write_stage(out, "semidense", result.stats.semidense);
  detail::write_stage(out, "optimise", result.stats.optimise);
  detail::write_stage(out, "prediction", result.stats.prediction);
  detail::write_stage(out, "frame", result.stats.frame);
  for (const KeyframeInfo& kf : result.keyframes) {
    const std::string p = "kf_" + std::to_string(kf.id) + "_";
    out << p << "timestamp = " << format_timestamp(kf.timestamp) << "\n";
    out << p << "scale = " << detail::fmt_g17(kf.scale) << "\n";
    out << p << "stereo_frames = " << kf.stereo_frames << "\n";
    out << p << "inliers = " << kf.inliers << "\n";
    out << p << "pct_within_10 = " << detail::fmt_g17(kf.pct_within_10) << "\n";
    out << p << "n_evaluated = " << kf.n_evaluated << "\n";
  }
  if (!out) throw Error(Err::IoError, "short write to " + path);
}

/// End-to-end run: associate the sequence, stream frames through
/// process_frame, score every keyframe, emit depth images, scores.csv and
/// the manifest. Deterministic for a fixed config and seed.
inline RunResult run_sequence(const PipelineConfig& cfg, std::ostream& log = std::cerr) {
  cfg.proc_camera().validate();
  const SequenceIndex index = parse_index(cfg.sequence_dir);
  std::vector<FrameRef> refs = associate(index, cfg.assoc_tolerance);
  if (refs.empty()) throw Error(Err::InvalidArgument, "sequence associates to zero frames");
  if (cfg.pose_scale != 1.0) inject_pose_scale(refs, cfg.pose_scale);
  if (cfg.max_frames > 0 && static_cast<int>(refs.size()) > cfg.max_frames)
    refs.resize(cfg.max_frames);

  if (!cfg.out_dir.empty()) std::filesystem::create_directories(cfg.out_dir);
  const std::string seq_name = sequence_name(cfg.sequence_dir);

  RunResult result;
  PipelineWorld world;
  for (const FrameRef& ref : refs) {
    Frame frame = load_frame(cfg.sequence_dir, ref, cfg.proc_width, cfg.proc_height,
                             cfg.depth_scale);
    detail::StageTimer frame_timer(&result.stats.frame);
    try {
      ProcessOutcome outcome = process_frame(world, std::move(frame), cfg, &result.stats);
      if (outcome.retired) detail::finalize_keyframe(*outcome.retired, cfg, seq_name, result);
    } catch (const Error& e) {
      if (e.code() != Err::CgDivergence) throw;
      log << "frame " << format_timestamp(ref.timestamp) << " skipped: " << e.what() << "\n";
    }
    result.stats.frames += 1;
  }
  if (world.active) detail::finalize_keyframe(*world.active, cfg, seq_name, result);

  if (!cfg.out_dir.empty()) {
    namespace fs = std::filesystem;
    result.scores_path = (fs::path(cfg.out_dir) / "scores.csv").string();
    result.manifest_path = (fs::path(cfg.out_dir) / "manifest.txt").string();
    write_report(result.scores, result.scores_path);
    write_manifest(cfg, result, result.manifest_path);
  }
  return result;
}

}  // namespace dfuse
