#pragma once

#include <filesystem>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "dfuse/config.hpp"
#include "dfuse/pipeline.hpp"
#include "dfuse/selftest.hpp"

namespace dfuse {

inline void print_usage(std::ostream& err) {
  err << "usage: dfuse <run|oracle|score|selftest> [--key value ...]\n"
         "\n"
         "  run       process a sequence: --sequence <dir> --out <dir>\n"
         "            [--config <file>] [--mode full|nopairwise|lsscale] [--seed N]\n"
         "            [--sigma-depth S] [--sigma-grad S] [--pose-scale A] ...\n"
         "  oracle    write per-frame DFPRED files from ground-truth depth:\n"
         "            --sequence <dir> --out <dir> [--seed N] [--sigma-depth S] ...\n"
         "  score     re-score the depth images of a previous run:\n"
         "            --out <run dir> --sequence <dir>\n"
         "  selftest  run the built-in invariant suite\n"
         "\n"
         "Every config key doubles as a flag ('-' and '_' are equivalent);\n"
         "precedence is defaults, then --config file, then flags.\n";
}

namespace detail {

struct CliArgs {
  std::string config_path;
  std::vector<std::pair<std::string, std::string>> overrides;
};

/// Flags are --key value or --key=value; key spelling mirrors config keys.
inline CliArgs parse_flags(const std::vector<std::string>& args, std::size_t start) {
  CliArgs out;
  for (std::size_t i = start; i < args.size(); ++i) {
    const std::string& a = args[i];
    if (a.rfind("--", 0) != 0)
      throw Error(Err::UnknownKey, "expected --flag, got '" + a + "'");
    std::string key = a.substr(2);
    std::string value;
    const auto eq = key.find('=');
    if (eq != std::string::npos) {
      value = key.substr(eq + 1);
      key = key.substr(0, eq);
    } else {
      if (i + 1 >= args.size())
        throw Error(Err::TypeError, key + ": missing value");
      value = args[++i];
    }
    key = canonical_key(key);
    if (key == "config")
      out.config_path = value;
    else
      out.overrides.emplace_back(key, value);
  }
  return out;
}

inline PipelineConfig build_config(const CliArgs& args) {
  PipelineConfig cfg;
  if (!args.config_path.empty()) cfg = load_config(args.config_path, cfg);
  for (const auto& [key, value] : args.overrides) apply_config_value(cfg, key, value);
  return cfg;
}

inline int cmd_run(const PipelineConfig& cfg, std::ostream& out, std::ostream& err) {
  if (cfg.sequence_dir.empty() || cfg.out_dir.empty()) {
    err << "run requires --sequence and --out\n";
    return 1;
  }
  const RunResult result = run_sequence(cfg, err);
  out << "frames: " << result.stats.frames << "\n";
  out << "keyframes: " << result.keyframes.size() << "\n";
  double mean = 0.0;
  for (const auto& s : result.scores) mean += s.pct_correct;
  if (!result.scores.empty()) mean /= static_cast<double>(result.scores.size());
  out << "mean pct_within_10: " << mean << "\n";
  out << "scores: " << result.scores_path << "\n";
  out << "manifest: " << result.manifest_path << "\n";
  return 0;
}

inline int cmd_oracle(const PipelineConfig& cfg, std::ostream& out, std::ostream& err) {
  if (cfg.sequence_dir.empty() || cfg.out_dir.empty()) {
    err << "oracle requires --sequence and --out\n";
    return 1;
  }
  const SequenceIndex index = parse_index(cfg.sequence_dir);
  const std::vector<FrameRef> refs = associate(index, cfg.assoc_tolerance);
  if (refs.empty()) throw Error(Err::InvalidArgument, "sequence associates to zero frames");
  std::filesystem::create_directories(cfg.out_dir);
  const CameraIntrinsics camera = cfg.proc_camera();
  int written = 0;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    if (cfg.max_frames > 0 && static_cast<int>(i) >= cfg.max_frames) break;
    namespace fs = std::filesystem;
    const DepthImage gt = load_depth_png((fs::path(cfg.sequence_dir) / refs[i].depth_path).string(),
                                         cfg.depth_scale, cfg.proc_width, cfg.proc_height);
    const PredictionSet pred =
        synth_oracle(gt.metres, cfg.sigma_depth, cfg.sigma_grad, detail::mix_seed(cfg.seed, i),
                     camera.fx, cfg.oracle_kappa);
    const fs::path path =
        fs::path(cfg.out_dir) / (format_timestamp(refs[i].timestamp) + ".dfpred");
    save_predictions(pred, path.string());
    ++written;
  }
  out << "wrote " << written << " prediction files to " << cfg.out_dir << "\n";
  return 0;
}

inline int cmd_score(const PipelineConfig& cfg, std::ostream& out, std::ostream& err) {
  namespace fs = std::filesystem;
  if (cfg.sequence_dir.empty() || cfg.out_dir.empty()) {
    err << "score requires --out (a previous run directory) and --sequence\n";
    return 1;
  }
  const fs::path run_dir(cfg.out_dir);
  std::map<std::string, std::string> manifest;
  for (const auto& [k, v] : parse_kv_file((run_dir / "manifest.txt").string())) manifest[k] = v;
  const std::string mode = manifest.count("mode") ? manifest.at("mode") : "full";
  const double depth_scale =
      manifest.count("depth_scale") ? std::stod(manifest.at("depth_scale")) : kTumDepthScale;
  const int proc_w =
      manifest.count("proc_width") ? std::stoi(manifest.at("proc_width")) : cfg.proc_width;
  const int proc_h =
      manifest.count("proc_height") ? std::stoi(manifest.at("proc_height")) : cfg.proc_height;

  const SequenceIndex index = parse_index(cfg.sequence_dir);
  const std::vector<FrameRef> refs = associate(index, cfg.assoc_tolerance);
  const std::string seq_name = sequence_name(cfg.sequence_dir);

  std::vector<KeyframeScore> scores;
  for (const auto& [key, value] : manifest) {
    if (key.rfind("kf_", 0) != 0 || key.find("_timestamp") == std::string::npos) continue;
    const int id = std::stoi(key.substr(3));
    const double t = std::stod(value);
    const FrameRef* nearest = nullptr;
    double best = cfg.assoc_tolerance;
    for (const FrameRef& r : refs)
      if (std::abs(r.timestamp - t) <= best) {
        best = std::abs(r.timestamp - t);
        nearest = &r;
      }
    if (!nearest) throw Error(Err::MissingFile, "no frame near timestamp " + value);
    const DepthImage gt =
        load_depth_png((fs::path(cfg.sequence_dir) / nearest->depth_path).string(), depth_scale,
                       proc_w, proc_h);
    const DepthImage est = load_depth_png(
        (run_dir / ("kf_" + std::to_string(id) + ".png")).string(), depth_scale);
    int n_gt = 0;
    for (std::size_t i = 0; i < gt.valid.size(); ++i) n_gt += gt.valid[i] ? 1 : 0;
    KeyframeScore s;
    s.sequence = seq_name;
    s.keyframe = id;
    s.mode = mode;
    s.pct_correct = pct_within_10(est.metres, &est.valid, gt);
    s.n_evaluated = n_gt;
    s.median_abs_rel = median_abs_rel(est.metres, &est.valid, gt);
    scores.push_back(std::move(s));
  }
  out << report_to_string(std::move(scores));
  return 0;
}

}  // namespace detail

/// Entry point shared by the binary and the tests. Exit codes: 0 success,
/// 1 usage error, 2 runtime failure.
inline int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  if (args.empty()) {
    print_usage(err);
    return 1;
  }
  const std::string& cmd = args[0];
  try {
    if (cmd == "selftest") {
      const int failures = run_selftest(out);
      if (failures) {
        err << failures << " selftest check(s) failed\n";
        return 2;
      }
      out << "selftest passed\n";
      return 0;
    }
    if (cmd != "run" && cmd != "oracle" && cmd != "score") {
      err << "unknown subcommand '" << cmd << "'\n";
      print_usage(err);
      return 1;
    }
    const detail::CliArgs cli = detail::parse_flags(args, 1);
    const PipelineConfig cfg = detail::build_config(cli);
    if (cmd == "run") return detail::cmd_run(cfg, out, err);
    if (cmd == "oracle") return detail::cmd_oracle(cfg, out, err);
    return detail::cmd_score(cfg, out, err);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    const bool usage = e.code() == Err::UnknownKey || e.code() == Err::TypeError;
    if (usage) print_usage(err);
    return usage ? 1 : 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace dfuse
