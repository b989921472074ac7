#pragma once

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "dfuse/datasets.hpp"
#include "dfuse/fusion.hpp"
#include "dfuse/semidense.hpp"

namespace dfuse {

/// Everything a run needs; every field maps 1:1 onto a config key (and a
/// --flag), see config_schema().
struct PipelineConfig {
  std::string sequence_dir;
  std::string out_dir;
  FusionMode mode = FusionMode::Full;
  std::uint64_t seed = 0;

  // prediction source: a DFPRED directory, or the synthetic oracle
  std::string predictions_dir;
  double sigma_depth = 0.3;
  double sigma_grad = 0.05;
  double oracle_kappa = 1.0;

  double pose_scale = 1.0;
  KeyframePolicy policy;
  RobustConfig robust;
  SearchConfig search;
  double texture_threshold = 0.02;

  CameraIntrinsics native_camera{525.0, 525.0, 319.5, 239.5, 640, 480};
  int proc_width = 256;
  int proc_height = 192;
  double assoc_tolerance = kDefaultAssocTolerance;
  double depth_scale = kTumDepthScale;
  int max_frames = 0;  // 0 = whole sequence

  CameraIntrinsics proc_camera() const {
    return native_camera.rescaled(proc_width, proc_height);
  }
};

inline FusionMode parse_mode(const std::string& v) {
  if (v == "full") return FusionMode::Full;
  if (v == "nopairwise") return FusionMode::NoPairwise;
  if (v == "lsscale") return FusionMode::LeastSquaresScale;
  throw Error(Err::TypeError, "mode: expected full|nopairwise|lsscale, got '" + v + "'");
}

namespace detail {

template <class T>
T parse_number(const std::string& key, const std::string& v, const char* type_name) {
  T out{};
  const char* begin = v.data();
  const char* end = begin + v.size();
  auto [ptr, ec] = std::from_chars(begin, end, out);
  if (ec != std::errc() || ptr != end)
    throw Error(Err::TypeError, key + ": expected " + type_name + ", got '" + v + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw Error(Err::TypeError, key + ": expected bool, got '" + v + "'");
}

inline std::string fmt_g17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

struct ConfigKey {
  std::string name;
  std::function<void(PipelineConfig&, const std::string&)> set;
  std::function<std::string(const PipelineConfig&)> get;
};

inline const std::vector<ConfigKey>& config_schema() {
  using detail::fmt_g17;
  using detail::parse_bool;
  using detail::parse_number;
  auto dbl = [](const std::string& k, const std::string& v) {
    return parse_number<double>(k, v, "number");
  };
  static const std::vector<ConfigKey> schema = {
      {"sequence", [](PipelineConfig& c, const std::string& v) { c.sequence_dir = v; },
       [](const PipelineConfig& c) { return c.sequence_dir; }},
      {"out", [](PipelineConfig& c, const std::string& v) { c.out_dir = v; },
       [](const PipelineConfig& c) { return c.out_dir; }},
      {"mode", [](PipelineConfig& c, const std::string& v) { c.mode = parse_mode(v); },
       [](const PipelineConfig& c) { return std::string(to_string(c.mode)); }},
      {"seed",
       [](PipelineConfig& c, const std::string& v) {
         c.seed = parse_number<std::uint64_t>("seed", v, "unsigned integer");
       },
       [](const PipelineConfig& c) { return std::to_string(c.seed); }},
      {"predictions_dir",
       [](PipelineConfig& c, const std::string& v) { c.predictions_dir = v; },
       [](const PipelineConfig& c) { return c.predictions_dir; }},
      {"sigma_depth",
       [dbl](PipelineConfig& c, const std::string& v) { c.sigma_depth = dbl("sigma_depth", v); },
       [](const PipelineConfig& c) { return fmt_g17(c.sigma_depth); }},
      {"sigma_grad",
       [dbl](PipelineConfig& c, const std::string& v) { c.sigma_grad = dbl("sigma_grad", v); },
       [](const PipelineConfig& c) { return fmt_g17(c.sigma_grad); }},
      {"oracle_kappa",
       [dbl](PipelineConfig& c, const std::string& v) { c.oracle_kappa = dbl("oracle_kappa", v); },
       [](const PipelineConfig& c) { return fmt_g17(c.oracle_kappa); }},
      {"pose_scale",
       [dbl](PipelineConfig& c, const std::string& v) { c.pose_scale = dbl("pose_scale", v); },
       [](const PipelineConfig& c) { return fmt_g17(c.pose_scale); }},
      {"lambda_trans",
       [dbl](PipelineConfig& c, const std::string& v) {
         c.policy.lambda_trans = dbl("lambda_trans", v);
       },
       [](const PipelineConfig& c) { return fmt_g17(c.policy.lambda_trans); }},
      {"lambda_inliers",
       [](PipelineConfig& c, const std::string& v) {
         c.policy.lambda_inliers = parse_number<int>("lambda_inliers", v, "integer");
       },
       [](const PipelineConfig& c) { return std::to_string(c.policy.lambda_inliers); }},
      {"texture_threshold",
       [dbl](PipelineConfig& c, const std::string& v) {
         c.texture_threshold = dbl("texture_threshold", v);
       },
       [](const PipelineConfig& c) { return fmt_g17(c.texture_threshold); }},
      {"delta_semi",
       [dbl](PipelineConfig& c, const std::string& v) { c.robust.delta_semi = dbl("delta_semi", v); },
       [](const PipelineConfig& c) { return fmt_g17(c.robust.delta_semi); }},
      {"delta_net",
       [dbl](PipelineConfig& c, const std::string& v) { c.robust.delta_net = dbl("delta_net", v); },
       [](const PipelineConfig& c) { return fmt_g17(c.robust.delta_net); }},
      {"delta_grad",
       [dbl](PipelineConfig& c, const std::string& v) { c.robust.delta_grad = dbl("delta_grad", v); },
       [](const PipelineConfig& c) { return fmt_g17(c.robust.delta_grad); }},
      {"gn_iterations",
       [](PipelineConfig& c, const std::string& v) {
         c.robust.gn_iterations = parse_number<int>("gn_iterations", v, "integer");
       },
       [](const PipelineConfig& c) { return std::to_string(c.robust.gn_iterations); }},
      {"cg_tol",
       [dbl](PipelineConfig& c, const std::string& v) { c.robust.cg_tol = dbl("cg_tol", v); },
       [](const PipelineConfig& c) { return fmt_g17(c.robust.cg_tol); }},
      {"cg_max_iters",
       [](PipelineConfig& c, const std::string& v) {
         c.robust.cg_max_iters = parse_number<int>("cg_max_iters", v, "integer");
       },
       [](const PipelineConfig& c) { return std::to_string(c.robust.cg_max_iters); }},
      {"estimate_scale",
       [](PipelineConfig& c, const std::string& v) {
         c.robust.estimate_scale = parse_bool("estimate_scale", v);
       },
       [](const PipelineConfig& c) { return c.robust.estimate_scale ? "true" : "false"; }},
      {"min_depth",
       [dbl](PipelineConfig& c, const std::string& v) { c.search.min_depth = dbl("min_depth", v); },
       [](const PipelineConfig& c) { return fmt_g17(c.search.min_depth); }},
      {"max_depth",
       [dbl](PipelineConfig& c, const std::string& v) { c.search.max_depth = dbl("max_depth", v); },
       [](const PipelineConfig& c) { return fmt_g17(c.search.max_depth); }},
      {"fx", [dbl](PipelineConfig& c, const std::string& v) { c.native_camera.fx = dbl("fx", v); },
       [](const PipelineConfig& c) { return fmt_g17(c.native_camera.fx); }},
      {"fy", [dbl](PipelineConfig& c, const std::string& v) { c.native_camera.fy = dbl("fy", v); },
       [](const PipelineConfig& c) { return fmt_g17(c.native_camera.fy); }},
      {"cx", [dbl](PipelineConfig& c, const std::string& v) { c.native_camera.cx = dbl("cx", v); },
       [](const PipelineConfig& c) { return fmt_g17(c.native_camera.cx); }},
      {"cy", [dbl](PipelineConfig& c, const std::string& v) { c.native_camera.cy = dbl("cy", v); },
       [](const PipelineConfig& c) { return fmt_g17(c.native_camera.cy); }},
      {"native_width",
       [](PipelineConfig& c, const std::string& v) {
         c.native_camera.width = parse_number<int>("native_width", v, "integer");
       },
       [](const PipelineConfig& c) { return std::to_string(c.native_camera.width); }},
      {"native_height",
       [](PipelineConfig& c, const std::string& v) {
         c.native_camera.height = parse_number<int>("native_height", v, "integer");
       },
       [](const PipelineConfig& c) { return std::to_string(c.native_camera.height); }},
      {"proc_width",
       [](PipelineConfig& c, const std::string& v) {
         c.proc_width = parse_number<int>("proc_width", v, "integer");
       },
       [](const PipelineConfig& c) { return std::to_string(c.proc_width); }},
      {"proc_height",
       [](PipelineConfig& c, const std::string& v) {
         c.proc_height = parse_number<int>("proc_height", v, "integer");
       },
       [](const PipelineConfig& c) { return std::to_string(c.proc_height); }},
      {"assoc_tolerance",
       [dbl](PipelineConfig& c, const std::string& v) {
         c.assoc_tolerance = dbl("assoc_tolerance", v);
       },
       [](const PipelineConfig& c) { return fmt_g17(c.assoc_tolerance); }},
      {"depth_scale",
       [dbl](PipelineConfig& c, const std::string& v) { c.depth_scale = dbl("depth_scale", v); },
       [](const PipelineConfig& c) { return fmt_g17(c.depth_scale); }},
      {"max_frames",
       [](PipelineConfig& c, const std::string& v) {
         c.max_frames = parse_number<int>("max_frames", v, "integer");
       },
       [](const PipelineConfig& c) { return std::to_string(c.max_frames); }},
  };
  return schema;
}

inline std::string canonical_key(std::string key) {
  for (char& c : key)
    if (c == '-') c = '_';
  return key;
}

inline void apply_config_value(PipelineConfig& cfg, const std::string& key,
                               const std::string& value) {
  const std::string k = canonical_key(key);
  for (const ConfigKey& entry : config_schema()) {
    if (entry.name == k) {
      entry.set(cfg, value);
      return;
    }
  }
  throw Error(Err::UnknownKey, k);
}

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

/// Lenient "key = value" reader ('#' comments); used for manifests.
inline std::vector<std::pair<std::string, std::string>> parse_kv_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(Err::MissingFile, path);
  std::vector<std::pair<std::string, std::string>> out;
  std::string line;
  while (std::getline(in, line)) {
    const std::string t = detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw Error(Err::MalformedLine, path + ": '" + t + "'");
    out.emplace_back(detail::trim(t.substr(0, eq)), detail::trim(t.substr(eq + 1)));
  }
  return out;
}

/// Defaults <- file <- (caller applies flags afterwards). Unknown keys and
/// untypeable values are errors.
inline PipelineConfig load_config(const std::string& path, PipelineConfig base = {}) {
  for (const auto& [key, value] : parse_kv_file(path)) apply_config_value(base, key, value);
  return base;
}

inline std::vector<std::pair<std::string, std::string>> echo_config(const PipelineConfig& cfg) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const ConfigKey& entry : config_schema()) out.emplace_back(entry.name, entry.get(cfg));
  return out;
}

}  // namespace dfuse
