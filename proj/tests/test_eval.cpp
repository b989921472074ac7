#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <random>

#include "dfuse/eval.hpp"

using namespace dfuse;
namespace fs = std::filesystem;

namespace {

DepthImage ones(int w, int h) {
  return {Raster<double>(w, h, 1.0), Mask(w, h, 1)};
}

}  // namespace

TEST_CASE("within-10 percent metric examples", "[eval]") {
  DepthImage gt = ones(3, 1);
  Raster<double> est(3, 1, 1.0);
  CHECK(pct_within_10(est, gt) == 100.0);

  est[1] = 1.05;
  est[2] = 1.2;
  CHECK(pct_within_10(est, gt) == Catch::Approx(200.0 / 3.0).margin(1e-9));

  Raster<double> off(3, 1, 1.11);
  CHECK(pct_within_10(off, gt) == 0.0);
}

TEST_CASE("exactly 10 percent counts as correct", "[eval]") {
  DepthImage gt = ones(4, 1);
  gt.metres[1] = 2.0;
  gt.metres[2] = 0.37;
  gt.metres[3] = 5.5;
  Raster<double> boundary(4, 1, 0.0);
  for (std::size_t i = 0; i < 4; ++i) boundary[i] = 1.10 * gt.metres[i];
  CHECK(pct_within_10(boundary, gt) == 100.0);

  Raster<double> beyond(4, 1, 0.0);
  for (std::size_t i = 0; i < 4; ++i) beyond[i] = 1.101 * gt.metres[i];
  CHECK(pct_within_10(beyond, gt) == 0.0);
}

TEST_CASE("undefined estimates count as incorrect", "[eval]") {
  DepthImage gt = ones(4, 1);
  Raster<double> est(4, 1, 1.0);
  Mask est_valid(4, 1, 1);
  est_valid[3] = 0;
  CHECK(pct_within_10(est, &est_valid, gt) == 75.0);

  // holes in the ground truth shrink the denominator instead
  gt.valid[3] = 0;
  CHECK(pct_within_10(est, &est_valid, gt) == 100.0);
}

TEST_CASE("metric error conditions", "[eval]") {
  DepthImage gt = ones(3, 1);
  Raster<double> wrong(4, 1, 1.0);
  CHECK_THROWS_AS(pct_within_10(wrong, gt), Error);

  DepthImage holes = ones(3, 1);
  holes.valid.fill(0);
  Raster<double> est(3, 1, 1.0);
  try {
    pct_within_10(est, holes);
    FAIL("expected NoValidGroundTruth");
  } catch (const Error& e) {
    CHECK(e.code() == Err::NoValidGroundTruth);
  }
}

TEST_CASE("metric is invariant to joint pixel permutation", "[eval]") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.5, 3.0);
  const int n = 24;
  DepthImage gt{Raster<double>(n, 1, 0.0), Mask(n, 1, 1)};
  Raster<double> est(n, 1, 0.0);
  for (int i = 0; i < n; ++i) {
    gt.metres[i] = u(rng);
    est[i] = gt.metres[i] * u(rng);
  }
  const double base = pct_within_10(est, gt);

  std::vector<int> perm(n);
  for (int i = 0; i < n; ++i) perm[i] = i;
  std::shuffle(perm.begin(), perm.end(), rng);
  DepthImage gt2{Raster<double>(n, 1, 0.0), Mask(n, 1, 1)};
  Raster<double> est2(n, 1, 0.0);
  for (int i = 0; i < n; ++i) {
    gt2.metres[i] = gt.metres[perm[i]];
    est2[i] = est[perm[i]];
  }
  CHECK(pct_within_10(est2, gt2) == base);
}

TEST_CASE("adding correct pixels never lowers the score", "[eval]") {
  DepthImage gt = ones(6, 1);
  Raster<double> est(6, 1, 2.0);  // all incorrect
  Mask valid(6, 1, 1);
  double prev = pct_within_10(est, &valid, gt);
  for (int i = 0; i < 6; ++i) {
    est[i] = 1.0;  // flip one pixel to correct
    const double now = pct_within_10(est, &valid, gt);
    CHECK(now >= prev);
    prev = now;
  }
  CHECK(prev == 100.0);
}

TEST_CASE("metric detects a global scale error", "[eval]") {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(0.5, 4.0);
  DepthImage gt{Raster<double>(32, 1, 0.0), Mask(32, 1, 1)};
  for (std::size_t i = 0; i < 32; ++i) gt.metres[i] = u(rng);
  for (double alpha : {0.85, 1.2, 2.0}) {
    Raster<double> est(32, 1, 0.0);
    for (std::size_t i = 0; i < 32; ++i) est[i] = alpha * gt.metres[i];
    CHECK(pct_within_10(est, gt) == 0.0);
  }
  Raster<double> good(32, 1, 0.0);
  for (std::size_t i = 0; i < 32; ++i) good[i] = 1.05 * gt.metres[i];
  CHECK(pct_within_10(good, gt) == 100.0);
}

TEST_CASE("mode comparison reports means and win counts", "[eval]") {
  std::vector<KeyframeScore> scores;
  auto add = [&](const char* mode, int kf, double pct) {
    scores.push_back({"seq", kf, mode, pct, 100, 0.05});
  };
  add("full", 0, 20.0);
  add("full", 1, 30.0);
  add("nopairwise", 0, 15.0);
  add("nopairwise", 1, 25.0);
  const ModeComparison cmp = compare_modes(scores);
  REQUIRE(cmp.sequences.size() == 1);
  CHECK(cmp.sequences[0].mean_pct.at("full") == Catch::Approx(25.0));
  CHECK(cmp.sequences[0].mean_pct.at("nopairwise") == Catch::Approx(20.0));
  REQUIRE(cmp.pairs.size() == 1);
  CHECK(cmp.pairs[0].mode_a == "full");
  CHECK(cmp.pairs[0].wins_a == 2);
  CHECK(cmp.pairs[0].wins_b == 0);
  CHECK(cmp.pairs[0].ties == 0);

  // identical sets tie everywhere
  std::vector<KeyframeScore> same;
  same.push_back({"seq", 0, "full", 10.0, 1, 0.0});
  same.push_back({"seq", 0, "lsscale", 10.0, 1, 0.0});
  const ModeComparison tie = compare_modes(same);
  CHECK(tie.pairs[0].ties == 1);

  scores.pop_back();  // nopairwise now missing keyframe 1
  CHECK_THROWS_AS(compare_modes(scores), Error);
}

TEST_CASE("CSV report round trip and ordering", "[eval]") {
  const fs::path path = fs::temp_directory_path() / "dfuse_test_report.csv";
  std::vector<KeyframeScore> scores;
  scores.push_back({"seq", 1, "nopairwise", 23.456789012345678, 4096, 0.123456789});
  scores.push_back({"seq", 0, "full", 31.0 / 3.0, 100, 0.0});
  scores.push_back({"seq", 1, "full", 99.5, 4096, 1e-7});
  scores.push_back({"seq", 0, "nopairwise", 7.25, 100, 0.5});
  write_report(scores, path.string());

  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  CHECK(line == kReportHeader);
  std::getline(in, line);
  CHECK(line.rfind("seq,0,full,", 0) == 0);  // (sequence, keyframe, mode) order
  std::getline(in, line);
  CHECK(line.rfind("seq,0,nopairwise,", 0) == 0);

  const std::vector<KeyframeScore> back = read_report(path.string());
  REQUIRE(back.size() == 4);
  for (const auto& s : back) {
    const auto match = std::find_if(scores.begin(), scores.end(), [&](const KeyframeScore& o) {
      return o.keyframe == s.keyframe && o.mode == s.mode;
    });
    REQUIRE(match != scores.end());
    CHECK(s.pct_correct == match->pct_correct);  // exact through %.17g
    CHECK(s.n_evaluated == match->n_evaluated);
    CHECK(s.median_abs_rel == match->median_abs_rel);
  }
  fs::remove(path);
}

TEST_CASE("empty report is just the header", "[eval]") {
  const fs::path path = fs::temp_directory_path() / "dfuse_test_empty.csv";
  write_report({}, path.string());
  std::ifstream in(path);
  std::string all((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  CHECK(all == std::string(kReportHeader) + "\n");
  CHECK(read_report(path.string()).empty());
  fs::remove(path);
}

TEST_CASE("depth image export", "[eval]") {
  const fs::path path = fs::temp_directory_path() / "dfuse_test_export.png";
  FusionState state;
  state.log_depth = Raster<double>(3, 1, 0.0);
  state.log_depth[0] = std::log(1.0);
  state.log_depth[1] = std::log(20.0);  // saturates
  state.log_depth[2] = std::log(2.5);
  export_depth_image(state, path.string());

  const DepthImage back = load_depth_png(path.string());
  CHECK(back.metres[0] == Catch::Approx(1.0));
  CHECK(back.metres[1] == Catch::Approx(65535.0 / 5000.0));
  CHECK(back.metres[2] == Catch::Approx(2.5).margin(1.0 / 5000.0));
  fs::remove(path);
}

TEST_CASE("median absolute relative error", "[eval]") {
  DepthImage gt = ones(5, 1);
  Raster<double> est(5, 1, 1.0);
  est[0] = 1.01;
  est[1] = 1.02;
  est[2] = 1.03;
  est[3] = 1.10;
  est[4] = 0.5;
  CHECK(median_abs_rel(est, nullptr, gt) == Catch::Approx(0.03).margin(1e-12));
}
