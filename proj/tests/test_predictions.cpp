#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>

#include "dfuse/predictions.hpp"

using namespace dfuse;
namespace fs = std::filesystem;

namespace {

Raster<double> smooth_gt(int w, int h, std::uint64_t seed = 1) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Raster<double> gt(w, h, 0.0);
  const double phase = u(rng) * 6.28;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      gt.at(x, y) = 2.0 + 0.8 * std::sin(0.13 * x + phase) + 0.5 * std::cos(0.21 * y);
  return gt;
}

fs::path temp_file(const char* name) {
  return fs::temp_directory_path() / name;
}

void patch_bytes(const fs::path& path, std::size_t offset, const void* data, std::size_t n) {
  std::fstream f(path, std::ios::binary | std::ios::in | std::ios::out);
  f.seekp(static_cast<std::streamoff>(offset));
  f.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
}

}  // namespace

TEST_CASE("DFPRED round trip is bit exact", "[predictions]") {
  const PredictionSet p = synth_oracle(smooth_gt(31, 17), 0.25, 0.04, 42, 210.5);
  const fs::path path = temp_file("dfuse_test_roundtrip.dfpred");
  save_predictions(p, path.string());
  const PredictionSet q = load_predictions(path.string());
  CHECK(q.log_depth == p.log_depth);
  CHECK(q.log_depth_var == p.log_depth_var);
  CHECK(q.grad_x == p.grad_x);
  CHECK(q.grad_x_var == p.grad_x_var);
  CHECK(q.grad_y == p.grad_y);
  CHECK(q.grad_y_var == p.grad_y_var);
  CHECK(q.source_focal == p.source_focal);

  // header layout: magic, version, dims, channel count
  std::ifstream in(path, std::ios::binary);
  char head[24];
  in.read(head, 24);
  CHECK(std::string(head, 4) == "DFPR");
  CHECK(head[4] == 1);
  CHECK(static_cast<unsigned char>(head[8]) == 31);
  CHECK(static_cast<unsigned char>(head[12]) == 17);
  CHECK(head[16] == 6);
  fs::remove(path);
}

TEST_CASE("DFPRED loader reports corrupt files", "[predictions]") {
  const PredictionSet p = synth_oracle(smooth_gt(8, 6), 0.1, 0.02, 3, 200.0);
  const fs::path path = temp_file("dfuse_test_corrupt.dfpred");

  save_predictions(p, path.string());
  const char bad_magic[4] = {'X', 'F', 'P', 'R'};
  patch_bytes(path, 0, bad_magic, 4);
  try {
    load_predictions(path.string());
    FAIL("expected BadMagic");
  } catch (const Error& e) {
    CHECK(e.code() == Err::BadMagic);
  }

  save_predictions(p, path.string());
  const float zero = 0.0f;
  const std::size_t n = 8 * 6;
  const std::size_t var_offset = 24 + n * 4 + 5 * 4;  // log_depth_var[5]
  patch_bytes(path, var_offset, &zero, 4);
  try {
    load_predictions(path.string());
    FAIL("expected NonPositiveVariance");
  } catch (const Error& e) {
    CHECK(e.code() == Err::NonPositiveVariance);
    CHECK(std::string(e.what()).find("log_depth_var") != std::string::npos);
    CHECK(std::string(e.what()).find(std::to_string(var_offset)) != std::string::npos);
  }

  save_predictions(p, path.string());
  fs::resize_file(path, 24 + 3 * n * 4 + 10);  // truncate inside grad_x_var
  try {
    load_predictions(path.string());
    FAIL("expected TruncatedFile");
  } catch (const Error& e) {
    CHECK(e.code() == Err::TruncatedFile);
    CHECK(std::string(e.what()).find("grad_x_var") != std::string::npos);
  }
  fs::remove(path);
}

TEST_CASE("focal adjustment shifts log-depths only", "[predictions]") {
  const PredictionSet p = synth_oracle(smooth_gt(12, 9), 0.2, 0.05, 5, 300.0);

  const PredictionSet same = focal_adjust(p, 300.0);
  CHECK(same.log_depth == p.log_depth);
  CHECK(same.source_focal == 300.0);

  const PredictionSet doubled = focal_adjust(p, 600.0);
  for (std::size_t i = 0; i < p.log_depth.size(); ++i)
    CHECK(doubled.log_depth[i] - p.log_depth[i] == Catch::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(doubled.grad_x == p.grad_x);
  CHECK(doubled.grad_y_var == p.grad_y_var);
  CHECK(doubled.source_focal == 600.0);

  // composition: f -> f' -> f'' equals f -> f''
  const PredictionSet ab = focal_adjust(focal_adjust(p, 450.0), 612.0);
  const PredictionSet direct = focal_adjust(p, 612.0);
  for (std::size_t i = 0; i < p.log_depth.size(); ++i)
    CHECK(std::abs(ab.log_depth[i] - direct.log_depth[i]) < 1e-12);

  CHECK_THROWS_AS(focal_adjust(p, 0.0), Error);
  CHECK_THROWS_AS(focal_adjust(p, -2.0), Error);
}

TEST_CASE("noiseless oracle reproduces the ground truth in logspace", "[predictions]") {
  const Raster<double> gt = smooth_gt(20, 15);
  const PredictionSet p = synth_oracle(gt, 0.0, 0.0, 7, 210.0);
  for (std::size_t i = 0; i < gt.size(); ++i) {
    // exact at the declared (float32) file precision
    CHECK(p.log_depth[i] == static_cast<double>(static_cast<float>(std::log(gt[i]))));
  }
  for (int y = 0; y < gt.height(); ++y)
    for (int x = 0; x + 1 < gt.width(); ++x)
      CHECK(p.grad_x.at(x, y) ==
            Catch::Approx(std::log(gt.at(x + 1, y)) - std::log(gt.at(x, y))).margin(1e-6));
  // declared variances stay strictly positive even at zero noise
  for (std::size_t i = 0; i < gt.size(); ++i) {
    CHECK(p.log_depth_var[i] > 0.0);
    CHECK(p.grad_x_var[i] > 0.0);
  }
}

TEST_CASE("oracle noise matches its declared statistics", "[predictions]") {
  const int w = 400, h = 250;  // 1e5 pixels
  const Raster<double> gt = smooth_gt(w, h, 2);
  const double sigma = 0.1;
  const PredictionSet p = synth_oracle(gt, sigma, 0.0, 99, 210.0);
  double sum = 0.0, sum2 = 0.0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const double z = (p.log_depth[i] - std::log(gt[i])) / sigma;
    sum += z;
    sum2 += z * z;
  }
  const double n = static_cast<double>(gt.size());
  const double mean = sum / n;
  const double var = sum2 / n - mean * mean;
  CHECK(mean > -0.01);
  CHECK(mean < 0.01);
  CHECK(var > 0.97);
  CHECK(var < 1.03);
  CHECK(p.log_depth_var[0] == Catch::Approx(sigma * sigma).epsilon(1e-6));
}

TEST_CASE("oracle is deterministic for a fixed seed", "[predictions]") {
  const Raster<double> gt = smooth_gt(16, 12);
  const PredictionSet a = synth_oracle(gt, 0.3, 0.05, 1234, 210.0);
  const PredictionSet b = synth_oracle(gt, 0.3, 0.05, 1234, 210.0);
  CHECK(a.log_depth == b.log_depth);
  CHECK(a.grad_x == b.grad_x);
  CHECK(a.grad_y == b.grad_y);
  const PredictionSet c = synth_oracle(gt, 0.3, 0.05, 1235, 210.0);
  CHECK_FALSE(a.log_depth == c.log_depth);
}

TEST_CASE("miscalibrated oracle scales only the declared variance", "[predictions]") {
  const Raster<double> gt = smooth_gt(10, 8);
  const PredictionSet honest = synth_oracle(gt, 0.2, 0.05, 6, 210.0, 1.0);
  const PredictionSet kappa = synth_oracle(gt, 0.2, 0.05, 6, 210.0, 4.0);
  CHECK(kappa.log_depth == honest.log_depth);
  CHECK(kappa.log_depth_var[0] == Catch::Approx(4.0 * honest.log_depth_var[0]).epsilon(1e-6));
}

TEST_CASE("hole filling uses the nearest valid neighbour in scanline order", "[predictions]") {
  Raster<double> gt(4, 2, 0.0);
  gt.at(1, 0) = 2.0;
  gt.at(3, 0) = 4.0;
  const Raster<double> filled = fill_holes_scanline(gt);
  CHECK(filled.at(0, 0) == 2.0);  // leading hole takes the next valid
  CHECK(filled.at(1, 0) == 2.0);
  CHECK(filled.at(2, 0) == 2.0);  // previous valid
  CHECK(filled.at(3, 0) == 4.0);
  CHECK(filled.at(0, 1) == 4.0);  // carried across rows in scanline order
  CHECK(filled.at(3, 1) == 4.0);

  Raster<double> empty(3, 3, 0.0);
  CHECK_THROWS_AS(fill_holes_scanline(empty), Error);
  CHECK_THROWS_AS(synth_oracle(empty, 0.1, 0.1, 1, 210.0), Error);
}

TEST_CASE("gradient consistency diagnostics", "[predictions]") {
  const Raster<double> gt = smooth_gt(24, 18);
  const PredictionSet clean = synth_oracle(gt, 0.0, 0.0, 1, 210.0);
  CHECK(gradient_consistency_check(clean, 1e-5).fraction_x == 0.0);
  CHECK(gradient_consistency_check(clean, 1e-5).fraction_y == 0.0);

  PredictionSet broken = clean;
  broken.log_depth.fill(0.5);
  broken.grad_x.fill(1.0);
  CHECK(gradient_consistency_check(broken, 0.5).fraction_x == 1.0);

  const PredictionSet noisy = synth_oracle(smooth_gt(400, 250, 3), 0.0, 0.1, 11, 210.0);
  CHECK(gradient_consistency_check(noisy, 1.0).fraction_x < 0.01);
}

TEST_CASE("log-depth gradients are invariant to global depth rescaling", "[predictions]") {
  const Raster<double> gt = smooth_gt(14, 10);
  Raster<double> scaled = gt;
  for (std::size_t i = 0; i < scaled.size(); ++i) scaled[i] *= 5.3;
  const PredictionSet a = synth_oracle(gt, 0.0, 0.0, 4, 210.0);
  const PredictionSet b = synth_oracle(scaled, 0.0, 0.0, 4, 210.0);
  for (std::size_t i = 0; i < a.grad_x.size(); ++i) {
    CHECK(std::abs(a.grad_x[i] - b.grad_x[i]) < 1e-6);
    CHECK(std::abs(a.grad_y[i] - b.grad_y[i]) < 1e-6);
  }
}
