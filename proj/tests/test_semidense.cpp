#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <random>

#include "dfuse/semidense.hpp"
#include "support/synthetic.hpp"

using namespace dfuse;
using testing::PlaneScene;
using testing::render_view;

namespace {

PlaneScene fronto_scene(double focal) {
  PlaneScene scene;
  scene.camera = CameraIntrinsics{focal, focal, 127.5, 95.5, 256, 192};
  scene.ax = 0.0;
  scene.ay = 0.0;
  scene.env_gain = 10.0;  // texture everywhere
  scene.env_bias = 0.5;
  return scene;
}

Pose translated(double x, double y = 0.0, double z = 0.0) {
  Pose p;
  p.translation = Eigen::Vector3d(x, y, z);
  return p;
}

/// Strongest-gradient pixel in the central region, away from borders.
PixelCoord strong_pixel(const IntensityImage& img) {
  const Raster<float>& v = img.raster();
  double best = -1.0;
  PixelCoord out{64, 64};
  for (int y = 20; y < img.height() - 20; ++y)
    for (int x = 20; x < img.width() - 20; ++x) {
      const double gx = 0.5 * (v.at(x + 1, y) - v.at(x - 1, y));
      const double gy = 0.5 * (v.at(x, y + 1) - v.at(x, y - 1));
      if (gx * gx + gy * gy > best) {
        best = gx * gx + gy * gy;
        out = {static_cast<double>(x), static_cast<double>(y)};
      }
    }
  return out;
}

}  // namespace

TEST_CASE("texture mask on a constant image is empty", "[semidense]") {
  IntensityImage img(32, 24, 0.5f);
  const Mask mask = texture_mask(img, 0.02);
  for (std::size_t i = 0; i < mask.size(); ++i) CHECK(mask[i] == 0);
}

TEST_CASE("texture mask flags the two columns adjacent to a step edge", "[semidense]") {
  IntensityImage img(16, 8, 0.0f);
  for (int y = 0; y < 8; ++y)
    for (int x = 8; x < 16; ++x) img.raster().at(x, y) = 0.5f;
  const Mask mask = texture_mask(img, 0.1);
  for (int y = 1; y < 7; ++y) {
    for (int x = 1; x < 15; ++x) {
      const bool expected = (x == 7 || x == 8);  // central differences reach 0.25 there
      CHECK(static_cast<bool>(mask.at(x, y)) == expected);
    }
  }
  // border rows stay false
  for (int x = 0; x < 16; ++x) {
    CHECK(mask.at(x, 0) == 0);
    CHECK(mask.at(x, 7) == 0);
  }
}

TEST_CASE("texture mask rejects a non-positive threshold", "[semidense]") {
  IntensityImage img(8, 8, 0.0f);
  CHECK_THROWS_AS(texture_mask(img, 0.0), Error);
}

TEST_CASE("photometric error vanishes for identical views", "[semidense]") {
  const PlaneScene scene = fronto_scene(200.0);
  const auto view = render_view(scene, Pose::identity());
  std::array<double, 5> e{};
  const auto status = photometric_error_5pt(view.intensity, view.intensity, {100.5, 80.25}, 1.7,
                                            Pose::identity(), Pose::identity(), scene.camera, e);
  REQUIRE(status == EpipolarStatus::Ok);
  for (double v : e) CHECK(std::abs(v) < 1e-12);  // zero up to projection round-trip rounding
}

TEST_CASE("photometric error against a rendered second view", "[semidense]") {
  // Fronto-parallel plane at z=2, baseline 0.1 along x, fx=200: disparity is
  // exactly 10 px, so reprojections at the true depth land on pixel centres
  // and the residual is interpolation-free.
  const PlaneScene scene = fronto_scene(200.0);
  const Pose T0 = Pose::identity();
  const Pose T1 = translated(0.1);
  const auto I0 = render_view(scene, T0);
  const auto I1 = render_view(scene, T1);
  PixelCoord x = strong_pixel(I0.intensity);

  std::array<double, 5> e{};
  REQUIRE(photometric_error_5pt(I0.intensity, I1.intensity, x, 2.0, T0, T1, scene.camera, e) ==
          EpipolarStatus::Ok);
  for (double v : e) CHECK(std::abs(v) < 1e-3);

  REQUIRE(photometric_error_5pt(I0.intensity, I1.intensity, x, 2.5, T0, T1, scene.camera, e) ==
          EpipolarStatus::Ok);
  double max_abs = 0.0;
  for (double v : e) max_abs = std::max(max_abs, std::abs(v));
  CHECK(max_abs > 0.01);
}

TEST_CASE("search rejects a zero baseline", "[semidense]") {
  const PlaneScene scene = fronto_scene(200.0);
  const auto view = render_view(scene, Pose::identity());
  const auto r = search_depth(view.intensity, view.intensity, {100, 90}, std::nullopt,
                              Pose::identity(), Pose::identity(), scene.camera);
  CHECK(r.status == EpipolarStatus::DegenerateBaseline);
}

TEST_CASE("search recovers the depth of a fronto-parallel plane", "[semidense]") {
  const PlaneScene scene = fronto_scene(100.0);
  const Pose T0 = Pose::identity();
  const Pose T1 = translated(0.1);
  const auto I0 = render_view(scene, T0);
  const auto I1 = render_view(scene, T1);

  SearchConfig cfg{1.0, 4.0};
  const PixelCoord x = strong_pixel(I0.intensity);
  const auto r = search_depth(I0.intensity, I1.intensity, x, std::nullopt, T0, T1, scene.camera,
                              cfg);
  REQUIRE(r.ok());
  CHECK(r.obs.depth > 1.95);
  CHECK(r.obs.depth < 2.05);
  CHECK(r.obs.variance > 0.0);
}

TEST_CASE("prior limits the search segment to d +- 2 sigma", "[semidense]") {
  const PlaneScene scene = fronto_scene(100.0);
  const Pose T0 = Pose::identity();
  const Pose T1 = translated(0.1);
  const EpipolarGeometry g = make_epipolar_geometry(T0, T1, scene.camera);
  const PixelCoord x{140.0, 100.0};

  const auto seg = epipolar_segment(g, x, 1.8, 2.2);
  REQUIRE(seg.has_value());
  // independent route: geometry-module composition
  const Pose T10 = compose(T1.inverse(), T0);
  for (const auto& [d, expected] : {std::pair{1.8, seg->first}, std::pair{2.2, seg->second}}) {
    const auto reproj = project(scene.camera, transform(T10, backproject(x, d, scene.camera)));
    REQUIRE(reproj.has_value());
    CHECK(std::abs(reproj->x - expected.x) < 1e-10);
    CHECK(std::abs(reproj->y - expected.y) < 1e-10);
  }

  // at this focal length the +-2 sigma window projects to barely one pixel,
  // which the search treats as degenerate
  const auto I0 = render_view(scene, T0);
  const auto I1 = render_view(scene, T1);
  const auto short_seg = search_depth(I0.intensity, I1.intensity, strong_pixel(I0.intensity),
                                      DepthPrior{2.0, 0.1}, T0, T1, scene.camera);
  CHECK(short_seg.status == EpipolarStatus::DegenerateBaseline);

  // a wider baseline makes the same window searchable
  const Pose T1_wide = translated(0.25);
  const auto I1_wide = render_view(scene, T1_wide);
  const auto r = search_depth(I0.intensity, I1_wide.intensity, strong_pixel(I0.intensity),
                              DepthPrior{2.0, 0.1}, T0, T1_wide, scene.camera);
  REQUIRE(r.ok());
  CHECK(r.obs.depth > 1.8 - 0.05);
  CHECK(r.obs.depth < 2.2 + 0.05);
}

TEST_CASE("finite-difference jacobian", "[semidense]") {
  const std::array<double, 5> e{0.1, 0.1, 0.1, 0.1, 0.1};
  const auto zero = jacobian_fd(e, e, 1.0, 2.0);
  for (double v : zero) CHECK(v == 0.0);

  std::array<double, 5> hi{};
  for (int i = 0; i < 5; ++i) hi[i] = e[i] + 0.1;
  const auto J = jacobian_fd(e, hi, 2.0, 2.05);
  for (double v : J) CHECK(v == Catch::Approx(2.0));

  CHECK_THROWS_AS(jacobian_fd(e, hi, 2.0, 2.0), Error);
}

TEST_CASE("observation variance from the jacobian", "[semidense]") {
  CHECK(observation_variance({1, 1, 1, 1, 1}) == Catch::Approx(0.2));
  CHECK(observation_variance({2, 0, 0, 0, 0}) == Catch::Approx(0.25));
  CHECK(observation_variance({0, 0, 0, 0, 0}) < 0.0);  // degenerate
  // doubling the jacobian quarters the variance, so sharper texture can
  // never increase it
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int i = 0; i < 100; ++i) {
    std::array<double, 5> J{u(rng), u(rng), u(rng), u(rng), u(rng)};
    std::array<double, 5> J2 = J;
    for (double& v : J2) v *= 2.0;
    const double var = observation_variance(J);
    if (var <= 0.0) continue;
    CHECK(observation_variance(J2) == Catch::Approx(var / 4.0));
  }
}

TEST_CASE("semi-dense update installs, fuses and gates", "[semidense]") {
  SemiDenseMap map = SemiDenseMap::empty(8, 6);
  map = update_semidense(std::move(map), {{{2, 3}, 2.0, {}, {}, 0.04}});
  CHECK(map.inlier_count == 1);
  CHECK(map.depth.at(2, 3) == 2.0);
  CHECK(map.variance.at(2, 3) == 0.04);

  map = update_semidense(std::move(map), {{{2, 3}, 2.2, {}, {}, 0.04}});
  CHECK(map.depth.at(2, 3) == Catch::Approx(2.1));
  CHECK(map.variance.at(2, 3) == Catch::Approx(0.02));
  CHECK(map.inlier_count == 1);

  SemiDenseMap gate = SemiDenseMap::empty(8, 6);
  gate = update_semidense(std::move(gate), {{{1, 1}, 2.0, {}, {}, 0.0001}});
  gate = update_semidense(std::move(gate), {{{1, 1}, 10.0, {}, {}, 0.04}});
  CHECK(gate.depth.at(1, 1) == 2.0);
  CHECK(gate.variance.at(1, 1) == 0.0001);
}

TEST_CASE("fused variance never exceeds either source", "[semidense]") {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> ud(0.5, 5.0);
  std::uniform_real_distribution<double> uv(1e-4, 1e-1);
  for (int i = 0; i < 200; ++i) {
    SemiDenseMap map = SemiDenseMap::empty(2, 2);
    const double d0 = ud(rng), v0 = uv(rng);
    map = update_semidense(std::move(map), {{{0, 0}, d0, {}, {}, v0}});
    const double d1 = d0 + 0.1 * std::sqrt(v0), v1 = uv(rng);  // inside the gate
    map = update_semidense(std::move(map), {{{0, 0}, d1, {}, {}, v1}});
    CHECK(map.variance.at(0, 0) <= std::min(v0, v1) + 1e-15);
  }
}

TEST_CASE("keyframe policy", "[semidense]") {
  SemiDenseMap map = SemiDenseMap::empty(4, 4);
  map.inlier_count = 500;
  KeyframePolicy policy{0.1, 100};

  CHECK_FALSE(should_create_keyframe(Pose::identity(), Pose::identity(), 2.0, map, policy));

  // translation ratio 0.2 over threshold 0.1
  CHECK(should_create_keyframe(Pose::identity(), translated(0.4), 2.0, map, policy));

  map.inlier_count = 0;
  CHECK(should_create_keyframe(Pose::identity(), Pose::identity(), 2.0, map, policy));

  // monotone in baseline
  KeyframePolicy p2{0.1, 0};
  map.inlier_count = 10;
  bool triggered = false;
  for (double t = 0.0; t < 1.0; t += 0.05) {
    const bool now = should_create_keyframe(Pose::identity(), translated(t), 2.0, map, p2);
    if (triggered) CHECK(now);
    triggered = triggered || now;
  }
  CHECK(triggered);
}

TEST_CASE("two-view coverage and accuracy on a slanted plane", "[semidense]") {
  PlaneScene scene;  // slanted, patchy texture
  scene.camera = CameraIntrinsics{200.0, 200.0, 127.5, 95.5, 256, 192};
  const Pose T0 = Pose::identity();
  const Pose T1 = translated(0.15, 0.002);
  const auto I0 = render_view(scene, T0);
  const auto I1 = render_view(scene, T1);
  const Mask mask = texture_mask(I0.intensity, 0.02);
  const EpipolarGeometry g = make_epipolar_geometry(T0, T1, scene.camera);
  SearchConfig cfg{1.2, 3.5};

  std::size_t n_mask = 0, n_valid = 0;
  std::vector<double> rel_errors;
  for (int y = 0; y < scene.camera.height; ++y) {
    for (int x = 0; x < scene.camera.width; ++x) {
      if (!mask.at(x, y)) continue;
      ++n_mask;
      const auto r = search_depth(g, I0.intensity, I1.intensity,
                                  {static_cast<double>(x), static_cast<double>(y)}, std::nullopt,
                                  cfg);
      if (!r.ok()) continue;
      ++n_valid;
      const double gt = I0.depth.at(x, y);
      rel_errors.push_back(std::abs(r.obs.depth - gt) / gt);
    }
  }
  REQUIRE(n_mask > 3000);
  CHECK(static_cast<double>(n_valid) / static_cast<double>(n_mask) >= 0.9);
  std::nth_element(rel_errors.begin(), rel_errors.begin() + rel_errors.size() / 2,
                   rel_errors.end());
  CHECK(rel_errors[rel_errors.size() / 2] < 0.02);
}

TEST_CASE("sharper texture never increases the measured variance", "[semidense]") {
  PlaneScene soft = fronto_scene(200.0);
  soft.high_gain = 0.5;
  PlaneScene sharp = soft;
  sharp.high_gain = 1.0;

  const Pose T0 = Pose::identity();
  const Pose T1 = translated(0.12);
  const auto soft0 = render_view(soft, T0), soft1 = render_view(soft, T1);
  const auto sharp0 = render_view(sharp, T0), sharp1 = render_view(sharp, T1);
  const EpipolarGeometry g = make_epipolar_geometry(T0, T1, soft.camera);
  SearchConfig cfg{1.0, 4.0};

  std::vector<double> soft_vars, sharp_vars;
  for (int y = 10; y < 180; y += 7) {
    for (int x = 10; x < 250; x += 7) {
      const PixelCoord p{static_cast<double>(x), static_cast<double>(y)};
      const auto a = search_depth(g, soft0.intensity, soft1.intensity, p, std::nullopt, cfg);
      const auto b = search_depth(g, sharp0.intensity, sharp1.intensity, p, std::nullopt, cfg);
      if (!a.ok() || !b.ok()) continue;
      soft_vars.push_back(a.obs.variance);
      sharp_vars.push_back(b.obs.variance);
    }
  }
  REQUIRE(soft_vars.size() > 50);
  auto median = [](std::vector<double> v) {
    std::nth_element(v.begin(), v.begin() + v.size() / 2, v.end());
    return v[v.size() / 2];
  };
  CHECK(median(sharp_vars) <= median(soft_vars));
}

TEST_CASE("depths scale with the trajectory scale", "[semidense]") {
  PlaneScene scene;
  scene.camera = CameraIntrinsics{200.0, 200.0, 127.5, 95.5, 256, 192};
  const Pose T0 = Pose::identity();
  const double alpha = 0.5;
  const auto I0 = render_view(scene, T0);
  const auto I1 = render_view(scene, translated(0.15));
  const EpipolarGeometry g1 = make_epipolar_geometry(T0, translated(0.15), scene.camera);
  const EpipolarGeometry g2 = make_epipolar_geometry(T0, translated(0.15 * alpha), scene.camera);
  SearchConfig cfg1{1.2, 3.5};
  SearchConfig cfg2{1.2 * alpha, 3.5 * alpha};

  const Mask mask = texture_mask(I0.intensity, 0.02);
  std::size_t both = 0, within = 0;
  for (int y = 5; y < 190; y += 3) {
    for (int x = 5; x < 250; x += 3) {
      if (!mask.at(x, y)) continue;
      const PixelCoord p{static_cast<double>(x), static_cast<double>(y)};
      const auto a = search_depth(g1, I0.intensity, I1.intensity, p, std::nullopt, cfg1);
      const auto b = search_depth(g2, I0.intensity, I1.intensity, p, std::nullopt, cfg2);
      if (!a.ok() || !b.ok()) continue;
      ++both;
      if (std::abs(b.obs.depth - alpha * a.obs.depth) / (alpha * a.obs.depth) < 0.01) ++within;
    }
  }
  REQUIRE(both > 500);
  CHECK(static_cast<double>(within) / static_cast<double>(both) > 0.95);
}
