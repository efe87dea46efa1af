#include <gtest/gtest.h>

#include <Eigen/Eigenvalues>

#include "gsdyn/png.hpp"
#include "gsdyn/renderer.hpp"
#include "support.hpp"

namespace gsdyn {
namespace {

using testing::Gen;

CameraModel small_camera() {
  CameraModel cam;
  cam.fx = cam.fy = 100.0;
  cam.width = 32;
  cam.height = 24;
  cam.cx = 16.0;
  cam.cy = 12.0;
  return cam;
}

GaussianCloud single(const Vec3& center, const Rgb& color, double opacity, double scale = 0.01) {
  GaussianCloud c;
  c.centers = {center};
  c.rotations = {UnitQuat::identity()};
  c.scales = {Vec3::Constant(scale)};
  c.colors = {color};
  c.opacities = {opacity};
  return c;
}

void append(GaussianCloud& to, const GaussianCloud& from) {
  to.centers.insert(to.centers.end(), from.centers.begin(), from.centers.end());
  to.rotations.insert(to.rotations.end(), from.rotations.begin(), from.rotations.end());
  to.scales.insert(to.scales.end(), from.scales.begin(), from.scales.end());
  to.colors.insert(to.colors.end(), from.colors.begin(), from.colors.end());
  to.opacities.insert(to.opacities.end(), from.opacities.begin(), from.opacities.end());
}

TEST(ProjectCovariance, IsotropicOnAxis) {
  const double sigma = 0.02, z = 1.5, f = 400.0;
  const Mat3 cov = sigma * sigma * Mat3::Identity();
  const Mat2 out = project_covariance(cov, RigidTransform::identity(), projection_jacobian(Vec3(0, 0, z), f, f));
  const double expect = (f * sigma / z) * (f * sigma / z);
  EXPECT_NEAR(out(0, 0), expect, 1e-9);
  EXPECT_NEAR(out(1, 1), expect, 1e-9);
  EXPECT_NEAR(out(0, 1), 0.0, 1e-9);
}

TEST(ProjectCovariance, DoublingDepthHalvesSpread) {
  Gen g(1);
  const Mat3 r = g.rotation().matrix();
  const Mat3 cov = r * Vec3(0.01, 0.02, 0.005).cwiseAbs2().asDiagonal() * r.transpose();
  const Mat2 near = project_covariance(cov, RigidTransform::identity(), projection_jacobian(Vec3(0, 0, 1.0), 300, 300));
  const Mat2 far = project_covariance(cov, RigidTransform::identity(), projection_jacobian(Vec3(0, 0, 2.0), 300, 300));
  EXPECT_NEAR(std::sqrt(far(0, 0)), 0.5 * std::sqrt(near(0, 0)), 1e-9);
  EXPECT_NEAR(std::sqrt(far(1, 1)), 0.5 * std::sqrt(near(1, 1)), 1e-9);
}

TEST(ProjectCovariance, PropertyRotationKeepsEigenvaluesAndPsd) {
  Gen g(2);
  for (int trial = 0; trial < 100; ++trial) {
    const Vec3 s = g.vec(0.001, 0.05);
    const Mat3 base = s.cwiseAbs2().asDiagonal();
    const Mat3 r = g.rotation().matrix();
    const Mat3 rotated = r * base * r.transpose();
    Eigen::SelfAdjointEigenSolver<Mat3> e0(base), e1(rotated);
    EXPECT_LT((e0.eigenvalues() - e1.eigenvalues()).cwiseAbs().maxCoeff(), 1e-12);
    RigidTransform view;
    view.rotation = g.rotation().matrix();
    const Vec3 c(g.uniform(-0.2, 0.2), g.uniform(-0.2, 0.2), g.uniform(0.5, 2.0));
    const Mat2 out = project_covariance(rotated, view, projection_jacobian(c, 200, 210));
    EXPECT_EQ(out(0, 1), out(1, 0));
    EXPECT_GE(out.determinant(), -1e-18);
    EXPECT_GE(out.trace(), 0.0);
  }
}

TEST(Render, SingleOpaqueGaussianShowsItsColor) {
  const auto cam = small_camera();
  const Rgb color(0.2, 0.7, 0.4);
  const auto f = render(single(Vec3(0, 0, 1), color, 1.0), cam);
  EXPECT_LT((f.color(16, 12) - color).cwiseAbs().maxCoeff(), 1e-6);
  EXPECT_NEAR(f.alpha_at(16, 12), 1.0, 1e-12);
  EXPECT_NEAR(f.depth[12 * 32 + 16], 1.0, 1e-12);
}

TEST(Render, TwoCoincidentGaussiansComposite) {
  const auto cam = small_camera();
  auto cloud = single(Vec3(0, 0, 1.001), Rgb(0, 0, 1), 1.0);
  append(cloud, single(Vec3(0, 0, 1.0), Rgb(1, 0, 0), 0.6));
  const auto f = render(cloud, cam);
  EXPECT_LT((f.color(16, 12) - Rgb(0.6, 0, 0.4)).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Render, EmptyRegionIsBackground) {
  const auto cam = small_camera();
  RenderOptions opt;
  opt.background = Rgb(0.1, 0.2, 0.3);
  const auto f = render(single(Vec3(0, 0, 1), Rgb(1, 1, 1), 1.0), cam, opt);
  EXPECT_EQ(f.alpha_at(0, 0), 0.0);
  EXPECT_TRUE(f.color(0, 0) == opt.background);
  EXPECT_TRUE(std::isinf(f.depth[0]));
}

TEST(Render, BehindCameraIsCulled) {
  RenderStats stats;
  const auto f = render(single(Vec3(0, 0, -1), Rgb(1, 1, 1), 1.0), small_camera(), {}, &stats);
  EXPECT_EQ(stats.culled, 1u);
  for (double a : f.alpha) EXPECT_EQ(a, 0.0);
}

TEST(Render, DegenerateFootprintIsCounted) {
  RenderStats stats;
  render(single(Vec3(0, 0, 1), Rgb(1, 1, 1), 1.0, 1e-200), small_camera(), {}, &stats);
  EXPECT_EQ(stats.singular, 1u);
}

GaussianCloud random_scene(Gen& g, std::size_t n) {
  GaussianCloud c;
  for (std::size_t i = 0; i < n; ++i)
    append(c, single(Vec3(g.uniform(-0.1, 0.1), g.uniform(-0.08, 0.08), g.uniform(0.8, 1.2)), g.vec(0, 1),
                     g.uniform(0.05, 1.0), g.uniform(0.003, 0.02)));
  return c;
}

TEST(Render, PropertyOrderIndependentAndBounded) {
  Gen g(3);
  const auto cam = small_camera();
  for (int trial = 0; trial < 20; ++trial) {
    const auto cloud = random_scene(g, 12);
    GaussianCloud shuffled;
    std::vector<std::size_t> order(cloud.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), g.engine());
    for (auto i : order)
      append(shuffled, single(cloud.centers[i], cloud.colors[i], cloud.opacities[i], cloud.scales[i].x()));
    const auto a = render(cloud, cam);
    const auto b = render(shuffled, cam);
    EXPECT_EQ(a.rgb, b.rgb);
    EXPECT_EQ(a.alpha, b.alpha);
    RenderOptions black;
    black.background = Rgb::Zero();
    const auto white_only = render(
        [&] {
          auto w = cloud;
          for (auto& c : w.colors) c = Rgb::Ones();
          return w;
        }(),
        cam, black);
    // With white splats on black, each channel equals the total compositing weight.
    for (std::size_t p = 0; p < white_only.alpha.size(); ++p) {
      EXPECT_LE(white_only.rgb[3 * p], 1.0 + 1e-12);
      EXPECT_NEAR(white_only.rgb[3 * p], white_only.alpha[p], 1e-12);
    }
  }
}

TEST(Render, PropertyAddingGaussianNeverLowersAlpha) {
  Gen g(4);
  const auto cam = small_camera();
  for (int trial = 0; trial < 20; ++trial) {
    auto cloud = random_scene(g, 8);
    const auto before = render(cloud, cam);
    append(cloud, random_scene(g, 1));
    const auto after = render(cloud, cam);
    for (std::size_t p = 0; p < before.alpha.size(); ++p) EXPECT_GE(after.alpha[p], before.alpha[p]);
  }
}

TEST(Render, SilhouetteMatchesFootprint) {
  Gen g(5);
  const auto cam = small_camera();
  const auto cloud = random_scene(g, 6);
  const auto f = render(cloud, cam);
  for (int v = 0; v < cam.height; ++v)
    for (int u = 0; u < cam.width; ++u) {
      bool covered = false;
      for (std::size_t i = 0; i < cloud.size(); ++i) {
        const Vec3 c = cam.to_camera(cloud.centers[i]);
        const Mat2 cov = project_covariance(cloud.covariance(i), cam.world_to_camera,
                                            projection_jacobian(c, cam.fx, cam.fy));
        const Vec2 d = Vec2(u, v) - *cam.project(cloud.centers[i]);
        covered = covered || d.dot(cov.inverse() * d) <= 9.0;
      }
      EXPECT_EQ(f.alpha_at(u, v) > 0.0, covered) << u << "," << v;
    }
}

TEST(Png, WritesFiles) {
  const auto dir = testing::scratch_dir("png");
  const auto f = render(single(Vec3(0, 0, 1), Rgb(1, 0, 0), 1.0), small_camera());
  write_png(dir / "a.png", f);
  write_alpha_png(dir / "b.png", f);
  const auto bytes = testing::read_file(dir / "a.png");
  ASSERT_GT(bytes.size(), 8u);
  EXPECT_EQ(bytes.substr(1, 3), "PNG");
  EXPECT_THROW(write_png(dir / "missing" / "x.png", f), Error);
}

}  // namespace
}  // namespace gsdyn
