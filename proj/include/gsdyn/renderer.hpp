#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <vector>

#include "gsdyn/camera.hpp"
#include "gsdyn/gaussians.hpp"

namespace gsdyn {

struct RenderedFrame {
  int width = 0, height = 0;
  std::vector<double> rgb;    // row-major, 3 per pixel
  std::vector<double> alpha;  // 1 - final transmittance
  std::vector<double> depth;  // camera z of the nearest contributing Gaussian, +inf if none

  Rgb color(int u, int v) const {
    const std::size_t k = 3 * (static_cast<std::size_t>(v) * width + u);
    return {rgb[k], rgb[k + 1], rgb[k + 2]};
  }
  double alpha_at(int u, int v) const { return alpha[static_cast<std::size_t>(v) * width + u]; }
};

struct RenderOptions {
  Rgb background{0.5, 0.5, 0.5};
  double cutoff_sigma = 3.0;  // footprint truncation in Mahalanobis units
};

/// Pinhole Jacobian of the perspective map at camera-space point c.
inline Eigen::Matrix<double, 2, 3> projection_jacobian(const Vec3& c, double fx, double fy) {
  Eigen::Matrix<double, 2, 3> j;
  const double iz = 1.0 / c.z();
  j << fx * iz, 0.0, -fx * c.x() * iz * iz, 0.0, fy * iz, -fy * c.y() * iz * iz;
  return j;
}

/// Screen-space covariance J W Sigma W^T J^T (W is the rotation part of the view).
inline Mat2 project_covariance(const Mat3& sigma, const RigidTransform& view, const Eigen::Matrix<double, 2, 3>& jac) {
  const Eigen::Matrix<double, 2, 3> jw = jac * view.rotation;
  Mat2 out = jw * sigma * jw.transpose();
  out(0, 1) = out(1, 0) = 0.5 * (out(0, 1) + out(1, 0));
  return out;
}

struct RenderStats {
  std::size_t culled = 0;
  std::size_t singular = 0;
};

/// Splats the cloud front to back. Gaussians are globally sorted by camera z
/// (ties by index); each pixel composites C = sum c_i a_i prod_{j<i} (1 - a_j)
/// with a_i = opacity_i * exp(-0.5 d^T Sigma'^-1 d), truncated at cutoff_sigma.
inline RenderedFrame render(const GaussianCloud& cloud, const CameraModel& camera, const RenderOptions& opt = {},
                            RenderStats* stats = nullptr) {
  cloud.validate();
  camera.validate();
  struct Splat {
    std::size_t index;
    double depth;
    Vec2 center;
    Mat2 inv_cov;
    int u0, u1, v0, v1;
  };
  RenderStats local;
  std::vector<Splat> splats;
  splats.reserve(cloud.size());
  const double cut2 = opt.cutoff_sigma * opt.cutoff_sigma;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const Vec3 c = camera.to_camera(cloud.centers[i]);
    if (c.z() <= camera.near_plane) {
      ++local.culled;
      continue;
    }
    const Mat2 cov = project_covariance(cloud.covariance(i), camera.world_to_camera,
                                        projection_jacobian(c, camera.fx, camera.fy));
    const double det = cov.determinant();
    if (!(det > 1e-300) || !std::isfinite(det)) {
      ++local.singular;
      continue;
    }
    Splat s;
    s.index = i;
    s.depth = c.z();
    s.center = Vec2(camera.fx * c.x() / c.z() + camera.cx, camera.fy * c.y() / c.z() + camera.cy);
    s.inv_cov = cov.inverse();
    // Axis-aligned bound of the cutoff ellipse.
    const double ru = opt.cutoff_sigma * std::sqrt(cov(0, 0));
    const double rv = opt.cutoff_sigma * std::sqrt(cov(1, 1));
    s.u0 = std::max(0, static_cast<int>(std::ceil(s.center.x() - ru)));
    s.u1 = std::min(camera.width - 1, static_cast<int>(std::floor(s.center.x() + ru)));
    s.v0 = std::max(0, static_cast<int>(std::ceil(s.center.y() - rv)));
    s.v1 = std::min(camera.height - 1, static_cast<int>(std::floor(s.center.y() + rv)));
    if (s.u0 > s.u1 || s.v0 > s.v1) continue;
    splats.push_back(s);
  }
  std::sort(splats.begin(), splats.end(), [](const Splat& a, const Splat& b) {
    return a.depth < b.depth || (a.depth == b.depth && a.index < b.index);
  });

  const std::size_t npix = static_cast<std::size_t>(camera.width) * camera.height;
  RenderedFrame f;
  f.width = camera.width;
  f.height = camera.height;
  f.rgb.assign(3 * npix, 0.0);
  f.alpha.assign(npix, 0.0);
  f.depth.assign(npix, std::numeric_limits<double>::infinity());
  std::vector<double> transmittance(npix, 1.0);
  for (const auto& s : splats) {
    const Rgb& col = cloud.colors[s.index];
    const double opacity = cloud.opacities[s.index];
    for (int v = s.v0; v <= s.v1; ++v) {
      for (int u = s.u0; u <= s.u1; ++u) {
        const Vec2 d = Vec2(u, v) - s.center;
        const double m = d.dot(s.inv_cov * d);
        if (m > cut2) continue;
        const std::size_t p = static_cast<std::size_t>(v) * camera.width + u;
        const double a = opacity * std::exp(-0.5 * m);
        const double w = a * transmittance[p];
        f.rgb[3 * p] += w * col(0);
        f.rgb[3 * p + 1] += w * col(1);
        f.rgb[3 * p + 2] += w * col(2);
        if (f.depth[p] == std::numeric_limits<double>::infinity()) f.depth[p] = s.depth;
        transmittance[p] *= 1.0 - a;
      }
    }
  }
  for (std::size_t p = 0; p < npix; ++p) {
    f.alpha[p] = 1.0 - transmittance[p];
    for (int c = 0; c < 3; ++c) f.rgb[3 * p + c] += transmittance[p] * opt.background(c);
  }
  if (stats) *stats = local;
  return f;
}

}  // namespace gsdyn
