#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "gsdyn/geom.hpp"
#include "gsdyn/io.hpp"

namespace gsdyn {

using Rgb = Eigen::Vector3d;

/// Dense set of 3D Gaussians. Only centers and rotations evolve over time;
/// scales, colors and opacities are fixed per Gaussian.
struct GaussianCloud {
  std::vector<Vec3> centers;
  std::vector<UnitQuat> rotations;
  std::vector<Vec3> scales;
  std::vector<Rgb> colors;
  std::vector<double> opacities;

  std::size_t size() const { return centers.size(); }

  void validate() const {
    const std::size_t n = centers.size();
    if (n == 0) throw Error("GaussianCloud: empty");
    if (rotations.size() != n || scales.size() != n || colors.size() != n || opacities.size() != n)
      throw Error("GaussianCloud: attribute arrays differ in length");
    for (std::size_t i = 0; i < n; ++i) {
      if (!centers[i].allFinite()) throw Error("GaussianCloud: non-finite center at " + std::to_string(i));
      if (!(scales[i].minCoeff() > 0.0) || !scales[i].allFinite())
        throw Error("GaussianCloud: non-positive scale at " + std::to_string(i));
      if (!(opacities[i] >= 0.0 && opacities[i] <= 1.0))
        throw Error("GaussianCloud: opacity outside [0,1] at " + std::to_string(i));
      if (!(colors[i].minCoeff() >= 0.0 && colors[i].maxCoeff() <= 1.0))
        throw Error("GaussianCloud: color outside [0,1] at " + std::to_string(i));
    }
  }

  /// 3x3 covariance R S S^T R^T of Gaussian i.
  Mat3 covariance(std::size_t i) const {
    const Mat3 r = rotations[i].matrix();
    const Mat3 s2 = scales[i].cwiseProduct(scales[i]).asDiagonal();
    return r * s2 * r.transpose();
  }
};

/// Row-normalized sparse N x n weights. Row i lists (vertex, weight) pairs.
struct BlendWeights {
  struct Entry {
    std::size_t vertex;
    double weight;
  };
  std::vector<std::vector<Entry>> rows;
  std::size_t num_vertices = 0;
};

/// Per-control-vertex rigid motion for one timestep.
struct VertexTransforms {
  std::vector<UnitQuat> rotations;
  std::vector<Mat3> matrices;
  std::vector<Vec3> translations;

  std::size_t size() const { return rotations.size(); }

  static VertexTransforms identity(std::size_t n) {
    return {std::vector<UnitQuat>(n), std::vector<Mat3>(n, Mat3::Identity()), std::vector<Vec3>(n, Vec3::Zero())};
  }

  void push_back(const UnitQuat& r, const Vec3& t) {
    rotations.push_back(r);
    matrices.push_back(r.matrix());
    translations.push_back(t);
  }
};

/// Inverse-distance blend weights restricted to the `top_k` nearest vertices.
/// A Gaussian that coincides exactly with a vertex is bound to it alone.
inline BlendWeights blend_weights(std::span<const Vec3> cloud_centers, std::span<const Vec3> vertex_positions,
                                  std::size_t top_k) {
  const std::size_t nv = vertex_positions.size();
  if (nv == 0) throw Error("blend_weights: no control vertices");
  if (top_k == 0 || top_k > nv) top_k = nv;
  BlendWeights out;
  out.num_vertices = nv;
  out.rows.resize(cloud_centers.size());
  std::vector<std::size_t> order(nv);
  std::vector<double> dist(nv);
  for (std::size_t i = 0; i < cloud_centers.size(); ++i) {
    for (std::size_t b = 0; b < nv; ++b) dist[b] = (cloud_centers[i] - vertex_positions[b]).norm();
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(top_k), order.end(),
                      [&](std::size_t a, std::size_t b) { return dist[a] < dist[b] || (dist[a] == dist[b] && a < b); });
    auto& row = out.rows[i];
    if (dist[order[0]] == 0.0) {
      row.push_back({order[0], 1.0});
      continue;
    }
    double total = 0.0;
    for (std::size_t j = 0; j < top_k; ++j) total += 1.0 / dist[order[j]];
    for (std::size_t j = 0; j < top_k; ++j) row.push_back({order[j], (1.0 / dist[order[j]]) / total});
  }
  return out;
}

/// Linear blend skinning of centers and rotations. Centers are updated in the
/// equivalent displacement form mu + sum_b w_b ((R_b - I)(mu - v_b) + T_b),
/// which keeps an all-identity step exact.
inline GaussianCloud apply_lbs(const GaussianCloud& cloud, std::span<const Vec3> vertices_t,
                               const VertexTransforms& transforms, const BlendWeights& weights) {
  const std::size_t n = cloud.size();
  if (weights.rows.size() != n) throw Error("apply_lbs: weight rows do not match the cloud size");
  if (transforms.size() != vertices_t.size() || weights.num_vertices != vertices_t.size())
    throw Error("apply_lbs: vertex count mismatch between weights, transforms and positions");
  GaussianCloud out = cloud;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& row = weights.rows[i];
    double sum = 0.0;
    std::size_t lead = 0;
    for (std::size_t j = 0; j < row.size(); ++j) {
      if (row[j].weight < 0.0) throw Error("apply_lbs: negative blend weight in row " + std::to_string(i));
      sum += row[j].weight;
      if (row[j].weight > row[lead].weight) lead = j;
    }
    if (std::abs(sum - 1.0) > 1e-6) throw Error("apply_lbs: blend weights of row " + std::to_string(i) + " sum to " +
                                                std::to_string(sum) + ", expected 1");
    const Vec3& mu = cloud.centers[i];
    Vec3 delta = Vec3::Zero();
    Eigen::Vector4d qsum = Eigen::Vector4d::Zero();
    const Eigen::Vector4d lead_q = transforms.rotations[row[lead].vertex].eigen().coeffs();
    for (const auto& e : row) {
      const std::size_t b = e.vertex;
      const Vec3 offset = mu - vertices_t[b];
      delta += e.weight * ((transforms.matrices[b] - Mat3::Identity()) * offset + transforms.translations[b]);
      Eigen::Vector4d q = transforms.rotations[b].eigen().coeffs();
      if (q.dot(lead_q) < 0.0) q = -q;
      qsum += e.weight * q;
    }
    out.centers[i] = mu + delta;
    // coeffs() order is (x, y, z, w).
    const UnitQuat blended(qsum(3), qsum(0), qsum(1), qsum(2));
    out.rotations[i] = blended * cloud.rotations[i];
  }
  return out;
}

/// Symmetric neighbor lists of vertices closer than `radius` to each other.
inline std::vector<std::vector<std::size_t>> radius_neighbors(std::span<const Vec3> pts, double radius) {
  std::vector<std::vector<std::size_t>> nb(pts.size());
  for (std::size_t i = 0; i < pts.size(); ++i)
    for (std::size_t j = i + 1; j < pts.size(); ++j)
      if ((pts[i] - pts[j]).norm() < radius) {
        nb[i].push_back(j);
        nb[j].push_back(i);
      }
  return nb;
}

/// Per-vertex rotation from the motion of its neighbors between two frames,
/// and translation equal to the vertex displacement.
inline VertexTransforms vertex_transforms(std::span<const Vec3> from, std::span<const Vec3> to,
                                          const std::vector<std::vector<std::size_t>>& neighbors) {
  if (from.size() != to.size() || neighbors.size() != from.size())
    throw Error("vertex_transforms: frame sizes differ");
  VertexTransforms out;
  std::vector<Vec3> src, dst;
  for (std::size_t b = 0; b < from.size(); ++b) {
    UnitQuat r;
    if (!neighbors[b].empty()) {
      src.clear();
      dst.clear();
      for (auto j : neighbors[b]) {
        src.push_back(from[j]);
        dst.push_back(to[j]);
      }
      r = fit_rotation(from[b], to[b], src, dst).rotation;
    }
    out.push_back(r, to[b] - from[b]);
  }
  return out;
}

struct DensifyOptions {
  double neighbor_radius = 0.15;  // same meaning as the graph edge threshold
  std::size_t top_k = 5;
};

/// Carries a Gaussian cloud along a control-vertex trajectory. Weights and
/// vertex rotations are recomputed from the current frame at every step.
inline std::vector<GaussianCloud> densify_rollout(const GaussianCloud& cloud0,
                                                  const std::vector<std::vector<Vec3>>& control_traj,
                                                  const DensifyOptions& opt = {}) {
  cloud0.validate();
  for (std::size_t t = 0; t < control_traj.size(); ++t) {
    if (!all_finite(control_traj[t])) throw Error("densify_rollout: non-finite control position in frame " + std::to_string(t));
    if (control_traj[t].size() != control_traj.front().size())
      throw Error("densify_rollout: vertex count changes at frame " + std::to_string(t));
  }
  std::vector<GaussianCloud> frames;
  if (control_traj.empty()) return frames;
  frames.reserve(control_traj.size());
  frames.push_back(cloud0);
  for (std::size_t t = 0; t + 1 < control_traj.size(); ++t) {
    const auto& vt = control_traj[t];
    const auto weights = blend_weights(frames.back().centers, vt, opt.top_k);
    const auto tf = vertex_transforms(vt, control_traj[t + 1], radius_neighbors(vt, opt.neighbor_radius));
    frames.push_back(apply_lbs(frames.back(), vt, tf, weights));
  }
  return frames;
}

// --- serialization -------------------------------------------------------

inline constexpr char kCloudMagic[] = "GSDYNGC1";
inline constexpr std::uint32_t kCloudVersion = 1;

/// Binary layout: magic, u32 version, u64 N, then float64 columns
/// cx.. cy.. cz.. | qw.. qx.. qy.. qz.. | sx.. sy.. sz.. | r.. g.. b.. | opacity..
inline void write_cloud(const std::filesystem::path& path, const GaussianCloud& cloud) {
  cloud.validate();
  const std::size_t n = cloud.size();
  io::BinaryWriter w(path);
  w.magic(kCloudMagic);
  w.scalar<std::uint32_t>(kCloudVersion);
  w.scalar<std::uint64_t>(n);
  std::vector<double> col(n);
  auto put = [&](auto&& get) {
    for (std::size_t i = 0; i < n; ++i) col[i] = get(i);
    w.doubles(col);
  };
  for (int c = 0; c < 3; ++c) put([&](std::size_t i) { return cloud.centers[i](c); });
  put([&](std::size_t i) { return cloud.rotations[i].w(); });
  put([&](std::size_t i) { return cloud.rotations[i].x(); });
  put([&](std::size_t i) { return cloud.rotations[i].y(); });
  put([&](std::size_t i) { return cloud.rotations[i].z(); });
  for (int c = 0; c < 3; ++c) put([&](std::size_t i) { return cloud.scales[i](c); });
  for (int c = 0; c < 3; ++c) put([&](std::size_t i) { return cloud.colors[i](c); });
  put([&](std::size_t i) { return cloud.opacities[i]; });
  w.finish();
}

inline GaussianCloud read_cloud(const std::filesystem::path& path) {
  io::BinaryReader r(path);
  r.expect_magic(kCloudMagic);
  const auto version = r.scalar<std::uint32_t>();
  if (version != kCloudVersion) throw Error("'" + path.string() + "': unsupported cloud version " + std::to_string(version));
  const auto n = static_cast<std::size_t>(r.scalar<std::uint64_t>());
  if (n == 0 || n > (std::size_t{1} << 32)) throw Error("'" + path.string() + "': implausible Gaussian count");
  std::array<std::vector<double>, 14> cols;
  for (auto& c : cols) c = r.doubles(n);
  GaussianCloud cloud;
  cloud.centers.resize(n);
  cloud.scales.resize(n);
  cloud.colors.resize(n);
  cloud.opacities = cols[13];
  cloud.rotations.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    cloud.centers[i] = Vec3(cols[0][i], cols[1][i], cols[2][i]);
    try {
      cloud.rotations.push_back(UnitQuat::from_unit_coeffs(cols[3][i], cols[4][i], cols[5][i], cols[6][i]));
    } catch (const Error&) {
      throw Error("'" + path.string() + "': rotation " + std::to_string(i) + " is not unit");
    }
    cloud.scales[i] = Vec3(cols[7][i], cols[8][i], cols[9][i]);
    cloud.colors[i] = Rgb(cols[10][i], cols[11][i], cols[12][i]);
  }
  cloud.validate();
  return cloud;
}

/// ASCII PLY with position, 8-bit color and the raw Gaussian attributes.
inline void write_ply(const std::filesystem::path& path, const GaussianCloud& cloud) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out << "ply\nformat ascii 1.0\nelement vertex " << cloud.size() << "\n"
      << "property double x\nproperty double y\nproperty double z\n"
      << "property uchar red\nproperty uchar green\nproperty uchar blue\n"
      << "property double opacity\nproperty double scale_0\nproperty double scale_1\nproperty double scale_2\n"
      << "property double rot_0\nproperty double rot_1\nproperty double rot_2\nproperty double rot_3\nend_header\n";
  auto byte = [](double c) { return static_cast<int>(std::lround(std::clamp(c, 0.0, 1.0) * 255.0)); };
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const auto& c = cloud.centers[i];
    const auto& q = cloud.rotations[i];
    out << c.x() << ' ' << c.y() << ' ' << c.z() << ' ' << byte(cloud.colors[i](0)) << ' ' << byte(cloud.colors[i](1))
        << ' ' << byte(cloud.colors[i](2)) << ' ' << cloud.opacities[i] << ' ' << cloud.scales[i].x() << ' '
        << cloud.scales[i].y() << ' ' << cloud.scales[i].z() << ' ' << q.w() << ' ' << q.x() << ' ' << q.y() << ' '
        << q.z() << '\n';
  }
  if (!out) throw Error("write failed for '" + path.string() + "'");
}

}  // namespace gsdyn
