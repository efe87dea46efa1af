#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace gsdyn {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

/// Library error type. Every recoverable failure is reported by throwing this.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline bool all_finite(const Vec3& v) { return v.allFinite(); }

inline bool all_finite(std::span<const Vec3> pts) {
  return std::all_of(pts.begin(), pts.end(), [](const Vec3& p) { return p.allFinite(); });
}

inline Vec3 centroid(std::span<const Vec3> pts) {
  Vec3 c = Vec3::Zero();
  for (const auto& p : pts) c += p;
  return pts.empty() ? c : Vec3(c / static_cast<double>(pts.size()));
}

/// Unit quaternion (w, x, y, z). Construction always normalizes.
class UnitQuat {
 public:
  UnitQuat() : q_(1.0, 0.0, 0.0, 0.0) {}
  UnitQuat(double w, double x, double y, double z) : q_(w, x, y, z) { normalize(); }
  explicit UnitQuat(const Eigen::Quaterniond& q) : q_(q) { normalize(); }

  static UnitQuat identity() { return {}; }

  static UnitQuat from_axis_angle(const Vec3& axis, double angle) {
    return UnitQuat(Eigen::Quaterniond(Eigen::AngleAxisd(angle, axis.normalized())));
  }

  static UnitQuat from_matrix(const Mat3& r) { return UnitQuat(Eigen::Quaterniond(r)); }

  /// Adopts already-unit coefficients as-is (used when deserializing, so
  /// round trips stay bit-exact). Rejects anything off the unit sphere.
  static UnitQuat from_unit_coeffs(double w, double x, double y, double z) {
    UnitQuat out;
    out.q_ = Eigen::Quaterniond(w, x, y, z);
    if (!(std::abs(out.q_.norm() - 1.0) <= 1e-9)) throw Error("UnitQuat: coefficients are not unit norm");
    return out;
  }

  double w() const { return q_.w(); }
  double x() const { return q_.x(); }
  double y() const { return q_.y(); }
  double z() const { return q_.z(); }
  double norm() const { return q_.norm(); }
  const Eigen::Quaterniond& eigen() const { return q_; }

  Mat3 matrix() const { return q_.toRotationMatrix(); }
  Vec3 rotate(const Vec3& v) const { return q_ * v; }
  UnitQuat conjugate() const { return UnitQuat(q_.conjugate()); }

  /// Hamilton product. The product of two unit quaternions is unit up to
  /// rounding, so no renormalization is applied here.
  UnitQuat operator*(const UnitQuat& rhs) const {
    UnitQuat out;
    out.q_ = q_ * rhs.q_;
    return out;
  }

  /// Geodesic angle between the rotations (radians, in [0, pi]).
  double angle_to(const UnitQuat& other) const {
    const double d = std::abs(q_.dot(other.q_));
    return 2.0 * std::acos(std::min(1.0, d));
  }

  bool operator==(const UnitQuat& o) const { return q_.coeffs() == o.q_.coeffs(); }

 private:
  void normalize() {
    const double n = q_.norm();
    if (!(n > 0.0) || !std::isfinite(n)) throw Error("UnitQuat: cannot normalize a zero or non-finite quaternion");
    q_.coeffs() /= n;
  }

  Eigen::Quaterniond q_;
};

struct RigidTransform {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  static RigidTransform identity() { return {}; }
  Vec3 apply(const Vec3& p) const { return rotation * p + translation; }
  RigidTransform inverse() const {
    RigidTransform inv;
    inv.rotation = rotation.transpose();
    inv.translation = -(inv.rotation * translation);
    return inv;
  }
};

/// Axis-aligned box.
struct Aabb {
  Vec3 lo = Vec3::Zero();
  Vec3 hi = Vec3::Zero();

  bool contains(const Vec3& p, double tol = 0.0) const {
    return (p.array() >= lo.array() - tol).all() && (p.array() <= hi.array() + tol).all();
  }
  Vec3 clamp(const Vec3& p) const { return p.cwiseMax(lo).cwiseMin(hi); }
};

struct RotationFit {
  UnitQuat rotation;
  bool degenerate = false;
};

struct RigidFit {
  RigidTransform transform;
  bool degenerate = false;
};

namespace detail {

// Kabsch on a 3x3 cross-covariance H = sum src * dst^T. Rank < 2 is degenerate.
inline bool kabsch_rotation(const Mat3& cross_cov, Mat3& rotation) {
  Eigen::JacobiSVD<Mat3> svd(cross_cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Vec3 sv = svd.singularValues();
  if (!(sv(0) > 1e-24) || sv(1) <= 1e-9 * sv(0)) {
    rotation.setIdentity();
    return false;
  }
  const Mat3 u = svd.matrixU();
  const Mat3 v = svd.matrixV();
  Mat3 d = Mat3::Identity();
  d(2, 2) = (v * u.transpose()).determinant() < 0.0 ? -1.0 : 1.0;
  rotation = v * d * u.transpose();
  return true;
}

}  // namespace detail

/// Rotation that best maps the neighbor offsets around `center_src` onto the
/// offsets around `center_dst` (unweighted least squares over SO(3)).
inline RotationFit fit_rotation(const Vec3& center_src, const Vec3& center_dst,
                                std::span<const Vec3> neighbors_src,
                                std::span<const Vec3> neighbors_dst) {
  if (neighbors_src.empty() || neighbors_src.size() != neighbors_dst.size())
    throw Error("fit_rotation: neighbor lists must be non-empty and of equal length");
  bool unchanged = true;
  Mat3 h = Mat3::Zero();
  for (std::size_t j = 0; j < neighbors_src.size(); ++j) {
    const Vec3 a = neighbors_src[j] - center_src;
    const Vec3 b = neighbors_dst[j] - center_dst;
    unchanged = unchanged && a == b;
    h += a * b.transpose();
  }
  Mat3 r;
  const bool ok = detail::kabsch_rotation(h, r);
  // Offsets that did not move at all map to the exact identity, so static
  // vertices never pick up SVD rounding noise.
  if (!ok || unchanged) return {UnitQuat::identity(), !ok};
  return {UnitQuat::from_matrix(r), false};
}

/// Least-squares rigid transform (no scale) mapping src onto dst.
/// Degenerate inputs fall back to the identity rotation; the translation still
/// aligns the centroids.
inline RigidFit fit_rigid_transform(std::span<const Vec3> src, std::span<const Vec3> dst) {
  if (src.size() != dst.size()) throw Error("fit_rigid_transform: point lists differ in length");
  if (src.empty()) throw Error("fit_rigid_transform: empty point lists");
  const Vec3 cs = centroid(src);
  const Vec3 cd = centroid(dst);
  RigidFit fit;
  bool ok = src.size() >= 3;
  if (ok) {
    Mat3 h = Mat3::Zero();
    for (std::size_t i = 0; i < src.size(); ++i) h += (src[i] - cs) * (dst[i] - cd).transpose();
    ok = detail::kabsch_rotation(h, fit.transform.rotation);
  }
  if (!ok) fit.transform.rotation.setIdentity();
  fit.transform.translation = cd - fit.transform.rotation * cs;
  fit.degenerate = !ok;
  return fit;
}

struct SampleCount {
  std::size_t n;
};

struct MinSpacing {
  double d;
};

namespace detail {

inline std::size_t nearest_to(std::span<const Vec3> pts, const Vec3& q) {
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const double d = (pts[i] - q).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = i;
    }
  }
  return best;
}

// Greedy FPS. The point nearest the centroid is the reference: the first pick
// is the point farthest from it, later picks maximize the distance to the
// already-selected set. Ties go to the lowest index.
inline std::vector<std::size_t> fps(std::span<const Vec3> pts, std::size_t max_count, double min_dist) {
  if (pts.empty()) throw Error("farthest_point_sample: empty point set");
  const std::size_t n = pts.size();
  const Vec3 ref = pts[nearest_to(pts, centroid(pts))];
  std::vector<double> dist(n);
  for (std::size_t i = 0; i < n; ++i) dist[i] = (pts[i] - ref).norm();
  std::vector<char> taken(n, 0);
  std::vector<std::size_t> out;
  out.reserve(std::min(max_count, n));
  while (out.size() < max_count) {
    std::size_t best = n;
    double best_d = -1.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (!taken[i] && dist[i] > best_d) {
        best_d = dist[i];
        best = i;
      }
    }
    if (best == n) break;
    if (!out.empty() && best_d < min_dist) break;
    out.push_back(best);
    taken[best] = 1;
    // After the first pick, distances are to the selected set only.
    for (std::size_t i = 0; i < n; ++i) {
      const double d = (pts[i] - pts[best]).norm();
      dist[i] = out.size() == 1 ? d : std::min(dist[i], d);
    }
  }
  return out;
}

}  // namespace detail

inline std::vector<std::size_t> farthest_point_sample(std::span<const Vec3> points, SampleCount count) {
  if (count.n > points.size())
    throw Error("farthest_point_sample: requested " + std::to_string(count.n) + " samples from " +
                std::to_string(points.size()) + " points");
  return detail::fps(points, count.n, 0.0);
}

inline std::vector<std::size_t> farthest_point_sample(std::span<const Vec3> points, MinSpacing spacing) {
  if (!(spacing.d >= 0.0)) throw Error("farthest_point_sample: min_dist must be non-negative");
  return detail::fps(points, points.size(), spacing.d);
}

template <class Index>
std::vector<Vec3> gather(std::span<const Vec3> pts, const std::vector<Index>& idx) {
  std::vector<Vec3> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(pts[static_cast<std::size_t>(i)]);
  return out;
}

}  // namespace gsdyn
