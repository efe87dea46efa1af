#pragma once

#include <optional>

#include "gsdyn/geom.hpp"

namespace gsdyn {

using Vec2 = Eigen::Vector2d;
using Mat2 = Eigen::Matrix2d;

/// Pinhole camera, OpenCV convention (x right, y down, z forward).
/// Pixel (u, v) is sampled at integer coordinates.
struct CameraModel {
  double fx = 500.0, fy = 500.0, cx = 320.0, cy = 240.0;
  int width = 640, height = 480;
  RigidTransform world_to_camera;
  double near_plane = 0.01;

  void validate() const {
    if (!(fx > 0.0 && fy > 0.0)) throw Error("CameraModel: focal lengths must be positive");
    if (width < 1 || height < 1) throw Error("CameraModel: resolution must be at least 1x1");
  }

  Vec3 to_camera(const Vec3& world) const { return world_to_camera.apply(world); }

  /// Pixel coordinates of a world point, or nothing if it lies behind the near plane.
  std::optional<Vec2> project(const Vec3& world) const {
    const Vec3 c = to_camera(world);
    if (c.z() <= near_plane) return std::nullopt;
    return Vec2(fx * c.x() / c.z() + cx, fy * c.y() / c.z() + cy);
  }

  /// Camera at `eye` looking at `target`; `up` fixes the roll (image y points
  /// along -up).
  static CameraModel look_at(const Vec3& eye, const Vec3& target, const Vec3& up, double fx, double fy, int width,
                             int height) {
    const Vec3 z = (target - eye).normalized();
    Vec3 x = z.cross(up);
    if (x.norm() < 1e-12) throw Error("CameraModel::look_at: up vector is parallel to the viewing direction");
    x.normalize();
    const Vec3 y = z.cross(x);
    CameraModel cam;
    cam.fx = fx;
    cam.fy = fy;
    cam.width = width;
    cam.height = height;
    cam.cx = 0.5 * width;
    cam.cy = 0.5 * height;
    cam.world_to_camera.rotation.row(0) = x.transpose();
    cam.world_to_camera.rotation.row(1) = y.transpose();
    cam.world_to_camera.rotation.row(2) = z.transpose();
    cam.world_to_camera.translation = -(cam.world_to_camera.rotation * eye);
    return cam;
  }
};

/// Look-at camera description as it appears in config files.
struct CameraConfig {
  Vec3 eye{0.0, -0.6, 0.55};
  Vec3 target{0.0, 0.0, 0.0};
  Vec3 up{0.0, 0.0, 1.0};
  double fx = 500.0;
  double fy = 500.0;
  int width = 320;
  int height = 240;

  template <class F>
  void visit(F&& f) {
    f("eye", eye);
    f("target", target);
    f("up", up);
    f("fx", fx);
    f("fy", fy);
    f("width", width);
    f("height", height);
  }

  CameraModel model() const {
    auto cam = CameraModel::look_at(eye, target, up, fx, fy, width, height);
    cam.validate();
    return cam;
  }
};

}  // namespace gsdyn
