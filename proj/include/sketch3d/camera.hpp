#pragma once

// Pinhole cameras. Camera axes follow the computer-vision convention:
// +x right, +y down, +z forward. `rotation` maps camera to world.

#include "sketch3d/common.hpp"

#include <cmath>
#include <numbers>
#include <vector>

namespace sketch3d {

struct CameraPose {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();  // camera center in world coordinates
  double focal = 1.0;
  Vec2 principal_point = Vec2::Zero();
  int width = 1;
  int height = 1;

  Vec3 forward() const { return rotation.col(2); }
  const Vec3& center() const { return translation; }

  void validate(double tol = 1e-6) const {
    require(focal > 0.0, "CameraPose: focal must be positive");
    require(width >= 1 && height >= 1, "CameraPose: width and height must be >= 1");
    require((rotation.transpose() * rotation - Mat3::Identity()).cwiseAbs().maxCoeff() <= tol &&
                rotation.determinant() > 0.0,
            "CameraPose: rotation is not orthonormal");
  }

  /// 4x4 camera-to-world transform.
  Mat4 to_matrix() const {
    Mat4 m = Mat4::Identity();
    m.topLeftCorner<3, 3>() = rotation;
    m.topRightCorner<3, 1>() = translation;
    return m;
  }
};

inline double focal_from_fov(double fov_deg, int width) {
  return 0.5 * width / std::tan(0.5 * fov_deg * std::numbers::pi / 180.0);
}

/// Rotation whose forward axis points from `eye` to `target`, with image-up
/// aligned to `up` as far as possible.
inline Mat3 look_at_rotation(const Vec3& eye, const Vec3& target, const Vec3& up = Vec3::UnitZ()) {
  const Vec3 f = (target - eye).normalized();
  Vec3 r = f.cross(up);
  if (r.norm() < 1e-9) r = f.cross(Vec3::UnitY());
  r.normalize();
  const Vec3 d = f.cross(r);
  Mat3 R;
  R.col(0) = r;
  R.col(1) = d;
  R.col(2) = f;
  return R;
}

inline CameraPose look_at_pose(const Vec3& eye, const Vec3& target, double fov_deg, int width,
                               int height) {
  CameraPose p;
  p.rotation = look_at_rotation(eye, target);
  p.translation = eye;
  p.width = width;
  p.height = height;
  p.focal = focal_from_fov(fov_deg, width);
  p.principal_point = Vec2(0.5 * width, 0.5 * height);
  return p;
}

/// Camera on a sphere around the origin; elevation measured from the xy-plane.
inline CameraPose orbit_pose(double radius, double elevation_deg, double azimuth_deg,
                             double fov_deg, int width, int height) {
  const double el = elevation_deg * std::numbers::pi / 180.0;
  const double az = azimuth_deg * std::numbers::pi / 180.0;
  const Vec3 eye(radius * std::cos(el) * std::cos(az), radius * std::cos(el) * std::sin(az),
                 radius * std::sin(el));
  return look_at_pose(eye, Vec3::Zero(), fov_deg, width, height);
}

/// World-space unit direction through continuous pixel coordinate (u, v).
inline Vec3 pixel_direction(const CameraPose& pose, double u, double v) {
  const Vec3 cam((u - pose.principal_point.x()) / pose.focal,
                 (v - pose.principal_point.y()) / pose.focal, 1.0);
  return (pose.rotation * cam).normalized();
}

struct RayBatch {
  std::vector<Vec3> origins;
  std::vector<Vec3> directions;
  std::size_t size() const { return origins.size(); }
};

/// One ray per pixel through the pixel center, row-major order.
inline RayBatch generate_rays(const CameraPose& pose) {
  pose.validate();
  RayBatch rays;
  const std::size_t n = static_cast<std::size_t>(pose.width) * pose.height;
  rays.origins.assign(n, pose.translation);
  rays.directions.resize(n);
  for (int y = 0; y < pose.height; ++y)
    for (int x = 0; x < pose.width; ++x)
      rays.directions[static_cast<std::size_t>(y) * pose.width + x] =
          pixel_direction(pose, x + 0.5, y + 0.5);
  return rays;
}

}  // namespace sketch3d
