// Small scene generators shared by the unit and acceptance tests.
#pragma once

#include <cmath>
#include <random>
#include <vector>

#include <Eigen/Geometry>

#include "gridpose/geometry.hpp"

namespace testsupport {

using gridpose::CameraIntrinsics;
using gridpose::Mat3;
using gridpose::Pose;
using gridpose::Vec2;
using gridpose::Vec3;

inline CameraIntrinsics default_camera() {
  CameraIntrinsics k;
  k.fx = 572.4;
  k.fy = 573.6;
  k.cx = 325.3;
  k.cy = 242.0;
  return k;
}

inline Mat3 random_rotation(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::Quaterniond q(n(rng), n(rng), n(rng), n(rng));
  q.normalize();
  return q.toRotationMatrix();
}

// Object roughly 1 m in front of the camera, near the optical axis.
inline Pose random_pose(std::mt19937_64& rng, double depth = 1.0) {
  std::uniform_real_distribution<double> lateral(-0.1, 0.1);
  std::uniform_real_distribution<double> dz(-0.1, 0.1);
  Pose p;
  p.rotation = random_rotation(rng);
  p.translation = Vec3(lateral(rng), lateral(rng), depth + dz(rng));
  return p;
}

// Points uniformly inside a cube of side `size` centered at the origin.
inline std::vector<Vec3> random_points(std::mt19937_64& rng, std::size_t n, double size = 0.14) {
  std::uniform_real_distribution<double> u(-size / 2, size / 2);
  std::vector<Vec3> pts(n);
  for (auto& p : pts) p = Vec3(u(rng), u(rng), u(rng));
  return pts;
}

inline double translation_error(const Pose& a, const Pose& b) { return (a.translation - b.translation).norm(); }

inline double rotation_error_deg(const Pose& a, const Pose& b) {
  return gridpose::rotation_angle_between(a.rotation, b.rotation) * 180.0 / M_PI;
}

}  // namespace testsupport
