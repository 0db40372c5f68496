#pragma once

#include <array>
#include <span>
#include <vector>

#include "gridpose/geometry.hpp"

namespace gridpose {

struct ConvexHull {
  std::vector<std::array<int, 3>> faces;  // outward-oriented (counter-clockwise seen from outside)
  std::vector<int> vertices;              // sorted indices of input points that are hull vertices
};

/// 3D quickhull. Points within a scale-relative tolerance of a face are
/// treated as interior, so only strictly extreme points become vertices.
/// Throws DegenerateConfiguration when the input spans fewer than 3 dimensions.
ConvexHull convex_hull(std::span<const Vec3> points);

}  // namespace gridpose
