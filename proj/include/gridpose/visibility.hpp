#pragma once

#include <span>
#include <vector>

#include "gridpose/geometry.hpp"

namespace gridpose {

struct ViewpointSet {
  std::vector<Vec3> directions;  // unit vectors
  double radius_factor = 3.0;    // camera distance in object diameters
  int level = 4;
};

struct VisibilityProfile {
  std::vector<double> v;  // per-vertex fraction of viewpoints that see the vertex
  double r_so = 0.0;
};

struct VisibilityOptions {
  // HPR flip radius as a multiple of the farthest point distance from the viewpoint.
  double hpr_radius_factor = 100.0;
  // Larger models run HPR on an FPS subset of this size; the rest inherit
  // the value of their nearest sampled vertex.
  std::size_t max_points = 5000;
  // Band of V(P) counted as easily self-occluded, [low, high).
  double band_low = 0.2;
  double band_high = 0.4;
};

// Icosphere vertex directions: 10 * 4^level + 2 viewpoints (2562 at level 4).
ViewpointSet sample_viewpoints(int level = 4, double radius_factor = 3.0);

/// Hidden point removal by spherical flipping: a point is visible from
/// `viewpoint` iff its flipped image is a vertex of the convex hull of the
/// flipped cloud plus the viewpoint. `radius` <= 0 selects
/// hpr_radius_factor * max distance.
std::vector<bool> hpr_visible(std::span<const Vec3> points, const Vec3& viewpoint, double radius = 0.0,
                              double radius_factor = 100.0);

// Fraction of vertices with band_low <= V < band_high over all vertices.
double self_occlusion_ratio(std::span<const double> v, double band_low = 0.2, double band_high = 0.4);

VisibilityProfile visibility_profile(const ObjectModel& model, const ViewpointSet& views,
                                     const VisibilityOptions& opts = {});

// Mask filtering is used only for textureless objects with r_so >= 0.5.
bool filter_decision(double r_so, bool textureless, double threshold = 0.5);
inline bool filter_decision(const VisibilityProfile& p, bool textureless) {
  return filter_decision(p.r_so, textureless);
}

}  // namespace gridpose
