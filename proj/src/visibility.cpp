#include "gridpose/visibility.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "gridpose/convex_hull.hpp"
#include "gridpose/errors.hpp"
#include "gridpose/shapes.hpp"

namespace gridpose {

ViewpointSet sample_viewpoints(int level, double radius_factor) {
  if (level < 0) throw InvalidArgument("viewpoint subdivision level must be >= 0");
  ViewpointSet views;
  views.directions = make_icosphere(level, 1.0).vertices;
  views.radius_factor = radius_factor;
  views.level = level;
  return views;
}

std::vector<bool> hpr_visible(std::span<const Vec3> points, const Vec3& viewpoint, double radius,
                              double radius_factor) {
  const std::size_t n = points.size();
  if (n < 4) throw DegenerateConfiguration("HPR needs at least 4 points");
  std::vector<Vec3> flipped(n + 1);
  double max_norm = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    flipped[i] = points[i] - viewpoint;
    const double len = flipped[i].norm();
    if (len <= 0.0) throw InvalidArgument("HPR viewpoint coincides with a point");
    max_norm = std::max(max_norm, len);
  }
  const double r = radius > 0.0 ? std::max(radius, max_norm) : radius_factor * max_norm;
  for (std::size_t i = 0; i < n; ++i) {
    const double len = flipped[i].norm();
    flipped[i] += 2.0 * (r - len) * flipped[i] / len;
  }
  flipped[n] = Vec3::Zero();
  const ConvexHull hull = convex_hull(flipped);
  std::vector<bool> visible(n, false);
  for (int idx : hull.vertices)
    if (static_cast<std::size_t>(idx) < n) visible[idx] = true;
  return visible;
}

double self_occlusion_ratio(std::span<const double> v, double band_low, double band_high) {
  if (v.empty()) return 0.0;
  std::size_t count = 0;
  for (double x : v)
    if (x >= band_low && x < band_high) ++count;
  return static_cast<double>(count) / static_cast<double>(v.size());
}

VisibilityProfile visibility_profile(const ObjectModel& model, const ViewpointSet& views,
                                     const VisibilityOptions& opts) {
  model.validate();
  const auto& verts = model.vertices;
  std::vector<Vec3> subset;
  std::vector<int> subset_index;
  if (verts.size() > opts.max_points) {
    const auto kps = farthest_point_sample(model, opts.max_points, 0);
    subset = kps.points;
    subset_index = kps.vertex_indices;
  } else {
    subset = verts;
  }
  const Vec3 center = centroid(verts);
  const double diameter = model.diameter > 0.0 ? model.diameter : object_diameter(verts);
  if (!(diameter > 0.0)) throw DegenerateConfiguration("model has zero extent");

  std::vector<int> seen(subset.size(), 0);
  for (const auto& dir : views.directions) {
    const Vec3 eye = center + dir * views.radius_factor * diameter;
    const auto vis = hpr_visible(subset, eye, 0.0, opts.hpr_radius_factor);
    for (std::size_t i = 0; i < vis.size(); ++i) seen[i] += vis[i] ? 1 : 0;
  }
  const double count = static_cast<double>(views.directions.size());
  std::vector<double> subset_v(subset.size());
  for (std::size_t i = 0; i < subset.size(); ++i) subset_v[i] = seen[i] / count;

  VisibilityProfile profile;
  if (subset_index.empty()) {
    profile.v = std::move(subset_v);
  } else {
    profile.v.resize(verts.size());
    for (std::size_t i = 0; i < verts.size(); ++i) {
      std::size_t best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (std::size_t s = 0; s < subset.size(); ++s) {
        const double d = (subset[s] - verts[i]).squaredNorm();
        if (d < best_d) {
          best_d = d;
          best = s;
        }
      }
      profile.v[i] = subset_v[best];
    }
  }
  profile.r_so = self_occlusion_ratio(profile.v, opts.band_low, opts.band_high);
  return profile;
}

bool filter_decision(double r_so, bool textureless, double threshold) {
  return textureless && r_so >= threshold;
}

}  // namespace gridpose
