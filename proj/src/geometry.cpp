#include "gridpose/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <limits>
#include <numeric>
#include <string>

#include "gridpose/errors.hpp"

namespace gridpose {

ObjectModel ObjectModel::from_mesh(std::vector<Vec3> vertices,
                                   std::vector<std::array<int, 3>> faces) {
  ObjectModel m;
  m.vertices = std::move(vertices);
  m.faces = std::move(faces);
  m.validate();
  m.diameter = object_diameter(m.vertices);
  return m;
}

void ObjectModel::validate() const {
  if (vertices.empty()) throw InvalidArgument("object model has no vertices");
  const int n = static_cast<int>(vertices.size());
  for (const auto& f : faces) {
    for (int idx : f) {
      if (idx < 0 || idx >= n) {
        throw InvalidArgument("face index " + std::to_string(idx) + " out of range");
      }
    }
  }
}

Pose Pose::inverse() const {
  Pose inv;
  inv.rotation = rotation.transpose();
  inv.translation = -(inv.rotation * translation);
  return inv;
}

Pose Pose::compose(const Pose& other) const {
  Pose out;
  out.rotation = rotation * other.rotation;
  out.translation = rotation * other.translation + translation;
  return out;
}

bool Pose::is_valid(double tol) const {
  if (!rotation.allFinite() || !translation.allFinite()) return false;
  const double ortho = (rotation.transpose() * rotation - Mat3::Identity()).norm();
  return ortho <= tol && std::abs(rotation.determinant() - 1.0) <= 10 * tol;
}

void CameraIntrinsics::validate() const {
  if (!(fx > 0.0) || !(fy > 0.0)) throw InvalidArgument("focal lengths must be positive");
}

Mat3 CameraIntrinsics::matrix() const {
  Mat3 k;
  k << fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0;
  return k;
}

void RoiTransform::validate() const {
  if (!(bbox_size.x() > 0.0) || !(bbox_size.y() > 0.0)) {
    throw InvalidArgument("bbox size must be positive");
  }
  if (roi_size <= 0) throw InvalidArgument("roi size must be positive");
}

Vec2 RoiTransform::scale() const {
  return {roi_size / bbox_size.x(), roi_size / bbox_size.y()};
}

Vec2 RoiTransform::to_roi(const Vec2& p) const {
  return (p - bbox_origin).cwiseProduct(scale());
}

Vec2 RoiTransform::from_roi(const Vec2& q) const {
  return q.cwiseProduct(bbox_size / roi_size) + bbox_origin;
}

std::vector<Vec2> to_roi(std::span<const Vec2> points_px, const RoiTransform& t) {
  t.validate();
  std::vector<Vec2> out;
  out.reserve(points_px.size());
  for (const auto& p : points_px) out.push_back(t.to_roi(p));
  return out;
}

std::vector<Vec2> from_roi(std::span<const Vec2> points_roi, const RoiTransform& t) {
  t.validate();
  std::vector<Vec2> out;
  out.reserve(points_roi.size());
  for (const auto& q : points_roi) out.push_back(t.from_roi(q));
  return out;
}

KnnGraph::KnnGraph(int node_count, int k, int degree, std::vector<int> adjacency)
    : node_count_(node_count), k_(k), degree_(degree), adjacency_(std::move(adjacency)) {
  if (adjacency_.size() != static_cast<std::size_t>(node_count_) * degree_) {
    throw InvalidArgument("adjacency size does not match node_count * degree");
  }
}

std::vector<std::pair<int, int>> KnnGraph::edges() const {
  std::vector<std::pair<int, int>> out;
  out.reserve(adjacency_.size());
  for (int i = 0; i < node_count_; ++i) {
    for (int j : neighbors(i)) out.emplace_back(i, j);
  }
  return out;
}

KnnGraph KnnGraph::permuted(std::span<const int> perm) const {
  if (perm.size() != static_cast<std::size_t>(node_count_)) {
    throw InvalidArgument("permutation size mismatch");
  }
  std::vector<int> inverse(node_count_);
  for (int i = 0; i < node_count_; ++i) inverse[perm[i]] = i;
  std::vector<int> adj(adjacency_.size());
  for (int i = 0; i < node_count_; ++i) {
    auto src = neighbors(perm[i]);
    for (int e = 0; e < degree_; ++e) adj[static_cast<std::size_t>(i) * degree_ + e] = inverse[src[e]];
  }
  return KnnGraph(node_count_, k_, degree_, std::move(adj));
}

bool Projection::all_in_front() const {
  return std::none_of(behind_camera.begin(), behind_camera.end(), [](bool b) { return b; });
}

KeypointSet farthest_point_sample(const ObjectModel& model, std::size_t n,
                                  std::size_t seed_index) {
  const auto& v = model.vertices;
  if (n < 1 || n > v.size()) {
    throw InvalidArgument("FPS count " + std::to_string(n) + " outside [1, " +
                          std::to_string(v.size()) + "]");
  }
  if (seed_index >= v.size()) throw InvalidArgument("FPS seed index out of range");

  KeypointSet out;
  out.points.reserve(n);
  out.vertex_indices.reserve(n);
  std::vector<double> min_dist(v.size(), std::numeric_limits<double>::infinity());
  std::size_t current = seed_index;
  for (std::size_t s = 0; s < n; ++s) {
    out.points.push_back(v[current]);
    out.vertex_indices.push_back(static_cast<int>(current));
    min_dist[current] = -1.0;  // selected
    std::size_t best = 0;
    double best_d = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (min_dist[i] < 0.0) continue;
      const double d = (v[i] - v[current]).squaredNorm();
      if (d < min_dist[i]) min_dist[i] = d;
      // strict > keeps the lowest index on ties
      if (min_dist[i] > best_d) {
        best_d = min_dist[i];
        best = i;
      }
    }
    current = best;
  }
  return out;
}

KnnGraph build_knn_graph(std::span<const Vec3> points, int k) {
  const int n = static_cast<int>(points.size());
  if (n < 2) throw InvalidArgument("k-NN graph needs at least 2 points");
  if (k < 1) throw InvalidArgument("k must be >= 1");
  const int degree = std::min(k, n - 1);
  std::vector<int> adj(static_cast<std::size_t>(n) * degree);
  std::vector<std::pair<double, int>> cand;
  cand.reserve(n);
  for (int i = 0; i < n; ++i) {
    cand.clear();
    for (int j = 0; j < n; ++j) {
      if (j == i) continue;
      cand.emplace_back((points[j] - points[i]).squaredNorm(), j);
    }
    // pair ordering breaks distance ties by lowest index
    std::partial_sort(cand.begin(), cand.begin() + degree, cand.end());
    for (int e = 0; e < degree; ++e) adj[static_cast<std::size_t>(i) * degree + e] = cand[e].second;
  }
  return KnnGraph(n, k, degree, std::move(adj));
}

Projection project(std::span<const Vec3> points, const Pose& pose,
                   const CameraIntrinsics& intr) {
  intr.validate();
  Projection out;
  out.pixels.reserve(points.size());
  out.behind_camera.reserve(points.size());
  for (const auto& p : points) {
    const Vec3 c = pose.apply(p);
    if (c.z() <= 0.0) {
      out.pixels.emplace_back(std::numeric_limits<double>::quiet_NaN(),
                              std::numeric_limits<double>::quiet_NaN());
      out.behind_camera.push_back(true);
      continue;
    }
    out.pixels.emplace_back(intr.fx * c.x() / c.z() + intr.cx, intr.fy * c.y() / c.z() + intr.cy);
    out.behind_camera.push_back(false);
  }
  return out;
}

double object_diameter(std::span<const Vec3> vertices) {
  if (vertices.empty()) throw InvalidArgument("diameter of an empty vertex set");
  if (vertices.size() == 1) {
    std::clog << "warning: object_diameter on a single vertex, returning 0\n";
    return 0.0;
  }
  double best = 0.0;
  for (std::size_t i = 0; i < vertices.size(); ++i) {
    for (std::size_t j = i + 1; j < vertices.size(); ++j) {
      best = std::max(best, (vertices[i] - vertices[j]).squaredNorm());
    }
  }
  return std::sqrt(best);
}

Vec3 centroid(std::span<const Vec3> points) {
  Vec3 c = Vec3::Zero();
  for (const auto& p : points) c += p;
  return points.empty() ? c : Vec3(c / static_cast<double>(points.size()));
}

Mat3 axis_angle(const Vec3& axis, double angle) {
  return Eigen::AngleAxisd(angle, axis.normalized()).toRotationMatrix();
}

double rotation_angle_between(const Mat3& a, const Mat3& b) {
  // atan2 form stays accurate near 0 and pi, unlike acos of the trace
  const Mat3 r = a.transpose() * b;
  const Vec3 axis(r(2, 1) - r(1, 2), r(0, 2) - r(2, 0), r(1, 0) - r(0, 1));
  return std::atan2(0.5 * axis.norm(), 0.5 * (r.trace() - 1.0));
}

}  // namespace gridpose
