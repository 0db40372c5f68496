#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>

namespace gridpose {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

struct ObjectModel {
  std::vector<Vec3> vertices;
  std::vector<std::array<int, 3>> faces;
  double diameter = 0.0;

  // Builds a model and computes its diameter.
  static ObjectModel from_mesh(std::vector<Vec3> vertices,
                               std::vector<std::array<int, 3>> faces = {});

  // Throws InvalidArgument on an empty vertex set or out-of-range face index.
  void validate() const;
};

struct Pose {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  static Pose identity() { return {}; }
  Vec3 apply(const Vec3& p) const { return rotation * p + translation; }
  Pose inverse() const;
  // this ∘ other: first other, then this.
  Pose compose(const Pose& other) const;
  bool is_valid(double tol = 1e-9) const;
};

struct CameraIntrinsics {
  double fx = 500.0;
  double fy = 500.0;
  double cx = 320.0;
  double cy = 240.0;

  void validate() const;
  Mat3 matrix() const;
};

/// Affine map between full-image pixels and the square, resized RoI.
/// q = (p - bbox_origin) * roi_size / bbox_size, per axis.
struct RoiTransform {
  Vec2 bbox_origin = Vec2::Zero();
  Vec2 bbox_size = Vec2(256.0, 256.0);
  int roi_size = 256;

  void validate() const;
  Vec2 to_roi(const Vec2& p) const;
  Vec2 from_roi(const Vec2& q) const;
  // RoI pixels per image pixel along each axis.
  Vec2 scale() const;
};

std::vector<Vec2> to_roi(std::span<const Vec2> points_px, const RoiTransform& t);
std::vector<Vec2> from_roi(std::span<const Vec2> points_roi, const RoiTransform& t);

struct KeypointSet {
  std::vector<Vec3> points;
  std::vector<int> vertex_indices;  // index into the source model per point

  std::size_t size() const { return points.size(); }
};

/// Directed k-NN graph stored as a fixed-degree adjacency table:
/// neighbors(i) lists the out-neighbors of node i, nearest first.
class KnnGraph {
 public:
  KnnGraph() = default;
  KnnGraph(int node_count, int k, int degree, std::vector<int> adjacency);

  int node_count() const { return node_count_; }
  int k() const { return k_; }
  int degree() const { return degree_; }
  std::span<const int> neighbors(int i) const {
    return {adjacency_.data() + static_cast<std::size_t>(i) * degree_,
            static_cast<std::size_t>(degree_)};
  }
  const std::vector<int>& adjacency() const { return adjacency_; }
  std::vector<std::pair<int, int>> edges() const;

  // Relabels nodes: node i of the result is node perm[i] of this graph.
  KnnGraph permuted(std::span<const int> perm) const;

 private:
  int node_count_ = 0;
  int k_ = 0;
  int degree_ = 0;
  std::vector<int> adjacency_;
};

struct Projection {
  std::vector<Vec2> pixels;
  std::vector<bool> behind_camera;  // true where transformed depth <= 0

  bool all_in_front() const;
};

// Greedy farthest point sampling over the model vertices.
KeypointSet farthest_point_sample(const ObjectModel& model, std::size_t n,
                                  std::size_t seed_index = 0);

KnnGraph build_knn_graph(std::span<const Vec3> points, int k);
inline KnnGraph build_knn_graph(const KeypointSet& kps, int k) {
  return build_knn_graph(kps.points, k);
}

Projection project(std::span<const Vec3> points, const Pose& pose,
                   const CameraIntrinsics& intr);

double object_diameter(std::span<const Vec3> vertices);

Vec3 centroid(std::span<const Vec3> points);

// Rotation of `angle` radians about unit `axis`.
Mat3 axis_angle(const Vec3& axis, double angle);

// Geodesic angle between two rotations, in radians.
double rotation_angle_between(const Mat3& a, const Mat3& b);

}  // namespace gridpose
