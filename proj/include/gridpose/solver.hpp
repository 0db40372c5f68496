#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "gridpose/codes.hpp"
#include "gridpose/geometry.hpp"

namespace gridpose {

struct CorrespondenceSet {
  std::vector<Vec3> object_points;  // object frame, meters
  std::vector<Vec2> image_points;   // full-image pixels
  std::vector<bool> valid;
  std::vector<std::optional<CellIndex>> source_cells;  // optional, may be empty

  std::size_t size() const { return object_points.size(); }
  std::size_t valid_count() const;
  void validate() const;
  void push_back(const Vec3& p3, const Vec2& p2, bool is_valid = true);
};

struct SolverConfig {
  double reproj_threshold = 2.0;  // pixels, full image
  int ransac_iters = 150;
  int progx_iters = 400;
  int min_inliers = 6;
  std::uint64_t seed = 0;
  int coherence_neighbors = 5;  // m nearest 3D neighbors consulted per vote

  void validate() const;
};

struct PoseEstimate {
  Pose pose;
  std::vector<bool> inliers;    // reprojection error <= threshold under `pose`
  std::vector<bool> confirmed;  // support the pose was fitted to (equals inliers for plain RANSAC)
  std::size_t inlier_count = 0;
  double mean_error = 0.0;      // mean reprojection error over inliers, pixels
};

// Per-pair reprojection error in pixels; +inf for invalid pairs and points behind the camera.
std::vector<double> reprojection_errors(const CorrespondenceSet& corrs, const CameraIntrinsics& intr,
                                        const Pose& pose);

/// EPnP on all valid pairs: four control points (centroid plus principal
/// axes), barycentric weights, null space of the 2n x 12 system, beta
/// candidates for null-space dimensions 1..3 refined by Gauss-Newton and
/// selected by reprojection error, then an SVD rigid alignment. Exactly
/// coplanar object points take a homography branch instead.
/// Throws InsufficientData (< 4 valid pairs) or DegenerateConfiguration.
Pose epnp(const CorrespondenceSet& corrs, const CameraIntrinsics& intr);

// Levenberg-Marquardt on the reprojection error of the valid pairs.
Pose refine_pose(const CorrespondenceSet& corrs, const CameraIntrinsics& intr, const Pose& initial,
                 int iterations = 10);

/// RANSAC over seeded 4-point minimal samples. The best hypothesis has the
/// most inliers (ties: lower mean inlier error, then earlier iteration) and
/// is refitted by EPnP on its inliers. Throws NoConsensus when fewer than
/// min_inliers support the best hypothesis.
PoseEstimate ransac_pnp(const CorrespondenceSet& corrs, const CameraIntrinsics& intr, const SolverConfig& cfg);

/// RANSAC with spatial-coherence confirmation: an inlier counts only if a
/// strict majority of its m nearest 3D neighbours (among valid pairs) are
/// inliers of the same hypothesis. Runs cfg.progx_iters iterations and
/// refits on the confirmed set.
PoseEstimate spatial_coherence_solve(const CorrespondenceSet& corrs, const CameraIntrinsics& intr,
                                     const SolverConfig& cfg);

/// Invalidates every pair whose 2D point (mapped into the RoI by `roi`)
/// falls in a cell with mask value 0 or outside the RoI.
CorrespondenceSet mask_filter(const CorrespondenceSet& corrs, const GridMask& mask, const GridSpec& grid,
                              const RoiTransform& roi);

}  // namespace gridpose
