#include <doctest.h>

#include <algorithm>
#include <random>
#include <set>

#include "gridpose/codes.hpp"
#include "gridpose/errors.hpp"
#include "gridpose/solver.hpp"
#include "gridpose/shapes.hpp"
#include "synthetic.hpp"

using namespace gridpose;
using namespace testsupport;

namespace {

CorrespondenceSet exact_correspondences(const std::vector<Vec3>& pts, const Pose& pose,
                                        const CameraIntrinsics& k) {
  const Projection proj = project(pts, pose, k);
  CorrespondenceSet c;
  for (std::size_t i = 0; i < pts.size(); ++i) c.push_back(pts[i], proj.pixels[i]);
  return c;
}

// Tight square RoI around the projected points.
RoiTransform roi_around(const std::vector<Vec2>& px) {
  Vec2 lo = px[0], hi = px[0];
  for (const auto& p : px) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  const double side = (hi - lo).maxCoeff() * 1.1;
  RoiTransform roi;
  roi.bbox_origin = (lo + hi) / 2 - Vec2(side / 2, side / 2);
  roi.bbox_size = Vec2(side, side);
  return roi;
}

}  // namespace

TEST_CASE("epnp recovers the pose from six exact non-coplanar points") {
  const auto k = default_camera();
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    std::mt19937_64 rng(seed);
    const Pose gt = random_pose(rng);
    const auto corrs = exact_correspondences(random_points(rng, 6), gt, k);
    const Pose est = epnp(corrs, k);
    CHECK(rotation_error_deg(est, gt) <= 0.01);
    CHECK(translation_error(est, gt) <= 1e-4);
    CHECK(est.is_valid());
  }
}

// Four points admit several local solutions; most scenes still come out exact.
TEST_CASE("epnp with the minimum of four points") {
  const auto k = default_camera();
  int good = 0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    std::mt19937_64 rng(seed + 1000);
    const Pose gt = random_pose(rng);
    const Pose est = epnp(exact_correspondences(random_points(rng, 4), gt, k), k);
    good += rotation_error_deg(est, gt) <= 0.01 && translation_error(est, gt) <= 1e-4;
  }
  CHECK(good >= 40);
}

TEST_CASE("epnp on identity pose") {
  const auto k = default_camera();
  std::mt19937_64 rng(7);
  auto pts = random_points(rng, 12);
  for (auto& p : pts) p.z() += 1.0;
  const Pose est = epnp(exact_correspondences(pts, Pose::identity(), k), k);
  CHECK((est.rotation - Mat3::Identity()).cwiseAbs().maxCoeff() <= 1e-6);
  CHECK(est.translation.norm() <= 1e-6);
}

TEST_CASE("epnp planar battery: accurate pose or a degenerate-configuration error") {
  const auto k = default_camera();
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    std::mt19937_64 rng(seed + 77);
    const Pose gt = random_pose(rng);
    auto pts = random_points(rng, 4 + seed % 20);
    const Mat3 tilt = random_rotation(rng);
    for (auto& p : pts) p = tilt * Vec3(p.x(), p.y(), 0.0);
    const auto corrs = exact_correspondences(pts, gt, k);
    try {
      const Pose est = epnp(corrs, k);
      CHECK(rotation_error_deg(est, gt) <= 0.01);
      CHECK(translation_error(est, gt) <= 1e-4);
    } catch (const DegenerateConfiguration&) {
      // acceptable outcome
    }
  }
}

TEST_CASE("epnp input errors") {
  const auto k = default_camera();
  std::mt19937_64 rng(3);
  const Pose gt = random_pose(rng);
  CHECK_THROWS_AS(epnp(exact_correspondences(random_points(rng, 3), gt, k), k), InsufficientData);

  auto six = exact_correspondences(random_points(rng, 6), gt, k);
  six.valid[0] = six.valid[1] = six.valid[2] = false;
  CHECK_THROWS_AS(epnp(six, k), InsufficientData);

  std::vector<Vec3> line;
  for (int i = 0; i < 8; ++i) line.emplace_back(0.01 * i, 0.02 * i, -0.01 * i);
  CHECK_THROWS_AS(epnp(exact_correspondences(line, gt, k), k), DegenerateConfiguration);

  std::vector<Vec3> same(6, Vec3(0.01, 0.0, 0.0));
  CHECK_THROWS_AS(epnp(exact_correspondences(same, gt, k), k), DegenerateConfiguration);

  CorrespondenceSet bad = exact_correspondences(random_points(rng, 6), gt, k);
  bad.valid.pop_back();
  CHECK_THROWS_AS(epnp(bad, k), InvalidArgument);
}

TEST_CASE("invalid pairs never enter the solver") {
  const auto k = default_camera();
  std::mt19937_64 rng(11);
  const Pose gt = random_pose(rng);
  auto corrs = exact_correspondences(random_points(rng, 20), gt, k);
  for (std::size_t i = 0; i < corrs.size(); i += 3) {
    corrs.image_points[i] += Vec2(300, -200);
    corrs.valid[i] = false;
  }
  const Pose est = epnp(corrs, k);
  CHECK(rotation_error_deg(est, gt) <= 0.01);
  const auto err = reprojection_errors(corrs, k, est);
  CHECK(std::isinf(err[0]));
}

TEST_CASE("refine_pose converges from a perturbed start") {
  const auto k = default_camera();
  std::mt19937_64 rng(5);
  const Pose gt = random_pose(rng);
  const auto corrs = exact_correspondences(random_points(rng, 30), gt, k);
  Pose start = gt;
  start.rotation = axis_angle(Vec3(1, 2, 3).normalized(), 0.05) * start.rotation;
  start.translation += Vec3(0.01, -0.01, 0.03);
  const Pose est = refine_pose(corrs, k, start, 30);
  CHECK(rotation_error_deg(est, gt) <= 1e-4);
  CHECK(translation_error(est, gt) <= 1e-6);
}

TEST_CASE("ransac_pnp on 512 exact correspondences") {
  const auto k = default_camera();
  std::mt19937_64 rng(21);
  const Pose gt = random_pose(rng);
  const auto corrs = exact_correspondences(random_points(rng, 512), gt, k);
  const PoseEstimate est = ransac_pnp(corrs, k, SolverConfig{});
  CHECK(rotation_error_deg(est.pose, gt) <= 0.01);
  CHECK(translation_error(est.pose, gt) <= 1e-4);
  CHECK(est.inlier_count == 512);
  CHECK(std::all_of(est.inliers.begin(), est.inliers.end(), [](bool b) { return b; }));
}

TEST_CASE("ransac_pnp with 30% outliers and 1 px noise") {
  const auto k = default_camera();
  int good = 0;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    std::mt19937_64 rng(seed);
    const Pose gt = random_pose(rng);
    auto corrs = exact_correspondences(random_points(rng, 200), gt, k);
    std::normal_distribution<double> noise(0.0, 1.0);
    std::uniform_real_distribution<double> ux(0.0, 640.0), uy(0.0, 480.0), coin(0.0, 1.0);
    for (auto& p : corrs.image_points) {
      if (coin(rng) < 0.3) {
        p = Vec2(ux(rng), uy(rng));
      } else {
        p += Vec2(noise(rng), noise(rng));
      }
    }
    SolverConfig cfg;
    cfg.seed = seed;
    try {
      const PoseEstimate est = ransac_pnp(corrs, k, cfg);
      good += rotation_error_deg(est.pose, gt) <= 2.0 && translation_error(est.pose, gt) <= 0.02;
    } catch (const NoConsensus&) {
    }
  }
  MESSAGE("ransac success: " << good << "/200");
  CHECK(good >= 190);
}

TEST_CASE("all-outlier input raises NoConsensus") {
  const auto k = default_camera();
  std::mt19937_64 rng(9);
  CorrespondenceSet corrs;
  std::uniform_real_distribution<double> ux(0.0, 640.0), uy(0.0, 480.0);
  for (const auto& p : random_points(rng, 100)) corrs.push_back(p, Vec2(ux(rng), uy(rng)));
  CHECK_THROWS_AS(ransac_pnp(corrs, k, SolverConfig{}), NoConsensus);
  CHECK_THROWS_AS(spatial_coherence_solve(corrs, k, SolverConfig{}), NoConsensus);
}

TEST_CASE("unreachable min_inliers raises NoConsensus") {
  const auto k = default_camera();
  std::mt19937_64 rng(10);
  const auto corrs = exact_correspondences(random_points(rng, 40), random_pose(rng), k);
  SolverConfig cfg;
  cfg.min_inliers = 41;
  CHECK_THROWS_AS(ransac_pnp(corrs, k, cfg), NoConsensus);
  CHECK_THROWS_AS(spatial_coherence_solve(corrs, k, cfg), NoConsensus);
}

TEST_CASE("solver config validation") {
  SolverConfig cfg;
  cfg.reproj_threshold = 0.0;
  CHECK_THROWS_AS(cfg.validate(), InvalidArgument);
  cfg = SolverConfig{};
  cfg.ransac_iters = 0;
  CHECK_THROWS_AS(cfg.validate(), InvalidArgument);
  cfg = SolverConfig{};
  cfg.min_inliers = 3;
  CHECK_THROWS_AS(cfg.validate(), InvalidArgument);
}

TEST_CASE("spatial coherence matches ransac on clean data") {
  const auto k = default_camera();
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed + 500);
    const Pose gt = random_pose(rng);
    const auto corrs = exact_correspondences(random_points(rng, 512), gt, k);
    SolverConfig cfg;
    cfg.seed = seed;
    const PoseEstimate a = ransac_pnp(corrs, k, cfg);
    const PoseEstimate b = spatial_coherence_solve(corrs, k, cfg);
    CHECK((a.pose.rotation - b.pose.rotation).cwiseAbs().maxCoeff() <= 1e-6);
    CHECK((a.pose.translation - b.pose.translation).cwiseAbs().maxCoeff() <= 1e-6);
    CHECK(a.inliers == b.inliers);
  }
}

TEST_CASE("isolated MSB flips are never confirmed") {
  const auto k = default_camera();
  const GridSpec grid;
  const ObjectModel toy = make_toy_object();
  const KeypointSet kps = farthest_point_sample(toy, 256);
  const KnnGraph graph = build_knn_graph(kps, 5);
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    std::mt19937_64 rng(seed);
    const Pose gt = random_pose(rng);
    const Projection proj = project(kps.points, gt, k);
    const RoiTransform roi = roi_around(proj.pixels);
    BinaryCodeSet codes = encode_projections(to_roi(proj.pixels, roi), grid);

    // pick ~10% of the keypoints, none adjacent to another pick in the graph
    std::vector<int> order(kps.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    std::set<int> flipped;
    const std::size_t target = kps.size() / 10;
    for (int i : order) {
      if (flipped.size() == target) break;
      bool isolated = true;
      for (int f : flipped) {
        const auto ni = graph.neighbors(i), nf = graph.neighbors(f);
        if (std::find(ni.begin(), ni.end(), f) != ni.end() || std::find(nf.begin(), nf.end(), i) != nf.end()) {
          isolated = false;
        }
      }
      if (!isolated) continue;
      flipped.insert(i);
      auto& bits = (rng() & 1) ? codes[i].x : codes[i].y;
      bits[0] ^= 1;
    }
    REQUIRE(flipped.size() == target);

    const DecodedPoints dec = decode_codes(codes, grid);
    CorrespondenceSet corrs;
    for (std::size_t i = 0; i < kps.size(); ++i) corrs.push_back(kps.points[i], roi.from_roi(dec.points[i]), dec.valid[i]);
    SolverConfig cfg;
    cfg.seed = seed;
    const PoseEstimate est = spatial_coherence_solve(corrs, k, cfg);
    for (int f : flipped) CHECK_FALSE(est.confirmed[f]);
    CHECK(rotation_error_deg(est.pose, gt) <= 2.0);
  }
}

TEST_CASE("returned inliers are exactly the pairs under threshold") {
  const auto k = default_camera();
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed + 900);
    const Pose gt = random_pose(rng);
    auto corrs = exact_correspondences(random_points(rng, 80), gt, k);
    std::normal_distribution<double> noise(0.0, 1.5);
    for (std::size_t i = 0; i < corrs.size(); ++i) {
      corrs.image_points[i] += Vec2(noise(rng), noise(rng));
      if (i % 4 == 0) corrs.image_points[i] += Vec2(40, 25);
    }
    SolverConfig cfg;
    cfg.seed = seed;
    for (const PoseEstimate& est : {ransac_pnp(corrs, k, cfg), spatial_coherence_solve(corrs, k, cfg)}) {
      const auto err = reprojection_errors(corrs, k, est.pose);
      std::size_t count = 0;
      double sum = 0.0;
      for (std::size_t i = 0; i < corrs.size(); ++i) {
        CHECK(est.inliers[i] == (err[i] <= cfg.reproj_threshold));
        if (est.inliers[i]) {
          ++count;
          sum += err[i];
        }
      }
      CHECK(est.inlier_count == count);
      CHECK(est.mean_error == doctest::Approx(sum / count));
      CHECK(est.pose.is_valid());
    }
  }
}

TEST_CASE("solvers are deterministic for a fixed seed") {
  const auto k = default_camera();
  std::mt19937_64 rng(42);
  const Pose gt = random_pose(rng);
  auto corrs = exact_correspondences(random_points(rng, 150), gt, k);
  std::uniform_real_distribution<double> u(0.0, 400.0);
  for (std::size_t i = 0; i < corrs.size(); i += 3) corrs.image_points[i] = Vec2(u(rng), u(rng));
  SolverConfig cfg;
  cfg.seed = 123;
  for (int solver = 0; solver < 2; ++solver) {
    const auto run = [&] { return solver ? spatial_coherence_solve(corrs, k, cfg) : ransac_pnp(corrs, k, cfg); };
    const PoseEstimate a = run(), b = run();
    CHECK(a.pose.rotation == b.pose.rotation);
    CHECK(a.pose.translation == b.pose.translation);
    CHECK(a.inliers == b.inliers);
    CHECK(a.confirmed == b.confirmed);
    CHECK(a.mean_error == b.mean_error);
  }
}

TEST_CASE("mask_filter") {
  const GridSpec grid;
  RoiTransform roi;
  roi.bbox_origin = Vec2(100, 50);
  roi.bbox_size = Vec2(128, 128);
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(90.0, 240.0);
  CorrespondenceSet corrs;
  for (int i = 0; i < 500; ++i) corrs.push_back(Vec3(i, 0, 0), Vec2(u(rng), u(rng) - 40.0), i % 7 != 0);

  SUBCASE("all ones keeps every in-RoI pair") {
    const auto out = mask_filter(corrs, GridMask::filled(6, true), grid, roi);
    for (std::size_t i = 0; i < corrs.size(); ++i) {
      const Vec2 q = roi.to_roi(corrs.image_points[i]);
      const bool inside = q.x() >= 0 && q.y() >= 0 && q.x() < 256 && q.y() < 256;
      CHECK(out.valid[i] == (corrs.valid[i] && inside));
    }
  }
  SUBCASE("all ones on in-RoI pairs is the identity") {
    CorrespondenceSet in;
    for (std::size_t i = 0; i < corrs.size(); ++i) {
      const Vec2 q = roi.to_roi(corrs.image_points[i]);
      if (q.x() >= 0 && q.y() >= 0 && q.x() < 256 && q.y() < 256) {
        in.push_back(corrs.object_points[i], corrs.image_points[i], corrs.valid[i]);
      }
    }
    const auto out = mask_filter(in, GridMask::filled(6, true), grid, roi);
    CHECK(out.valid == in.valid);
    CHECK(out.image_points == in.image_points);
  }
  SUBCASE("all zeros invalidates everything") {
    const auto out = mask_filter(corrs, GridMask::filled(6, false), grid, roi);
    CHECK(out.valid_count() == 0);
  }
  SUBCASE("half-plane mask matches a per-pair cell lookup") {
    GridMask mask = GridMask::filled(6, false);
    for (int iy = 0; iy < 64; ++iy)
      for (int ix = 0; ix < 32; ++ix) mask.set(ix, iy, true);
    const auto out = mask_filter(corrs, mask, grid, roi);
    for (std::size_t i = 0; i < corrs.size(); ++i) {
      const Vec2 q = (corrs.image_points[i] - roi.bbox_origin) * 2.0;
      const bool inside = q.x() >= 0 && q.y() >= 0 && q.x() < 256 && q.y() < 256;
      const bool left = static_cast<int>(std::floor(q.x() / 4.0)) < 32;
      CHECK(out.valid[i] == (corrs.valid[i] && inside && left));
    }
  }
  SUBCASE("mask resolution must match the grid") {
    CHECK_THROWS_AS(mask_filter(corrs, GridMask::filled(5, true), grid, roi), InvalidArgument);
  }
}
