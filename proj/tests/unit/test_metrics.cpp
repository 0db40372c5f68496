#include <doctest.h>

#include <random>

#include "gridpose/errors.hpp"
#include "gridpose/metrics.hpp"
#include "gridpose/shapes.hpp"
#include "synthetic.hpp"

using namespace gridpose;
using namespace testsupport;

namespace {

ObjectModel cube_vertices() {
  ObjectModel m;
  for (int i = 0; i < 8; ++i) m.vertices.emplace_back(i & 1 ? 0.05 : -0.05, i & 2 ? 0.05 : -0.05, i & 4 ? 0.05 : -0.05);
  m.diameter = object_diameter(m.vertices);
  return m;
}

ObjectModel random_cloud(std::mt19937_64& rng, int n) {
  ObjectModel m;
  m.vertices = random_points(rng, n, 0.2);
  m.diameter = object_diameter(m.vertices);
  return m;
}

double brute_add(const Pose& p, const Pose& g, const ObjectModel& m) {
  double s = 0;
  for (const auto& v : m.vertices) {
    const Vec3 a = p.rotation * v + p.translation, b = g.rotation * v + g.translation;
    s += std::sqrt((a - b).dot(a - b));
  }
  return s / m.vertices.size();
}

}  // namespace

TEST_CASE("add_error") {
  std::mt19937_64 rng(1);
  const ObjectModel m = random_cloud(rng, 300);
  const Pose gt = random_pose(rng);
  CHECK(add_error(gt, gt, m) == 0.0);
  Pose shifted = gt;
  const Vec3 dt(0.01, -0.02, 0.005);
  shifted.translation += dt;
  CHECK(add_error(shifted, gt, m) == doctest::Approx(dt.norm()).epsilon(1e-12));
  for (int i = 0; i < 20; ++i) {
    const Pose a = random_pose(rng), b = random_pose(rng);
    CHECK(std::abs(add_error(a, b, m) - brute_add(a, b, m)) <= 1e-9);
  }
}

TEST_CASE("adds_error") {
  const ObjectModel cube = cube_vertices();
  std::mt19937_64 rng(2);
  const Pose gt = random_pose(rng);
  CHECK(adds_error(gt, gt, cube) == 0.0);
  Pose turned = gt;
  turned.rotation = gt.rotation * axis_angle(Vec3::UnitZ(), M_PI / 2);
  CHECK(adds_error(turned, gt, cube) <= 1e-12);
  CHECK(add_error(turned, gt, cube) > 0.01);

  const ObjectModel m = random_cloud(rng, 200);
  for (int i = 0; i < 50; ++i) {
    const Pose a = random_pose(rng), b = random_pose(rng);
    const double s = adds_error(a, b, m);
    CHECK(s <= add_error(a, b, m) + 1e-15);
    // nearest-neighbour oracle
    double sum = 0;
    for (const auto& v : m.vertices) {
      double best = 1e300;
      for (const auto& w : m.vertices) best = std::min(best, (a.apply(v) - b.apply(w)).norm());
      sum += best;
    }
    CHECK(std::abs(s - sum / m.vertices.size()) <= 1e-12);
  }
}

TEST_CASE("metrics are invariant to re-basing both poses") {
  std::mt19937_64 rng(3);
  const ObjectModel m = random_cloud(rng, 100);
  for (int i = 0; i < 20; ++i) {
    const Pose a = random_pose(rng), b = random_pose(rng), w = random_pose(rng);
    const Pose wa = w.compose(a), wb = w.compose(b);
    CHECK(add_error(wa, wb, m) == doctest::Approx(add_error(a, b, m)).epsilon(1e-9));
    CHECK(adds_error(wa, wb, m) == doctest::Approx(adds_error(a, b, m)).epsilon(1e-9));
    CHECK(rot_trans_error(wa, wb).degrees == doctest::Approx(rot_trans_error(a, b).degrees).epsilon(1e-7));
  }
}

TEST_CASE("recall_at") {
  CHECK(recall_at({0, 0, 0}, 0.2, 0.1) == 100.0);
  CHECK(recall_at({0.25, 0.25}, 0.5, 0.5) == 0.0);  // exactly at the threshold is excluded
  CHECK(recall_at({0.25, 0.2499}, 0.5, 0.5) == 50.0);
  CHECK_THROWS_AS(recall_at({}, 0.2, 0.1), UndefinedInput);
  CHECK_THROWS_AS(recall_at({0.1}, 0.0, 0.1), InvalidArgument);

  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0, 0.05);
  std::vector<double> e(1000);
  for (auto& x : e) x = u(rng);
  double prev = -1;
  for (double f : {0.01, 0.02, 0.05, 0.1, 0.2}) {
    int count = 0;
    for (double x : e) count += x < f * 0.2;
    const double r = recall_at(e, 0.2, f);
    CHECK(r == doctest::Approx(count / 10.0));
    CHECK(r >= prev);
    prev = r;
  }
}

TEST_CASE("auc") {
  CHECK(auc({0, 0, 0}) == doctest::Approx(100.0));
  CHECK(std::abs(auc({0.05}) - 50.0) <= 0.1);
  CHECK(auc({0.5, 1.0}) == 0.0);
  CHECK_THROWS_AS(auc({}), UndefinedInput);

  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0, 0.15);
  std::vector<double> e(500);
  for (auto& x : e) x = u(rng);
  // fine-grained oracle: midpoint integral of the accuracy curve
  double fine = 0;
  const int n = 100000;
  for (int k = 0; k < n; ++k) {
    const double t = 0.10 * (k + 0.5) / n;
    int c = 0;
    for (double x : e) c += x < t;
    fine += static_cast<double>(c) / e.size();
  }
  fine = 100.0 * fine / n;
  CHECK(std::abs(auc(e) - fine) <= 0.2);
  CHECK(std::abs(auc(e, 0.1, 2000) - auc(e, 0.1, 1000)) < 0.05);
}

TEST_CASE("rot_trans_error") {
  std::mt19937_64 rng(6);
  const Pose gt = random_pose(rng);
  const auto same = rot_trans_error(gt, gt);
  CHECK(same.degrees == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(same.meters == 0.0);

  Pose turned = gt;
  turned.rotation = gt.rotation * axis_angle(Vec3::UnitZ(), 5.0 * M_PI / 180.0);
  CHECK(std::abs(rot_trans_error(turned, gt).degrees - 5.0) <= 1e-6);

  turned.rotation = gt.rotation * axis_angle(Vec3::UnitZ(), 30.0 * M_PI / 180.0);
  for (int count : {4, 12, 360}) {
    const auto sym = SymmetrySpec::continuous(Vec3::UnitZ(), count);
    CHECK(rot_trans_error(turned, gt, sym).degrees <= 360.0 / count + 1e-9);
  }
  const auto flip = SymmetrySpec::discrete({axis_angle(Vec3::UnitX(), M_PI)});
  Pose flipped = gt;
  flipped.rotation = gt.rotation * axis_angle(Vec3::UnitX(), M_PI);
  flipped.translation += Vec3(0, 0, 0.01);
  const auto e = rot_trans_error(flipped, gt, flip);
  CHECK(e.degrees <= 1e-6);
  CHECK(e.meters == doctest::Approx(0.01));
}

TEST_CASE("symmetry spec validation and json") {
  Mat3 bad = Mat3::Identity();
  bad(0, 0) = -1;
  CHECK_THROWS_AS(SymmetrySpec::discrete({bad}), InvalidArgument);
  CHECK_THROWS_AS(SymmetrySpec::continuous(Vec3(0, 0, 2)), InvalidArgument);
  const auto s = SymmetrySpec::continuous(Vec3::UnitY(), 90);
  const auto back = SymmetrySpec::from_json(s.to_json());
  CHECK(back.kind == SymmetrySpec::Kind::continuous);
  CHECK(back.discretization == 90);
  CHECK(back.candidates().size() == 90);
  CHECK(SymmetrySpec::none().candidates().size() == 1);
}

TEST_CASE("evaluate scores failures as maximal error") {
  std::mt19937_64 rng(7);
  const ObjectModel m = random_cloud(rng, 100);
  std::vector<PoseSample> samples;
  for (int i = 0; i < 10; ++i) {
    const Pose gt = random_pose(rng);
    PoseSample s{gt, gt, false};
    if (i < 3) s.failed = true;
    if (i == 3) s.pred.translation += Vec3(0.5, 0, 0);
    samples.push_back(s);
  }
  const MetricsReport r = evaluate(samples, m, SymmetrySpec::none());
  CHECK(r.samples == 10);
  CHECK(r.failures == 3);
  CHECK(r.recall_01d == doctest::Approx(60.0));
  CHECK(r.recall_002d <= r.recall_005d);
  CHECK(r.recall_005d <= r.recall_01d);
  CHECK(r.auc_add_s == doctest::Approx(60.0));
  REQUIRE(r.deg_cm.size() == 3);
  CHECK(r.deg_cm[0].percent == doctest::Approx(60.0));
  const auto j = r.to_json();
  CHECK(j["add_s_0.1d"].get<double>() == doctest::Approx(60.0));
  CHECK(r.csv_row("x").rfind("x,10,", 0) == 0);
}
