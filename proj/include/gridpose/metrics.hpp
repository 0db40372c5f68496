#pragma once

#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "gridpose/geometry.hpp"

namespace gridpose {

struct SymmetrySpec {
  enum class Kind { none, discrete, continuous };
  Kind kind = Kind::none;
  std::vector<Mat3> rotations;  // discrete: the non-identity symmetry rotations
  Vec3 axis = Vec3::UnitZ();    // continuous: unit axis in the object frame
  int discretization = 360;

  static SymmetrySpec none() { return {}; }
  static SymmetrySpec discrete(std::vector<Mat3> rotations);
  static SymmetrySpec continuous(const Vec3& axis, int discretization = 360);

  void validate() const;
  bool symmetric() const { return kind != Kind::none; }
  // Every rotation S considered when matching poses, identity first.
  std::vector<Mat3> candidates() const;

  static SymmetrySpec from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

double add_error(const Pose& pred, const Pose& gt, const ObjectModel& model);
double adds_error(const Pose& pred, const Pose& gt, const ObjectModel& model);

// Percentage of errors strictly below fraction * diameter.
double recall_at(const std::vector<double>& errors, double diameter, double fraction);

// Mean accuracy over `steps` thresholds max*k/steps, k = 1..steps, in percent.
double auc(const std::vector<double>& errors, double max_threshold = 0.10, int steps = 1000);

struct RotTransError {
  double degrees = 0.0;
  double meters = 0.0;
};
RotTransError rot_trans_error(const Pose& pred, const Pose& gt, const SymmetrySpec& sym = {});

struct DegCmRecall {
  double degrees = 0.0;
  double centimeters = 0.0;
  double percent = 0.0;
};

struct MetricsReport {
  std::size_t samples = 0;
  std::size_t failures = 0;
  double recall_002d = 0.0;  // ADD(-S)
  double recall_005d = 0.0;
  double recall_01d = 0.0;
  double auc_adds = 0.0;
  double auc_add_s = 0.0;  // ADD(-S): ADD-S for symmetric objects, ADD otherwise
  std::vector<DegCmRecall> deg_cm;

  nlohmann::json to_json() const;
  static std::string csv_header();
  std::string csv_row(const std::string& label) const;
};

// One evaluated sample; a failed solve is scored as infinite error.
struct PoseSample {
  Pose pred;
  Pose gt;
  bool failed = false;
};

MetricsReport evaluate(const std::vector<PoseSample>& samples, const ObjectModel& model, const SymmetrySpec& sym,
                       const std::vector<std::pair<double, double>>& deg_cm = {{2, 2}, {5, 5}, {10, 10}});

}  // namespace gridpose
