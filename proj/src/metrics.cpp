#include "gridpose/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>

#include "gridpose/errors.hpp"

namespace gridpose {

SymmetrySpec SymmetrySpec::discrete(std::vector<Mat3> rotations) {
  SymmetrySpec s;
  s.kind = Kind::discrete;
  s.rotations = std::move(rotations);
  s.validate();
  return s;
}

SymmetrySpec SymmetrySpec::continuous(const Vec3& axis, int discretization) {
  SymmetrySpec s;
  s.kind = Kind::continuous;
  s.axis = axis;
  s.discretization = discretization;
  s.validate();
  return s;
}

void SymmetrySpec::validate() const {
  if (kind == Kind::discrete) {
    for (const auto& r : rotations) {
      Pose p;
      p.rotation = r;
      if (!p.is_valid(1e-6)) throw InvalidArgument("symmetry rotation is not a proper rotation");
    }
  }
  if (kind == Kind::continuous) {
    if (std::abs(axis.norm() - 1.0) > 1e-6) throw InvalidArgument("symmetry axis must be a unit vector");
    if (discretization < 1) throw InvalidArgument("symmetry discretization must be positive");
  }
}

std::vector<Mat3> SymmetrySpec::candidates() const {
  std::vector<Mat3> out{Mat3::Identity()};
  if (kind == Kind::discrete) {
    out.insert(out.end(), rotations.begin(), rotations.end());
  } else if (kind == Kind::continuous) {
    for (int k = 1; k < discretization; ++k) out.push_back(axis_angle(axis, 2.0 * M_PI * k / discretization));
  }
  return out;
}

SymmetrySpec SymmetrySpec::from_json(const nlohmann::json& j) {
  const std::string kind = j.value("kind", "none");
  if (kind == "none") return none();
  if (kind == "discrete") {
    std::vector<Mat3> rots;
    for (const auto& r : j.at("rotations")) {
      if (r.size() != 9) throw InvalidArgument("symmetry rotation needs 9 entries");
      Mat3 m;
      for (int i = 0; i < 9; ++i) m(i / 3, i % 3) = r[i].get<double>();
      rots.push_back(m);
    }
    return discrete(std::move(rots));
  }
  if (kind == "continuous") {
    const auto a = j.at("axis");
    return continuous(Vec3(a[0].get<double>(), a[1].get<double>(), a[2].get<double>()),
                      j.value("discretization", 360));
  }
  throw InvalidArgument("unknown symmetry kind '" + kind + "'");
}

nlohmann::json SymmetrySpec::to_json() const {
  nlohmann::json j;
  switch (kind) {
    case Kind::none:
      j["kind"] = "none";
      break;
    case Kind::discrete: {
      j["kind"] = "discrete";
      j["rotations"] = nlohmann::json::array();
      for (const auto& r : rotations) {
        std::vector<double> flat;
        for (int i = 0; i < 9; ++i) flat.push_back(r(i / 3, i % 3));
        j["rotations"].push_back(flat);
      }
      break;
    }
    case Kind::continuous:
      j["kind"] = "continuous";
      j["axis"] = {axis.x(), axis.y(), axis.z()};
      j["discretization"] = discretization;
      break;
  }
  return j;
}

double add_error(const Pose& pred, const Pose& gt, const ObjectModel& model) {
  if (model.vertices.empty()) throw UndefinedInput("ADD of an empty model");
  double sum = 0.0;
  for (const auto& v : model.vertices) sum += (pred.apply(v) - gt.apply(v)).norm();
  return sum / static_cast<double>(model.vertices.size());
}

double adds_error(const Pose& pred, const Pose& gt, const ObjectModel& model) {
  if (model.vertices.empty()) throw UndefinedInput("ADD-S of an empty model");
  std::vector<Vec3> target(model.vertices.size());
  for (std::size_t i = 0; i < target.size(); ++i) target[i] = gt.apply(model.vertices[i]);
  double sum = 0.0;
  for (const auto& v : model.vertices) {
    const Vec3 p = pred.apply(v);
    double best = std::numeric_limits<double>::infinity();
    for (const auto& q : target) best = std::min(best, (p - q).squaredNorm());
    sum += std::sqrt(best);
  }
  return sum / static_cast<double>(model.vertices.size());
}

double recall_at(const std::vector<double>& errors, double diameter, double fraction) {
  if (errors.empty()) throw UndefinedInput("recall of an empty error list");
  if (!(diameter > 0.0)) throw InvalidArgument("diameter must be positive");
  const double thr = fraction * diameter;
  const auto hits = std::count_if(errors.begin(), errors.end(), [thr](double e) { return e < thr; });
  return 100.0 * static_cast<double>(hits) / static_cast<double>(errors.size());
}

double auc(const std::vector<double>& errors, double max_threshold, int steps) {
  if (errors.empty()) throw UndefinedInput("AUC of an empty error list");
  if (!(max_threshold > 0.0) || steps < 1) throw InvalidArgument("AUC needs a positive threshold and step count");
  std::vector<double> sorted = errors;
  std::sort(sorted.begin(), sorted.end());
  double total = 0.0;
  for (int k = 1; k <= steps; ++k) {
    const double t = max_threshold * k / steps;
    const auto below = std::lower_bound(sorted.begin(), sorted.end(), t) - sorted.begin();
    total += static_cast<double>(below) / static_cast<double>(sorted.size());
  }
  return 100.0 * total / steps;
}

RotTransError rot_trans_error(const Pose& pred, const Pose& gt, const SymmetrySpec& sym) {
  RotTransError out;
  out.degrees = std::numeric_limits<double>::infinity();
  for (const auto& s : sym.candidates()) {
    out.degrees = std::min(out.degrees, rotation_angle_between(pred.rotation, gt.rotation * s) * 180.0 / M_PI);
  }
  out.meters = (pred.translation - gt.translation).norm();
  return out;
}

MetricsReport evaluate(const std::vector<PoseSample>& samples, const ObjectModel& model, const SymmetrySpec& sym,
                       const std::vector<std::pair<double, double>>& deg_cm) {
  if (samples.empty()) throw UndefinedInput("no samples to evaluate");
  const double inf = std::numeric_limits<double>::infinity();
  const double diameter = model.diameter > 0 ? model.diameter : object_diameter(model.vertices);
  std::vector<double> adds, add_s;
  std::vector<RotTransError> rt;
  MetricsReport r;
  r.samples = samples.size();
  for (const auto& s : samples) {
    if (s.failed) {
      ++r.failures;
      adds.push_back(inf);
      add_s.push_back(inf);
      rt.push_back({inf, inf});
      continue;
    }
    const double e_s = adds_error(s.pred, s.gt, model);
    adds.push_back(e_s);
    add_s.push_back(sym.symmetric() ? e_s : add_error(s.pred, s.gt, model));
    rt.push_back(rot_trans_error(s.pred, s.gt, sym));
  }
  r.recall_002d = recall_at(add_s, diameter, 0.02);
  r.recall_005d = recall_at(add_s, diameter, 0.05);
  r.recall_01d = recall_at(add_s, diameter, 0.10);
  r.auc_adds = auc(adds);
  r.auc_add_s = auc(add_s);
  for (const auto& [deg, cm] : deg_cm) {
    const auto hits = std::count_if(rt.begin(), rt.end(),
                                    [&](const RotTransError& e) { return e.degrees < deg && e.meters < cm / 100.0; });
    r.deg_cm.push_back({deg, cm, 100.0 * static_cast<double>(hits) / static_cast<double>(rt.size())});
  }
  return r;
}

nlohmann::json MetricsReport::to_json() const {
  nlohmann::json j = {{"samples", samples},          {"failures", failures},   {"add_s_0.02d", recall_002d},
                      {"add_s_0.05d", recall_005d},  {"add_s_0.1d", recall_01d}, {"auc_adds", auc_adds},
                      {"auc_add_s", auc_add_s}};
  j["deg_cm"] = nlohmann::json::array();
  for (const auto& d : deg_cm) j["deg_cm"].push_back({{"deg", d.degrees}, {"cm", d.centimeters}, {"recall", d.percent}});
  return j;
}

std::string MetricsReport::csv_header() {
  return "method,samples,ADD(-S) 0.02d,ADD(-S) 0.05d,ADD(-S) 0.1d,AUC ADD-S,AUC ADD(-S)";
}

std::string MetricsReport::csv_row(const std::string& label) const {
  std::ostringstream os;
  os << std::fixed << std::setprecision(1) << label << ',' << samples << ',' << recall_002d << ',' << recall_005d
     << ',' << recall_01d << ',' << auc_adds << ',' << auc_add_s;
  return os.str();
}

}  // namespace gridpose
