#include "gridpose/solver.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <string>

#include <Eigen/Dense>

#include "gridpose/errors.hpp"

namespace gridpose {

std::size_t CorrespondenceSet::valid_count() const {
  return static_cast<std::size_t>(std::count(valid.begin(), valid.end(), true));
}

void CorrespondenceSet::validate() const {
  if (image_points.size() != object_points.size() || valid.size() != object_points.size()) {
    throw InvalidArgument("correspondence arrays have different lengths");
  }
  if (!source_cells.empty() && source_cells.size() != object_points.size()) {
    throw InvalidArgument("source cell array length mismatch");
  }
}

void CorrespondenceSet::push_back(const Vec3& p3, const Vec2& p2, bool is_valid) {
  object_points.push_back(p3);
  image_points.push_back(p2);
  valid.push_back(is_valid);
  if (!source_cells.empty()) source_cells.emplace_back();
}

void SolverConfig::validate() const {
  if (!(reproj_threshold > 0.0)) throw InvalidArgument("reprojection threshold must be positive");
  if (ransac_iters < 1 || progx_iters < 1) throw InvalidArgument("iteration counts must be positive");
  if (min_inliers < 4) throw InvalidArgument("min_inliers must be at least 4");
  if (coherence_neighbors < 1) throw InvalidArgument("coherence neighbour count must be positive");
}

std::vector<double> reprojection_errors(const CorrespondenceSet& corrs, const CameraIntrinsics& intr,
                                        const Pose& pose) {
  std::vector<double> err(corrs.size(), std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < corrs.size(); ++i) {
    if (!corrs.valid[i]) continue;
    const Vec3 c = pose.apply(corrs.object_points[i]);
    if (c.z() <= 0.0) continue;
    const Vec2 uv(intr.fx * c.x() / c.z() + intr.cx, intr.fy * c.y() / c.z() + intr.cy);
    err[i] = (uv - corrs.image_points[i]).norm();
  }
  return err;
}

namespace {

using Eigen::Matrix;
using Eigen::MatrixXd;
using Eigen::VectorXd;

struct Pca {
  Vec3 mean;
  Vec3 eigenvalues;  // descending
  Mat3 axes;         // columns match eigenvalues
};

Pca principal_axes(std::span<const Vec3> pts) {
  Pca out;
  out.mean = centroid(pts);
  Mat3 cov = Mat3::Zero();
  for (const auto& p : pts) cov += (p - out.mean) * (p - out.mean).transpose();
  cov /= static_cast<double>(pts.size());
  Eigen::SelfAdjointEigenSolver<Mat3> es(cov);
  for (int i = 0; i < 3; ++i) {
    out.eigenvalues[i] = std::max(0.0, es.eigenvalues()[2 - i]);
    out.axes.col(i) = es.eigenvectors().col(2 - i);
  }
  if (out.axes.determinant() < 0) out.axes.col(2) *= -1.0;
  return out;
}

constexpr double kCollinearRatio = 1e-12;  // on variances: sigma ratio 1e-6
constexpr double kPlanarRatio = 1e-10;     // on variances: sigma ratio 1e-5

struct Subset {
  std::vector<Vec3> pw;
  std::vector<Vec2> uv;
};

Subset collect(const CorrespondenceSet& corrs) {
  Subset s;
  for (std::size_t i = 0; i < corrs.size(); ++i) {
    if (!corrs.valid[i]) continue;
    s.pw.push_back(corrs.object_points[i]);
    s.uv.push_back(corrs.image_points[i]);
  }
  return s;
}

double mean_reprojection(const Subset& s, const CameraIntrinsics& intr, const Mat3& r, const Vec3& t) {
  double sum = 0.0;
  for (std::size_t i = 0; i < s.pw.size(); ++i) {
    const Vec3 c = r * s.pw[i] + t;
    const Vec2 uv(intr.fx * c.x() / c.z() + intr.cx, intr.fy * c.y() / c.z() + intr.cy);
    sum += (uv - s.uv[i]).norm();
  }
  return sum / static_cast<double>(s.pw.size());
}

// Least-squares rigid transform mapping a onto b, with reflection correction.
void rigid_align(std::span<const Vec3> a, std::span<const Vec3> b, Mat3& r, Vec3& t) {
  const Vec3 ca = centroid(a), cb = centroid(b);
  Mat3 h = Mat3::Zero();
  for (std::size_t i = 0; i < a.size(); ++i) h += (b[i] - cb) * (a[i] - ca).transpose();
  Eigen::JacobiSVD<Mat3> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 d = Mat3::Identity();
  if ((svd.matrixU() * svd.matrixV().transpose()).determinant() < 0) d(2, 2) = -1.0;
  r = svd.matrixU() * d * svd.matrixV().transpose();
  t = cb - r * ca;
}

Pose levenberg_marquardt(const Subset& s, const CameraIntrinsics& intr, Pose pose, int iterations);

class Epnp {
 public:
  Epnp(const Subset& s, const CameraIntrinsics& intr, const Pca& pca) : s_(s), intr_(intr) {
    cw_[0] = pca.mean;
    for (int i = 0; i < 3; ++i) cw_[i + 1] = pca.mean + std::sqrt(pca.eigenvalues[i]) * pca.axes.col(i);
    Mat3 cc;
    for (int i = 0; i < 3; ++i) cc.col(i) = cw_[i + 1] - cw_[0];
    const Mat3 cc_inv = cc.inverse();
    alphas_.resize(s.pw.size());
    for (std::size_t i = 0; i < s.pw.size(); ++i) {
      const Vec3 a = cc_inv * (s.pw[i] - cw_[0]);
      alphas_[i] = {1.0 - a.sum(), a[0], a[1], a[2]};
    }
  }

  void solve(Mat3& r_out, Vec3& t_out) {
    const std::size_t n = s_.pw.size();
    MatrixXd m(2 * n, 12);
    for (std::size_t i = 0; i < n; ++i) {
      const double u = s_.uv[i].x(), v = s_.uv[i].y();
      for (int j = 0; j < 4; ++j) {
        const double a = alphas_[i][j];
        m.row(2 * i).segment<3>(3 * j) << a * intr_.fx, 0.0, a * (intr_.cx - u);
        m.row(2 * i + 1).segment<3>(3 * j) << 0.0, a * intr_.fy, a * (intr_.cy - v);
      }
    }
    const Matrix<double, 12, 12> mtm = m.transpose() * m;
    Eigen::SelfAdjointEigenSolver<Matrix<double, 12, 12>> es(mtm);
    // eigenvalues ascending: columns 0..3 span the approximate null space
    for (int k = 0; k < 4; ++k) null_[k] = es.eigenvectors().col(k);

    Matrix<double, 6, 10> l;
    Matrix<double, 6, 1> rho;
    build_l(l);
    int row = 0;
    for (int a = 0; a < 4; ++a)
      for (int b = a + 1; b < 4; ++b) rho[row++] = (cw_[a] - cw_[b]).squaredNorm();

    double best_err = std::numeric_limits<double>::infinity();
    for (int mode = 1; mode <= 3; ++mode) {
      std::array<double, 4> betas = initial_betas(mode, l, rho);
      gauss_newton(l, rho, betas);
      Mat3 r;
      Vec3 t;
      pose_from_betas(betas, r, t);
      if (s_.pw.size() < 6) {
        // few points leave a loose null space; polish on the image error
        Pose p{r, t};
        p = levenberg_marquardt(s_, intr_, p, 20);
        r = p.rotation;
        t = p.translation;
      }
      const double err = mean_reprojection(s_, intr_, r, t);
      if (err < best_err) {
        best_err = err;
        r_out = r;
        t_out = t;
      }
    }
    if (!std::isfinite(best_err)) throw DegenerateConfiguration("EPnP produced no finite solution");
  }

 private:
  Vec3 null_point(int k, int c) const { return null_[k].segment<3>(3 * c); }

  void build_l(Matrix<double, 6, 10>& l) const {
    int row = 0;
    for (int a = 0; a < 4; ++a) {
      for (int b = a + 1; b < 4; ++b) {
        std::array<Vec3, 4> dv;
        for (int k = 0; k < 4; ++k) dv[k] = null_point(k, a) - null_point(k, b);
        l.row(row++) << dv[0].dot(dv[0]), 2 * dv[0].dot(dv[1]), dv[1].dot(dv[1]), 2 * dv[0].dot(dv[2]),
            2 * dv[1].dot(dv[2]), dv[2].dot(dv[2]), 2 * dv[0].dot(dv[3]), 2 * dv[1].dot(dv[3]),
            2 * dv[2].dot(dv[3]), dv[3].dot(dv[3]);
      }
    }
  }

  // Linearized beta estimates; product order is
  // [b11 b12 b22 b13 b23 b33 b14 b24 b34 b44].
  static std::array<double, 4> initial_betas(int mode, const Matrix<double, 6, 10>& l,
                                             const Matrix<double, 6, 1>& rho) {
    std::array<double, 4> beta{0, 0, 0, 0};
    if (mode == 1) {
      Matrix<double, 6, 4> a;
      a << l.col(0), l.col(1), l.col(3), l.col(6);
      const Eigen::Vector4d x = a.jacobiSvd(Eigen::ComputeFullU | Eigen::ComputeFullV).solve(rho);
      const double s = x[0] < 0 ? -1.0 : 1.0;
      beta[0] = std::sqrt(std::abs(x[0]));
      for (int k = 1; k < 4; ++k) beta[k] = beta[0] > 0 ? s * x[k] / beta[0] : 0.0;
      return beta;
    }
    const int cols = mode == 2 ? 3 : 5;
    MatrixXd a(6, cols);
    for (int c = 0; c < cols; ++c) a.col(c) = l.col(c);
    const VectorXd x = a.jacobiSvd(Eigen::ComputeThinU | Eigen::ComputeThinV).solve(rho);
    if (x[0] < 0) {
      beta[0] = std::sqrt(-x[0]);
      beta[1] = x[2] < 0 ? std::sqrt(-x[2]) : 0.0;
    } else {
      beta[0] = std::sqrt(x[0]);
      beta[1] = x[2] > 0 ? std::sqrt(x[2]) : 0.0;
    }
    if (x[1] < 0) beta[0] = -beta[0];
    if (mode == 3) beta[2] = beta[0] != 0.0 ? x[3] / beta[0] : 0.0;
    return beta;
  }

  static void gauss_newton(const Matrix<double, 6, 10>& l, const Matrix<double, 6, 1>& rho,
                           std::array<double, 4>& b) {
    for (int iter = 0; iter < 5; ++iter) {
      Matrix<double, 6, 4> a;
      Matrix<double, 6, 1> res;
      for (int i = 0; i < 6; ++i) {
        const auto r = l.row(i);
        a(i, 0) = 2 * r[0] * b[0] + r[1] * b[1] + r[3] * b[2] + r[6] * b[3];
        a(i, 1) = r[1] * b[0] + 2 * r[2] * b[1] + r[4] * b[2] + r[7] * b[3];
        a(i, 2) = r[3] * b[0] + r[4] * b[1] + 2 * r[5] * b[2] + r[8] * b[3];
        a(i, 3) = r[6] * b[0] + r[7] * b[1] + r[8] * b[2] + 2 * r[9] * b[3];
        res[i] = rho[i] - (r[0] * b[0] * b[0] + r[1] * b[0] * b[1] + r[2] * b[1] * b[1] + r[3] * b[0] * b[2] +
                           r[4] * b[1] * b[2] + r[5] * b[2] * b[2] + r[6] * b[0] * b[3] + r[7] * b[1] * b[3] +
                           r[8] * b[2] * b[3] + r[9] * b[3] * b[3]);
      }
      const Eigen::Vector4d delta = a.colPivHouseholderQr().solve(res);
      if (!delta.allFinite()) return;
      for (int k = 0; k < 4; ++k) b[k] += delta[k];
    }
  }

  void pose_from_betas(const std::array<double, 4>& betas, Mat3& r, Vec3& t) const {
    std::array<Vec3, 4> cc;
    for (int c = 0; c < 4; ++c) {
      cc[c] = Vec3::Zero();
      for (int k = 0; k < 4; ++k) cc[c] += betas[k] * null_point(k, c);
    }
    std::vector<Vec3> pc(s_.pw.size());
    for (std::size_t i = 0; i < pc.size(); ++i) {
      pc[i] = Vec3::Zero();
      for (int c = 0; c < 4; ++c) pc[i] += alphas_[i][c] * cc[c];
    }
    if (pc[0].z() < 0) {
      for (auto& p : pc) p = -p;
    }
    rigid_align(s_.pw, pc, r, t);
  }

  const Subset& s_;
  const CameraIntrinsics& intr_;
  std::array<Vec3, 4> cw_;
  std::vector<std::array<double, 4>> alphas_;
  std::array<Matrix<double, 12, 1>, 4> null_;
};

Pose planar_pose(const Subset& s, const CameraIntrinsics& intr, const Pca& pca) {
  const std::size_t n = s.pw.size();
  Mat3 e = pca.axes;
  e.col(2) = e.col(0).cross(e.col(1));
  std::vector<Vec2> plane(n), img(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3 q = e.transpose() * (s.pw[i] - pca.mean);
    plane[i] = q.head<2>();
    img[i] = Vec2((s.uv[i].x() - intr.cx) / intr.fx, (s.uv[i].y() - intr.cy) / intr.fy);
  }
  // Hartley normalization of both point sets
  const auto normalizer = [](const std::vector<Vec2>& pts) {
    Vec2 c = Vec2::Zero();
    for (const auto& p : pts) c += p;
    c /= static_cast<double>(pts.size());
    double d = 0.0;
    for (const auto& p : pts) d += (p - c).norm();
    d /= static_cast<double>(pts.size());
    const double sc = d > 0 ? std::sqrt(2.0) / d : 1.0;
    Mat3 t;
    t << sc, 0, -sc * c.x(), 0, sc, -sc * c.y(), 0, 0, 1;
    return t;
  };
  const Mat3 ta = normalizer(plane), tb = normalizer(img);
  MatrixXd a(2 * n, 9);
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3 x = ta * plane[i].homogeneous();
    const Vec3 y = tb * img[i].homogeneous();
    a.row(2 * i) << 0, 0, 0, -x.x(), -x.y(), -1, y.y() * x.x(), y.y() * x.y(), y.y();
    a.row(2 * i + 1) << x.x(), x.y(), 1, 0, 0, 0, -y.x() * x.x(), -y.x() * x.y(), -y.x();
  }
  Eigen::JacobiSVD<MatrixXd> svd(a, Eigen::ComputeFullV);
  const VectorXd h = svd.matrixV().col(8);
  Mat3 hn;
  hn << h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8];
  Mat3 hm = tb.inverse() * hn * ta;
  const double scale = 2.0 / (hm.col(0).norm() + hm.col(1).norm());
  hm *= scale;
  if (hm(2, 2) < 0) hm = -hm;  // plane origin in front of the camera
  Mat3 rp;
  rp.col(0) = hm.col(0);
  rp.col(1) = hm.col(1);
  rp.col(2) = hm.col(0).cross(hm.col(1));
  Eigen::JacobiSVD<Mat3> rs(rp, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 d = Mat3::Identity();
  if ((rs.matrixU() * rs.matrixV().transpose()).determinant() < 0) d(2, 2) = -1;
  rp = rs.matrixU() * d * rs.matrixV().transpose();
  const Vec3 tp = hm.col(2);
  Pose pose;
  pose.rotation = rp * e.transpose();
  pose.translation = tp - pose.rotation * pca.mean;
  return pose;
}

Mat3 skew(const Vec3& v) {
  Mat3 m;
  m << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
  return m;
}

double reprojection_cost(const Subset& s, const CameraIntrinsics& intr, const Pose& p) {
  double cost = 0.0;
  for (std::size_t i = 0; i < s.pw.size(); ++i) {
    const Vec3 c = p.apply(s.pw[i]);
    if (c.z() <= 0) return std::numeric_limits<double>::infinity();
    const Vec2 uv(intr.fx * c.x() / c.z() + intr.cx, intr.fy * c.y() / c.z() + intr.cy);
    cost += (uv - s.uv[i]).squaredNorm();
  }
  return cost;
}

Pose levenberg_marquardt(const Subset& s, const CameraIntrinsics& intr, Pose pose, int iterations) {
  double lambda = 1e-3;
  double cost = reprojection_cost(s, intr, pose);
  for (int it = 0; it < iterations && std::isfinite(cost); ++it) {
    Matrix<double, 6, 6> jtj = Matrix<double, 6, 6>::Zero();
    Matrix<double, 6, 1> jtr = Matrix<double, 6, 1>::Zero();
    for (std::size_t i = 0; i < s.pw.size(); ++i) {
      const Vec3 rp = pose.rotation * s.pw[i];
      const Vec3 c = rp + pose.translation;
      const double iz = 1.0 / c.z();
      Matrix<double, 2, 3> dproj;
      dproj << intr.fx * iz, 0, -intr.fx * c.x() * iz * iz, 0, intr.fy * iz, -intr.fy * c.y() * iz * iz;
      Matrix<double, 3, 6> dc;
      dc << -skew(rp), Mat3::Identity();
      const Matrix<double, 2, 6> j = dproj * dc;
      const Vec2 r(intr.fx * c.x() * iz + intr.cx - s.uv[i].x(), intr.fy * c.y() * iz + intr.cy - s.uv[i].y());
      jtj += j.transpose() * j;
      jtr += j.transpose() * r;
    }
    bool improved = false;
    for (int tries = 0; tries < 10 && !improved; ++tries) {
      Matrix<double, 6, 6> a = jtj;
      a.diagonal() *= 1.0 + lambda;
      const Matrix<double, 6, 1> delta = a.ldlt().solve(-jtr);
      if (!delta.allFinite()) return pose;
      Pose cand;
      const Vec3 w = delta.head<3>();
      cand.rotation = (w.norm() > 0 ? axis_angle(w, w.norm()) : Mat3::Identity()) * pose.rotation;
      cand.translation = pose.translation + delta.tail<3>();
      const double c2 = reprojection_cost(s, intr, cand);
      if (c2 < cost) {
        pose = cand;
        cost = c2;
        lambda = std::max(lambda * 0.1, 1e-12);
        improved = true;
      } else {
        lambda *= 10.0;
      }
    }
    if (!improved) break;
  }
  return pose;
}

Pose solve_subset(const Subset& s, const CameraIntrinsics& intr) {
  if (s.pw.size() < 4) throw InsufficientData("EPnP needs at least 4 valid correspondences");
  const Pca pca = principal_axes(s.pw);
  if (!(pca.eigenvalues[0] > 0.0) || pca.eigenvalues[1] <= kCollinearRatio * pca.eigenvalues[0]) {
    throw DegenerateConfiguration("object points are collinear or coincident");
  }
  if (pca.eigenvalues[2] <= kPlanarRatio * pca.eigenvalues[0]) {
    return levenberg_marquardt(s, intr, planar_pose(s, intr, pca), 20);
  }
  Epnp solver(s, intr, pca);
  Pose pose;
  solver.solve(pose.rotation, pose.translation);
  return pose;
}

bool degenerate_sample(const CorrespondenceSet& corrs, const std::array<int, 4>& idx) {
  std::array<Vec3, 4> pts;
  for (int k = 0; k < 4; ++k) pts[k] = corrs.object_points[idx[k]];
  const Pca pca = principal_axes(pts);
  return !(pca.eigenvalues[0] > 0.0) || pca.eigenvalues[1] <= 1e-6 * pca.eigenvalues[0];
}

// Seeded minimal samples, drawn up front so the schedule does not affect results.
std::vector<std::array<int, 4>> draw_samples(const CorrespondenceSet& corrs, const std::vector<int>& pool,
                                             int iterations, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::array<int, 4>> samples;
  samples.reserve(iterations);
  std::vector<int> scratch = pool;
  for (int it = 0; it < iterations; ++it) {
    std::array<int, 4> pick{-1, -1, -1, -1};
    for (int attempt = 0; attempt < 100; ++attempt) {
      for (int k = 0; k < 4; ++k) {
        std::uniform_int_distribution<std::size_t> d(k, scratch.size() - 1);
        std::swap(scratch[k], scratch[d(rng)]);
        pick[k] = scratch[k];
      }
      if (!degenerate_sample(corrs, pick)) break;
      pick[0] = -1;
    }
    samples.push_back(pick);
  }
  return samples;
}

struct Hypothesis {
  Pose pose;
  std::vector<bool> support;
  std::size_t count = 0;
  double mean_error = std::numeric_limits<double>::infinity();
};

using Scorer = std::function<Hypothesis(const Pose&)>;

PoseEstimate robust_solve(const CorrespondenceSet& corrs, const CameraIntrinsics& intr, const SolverConfig& cfg,
                          int iterations, const Scorer& score) {
  corrs.validate();
  cfg.validate();
  intr.validate();
  std::vector<int> pool;
  for (std::size_t i = 0; i < corrs.size(); ++i)
    if (corrs.valid[i]) pool.push_back(static_cast<int>(i));
  if (pool.size() < 4) throw InsufficientData("robust PnP needs at least 4 valid correspondences");

  const auto samples = draw_samples(corrs, pool, iterations, cfg.seed);
  Hypothesis best;
  for (const auto& sample : samples) {
    if (sample[0] < 0) continue;
    Subset s;
    for (int idx : sample) {
      s.pw.push_back(corrs.object_points[idx]);
      s.uv.push_back(corrs.image_points[idx]);
    }
    Pose pose;
    try {
      pose = solve_subset(s, intr);
    } catch (const std::runtime_error&) {
      continue;
    }
    if (!pose.rotation.allFinite() || !pose.translation.allFinite()) continue;
    Hypothesis h = score(pose);
    if (h.count > best.count || (h.count == best.count && h.count > 0 && h.mean_error < best.mean_error)) {
      best = std::move(h);
    }
  }
  if (best.count < static_cast<std::size_t>(cfg.min_inliers)) {
    throw NoConsensus("best hypothesis has " + std::to_string(best.count) + " supporting pairs, need " +
                      std::to_string(cfg.min_inliers));
  }

  CorrespondenceSet support = corrs;
  support.valid = best.support;
  Pose final_pose = best.pose;
  try {
    final_pose = solve_subset(collect(support), intr);
  } catch (const std::runtime_error&) {
    // keep the minimal-sample pose
  }
  Hypothesis final_h = score(final_pose);
  if (final_h.count < best.count) {
    final_pose = best.pose;
    final_h = std::move(best);
  }

  PoseEstimate est;
  est.pose = final_pose;
  const auto err = reprojection_errors(corrs, intr, final_pose);
  est.inliers.assign(corrs.size(), false);
  double sum = 0.0;
  for (std::size_t i = 0; i < corrs.size(); ++i) {
    if (err[i] <= cfg.reproj_threshold) {
      est.inliers[i] = true;
      ++est.inlier_count;
      sum += err[i];
    }
  }
  est.mean_error = est.inlier_count ? sum / static_cast<double>(est.inlier_count) : 0.0;
  est.confirmed = std::move(final_h.support);
  return est;
}

}  // namespace

Pose epnp(const CorrespondenceSet& corrs, const CameraIntrinsics& intr) {
  corrs.validate();
  intr.validate();
  return solve_subset(collect(corrs), intr);
}

Pose refine_pose(const CorrespondenceSet& corrs, const CameraIntrinsics& intr, const Pose& initial,
                 int iterations) {
  corrs.validate();
  const Subset s = collect(corrs);
  if (s.pw.size() < 3) throw InsufficientData("pose refinement needs at least 3 valid correspondences");
  return levenberg_marquardt(s, intr, initial, iterations);
}

PoseEstimate ransac_pnp(const CorrespondenceSet& corrs, const CameraIntrinsics& intr, const SolverConfig& cfg) {
  const auto score = [&](const Pose& pose) {
    Hypothesis h;
    h.pose = pose;
    const auto err = reprojection_errors(corrs, intr, pose);
    h.support.assign(corrs.size(), false);
    double sum = 0.0;
    for (std::size_t i = 0; i < err.size(); ++i) {
      if (err[i] <= cfg.reproj_threshold) {
        h.support[i] = true;
        ++h.count;
        sum += err[i];
      }
    }
    h.mean_error = h.count ? sum / static_cast<double>(h.count) : std::numeric_limits<double>::infinity();
    return h;
  };
  return robust_solve(corrs, intr, cfg, cfg.ransac_iters, score);
}

PoseEstimate spatial_coherence_solve(const CorrespondenceSet& corrs, const CameraIntrinsics& intr,
                                     const SolverConfig& cfg) {
  corrs.validate();
  std::vector<int> pool;
  std::vector<Vec3> pts;
  for (std::size_t i = 0; i < corrs.size(); ++i) {
    if (!corrs.valid[i]) continue;
    pool.push_back(static_cast<int>(i));
    pts.push_back(corrs.object_points[i]);
  }
  if (pool.size() < 4) throw InsufficientData("robust PnP needs at least 4 valid correspondences");
  const KnnGraph graph = build_knn_graph(pts, cfg.coherence_neighbors);

  const auto score = [&](const Pose& pose) {
    Hypothesis h;
    h.pose = pose;
    const auto err = reprojection_errors(corrs, intr, pose);
    h.support.assign(corrs.size(), false);
    double sum = 0.0;
    for (std::size_t n = 0; n < pool.size(); ++n) {
      const int i = pool[n];
      if (!(err[i] <= cfg.reproj_threshold)) continue;
      int agreeing = 0;
      for (int nb : graph.neighbors(static_cast<int>(n))) agreeing += err[pool[nb]] <= cfg.reproj_threshold;
      if (2 * agreeing > graph.degree()) {
        h.support[i] = true;
        ++h.count;
        sum += err[i];
      }
    }
    h.mean_error = h.count ? sum / static_cast<double>(h.count) : std::numeric_limits<double>::infinity();
    return h;
  };
  return robust_solve(corrs, intr, cfg, cfg.progx_iters, score);
}

CorrespondenceSet mask_filter(const CorrespondenceSet& corrs, const GridMask& mask, const GridSpec& grid,
                              const RoiTransform& roi) {
  corrs.validate();
  if (mask.level != grid.depth || mask.cells.size() != static_cast<std::size_t>(mask.size()) * mask.size()) {
    throw InvalidArgument("mask resolution does not match the grid depth");
  }
  CorrespondenceSet out = corrs;
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!out.valid[i]) continue;
    const Vec2 q = roi.to_roi(out.image_points[i]);
    const bool inside = q.allFinite() && q.x() >= 0 && q.y() >= 0 && q.x() < grid.roi_size && q.y() < grid.roi_size;
    if (!inside) {
      out.valid[i] = false;
      continue;
    }
    const CellIndex c = cell_of_point(q, grid.depth, grid);
    if (!mask.at(c.ix, c.iy)) out.valid[i] = false;
  }
  return out;
}

}  // namespace gridpose
