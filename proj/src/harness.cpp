#include "gridpose/harness.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <set>
#include <sstream>

#include "gridpose/errors.hpp"
#include "gridpose/mesh_io.hpp"
#include "gridpose/shapes.hpp"
#include "gridpose/visibility.hpp"

namespace gridpose {

using nlohmann::json;

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream, std::uint64_t index) {
  return splitmix64(splitmix64(master + stream) + index);
}

void NoiseModel::validate() const {
  auto prob = [](double p, const char* what) {
    if (!(p >= 0.0 && p <= 1.0)) throw InvalidArgument(std::string(what) + " must be in [0, 1]");
  };
  prob(bit_flip_prob, "bit_flip_prob");
  prob(outlier_prob, "outlier_prob");
  if (!(pixel_noise_sigma >= 0.0) || !std::isfinite(pixel_noise_sigma))
    throw InvalidArgument("pixel_noise_sigma must be finite and >= 0");
  if (flip_bits < 0) throw InvalidArgument("flip_bits must be >= 0");
}

// ---------------------------------------------------------------- config

namespace {

void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw InvalidArgument(where + " must be a JSON object");
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& item : j.items()) {
    if (!ok.count(item.key())) throw InvalidArgument("unknown config key '" + where + item.key() + "'");
  }
}

template <typename T>
void take(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

json noise_to_json(const NoiseModel& n) {
  return {{"bit_flip_prob", n.bit_flip_prob}, {"outlier_prob", n.outlier_prob},
          {"pixel_noise_sigma", n.pixel_noise_sigma}, {"flip_v", n.flip_v}, {"flip_x", n.flip_x},
          {"flip_y", n.flip_y}, {"flip_bits", n.flip_bits}};
}

void noise_from_json(const json& j, NoiseModel& n) {
  check_keys(j, {"bit_flip_prob", "outlier_prob", "pixel_noise_sigma", "flip_v", "flip_x", "flip_y", "flip_bits"},
             "bench.noise.");
  take(j, "bit_flip_prob", n.bit_flip_prob);
  take(j, "outlier_prob", n.outlier_prob);
  take(j, "pixel_noise_sigma", n.pixel_noise_sigma);
  take(j, "flip_v", n.flip_v);
  take(j, "flip_x", n.flip_x);
  take(j, "flip_y", n.flip_y);
  take(j, "flip_bits", n.flip_bits);
}

}  // namespace

RunConfig RunConfig::toy() {
  RunConfig c;
  c.keypoints = 64;
  c.patch = 3;
  c.train.batch = 16;
  c.train.phase1_steps = 1000;
  c.train.final_lr_steps = 1000;
  c.train.final_lr_scale = 0.2;
  c.train.teacher_forcing = true;
  c.train.roi_jitter = 0.15;
  return c;
}

RunConfig RunConfig::from_json(const json& j, const RunConfig& base) {
  check_keys(j,
             {"seed", "keypoints", "knn", "depth", "base_depth", "stage0_layers", "refine_layers", "roi_size",
              "patch", "head_hidden", "encoder_channels", "decoder_channels", "camera", "sampler", "solver",
              "solver_name", "object", "object_size", "textureless", "symmetry", "train", "bench"},
             "");
  RunConfig c = base;
  try {
    take(j, "seed", c.seed);
    take(j, "keypoints", c.keypoints);
    take(j, "knn", c.knn);
    take(j, "depth", c.depth);
    take(j, "base_depth", c.base_depth);
    take(j, "stage0_layers", c.stage0_layers);
    take(j, "refine_layers", c.refine_layers);
    take(j, "roi_size", c.roi_size);
    take(j, "patch", c.patch);
    take(j, "head_hidden", c.head_hidden);
    take(j, "encoder_channels", c.encoder_channels);
    take(j, "decoder_channels", c.decoder_channels);
    take(j, "solver_name", c.solver_name);
    take(j, "object", c.object);
    take(j, "object_size", c.object_size);
    take(j, "textureless", c.textureless);
    if (j.contains("camera")) {
      const json& k = j.at("camera");
      check_keys(k, {"fx", "fy", "cx", "cy"}, "camera.");
      take(k, "fx", c.camera.fx);
      take(k, "fy", c.camera.fy);
      take(k, "cx", c.camera.cx);
      take(k, "cy", c.camera.cy);
    }
    if (j.contains("sampler")) {
      const json& k = j.at("sampler");
      check_keys(k, {"z_min", "z_max", "xy_range", "max_attempts"}, "sampler.");
      take(k, "z_min", c.sampler.z_min);
      take(k, "z_max", c.sampler.z_max);
      take(k, "xy_range", c.sampler.xy_range);
      take(k, "max_attempts", c.sampler.max_attempts);
    }
    if (j.contains("solver")) {
      const json& k = j.at("solver");
      check_keys(k, {"reproj_threshold", "ransac_iters", "progx_iters", "min_inliers", "seed", "coherence_neighbors"},
                 "solver.");
      take(k, "reproj_threshold", c.solver.reproj_threshold);
      take(k, "ransac_iters", c.solver.ransac_iters);
      take(k, "progx_iters", c.solver.progx_iters);
      take(k, "min_inliers", c.solver.min_inliers);
      take(k, "seed", c.solver.seed);
      take(k, "coherence_neighbors", c.solver.coherence_neighbors);
    }
    if (j.contains("symmetry")) c.symmetry = SymmetrySpec::from_json(j.at("symmetry"));
    if (j.contains("train")) {
      const json& k = j.at("train");
      check_keys(k,
                 {"steps", "phase1_steps", "batch", "lr_phase1", "lr_phase2", "final_lr_steps", "final_lr_scale",
                  "eval_interval", "teacher_forcing", "roi_jitter", "train_scenes", "test_scenes"},
                 "train.");
      take(k, "steps", c.train.steps);
      take(k, "phase1_steps", c.train.phase1_steps);
      take(k, "batch", c.train.batch);
      take(k, "lr_phase1", c.train.lr_phase1);
      take(k, "lr_phase2", c.train.lr_phase2);
      take(k, "final_lr_steps", c.train.final_lr_steps);
      take(k, "final_lr_scale", c.train.final_lr_scale);
      take(k, "eval_interval", c.train.eval_interval);
      take(k, "teacher_forcing", c.train.teacher_forcing);
      take(k, "roi_jitter", c.train.roi_jitter);
      take(k, "train_scenes", c.train.train_scenes);
      take(k, "test_scenes", c.train.test_scenes);
    }
    if (j.contains("bench")) {
      const json& k = j.at("bench");
      check_keys(k, {"scenes", "mode", "checkpoint", "noise", "mask_filter"}, "bench.");
      take(k, "scenes", c.bench.scenes);
      take(k, "mode", c.bench.mode);
      take(k, "checkpoint", c.bench.checkpoint);
      take(k, "mask_filter", c.bench.mask_filter);
      if (k.contains("noise")) noise_from_json(k.at("noise"), c.bench.noise);
    }
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

RunConfig RunConfig::from_json(const json& j) { return from_json(j, RunConfig{}); }

json RunConfig::to_json() const {
  return {
      {"seed", seed},
      {"keypoints", keypoints},
      {"knn", knn},
      {"depth", depth},
      {"base_depth", base_depth},
      {"stage0_layers", stage0_layers},
      {"refine_layers", refine_layers},
      {"roi_size", roi_size},
      {"patch", patch},
      {"head_hidden", head_hidden},
      {"encoder_channels", encoder_channels},
      {"decoder_channels", decoder_channels},
      {"camera", {{"fx", camera.fx}, {"fy", camera.fy}, {"cx", camera.cx}, {"cy", camera.cy}}},
      {"sampler",
       {{"z_min", sampler.z_min}, {"z_max", sampler.z_max}, {"xy_range", sampler.xy_range},
        {"max_attempts", sampler.max_attempts}}},
      {"solver",
       {{"reproj_threshold", solver.reproj_threshold}, {"ransac_iters", solver.ransac_iters},
        {"progx_iters", solver.progx_iters}, {"min_inliers", solver.min_inliers}, {"seed", solver.seed},
        {"coherence_neighbors", solver.coherence_neighbors}}},
      {"solver_name", solver_name},
      {"object", object},
      {"object_size", object_size},
      {"textureless", textureless},
      {"symmetry", symmetry.to_json()},
      {"train",
       {{"steps", train.steps}, {"phase1_steps", train.phase1_steps}, {"batch", train.batch},
        {"lr_phase1", train.lr_phase1}, {"lr_phase2", train.lr_phase2}, {"final_lr_steps", train.final_lr_steps},
        {"final_lr_scale", train.final_lr_scale}, {"eval_interval", train.eval_interval},
        {"teacher_forcing", train.teacher_forcing}, {"roi_jitter", train.roi_jitter},
        {"train_scenes", train.train_scenes},
        {"test_scenes", train.test_scenes}}},
      {"bench",
       {{"scenes", bench.scenes}, {"mode", bench.mode}, {"checkpoint", bench.checkpoint},
        {"noise", noise_to_json(bench.noise)}, {"mask_filter", bench.mask_filter}}},
  };
}

void RunConfig::validate() const {
  grid().validate();
  model_config().validate();
  camera.validate();
  symmetry.validate();
  bench.noise.validate();
  if (keypoints < 4) throw InvalidArgument("keypoints must be >= 4");
  if (!(sampler.z_min > 0.0 && sampler.z_min <= sampler.z_max)) throw InvalidArgument("need 0 < z_min <= z_max");
  if (!(sampler.xy_range >= 0.0)) throw InvalidArgument("xy_range must be >= 0");
  if (sampler.max_attempts < 1) throw InvalidArgument("max_attempts must be >= 1");
  if (solver.min_inliers < 4) throw InvalidArgument("solver.min_inliers must be >= 4");
  if (solver.ransac_iters < 1 || solver.progx_iters < 1) throw InvalidArgument("solver iterations must be >= 1");
  if (!(solver.reproj_threshold > 0.0)) throw InvalidArgument("solver.reproj_threshold must be > 0");
  if (solver_name != "progx" && solver_name != "ransac" && solver_name != "direct")
    throw InvalidArgument("solver_name must be progx, ransac or direct");
  if (!(object_size > 0.0)) throw InvalidArgument("object_size must be > 0");
  if (train.steps < 0 || train.phase1_steps < 0 || train.phase1_steps > train.steps)
    throw InvalidArgument("need 0 <= phase1_steps <= steps");
  if (train.batch < 1) throw InvalidArgument("batch must be >= 1");
  if (!(train.lr_phase1 > 0.0 && train.lr_phase2 > 0.0)) throw InvalidArgument("learning rates must be > 0");
  if (train.final_lr_steps < 0 || !(train.final_lr_scale > 0.0))
    throw InvalidArgument("final_lr_steps must be >= 0 and final_lr_scale > 0");
  if (train.eval_interval < 0) throw InvalidArgument("eval_interval must be >= 0");
  if (!(train.roi_jitter >= 0.0 && train.roi_jitter < 0.5)) throw InvalidArgument("roi_jitter must be in [0, 0.5)");
  if (train.train_scenes < 0 || train.test_scenes < 0) throw InvalidArgument("scene counts must be >= 0");
  if (bench.scenes < 0) throw InvalidArgument("bench.scenes must be >= 0");
  if (bench.mode != "oracle" && bench.mode != "network") throw InvalidArgument("bench.mode must be oracle or network");
  if (bench.mask_filter != "auto" && bench.mask_filter != "on" && bench.mask_filter != "off")
    throw InvalidArgument("bench.mask_filter must be auto, on or off");
}

GridSpec RunConfig::grid() const { return GridSpec{roi_size, depth, base_depth}; }

ModelConfig RunConfig::model_config() const {
  ModelConfig m;
  m.backbone.roi_size = roi_size;
  m.backbone.depth = depth;
  m.backbone.base_depth = base_depth;
  m.backbone.encoder_channels = encoder_channels;
  m.backbone.decoder_channels = decoder_channels;
  m.plan.keypoints = keypoints;
  m.plan.depth = depth;
  m.plan.base_depth = base_depth;
  m.plan.stage0_layers = stage0_layers;
  m.plan.refine_layers = refine_layers;
  m.plan.head_hidden = head_hidden;
  m.plan.patch = patch;
  m.plan.teacher_forcing = train.teacher_forcing;
  m.knn = knn;
  return m;
}

ObjectModel load_object(const RunConfig& cfg) {
  if (cfg.object == "toy") return make_toy_object(cfg.object_size);
  return load_mesh(cfg.object);
}

// ---------------------------------------------------------------- scenes

SceneContext make_scene_context(const ObjectModel& model, std::vector<Vec3> keypoints, const CameraIntrinsics& camera,
                                const GridSpec& grid, std::uint64_t seed) {
  model.validate();
  camera.validate();
  grid.validate();
  if (keypoints.empty()) throw InvalidArgument("scene context needs keypoints");
  SceneContext ctx;
  ctx.model = model;
  ctx.keypoints = std::move(keypoints);
  ctx.camera = camera;
  ctx.grid = grid;
  std::mt19937_64 rng(derive_seed(seed, seed_stream::surface, 0));
  ctx.render_points = sample_surface(model, 60000, rng);
  ctx.mask_points = sample_surface(model, 8000, rng);
  ctx.box_min = ctx.box_max = model.vertices.front();
  for (const Vec3& v : model.vertices) {
    ctx.box_min = ctx.box_min.cwiseMin(v);
    ctx.box_max = ctx.box_max.cwiseMax(v);
  }
  return ctx;
}

Pose sample_pose(const PoseSampler& sampler, std::mt19937_64& rng) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  Eigen::Quaterniond q(gauss(rng), gauss(rng), gauss(rng), gauss(rng));
  q.normalize();
  Pose p;
  p.rotation = q.toRotationMatrix();
  const double r = sampler.xy_range;
  p.translation.x() = -r + 2.0 * r * uni(rng);
  p.translation.y() = -r + 2.0 * r * uni(rng);
  p.translation.z() = sampler.z_min + (sampler.z_max - sampler.z_min) * uni(rng);
  return p;
}

namespace {

double cross2(const Vec2& o, const Vec2& a, const Vec2& b) {
  return (a.x() - o.x()) * (b.y() - o.y()) - (a.y() - o.y()) * (b.x() - o.x());
}

// Monotone chain; returns the hull counter-clockwise without repeated endpoints.
std::vector<Vec2> hull2d(std::vector<Vec2> pts) {
  std::sort(pts.begin(), pts.end(),
            [](const Vec2& a, const Vec2& b) { return a.x() < b.x() || (a.x() == b.x() && a.y() < b.y()); });
  if (pts.size() < 3) return pts;
  std::vector<Vec2> h(2 * pts.size());
  std::size_t k = 0;
  for (const Vec2& p : pts) {
    while (k >= 2 && cross2(h[k - 2], h[k - 1], p) <= 0) --k;
    h[k++] = p;
  }
  for (std::size_t i = pts.size() - 1, t = k + 1; i-- > 0;) {
    while (k >= t && cross2(h[k - 2], h[k - 1], pts[i]) <= 0) --k;
    h[k++] = pts[i];
  }
  h.resize(k - 1);
  return h;
}

bool inside_hull(const std::vector<Vec2>& hull, const Vec2& p) {
  if (hull.size() < 3) return false;
  for (std::size_t i = 0; i < hull.size(); ++i) {
    if (cross2(hull[i], hull[(i + 1) % hull.size()], p) < 0) return false;
  }
  return true;
}

void mark_cell(FeatureMap& masks, int channel, const Vec2& rho, const GridSpec& grid) {
  const int n = grid.cells(grid.depth);
  const double cs = grid.cell_size(grid.depth);
  const int ix = static_cast<int>(std::floor(rho.x() / cs));
  const int iy = static_cast<int>(std::floor(rho.y() / cs));
  if (ix < 0 || iy < 0 || ix >= n || iy >= n) return;
  masks.at(channel, iy, ix) = 1.0;
}

// Channel 0: cells whose centres fall in the hull of the projected keypoints,
// plus every keypoint cell.
void fill_object_mask(FeatureMap& masks, const std::vector<Vec2>& rho, const GridSpec& grid) {
  const int n = grid.cells(grid.depth);
  const std::vector<Vec2> hull = hull2d(rho);
  const double cs = grid.cell_size(grid.depth);
  for (int iy = 0; iy < n; ++iy) {
    for (int ix = 0; ix < n; ++ix) {
      if (inside_hull(hull, Vec2((ix + 0.5) * cs, (iy + 0.5) * cs))) masks.at(0, iy, ix) = 1.0;
    }
  }
  for (const Vec2& r : rho) mark_cell(masks, 0, r, grid);
}

FeatureMap render_coordinates(const SceneContext& ctx, const Pose& pose, const RoiTransform& roi) {
  const int s = roi.roi_size;
  FeatureMap img = FeatureMap::zeros(3, s, s);
  std::vector<double> zbuf(static_cast<std::size_t>(s) * s, std::numeric_limits<double>::infinity());
  const Vec3 extent = (ctx.box_max - ctx.box_min).cwiseMax(Vec3::Constant(1e-12));
  const Projection proj = project(ctx.render_points, pose, ctx.camera);
  for (std::size_t i = 0; i < ctx.render_points.size(); ++i) {
    if (proj.behind_camera[i]) continue;
    const double z = pose.apply(ctx.render_points[i]).z();
    const Vec2 q = roi.to_roi(proj.pixels[i]);
    const int cx = static_cast<int>(std::floor(q.x()));
    const int cy = static_cast<int>(std::floor(q.y()));
    const Vec3 color = (ctx.render_points[i] - ctx.box_min).cwiseQuotient(extent);
    for (int dy = -1; dy <= 1; ++dy) {
      for (int dx = -1; dx <= 1; ++dx) {
        const int x = cx + dx, y = cy + dy;
        if (x < 0 || y < 0 || x >= s || y >= s) continue;
        double& zb = zbuf[static_cast<std::size_t>(y) * s + x];
        if (z >= zb) continue;
        zb = z;
        for (int c = 0; c < 3; ++c) img.at(c, y, x) = color[c];
      }
    }
  }
  return img;
}

}  // namespace

SceneSample generate_scene(const SceneContext& ctx, const PoseSampler& sampler, std::mt19937_64& rng) {
  SceneSample s;
  bool ok = false;
  Projection verts;
  for (int attempt = 0; attempt < sampler.max_attempts && !ok; ++attempt) {
    s.pose = sample_pose(sampler, rng);
    verts = project(ctx.model.vertices, s.pose, ctx.camera);
    ok = verts.all_in_front();
  }
  if (!ok) throw GenerationError("no pose with the object in front of the camera after " +
                                 std::to_string(sampler.max_attempts) + " attempts");

  Vec2 lo = verts.pixels.front(), hi = verts.pixels.front();
  for (const Vec2& p : verts.pixels) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  const double side = std::max(1e-6, 1.1 * std::max(hi.x() - lo.x(), hi.y() - lo.y()));
  const Vec2 centre = 0.5 * (lo + hi);
  s.roi.roi_size = ctx.grid.roi_size;
  s.roi.bbox_origin = centre - Vec2::Constant(0.5 * side);
  s.roi.bbox_size = Vec2::Constant(side);

  const Projection kp = project(ctx.keypoints, s.pose, ctx.camera);
  s.projections = kp.pixels;
  const std::vector<Vec2> rho = to_roi(s.projections, s.roi);
  s.gt_codes = encode_projections(rho, ctx.grid);

  const int n = ctx.grid.cells(ctx.grid.depth);
  s.gt_masks = FeatureMap::zeros(2, n, n);
  fill_object_mask(s.gt_masks, rho, ctx.grid);

  // Camera centre in the object frame is -R^T t.
  const Vec3 eye = -s.pose.rotation.transpose() * s.pose.translation;
  const std::vector<bool> vis = hpr_visible(ctx.mask_points, eye);
  const Projection mp = project(ctx.mask_points, s.pose, ctx.camera);
  for (std::size_t i = 0; i < ctx.mask_points.size(); ++i) {
    if (vis[i]) mark_cell(s.gt_masks, 1, s.roi.to_roi(mp.pixels[i]), ctx.grid);
  }

  s.image = render_coordinates(ctx, s.pose, s.roi);
  return s;
}

SceneSample jitter_roi(const SceneSample& s, const GridSpec& grid, const Vec2& shift, double scale) {
  if (!(scale > 0.0) || !shift.allFinite()) throw InvalidArgument("jitter needs a finite shift and a positive scale");
  SceneSample out;
  out.pose = s.pose;
  out.projections = s.projections;
  out.roi = s.roi;
  out.roi.bbox_size = s.roi.bbox_size * scale;
  const Vec2 centre = s.roi.bbox_origin + 0.5 * s.roi.bbox_size + shift.cwiseProduct(s.roi.bbox_size);
  out.roi.bbox_origin = centre - 0.5 * out.roi.bbox_size;
  out.roi.validate();

  // nearest-neighbour resample: new RoI pixel centre -> image -> old RoI.
  // The map is separable, so source columns and rows are tabulated once.
  const auto resample = [&](const FeatureMap& src, int channel_begin, int channel_end, FeatureMap& dst) {
    const int n = dst.width;
    const double step = static_cast<double>(s.roi.roi_size) / n;
    std::vector<int> sx(static_cast<std::size_t>(n)), sy(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      const double t = (i + 0.5) * step;
      const Vec2 q = s.roi.to_roi(out.roi.from_roi(Vec2(t, t)));
      sx[static_cast<std::size_t>(i)] = static_cast<int>(std::floor(q.x() / step));
      sy[static_cast<std::size_t>(i)] = static_cast<int>(std::floor(q.y() / step));
    }
    for (int c = channel_begin; c < channel_end; ++c) {
      for (int y = 0; y < n; ++y) {
        const int yy = sy[static_cast<std::size_t>(y)];
        if (yy < 0 || yy >= n) continue;
        for (int x = 0; x < n; ++x) {
          const int xx = sx[static_cast<std::size_t>(x)];
          if (xx >= 0 && xx < n) dst.at(c, y, x) = src.at(c, yy, xx);
        }
      }
    }
  };
  out.image = FeatureMap::zeros(s.image.channels, s.image.height, s.image.width);
  resample(s.image, 0, s.image.channels, out.image);

  const std::vector<Vec2> rho = to_roi(out.projections, out.roi);
  out.gt_codes = encode_projections(rho, grid);
  out.gt_masks = FeatureMap::zeros(s.gt_masks.channels, s.gt_masks.height, s.gt_masks.width);
  fill_object_mask(out.gt_masks, rho, grid);
  resample(s.gt_masks, 1, 2, out.gt_masks);
  return out;
}

std::vector<SceneSample> generate_scenes(const SceneContext& ctx, const PoseSampler& sampler, std::uint64_t master,
                                         std::uint64_t stream, int count) {
  std::vector<SceneSample> out;
  out.reserve(static_cast<std::size_t>(std::max(count, 0)));
  for (int i = 0; i < count; ++i) {
    std::mt19937_64 rng(derive_seed(master, stream, static_cast<std::uint64_t>(i)));
    out.push_back(generate_scene(ctx, sampler, rng));
  }
  return out;
}

GridMask mask_channel(const FeatureMap& masks, int channel, double threshold) {
  if (channel < 0 || channel >= masks.channels || masks.height != masks.width)
    throw InvalidArgument("mask channel out of range");
  int level = 0;
  while ((1 << level) < masks.width) ++level;
  if ((1 << level) != masks.width) throw InvalidArgument("mask size must be a power of two");
  GridMask m = GridMask::filled(level, false);
  for (int y = 0; y < masks.height; ++y)
    for (int x = 0; x < masks.width; ++x) m.set(x, y, masks.at(channel, y, x) > threshold);
  return m;
}

// ---------------------------------------------------------------- corruption

BinaryCodeSet corrupt_codes(const BinaryCodeSet& codes, const NoiseModel& noise, std::mt19937_64& rng) {
  noise.validate();
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  BinaryCodeSet out = codes;
  for (KeypointCode& c : out) {
    if (noise.outlier_prob > 0.0 && uni(rng) < noise.outlier_prob) {
      for (auto& b : c.x) b = uni(rng) < 0.5 ? 1 : 0;
      for (auto& b : c.y) b = uni(rng) < 0.5 ? 1 : 0;
    }
    if (noise.bit_flip_prob <= 0.0) continue;
    if (noise.flip_v && uni(rng) < noise.bit_flip_prob) c.v = !c.v;
    auto flip = [&](BitCode& bits) {
      const std::size_t limit =
          noise.flip_bits > 0 ? std::min(bits.size(), static_cast<std::size_t>(noise.flip_bits)) : bits.size();
      for (std::size_t i = 0; i < limit; ++i)
        if (uni(rng) < noise.bit_flip_prob) bits[i] ^= 1;
    };
    if (noise.flip_x) flip(c.x);
    if (noise.flip_y) flip(c.y);
  }
  return out;
}

// ---------------------------------------------------------------- inference

std::vector<double> localization_errors(const BinaryCodeSet& predicted, const SceneSample& scene,
                                        const GridSpec& grid, int bits) {
  if (predicted.size() != scene.gt_codes.size()) throw InvalidArgument("code count differs from ground truth");
  std::vector<double> err;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    if (!scene.gt_codes[i].v) continue;
    const Vec2 c = decode_prefix(predicted[i], bits, grid);
    err.push_back((c - scene.roi.to_roi(scene.projections[i])).norm());
  }
  return err;
}

namespace {
double median_of(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + mid, v.end());
  if (v.size() % 2) return v[mid];
  const double hi = v[mid];
  return 0.5 * (hi + *std::max_element(v.begin(), v.begin() + mid));
}
}  // namespace

double localization_error(const BinaryCodeSet& predicted, const SceneSample& scene, const GridSpec& grid,
                          int bits) {
  return median_of(localization_errors(predicted, scene, grid, bits));
}

CorrespondenceSet correspondences_from_codes(const BinaryCodeSet& codes, const std::vector<Vec3>& keypoints,
                                             const RoiTransform& roi, const GridSpec& grid) {
  if (codes.size() != keypoints.size()) throw InvalidArgument("code count differs from keypoint count");
  const DecodedPoints dec = decode_codes(codes, grid);
  CorrespondenceSet corrs;
  for (std::size_t i = 0; i < codes.size(); ++i) {
    if (dec.valid[i])
      corrs.push_back(keypoints[i], roi.from_roi(dec.points[i]), true);
    else
      corrs.push_back(keypoints[i], Vec2::Zero(), false);
  }
  return corrs;
}

PoseEstimate solve_correspondences(const CorrespondenceSet& corrs, const CameraIntrinsics& camera,
                                   const std::string& solver_name, const SolverConfig& cfg) {
  if (solver_name == "progx") return spatial_coherence_solve(corrs, camera, cfg);
  if (solver_name == "ransac") return ransac_pnp(corrs, camera, cfg);
  if (solver_name != "direct") throw InvalidArgument("unknown solver '" + solver_name + "'");
  if (corrs.valid_count() < 4) throw InsufficientData("direct solve needs at least 4 valid pairs");
  PoseEstimate est;
  est.pose = refine_pose(corrs, camera, epnp(corrs, camera));
  const std::vector<double> e = reprojection_errors(corrs, camera, est.pose);
  double sum = 0.0;
  for (std::size_t i = 0; i < corrs.size(); ++i) {
    const bool in = corrs.valid[i] && e[i] <= cfg.reproj_threshold;
    est.inliers.push_back(in);
    if (in) {
      ++est.inlier_count;
      sum += e[i];
    }
  }
  // Every valid pair is used by the fit.
  est.confirmed = corrs.valid;
  est.mean_error = est.inlier_count ? sum / static_cast<double>(est.inlier_count) : 0.0;
  return est;
}

InferenceResult solve_codes(const BinaryCodeSet& codes, const SceneContext& ctx, const RoiTransform& roi,
                            const GridMask* visible_mask, const InferenceOptions& opt, const SceneSample* truth) {
  InferenceResult r;
  r.codes = codes;
  CorrespondenceSet corrs = correspondences_from_codes(codes, ctx.keypoints, roi, ctx.grid);
  if (opt.pixel_noise_sigma > 0.0) {
    std::mt19937_64 rng(opt.noise_seed);
    std::normal_distribution<double> gauss(0.0, opt.pixel_noise_sigma);
    const Vec2 inv = roi.scale().cwiseInverse();
    for (std::size_t i = 0; i < corrs.size(); ++i) {
      const Vec2 n(gauss(rng), gauss(rng));
      if (corrs.valid[i]) corrs.image_points[i] += n.cwiseProduct(inv);
    }
  }
  if (opt.use_mask_filter && visible_mask) corrs = mask_filter(corrs, *visible_mask, ctx.grid, roi);
  r.correspondences = corrs.valid_count();
  if (truth) {
    for (int bits = ctx.grid.base_depth; bits <= ctx.grid.depth; ++bits)
      r.stage_errors.push_back(localization_error(codes, *truth, ctx.grid, bits));
  }
  try {
    r.estimate = solve_correspondences(corrs, ctx.camera, opt.solver_name, opt.solver);
  } catch (const InvalidArgument&) {
    throw;
  } catch (const std::runtime_error& e) {
    r.failed = true;
    r.error = e.what();
  }
  return r;
}

InferenceResult infer_pipeline(PoseNetwork& net, const SceneSample& scene, const SceneContext& ctx,
                               const InferenceOptions& opt) {
  const PoseNetwork::Prediction pred = net.predict(scene.image);
  const GridMask visible = mask_channel(pred.mask_logits, 1, 0.0);
  return solve_codes(pred.codes, ctx, scene.roi, &visible, opt, &scene);
}

// ---------------------------------------------------------------- training

double evaluate_localization(PoseNetwork& net, const std::vector<SceneSample>& scenes, const GridSpec& grid) {
  std::vector<double> all;
  for (const SceneSample& s : scenes) {
    const PoseNetwork::Prediction p = net.predict(s.image);
    const std::vector<double> e = localization_errors(p.codes, s, grid, grid.depth);
    all.insert(all.end(), e.begin(), e.end());
  }
  return median_of(std::move(all));
}

TrainResult train_toy(PoseNetwork& net, const std::vector<SceneSample>& train, const std::vector<SceneSample>& test,
                      const TrainConfig& cfg, std::uint64_t seed,
                      const std::function<void(const TrainLogEntry&)>& progress) {
  if (train.empty()) throw UndefinedInput("training set is empty");
  if (cfg.batch < 1 || cfg.steps < 0 || cfg.phase1_steps < 0) throw InvalidArgument("invalid training schedule");
  const GridSpec grid{net.config().backbone.roi_size, net.config().backbone.depth, net.config().backbone.base_depth};
  std::mt19937_64 rng(derive_seed(seed, seed_stream::batches, 0));
  std::uniform_int_distribution<std::size_t> pick(0, train.size() - 1);
  std::mt19937_64 jitter_rng(derive_seed(seed, seed_stream::batches, 1));
  std::uniform_real_distribution<double> jitter(-cfg.roi_jitter, cfg.roi_jitter);
  nn::ParamStore& store = net.params();

  TrainResult result;
  for (int step = 0; step < cfg.steps; ++step) {
    const int phase = step < cfg.phase1_steps ? 1 : 2;
    store.zero_grad();
    TrainLogEntry entry;
    entry.step = step;
    entry.phase = phase;
    const double w = 1.0 / cfg.batch;
    for (int b = 0; b < cfg.batch; ++b) {
      const SceneSample& drawn = train[pick(rng)];
      SceneSample jittered;
      if (cfg.roi_jitter > 0.0) {
        const Vec2 shift(jitter(jitter_rng), jitter(jitter_rng));
        jittered = jitter_roi(drawn, grid, shift, 1.0 + jitter(jitter_rng));
      }
      const SceneSample& s = cfg.roi_jitter > 0.0 ? jittered : drawn;
      const LossBreakdown l = net.train_sample(s.image, s.gt_codes, s.gt_masks, phase, cfg.teacher_forcing, w);
      entry.loss.l_v += w * l.l_v;
      entry.loss.l_x += w * l.l_x;
      entry.loss.l_y += w * l.l_y;
      entry.loss.l_mask += w * l.l_mask;
    }
    entry.loss = total_loss(entry.loss.l_v, entry.loss.l_x, entry.loss.l_y, entry.loss.l_mask);
    nn::AdamConfig adam;
    adam.lr = phase == 1 ? cfg.lr_phase1 : cfg.lr_phase2;
    if (phase == 2 && step >= cfg.steps - cfg.final_lr_steps) adam.lr *= cfg.final_lr_scale;
    if (phase == 1)
      nn::adam_step(store, adam, &PoseNetwork::phase1_param);
    else
      nn::adam_step(store, adam);

    const bool last = step + 1 == cfg.steps;
    if (!test.empty() && ((cfg.eval_interval > 0 && (step + 1) % cfg.eval_interval == 0) || last)) {
      entry.median_error = evaluate_localization(net, test, grid);
      if (last) result.final_median_error = entry.median_error;
    }
    result.log.push_back(entry);
    if (progress) progress(entry);
  }
  return result;
}

void write_train_log(const TrainResult& result, const std::filesystem::path& csv_path) {
  std::ofstream out(csv_path);
  if (!out) throw std::runtime_error("cannot write " + csv_path.string());
  out << "step,phase,l_v,l_x,l_y,l_mask,total,median_error\n";
  out << std::setprecision(17);
  for (const TrainLogEntry& e : result.log) {
    out << e.step << ',' << e.phase << ',' << e.loss.l_v << ',' << e.loss.l_x << ',' << e.loss.l_y << ','
        << e.loss.l_mask << ',' << e.loss.total << ',';
    if (e.median_error >= 0.0) out << e.median_error;
    out << '\n';
  }
  if (!out) throw std::runtime_error("write failed: " + csv_path.string());
}

// ---------------------------------------------------------------- benchmark

BenchmarkResult run_benchmark(const RunConfig& cfg, const std::filesystem::path& out_dir) {
  cfg.validate();
  if (cfg.bench.scenes <= 0) throw UndefinedInput("benchmark scene budget is empty");
  const ObjectModel model = load_object(cfg);
  const KeypointSet kps = farthest_point_sample(model, static_cast<std::size_t>(cfg.keypoints));
  const SceneContext ctx = make_scene_context(model, kps.points, cfg.camera, cfg.grid(), cfg.seed);

  bool use_filter = cfg.bench.mask_filter == "on";
  if (cfg.bench.mask_filter == "auto") {
    const VisibilityProfile prof = visibility_profile(model, sample_viewpoints(3));
    use_filter = filter_decision(prof, cfg.textureless);
  }

  std::unique_ptr<PoseNetwork> net;
  if (cfg.bench.mode == "network") {
    net = std::make_unique<PoseNetwork>(cfg.model_config(), kps.points, derive_seed(cfg.seed, seed_stream::model_init, 0));
    if (cfg.bench.checkpoint.empty()) throw InvalidArgument("network mode needs bench.checkpoint");
    net->params().load(cfg.bench.checkpoint);
  }

  BenchmarkResult res;
  std::vector<PoseSample> samples;
  for (int i = 0; i < cfg.bench.scenes; ++i) {
    const auto idx = static_cast<std::uint64_t>(i);
    std::mt19937_64 rng(derive_seed(cfg.seed, seed_stream::bench_scenes, idx));
    const SceneSample scene = generate_scene(ctx, cfg.sampler, rng);

    InferenceOptions opt;
    opt.solver = cfg.solver;
    opt.solver.seed = derive_seed(cfg.seed, seed_stream::solver, idx);
    opt.solver_name = cfg.solver_name;
    opt.use_mask_filter = use_filter;
    opt.pixel_noise_sigma = cfg.bench.noise.pixel_noise_sigma;
    opt.noise_seed = derive_seed(cfg.seed, seed_stream::corruption, idx) ^ 1ULL;

    InferenceResult r;
    if (net) {
      r = infer_pipeline(*net, scene, ctx, opt);
    } else {
      std::mt19937_64 crng(derive_seed(cfg.seed, seed_stream::corruption, idx));
      const BinaryCodeSet codes = corrupt_codes(scene.gt_codes, cfg.bench.noise, crng);
      const GridMask visible = mask_channel(scene.gt_masks, 1);
      r = solve_codes(codes, ctx, scene.roi, &visible, opt, &scene);
    }

    SampleRecord rec;
    rec.index = i;
    rec.failed = r.failed;
    rec.error = r.error;
    rec.gt = scene.pose;
    rec.correspondences = r.correspondences;
    if (!r.failed) {
      rec.pred = r.estimate.pose;
      rec.add = add_error(rec.pred, rec.gt, model);
      rec.adds = adds_error(rec.pred, rec.gt, model);
      const RotTransError rt = rot_trans_error(rec.pred, rec.gt, cfg.symmetry);
      rec.rot_deg = rt.degrees;
      rec.trans_m = rt.meters;
      rec.inliers = r.estimate.inlier_count;
    }
    samples.push_back(PoseSample{rec.pred, rec.gt, rec.failed});
    res.samples.push_back(rec);
  }
  res.report = evaluate(samples, model, cfg.symmetry);

  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    const auto open = [](const std::filesystem::path& p) {
      std::ofstream f(p);
      if (!f) throw std::runtime_error("cannot write " + p.string());
      return f;
    };
    {
      std::ofstream f = open(out_dir / "report.json");
      json j = res.report.to_json();
      j["config"] = cfg.to_json();
      j["mask_filter_used"] = use_filter;
      f << j.dump(2) << '\n';
    }
    {
      std::ofstream f = open(out_dir / "report.csv");
      f << MetricsReport::csv_header() << '\n' << res.report.csv_row(cfg.bench.mode + "/" + cfg.solver_name) << '\n';
    }
    {
      std::ofstream f = open(out_dir / "samples.csv");
      f << "index,failed,add,adds,rot_deg,trans_m,inliers,correspondences,error\n" << std::setprecision(17);
      for (const SampleRecord& s : res.samples) {
        f << s.index << ',' << (s.failed ? 1 : 0) << ',';
        if (s.failed)
          f << "inf,inf,inf,inf,";
        else
          f << s.add << ',' << s.adds << ',' << s.rot_deg << ',' << s.trans_m << ',';
        std::string msg = s.error;
        std::replace(msg.begin(), msg.end(), ',', ';');
        f << s.inliers << ',' << s.correspondences << ',' << msg << '\n';
      }
    }
  }
  return res;
}

}  // namespace gridpose
