// Command-line front end. Every subcommand reads an optional JSON run config
// (--config), writes JSON to stdout or into --out-dir, and exits with 0 on
// success, 1 on usage errors and 2 on runtime failures.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <limits>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "gridpose/codes.hpp"
#include "gridpose/errors.hpp"
#include "gridpose/geometry.hpp"
#include "gridpose/harness.hpp"
#include "gridpose/mesh_io.hpp"
#include "gridpose/metrics.hpp"
#include "gridpose/model.hpp"
#include "gridpose/shapes.hpp"
#include "gridpose/solver.hpp"
#include "gridpose/visibility.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace gridpose;

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
};

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

RunConfig load_config(const Globals& g, const RunConfig& base) {
  RunConfig cfg = base;
  if (!g.config.empty()) {
    std::ifstream in(g.config);
    if (!in) throw UsageError("cannot open config " + g.config);
    json j;
    try {
      j = json::parse(in);
    } catch (const json::exception& e) {
      throw UsageError("config " + g.config + ": " + e.what());
    }
    cfg = RunConfig::from_json(j, base);
  }
  if (g.seed) cfg.seed = *g.seed;
  cfg.validate();
  return cfg;
}

json read_json(const std::string& path) {
  if (path.empty()) throw UsageError("missing --input");
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw UsageError(path + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

// Writes `name` into the output directory, or prints to stdout without one.
void emit(const Globals& g, const std::string& name, const json& j) {
  if (g.out_dir.empty()) {
    std::cout << j.dump(2) << '\n';
    return;
  }
  fs::create_directories(g.out_dir);
  write_text(fs::path(g.out_dir) / name, j.dump(2) + "\n");
}

ObjectModel object_for(const std::string& mesh, const RunConfig& cfg) {
  if (!mesh.empty()) return load_mesh(mesh);
  return load_object(cfg);
}

json vec_json(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }

Vec3 vec3_from(const json& j) {
  if (!j.is_array() || j.size() != 3) throw InvalidArgument("expected a 3-vector");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

Vec2 vec2_from(const json& j) {
  if (!j.is_array() || j.size() != 2) throw InvalidArgument("expected a 2-vector");
  return {j[0].get<double>(), j[1].get<double>()};
}

json pose_json(const Pose& p) {
  json r = json::array();
  for (int i = 0; i < 3; ++i)
    for (int k = 0; k < 3; ++k) r.push_back(p.rotation(i, k));
  return {{"R", r}, {"t", vec_json(p.translation)}};
}

Pose pose_from(const json& j) {
  const json& r = j.at("R");
  if (!r.is_array() || r.size() != 9) throw InvalidArgument("R must hold 9 row-major values");
  Pose p;
  for (int i = 0; i < 9; ++i) p.rotation(i / 3, i % 3) = r[static_cast<std::size_t>(i)].get<double>();
  p.translation = vec3_from(j.at("t"));
  return p;
}

std::vector<Vec3> points3_from(const json& j) {
  std::vector<Vec3> out;
  for (const auto& p : j) out.push_back(vec3_from(p));
  return out;
}

// ---------------------------------------------------------------- commands

int cmd_sample(const Globals& g, const std::string& mesh, int count, int start) {
  const RunConfig cfg = load_config(g, RunConfig{});
  const ObjectModel model = object_for(mesh, cfg);
  const int n = count > 0 ? count : cfg.keypoints;
  const KeypointSet kps = farthest_point_sample(model, static_cast<std::size_t>(n), static_cast<std::size_t>(start));
  json pts = json::array();
  for (const Vec3& p : kps.points) pts.push_back(vec_json(p));
  emit(g, "keypoints.json", {{"points", pts}, {"vertex_indices", kps.vertex_indices}, {"diameter", model.diameter}});
  return 0;
}

int cmd_graph(const Globals& g, const std::string& input, int k) {
  const RunConfig cfg = load_config(g, RunConfig{});
  const json j = read_json(input);
  const std::vector<Vec3> pts = points3_from(j.is_array() ? j : j.at("points"));
  const KnnGraph graph = build_knn_graph(pts, k > 0 ? k : cfg.knn);
  json nb = json::array();
  for (int i = 0; i < graph.node_count(); ++i) {
    const auto row = graph.neighbors(i);
    nb.push_back(std::vector<int>(row.begin(), row.end()));
  }
  emit(g, "graph.json", {{"k", graph.k()}, {"neighbors", nb}});
  return 0;
}

int cmd_encode(const Globals& g, const std::string& input) {
  const RunConfig cfg = load_config(g, RunConfig{});
  const json j = read_json(input);
  std::vector<Vec2> pts;
  for (const auto& p : (j.is_array() ? j : j.at("points"))) pts.push_back(vec2_from(p));
  const BinaryCodeSet codes = encode_projections(pts, cfg.grid());
  emit(g, "codes.json", codes_to_json(codes));
  return 0;
}

int cmd_decode(const Globals& g, const std::string& input) {
  const RunConfig cfg = load_config(g, RunConfig{});
  const BinaryCodeSet codes = codes_from_json(read_json(input));
  const DecodedPoints dec = decode_codes(codes, cfg.grid());
  json pts = json::array();
  for (std::size_t i = 0; i < codes.size(); ++i) {
    if (dec.valid[i])
      pts.push_back(json::array({dec.points[i].x(), dec.points[i].y()}));
    else
      pts.push_back(nullptr);
  }
  emit(g, "points.json", {{"points", pts}, {"valid", dec.valid}});
  return 0;
}

int cmd_selfocc(const Globals& g, const std::string& mesh, int level, std::optional<bool> textureless) {
  const RunConfig cfg = load_config(g, RunConfig{});
  const ObjectModel model = object_for(mesh, cfg);
  const ViewpointSet views = sample_viewpoints(level);
  const VisibilityProfile prof = visibility_profile(model, views);
  const bool tl = textureless.value_or(cfg.textureless);
  double mean = 0.0;
  for (double v : prof.v) mean += v;
  mean /= static_cast<double>(prof.v.size());
  emit(g, "selfocc.json",
       {{"r_so", prof.r_so}, {"textureless", tl}, {"mask_filter", filter_decision(prof, tl)},
        {"viewpoints", views.directions.size()}, {"vertices", model.vertices.size()}, {"mean_visibility", mean}});
  if (!g.out_dir.empty()) {
    std::string csv = "vertex,x,y,z,visibility\n";
    char buf[160];
    for (std::size_t i = 0; i < prof.v.size(); ++i) {
      const Vec3& p = model.vertices[i];
      std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g,%.6f\n", i, p.x(), p.y(), p.z(), prof.v[i]);
      csv += buf;
    }
    write_text(fs::path(g.out_dir) / "visibility.csv", csv);
  }
  return 0;
}

int cmd_solve(const Globals& g, const std::string& input, const std::string& solver) {
  const RunConfig cfg = load_config(g, RunConfig{});
  const json j = read_json(input);
  const json& p3 = j.at("p3d");
  const json& p2 = j.at("p2d");
  if (p3.size() != p2.size()) throw InvalidArgument("p3d and p2d lengths differ");
  CorrespondenceSet corrs;
  for (std::size_t i = 0; i < p3.size(); ++i) {
    const bool valid = j.contains("valid") ? j.at("valid").at(i).get<bool>() : true;
    corrs.push_back(vec3_from(p3[i]), vec2_from(p2[i]), valid);
  }
  SolverConfig sc = cfg.solver;
  if (g.seed) sc.seed = *g.seed;
  const PoseEstimate est = solve_correspondences(corrs, cfg.camera, solver.empty() ? cfg.solver_name : solver, sc);
  std::vector<std::size_t> inliers;
  for (std::size_t i = 0; i < est.inliers.size(); ++i)
    if (est.inliers[i]) inliers.push_back(i);
  json out = pose_json(est.pose);
  out["inliers"] = inliers;
  out["inlier_count"] = est.inlier_count;
  out["mean_err"] = est.mean_error;
  emit(g, "pose.json", out);
  return 0;
}

int cmd_eval(const Globals& g, const std::string& input, const std::string& mesh, const std::string& label) {
  const RunConfig cfg = load_config(g, RunConfig{});
  const ObjectModel model = object_for(mesh, cfg);
  const json j = read_json(input);
  std::vector<PoseSample> samples;
  for (const auto& s : (j.is_array() ? j : j.at("samples"))) {
    PoseSample ps;
    ps.failed = s.value("failed", false);
    ps.gt = pose_from(s.at("gt"));
    if (!ps.failed) ps.pred = pose_from(s.at("pred"));
    samples.push_back(ps);
  }
  const MetricsReport rep = evaluate(samples, model, cfg.symmetry);
  emit(g, "report.json", rep.to_json());
  if (!g.out_dir.empty())
    write_text(fs::path(g.out_dir) / "report.csv", MetricsReport::csv_header() + "\n" + rep.csv_row(label) + "\n");
  return 0;
}

int cmd_bench(const Globals& g, const std::string& mode, const std::string& checkpoint, int scenes) {
  RunConfig cfg = load_config(g, RunConfig::toy());
  if (!mode.empty()) cfg.bench.mode = mode;
  if (!checkpoint.empty()) cfg.bench.checkpoint = checkpoint;
  if (scenes >= 0) cfg.bench.scenes = scenes;
  cfg.validate();
  const BenchmarkResult res = run_benchmark(cfg, g.out_dir);
  std::cout << res.report.to_json().dump(2) << '\n';
  return 0;
}

int cmd_train(const Globals& g, bool phase2_only, int steps, bool quiet) {
  RunConfig cfg = load_config(g, RunConfig::toy());
  if (steps >= 0) {
    cfg.train.steps = steps;
    cfg.train.phase1_steps = std::min(cfg.train.phase1_steps, steps);
  }
  if (phase2_only) cfg.train.phase1_steps = 0;
  cfg.validate();
  const fs::path out = g.out_dir.empty() ? fs::path("train_out") : fs::path(g.out_dir);
  fs::create_directories(out);

  const auto t0 = std::chrono::steady_clock::now();
  const ObjectModel model = load_object(cfg);
  const KeypointSet kps = farthest_point_sample(model, static_cast<std::size_t>(cfg.keypoints));
  const SceneContext ctx = make_scene_context(model, kps.points, cfg.camera, cfg.grid(), cfg.seed);
  const auto train = generate_scenes(ctx, cfg.sampler, cfg.seed, seed_stream::train_scenes, cfg.train.train_scenes);
  const auto test = generate_scenes(ctx, cfg.sampler, cfg.seed, seed_stream::test_scenes, cfg.train.test_scenes);
  PoseNetwork net(cfg.model_config(), kps.points, derive_seed(cfg.seed, seed_stream::model_init, 0));
  const TrainResult res = train_toy(net, train, test, cfg.train, cfg.seed, [&](const TrainLogEntry& e) {
    if (quiet || (e.step % 100 != 0 && e.median_error < 0.0)) return;
    std::fprintf(stderr, "step %5d  phase %d  loss %.5f", e.step, e.phase, e.loss.total);
    if (e.median_error >= 0.0) std::fprintf(stderr, "  median error %.2f px", e.median_error);
    std::fputc('\n', stderr);
  });
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  net.params().save(out / "checkpoint.gpck");
  write_train_log(res, out / "train_log.csv");
  json summary = {{"config", cfg.to_json()},
                  {"steps", res.log.size()},
                  {"initial_loss", res.log.empty() ? 0.0 : res.log.front().loss.total},
                  {"final_loss", res.log.empty() ? 0.0 : res.log.back().loss.total},
                  {"final_median_error_px", res.final_median_error},
                  {"seconds", seconds}};
  write_text(out / "train_summary.json", summary.dump(2) + "\n");
  std::cout << summary.dump(2) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"gridpose: hierarchical-code keypoint localization and pose toolkit"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "JSON run config")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "master seed override");
  app.add_option("--out-dir", g.out_dir, "output directory (stdout when omitted)");

  std::string mesh, input, solver, label = "run", mode, checkpoint;
  int count = 0, start = 0, k = 0, level = 4, scenes = -1, steps = -1;
  std::optional<bool> textureless;
  bool phase2_only = false, quiet = false;

  auto* sample = app.add_subcommand("sample", "farthest point sampling of keypoints");
  sample->add_option("--mesh", mesh, "PLY/OBJ mesh (default: procedural toy object)");
  sample->add_option("-n,--count", count, "number of keypoints (default: config keypoints)");
  sample->add_option("--start", start, "seed vertex index");

  auto* graph = app.add_subcommand("graph", "k-nearest-neighbour graph over keypoints");
  graph->add_option("--input", input, "keypoints JSON")->required();
  graph->add_option("-k", k, "neighbours per node (default: config knn)");

  auto* encode = app.add_subcommand("encode", "RoI points to binary codes");
  encode->add_option("--input", input, "JSON list of [u, v] RoI points")->required();

  auto* decode = app.add_subcommand("decode", "binary codes to RoI cell centres");
  decode->add_option("--input", input, "codes JSON")->required();

  auto* selfocc = app.add_subcommand("selfocc", "self-occlusion ratio and mask-filter decision");
  selfocc->add_option("--mesh", mesh, "PLY/OBJ mesh (default: procedural toy object)");
  selfocc->add_option("--level", level, "viewpoint icosphere level")->check(CLI::Range(0, 6));
  selfocc->add_option("--textureless", textureless, "override the config texture flag");

  auto* solve = app.add_subcommand("solve", "pose from 2D-3D correspondences");
  solve->add_option("--input", input, "JSON with p3d, p2d and optional valid")->required();
  solve->add_option("--solver", solver, "progx | ransac | direct")
      ->check(CLI::IsMember({"progx", "ransac", "direct"}));

  auto* eval = app.add_subcommand("eval", "pose metrics over predicted and ground-truth poses");
  eval->add_option("--input", input, "JSON samples with pred, gt, failed")->required();
  eval->add_option("--mesh", mesh, "PLY/OBJ mesh (default: procedural toy object)");
  eval->add_option("--label", label, "method label in the CSV row");

  auto* bench = app.add_subcommand("synth-bench", "synthetic benchmark with oracle or network codes");
  bench->add_option("--mode", mode, "oracle | network")->check(CLI::IsMember({"oracle", "network"}));
  bench->add_option("--checkpoint", checkpoint, "network checkpoint");
  bench->add_option("--scenes", scenes, "scene budget");

  auto* train = app.add_subcommand("train-toy", "two-phase training on synthetic scenes");
  train->add_flag("--phase2-only", phase2_only, "skip the stage-0 pretraining phase");
  train->add_option("--steps", steps, "total optimizer steps");
  train->add_flag("--quiet", quiet, "no progress output");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*sample) return cmd_sample(g, mesh, count, start);
    if (*graph) return cmd_graph(g, input, k);
    if (*encode) return cmd_encode(g, input);
    if (*decode) return cmd_decode(g, input);
    if (*selfocc) return cmd_selfocc(g, mesh, level, textureless);
    if (*solve) return cmd_solve(g, input, solver);
    if (*eval) return cmd_eval(g, input, mesh, label);
    if (*bench) return cmd_bench(g, mode, checkpoint, scenes);
    if (*train) return cmd_train(g, phase2_only, steps, quiet);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const gridpose::InvalidArgument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const json::exception& e) {
    std::cerr << "error: malformed input: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
