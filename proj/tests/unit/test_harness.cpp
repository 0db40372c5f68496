#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "gridpose/errors.hpp"
#include "gridpose/harness.hpp"
#include "synthetic.hpp"

using namespace gridpose;

namespace {

struct ToyWorld {
  RunConfig cfg;
  SceneContext ctx;
};

const ToyWorld& toy_world() {
  static const ToyWorld w = [] {
    ToyWorld t{RunConfig::toy(), {}};
    const ObjectModel model = load_object(t.cfg);
    const KeypointSet kps = farthest_point_sample(model, static_cast<std::size_t>(t.cfg.keypoints));
    t.ctx = make_scene_context(model, kps.points, t.cfg.camera, t.cfg.grid(), t.cfg.seed);
    return t;
  }();
  return w;
}

// Small network and RoI so training tests run in seconds.
RunConfig tiny_config() {
  RunConfig c = RunConfig::toy();
  c.keypoints = 16;
  c.knn = 5;
  c.roi_size = 64;
  c.encoder_channels = {8, 8, 8};
  c.decoder_channels = {8, 8, 8};
  c.head_hidden = 16;
  return c;
}

struct TinySetup {
  RunConfig cfg;
  SceneContext ctx;
  std::vector<SceneSample> scenes;
};

TinySetup tiny_setup(int scenes) {
  TinySetup s{tiny_config(), {}, {}};
  const ObjectModel model = load_object(s.cfg);
  const KeypointSet kps = farthest_point_sample(model, static_cast<std::size_t>(s.cfg.keypoints));
  s.ctx = make_scene_context(model, kps.points, s.cfg.camera, s.cfg.grid(), 1);
  s.scenes = generate_scenes(s.ctx, s.cfg.sampler, 1, seed_stream::train_scenes, scenes);
  return s;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v.size() % 2 ? v[v.size() / 2] : 0.5 * (v[v.size() / 2 - 1] + v[v.size() / 2]);
}

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("gridpose_test_" + name);
  std::filesystem::remove_all(p);
  return p;
}

}  // namespace

TEST_CASE("splitmix seeds are stable and stream separated") {
  CHECK(splitmix64(0) == 0xe220a8397b1dcdafULL);
  CHECK(derive_seed(7, 1, 0) != derive_seed(7, 2, 0));
  CHECK(derive_seed(7, 1, 0) != derive_seed(7, 1, 1));
  CHECK(derive_seed(7, 1, 3) == derive_seed(7, 1, 3));
}

TEST_CASE("run config json round trip and validation") {
  const RunConfig def;
  CHECK(def.keypoints == 512);
  CHECK(def.knn == 20);
  CHECK(def.depth == 6);
  CHECK(def.base_depth == 3);
  CHECK(def.stage0_layers == 2);
  CHECK(def.refine_layers == 3);
  CHECK(def.roi_size == 256);
  CHECK(RunConfig::toy().keypoints == 64);
  CHECK(RunConfig::toy().patch == 3);
  CHECK(RunConfig::toy().train.teacher_forcing);

  RunConfig c = RunConfig::toy();
  c.seed = 99;
  c.train.steps = 10;
  c.train.phase1_steps = 4;
  c.bench.noise.bit_flip_prob = 0.25;
  const RunConfig back = RunConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());

  CHECK_THROWS_AS(RunConfig::from_json(nlohmann::json{{"bogus", 1}}), InvalidArgument);
  CHECK_THROWS_AS(RunConfig::from_json(nlohmann::json{{"base_depth", 7}}), InvalidArgument);
  CHECK_THROWS_AS(RunConfig::from_json(nlohmann::json{{"knn", 600}}), InvalidArgument);
  CHECK_THROWS_AS(RunConfig::from_json(nlohmann::json{{"solver_name", "magic"}}), InvalidArgument);
  CHECK_THROWS_AS(RunConfig::from_json(nlohmann::json{{"train", {{"steps", 5}, {"phase1_steps", 6}}}}),
                  InvalidArgument);
  CHECK_THROWS_AS(RunConfig::from_json(nlohmann::json{{"keypoints", "many"}}), InvalidArgument);
  CHECK_THROWS_AS(RunConfig::from_json(nlohmann::json{{"train", {{"roi_jitter", 0.7}}}}), InvalidArgument);
  const RunConfig partial = RunConfig::from_json(nlohmann::json{{"seed", 5}}, RunConfig::toy());
  CHECK(partial.seed == 5);
  CHECK(partial.keypoints == 64);
}

TEST_CASE("pose sampler respects the translation box") {
  std::mt19937_64 rng(3);
  PoseSampler s;
  for (int i = 0; i < 500; ++i) {
    const Pose p = sample_pose(s, rng);
    CHECK(p.is_valid());
    CHECK(std::abs(p.translation.x()) <= 0.1);
    CHECK(std::abs(p.translation.y()) <= 0.1);
    CHECK(p.translation.z() >= 0.8);
    CHECK(p.translation.z() <= 1.2);
  }
}

TEST_CASE("generate_scene is deterministic under a fixed seed") {
  const ToyWorld& w = toy_world();
  std::mt19937_64 a(42), b(42);
  const SceneSample s1 = generate_scene(w.ctx, w.cfg.sampler, a);
  const SceneSample s2 = generate_scene(w.ctx, w.cfg.sampler, b);
  CHECK(s1.pose.rotation == s2.pose.rotation);
  CHECK(s1.pose.translation == s2.pose.translation);
  CHECK(s1.roi.bbox_origin == s2.roi.bbox_origin);
  CHECK(s1.roi.bbox_size == s2.roi.bbox_size);
  CHECK(s1.gt_codes == s2.gt_codes);
  CHECK(s1.gt_masks.data == s2.gt_masks.data);
  CHECK(s1.image.data == s2.image.data);
  CHECK(s1.image.channels == 3);
  CHECK(s1.image.height == 256);
  CHECK(s1.image.width == 256);
}

TEST_CASE("scene ground truth is consistent with the projected geometry") {
  const ToyWorld& w = toy_world();
  const GridSpec grid = w.cfg.grid();
  const std::vector<SceneSample> scenes = generate_scenes(w.ctx, w.cfg.sampler, 11, seed_stream::test_scenes, 20);
  for (const SceneSample& s : scenes) {
    CHECK(s.roi.bbox_size.x() == s.roi.bbox_size.y());
    const std::vector<Vec2> rho = to_roi(s.projections, s.roi);
    CHECK(s.gt_codes == encode_projections(rho, grid));
    const DecodedPoints dec = decode_codes(s.gt_codes, grid);
    const GridMask full = mask_channel(s.gt_masks, 0);
    const GridMask visible = mask_channel(s.gt_masks, 1);
    CHECK(visible.count() > 0);
    CHECK(visible.count() < full.count() + 400);
    for (std::size_t i = 0; i < rho.size(); ++i) {
      // The padded box contains every vertex, hence every keypoint.
      REQUIRE(s.gt_codes[i].v);
      CHECK((dec.points[i] - rho[i]).norm() <= 2.0 * std::sqrt(2.0) + 1e-9);
      const CellIndex c = prefix_cell(s.gt_codes[i], grid.depth);
      CHECK(full.at(c.ix, c.iy));
    }
    // Rendered coordinates lie in [0, 1] and cover a good part of the RoI.
    CHECK(s.image.data.minCoeff() >= 0.0);
    CHECK(s.image.data.maxCoeff() <= 1.0);
    const auto covered = (s.image.data.colwise().sum().array() > 0.0).count();
    CHECK(covered > 256 * 256 / 10);
  }
}

TEST_CASE("jitter_roi re-crops consistently") {
  const ToyWorld& w = toy_world();
  const GridSpec grid = w.cfg.grid();
  const std::vector<SceneSample> scenes = generate_scenes(w.ctx, w.cfg.sampler, 12, seed_stream::test_scenes, 6);
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-0.15, 0.15);
  for (const SceneSample& s : scenes) {
    const SceneSample same = jitter_roi(s, grid, Vec2::Zero(), 1.0);
    CHECK(same.image.data == s.image.data);
    CHECK(same.gt_masks.data == s.gt_masks.data);
    CHECK(same.gt_codes == s.gt_codes);

    const SceneSample j = jitter_roi(s, grid, Vec2(u(rng), u(rng)), 1.0 + u(rng));
    CHECK(j.roi.bbox_size.x() == doctest::Approx(j.roi.bbox_size.y()));
    CHECK(j.gt_codes == encode_projections(to_roi(j.projections, j.roi), grid));
    CHECK(j.image.data.minCoeff() >= 0.0);
    CHECK(j.image.data.maxCoeff() <= 1.0);

    // A shift of 8 RoI pixels (two cells) moves image and visible mask by exactly that much.
    const int k = 8;
    const SceneSample m = jitter_roi(s, grid, Vec2(static_cast<double>(k) / s.roi.roi_size, 0.0), 1.0);
    bool image_ok = true, mask_ok = true;
    for (int y = 0; y < 256; ++y) {
      for (int x = 0; x + k < 256; ++x) {
        for (int c = 0; c < 3; ++c) image_ok = image_ok && m.image.at(c, y, x) == s.image.at(c, y, x + k);
      }
    }
    for (int y = 0; y < 64; ++y) {
      for (int x = 0; x + 2 < 64; ++x) mask_ok = mask_ok && m.gt_masks.at(1, y, x) == s.gt_masks.at(1, y, x + 2);
    }
    CHECK(image_ok);
    CHECK(mask_ok);
  }
  CHECK_THROWS_AS(jitter_roi(scenes[0], grid, Vec2::Zero(), 0.0), InvalidArgument);
}

TEST_CASE("generate_scene reports an exhausted resample budget") {
  const ToyWorld& w = toy_world();
  PoseSampler behind;
  behind.z_min = behind.z_max = 0.01;
  behind.max_attempts = 5;
  std::mt19937_64 rng(1);
  CHECK_THROWS_AS(generate_scene(w.ctx, behind, rng), GenerationError);
}

TEST_CASE("corrupt_codes: identity, complement and binomial count") {
  const ToyWorld& w = toy_world();
  std::mt19937_64 srng(5);
  const SceneSample s = generate_scene(w.ctx, w.cfg.sampler, srng);

  std::mt19937_64 rng(1);
  CHECK(corrupt_codes(s.gt_codes, NoiseModel{}, rng) == s.gt_codes);

  NoiseModel all_x;
  all_x.bit_flip_prob = 1.0;
  all_x.flip_y = false;
  const BinaryCodeSet flipped = corrupt_codes(s.gt_codes, all_x, rng);
  for (std::size_t i = 0; i < flipped.size(); ++i) {
    CHECK(flipped[i].v == s.gt_codes[i].v);
    CHECK(flipped[i].y == s.gt_codes[i].y);
    for (std::size_t k = 0; k < flipped[i].x.size(); ++k) CHECK(flipped[i].x[k] == 1 - s.gt_codes[i].x[k]);
  }

  // 10^4 bits: 834 keypoints x 12 bits = 10008.
  BinaryCodeSet many;
  for (int i = 0; i < 834; ++i) many.push_back(s.gt_codes[static_cast<std::size_t>(i) % s.gt_codes.size()]);
  NoiseModel n;
  n.bit_flip_prob = 0.1;
  std::mt19937_64 r2(77);
  const BinaryCodeSet out = corrupt_codes(many, n, r2);
  double flips = 0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    for (int k = 0; k < 6; ++k) {
      flips += out[i].x[k] != many[i].x[k];
      flips += out[i].y[k] != many[i].y[k];
    }
  }
  const double bits = 834.0 * 12.0;
  const double mean = bits * 0.1;
  const double sigma = std::sqrt(bits * 0.1 * 0.9);
  CHECK(std::abs(flips - mean) <= 3.0 * sigma);

  std::mt19937_64 r3(77);
  CHECK(corrupt_codes(many, n, r3) == out);

  NoiseModel msb;
  msb.bit_flip_prob = 1.0;
  msb.flip_bits = 1;
  const BinaryCodeSet m = corrupt_codes(s.gt_codes, msb, rng);
  for (std::size_t i = 0; i < m.size(); ++i) {
    CHECK(m[i].x[0] != s.gt_codes[i].x[0]);
    CHECK(std::equal(m[i].x.begin() + 1, m[i].x.end(), s.gt_codes[i].x.begin() + 1));
  }

  NoiseModel bad;
  bad.outlier_prob = 1.5;
  CHECK_THROWS_AS(corrupt_codes(s.gt_codes, bad, rng), InvalidArgument);
}

TEST_CASE("oracle codes recover the pose to quantization accuracy") {
  const ToyWorld& w = toy_world();
  const std::vector<SceneSample> scenes = generate_scenes(w.ctx, w.cfg.sampler, 21, seed_stream::bench_scenes, 50);
  std::vector<double> rot, trans;
  InferenceOptions opt;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    opt.solver.seed = i;
    const InferenceResult r = solve_codes(scenes[i].gt_codes, w.ctx, scenes[i].roi, nullptr, opt, &scenes[i]);
    REQUIRE_FALSE(r.failed);
    REQUIRE(r.stage_errors.size() == 4);
    const RotTransError e = rot_trans_error(r.estimate.pose, scenes[i].pose);
    rot.push_back(e.degrees);
    trans.push_back(e.meters);
  }
  CHECK(median(rot) <= 1.0);
  CHECK(median(trans) <= 0.01);
}

TEST_CASE("corrupted codes with 5 percent bit flips keep progx recall above 90") {
  const ToyWorld& w = toy_world();
  const std::vector<SceneSample> scenes = generate_scenes(w.ctx, w.cfg.sampler, 31, seed_stream::bench_scenes, 200);
  NoiseModel noise;
  noise.bit_flip_prob = 0.05;
  std::vector<PoseSample> samples;
  InferenceOptions opt;
  opt.solver_name = "progx";
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    std::mt19937_64 rng(derive_seed(31, seed_stream::corruption, i));
    opt.solver.seed = i;
    const BinaryCodeSet codes = corrupt_codes(scenes[i].gt_codes, noise, rng);
    const InferenceResult r = solve_codes(codes, w.ctx, scenes[i].roi, nullptr, opt);
    samples.push_back(PoseSample{r.estimate.pose, scenes[i].pose, r.failed});
  }
  const MetricsReport rep = evaluate(samples, w.ctx.model, SymmetrySpec::none());
  MESSAGE("progx recall at 0.1d with 5% flips: " << rep.recall_01d);
  CHECK(rep.recall_01d >= 90.0);
}

TEST_CASE("all-invisible codes surface as a failed sample") {
  const ToyWorld& w = toy_world();
  std::mt19937_64 rng(8);
  const SceneSample s = generate_scene(w.ctx, w.cfg.sampler, rng);
  BinaryCodeSet codes = s.gt_codes;
  for (auto& c : codes) c.v = false;
  for (const std::string solver : {"progx", "ransac", "direct"}) {
    InferenceOptions opt;
    opt.solver_name = solver;
    InferenceResult r;
    CHECK_NOTHROW(r = solve_codes(codes, w.ctx, s.roi, nullptr, opt));
    CHECK(r.failed);
    CHECK_FALSE(r.error.empty());
    CHECK(r.correspondences == 0);
  }
}

TEST_CASE("visible-mask filtering drops pairs outside the visible region") {
  const ToyWorld& w = toy_world();
  std::mt19937_64 rng(12);
  const SceneSample s = generate_scene(w.ctx, w.cfg.sampler, rng);
  const GridMask visible = mask_channel(s.gt_masks, 1);
  InferenceOptions opt;
  opt.use_mask_filter = true;
  const InferenceResult filtered = solve_codes(s.gt_codes, w.ctx, s.roi, &visible, opt);
  opt.use_mask_filter = false;
  const InferenceResult plain = solve_codes(s.gt_codes, w.ctx, s.roi, &visible, opt);
  CHECK(plain.correspondences == w.ctx.keypoints.size());
  CHECK(filtered.correspondences <= plain.correspondences);
  CHECK(filtered.correspondences > 0);
}

TEST_CASE("train_toy memorizes a single sample") {
  TinySetup t = tiny_setup(1);
  PoseNetwork net(t.cfg.model_config(), t.ctx.keypoints, 3);
  TrainConfig tc;
  tc.steps = 2000;
  tc.phase1_steps = 500;
  tc.batch = 1;
  tc.eval_interval = 0;
  const TrainResult r = train_toy(net, t.scenes, {}, tc, 3);
  REQUIRE(r.log.size() == 2000);
  const double first = r.log.front().loss.total;
  const double last = r.log.back().loss.total;
  MESSAGE("single-sample loss " << first << " -> " << last);
  CHECK(last <= 0.1 * first);
  for (const TrainLogEntry& e : r.log) {
    REQUIRE(std::isfinite(e.loss.total));
    CHECK(e.loss.total == doctest::Approx(e.loss.l_v + e.loss.l_x + e.loss.l_y + e.loss.l_mask).epsilon(1e-12));
    CHECK(e.phase == (e.step < 500 ? 1 : 2));
  }
}

TEST_CASE("train_toy reruns bitwise and evaluates on held-out scenes") {
  TinySetup t = tiny_setup(6);
  const std::vector<SceneSample> train(t.scenes.begin(), t.scenes.begin() + 4);
  const std::vector<SceneSample> test(t.scenes.begin() + 4, t.scenes.end());
  TrainConfig tc;
  tc.steps = 30;
  tc.phase1_steps = 10;
  tc.batch = 2;
  tc.eval_interval = 10;
  auto run = [&] {
    PoseNetwork net(t.cfg.model_config(), t.ctx.keypoints, 9);
    return train_toy(net, train, test, tc, 9);
  };
  const TrainResult a = run();
  const TrainResult b = run();
  REQUIRE(a.log.size() == b.log.size());
  for (std::size_t i = 0; i < a.log.size(); ++i) {
    CHECK(a.log[i].loss.total == b.log[i].loss.total);
    CHECK(a.log[i].loss.l_mask == b.log[i].loss.l_mask);
    CHECK(a.log[i].median_error == b.log[i].median_error);
  }
  CHECK(a.log[9].median_error >= 0.0);
  CHECK(a.log[8].median_error < 0.0);

  tc.roi_jitter = 0.1;
  const TrainResult ja = run();
  const TrainResult jb = run();
  bool same = true, differs = false;
  for (std::size_t i = 0; i < ja.log.size(); ++i) {
    same = same && ja.log[i].loss.total == jb.log[i].loss.total;
    differs = differs || ja.log[i].loss.total != a.log[i].loss.total;
  }
  CHECK(same);
  CHECK(differs);
  tc.roi_jitter = 0.0;
  CHECK(a.final_median_error == a.log.back().median_error);

  const auto csv = temp_dir("trainlog") / "log.csv";
  std::filesystem::create_directories(csv.parent_path());
  write_train_log(a, csv);
  std::ifstream in(csv);
  std::string line;
  int lines = 0;
  while (std::getline(in, line)) ++lines;
  CHECK(lines == 31);
}

TEST_CASE("train_toy rejects an empty dataset") {
  TinySetup t = tiny_setup(0);
  PoseNetwork net(t.cfg.model_config(), t.ctx.keypoints, 1);
  CHECK_THROWS_AS(train_toy(net, {}, {}, TrainConfig{}, 1), UndefinedInput);
}

TEST_CASE("network inference pipeline reports per-stage errors") {
  TinySetup t = tiny_setup(1);
  PoseNetwork net(t.cfg.model_config(), t.ctx.keypoints, 4);
  InferenceOptions opt;
  const InferenceResult r = infer_pipeline(net, t.scenes[0], t.ctx, opt);
  CHECK(r.stage_errors.size() == 4);
  CHECK(r.codes.size() == 16);
}

TEST_CASE("run_benchmark: oracle recall, persisted aggregation, empty budget") {
  RunConfig cfg = RunConfig::toy();
  cfg.bench.scenes = 200;
  cfg.bench.mask_filter = "off";
  const auto dir = temp_dir("bench");
  const BenchmarkResult res = run_benchmark(cfg, dir);
  CHECK(res.report.samples == 200);
  CHECK(res.report.failures == 0);
  CHECK(res.report.recall_01d == 100.0);

  // Recompute the recalls from samples.csv.
  std::ifstream in(dir / "samples.csv");
  REQUIRE(in);
  std::string line;
  std::getline(in, line);
  const double diameter = load_object(cfg).diameter;
  int n = 0, below_002 = 0, below_005 = 0, below_01 = 0;
  while (std::getline(in, line)) {
    std::stringstream ss(line);
    std::string field;
    std::vector<std::string> f;
    while (std::getline(ss, field, ',')) f.push_back(field);
    const double add = std::stod(f[2]);
    ++n;
    below_002 += add < 0.02 * diameter;
    below_005 += add < 0.05 * diameter;
    below_01 += add < 0.1 * diameter;
  }
  CHECK(n == 200);
  CHECK(res.report.recall_002d == doctest::Approx(100.0 * below_002 / n));
  CHECK(res.report.recall_005d == doctest::Approx(100.0 * below_005 / n));
  CHECK(res.report.recall_01d == doctest::Approx(100.0 * below_01 / n));

  std::ifstream js(dir / "report.json");
  const nlohmann::json j = nlohmann::json::parse(js);
  CHECK(j.at("add_s_0.1d").get<double>() == res.report.recall_01d);
  CHECK(j.at("config").at("seed") == 0);
  std::ifstream csv(dir / "report.csv");
  std::getline(csv, line);
  CHECK(line == MetricsReport::csv_header());

  cfg.bench.scenes = 0;
  CHECK_THROWS_AS(run_benchmark(cfg, dir), UndefinedInput);
}

TEST_CASE("run_benchmark is reproducible") {
  RunConfig cfg = RunConfig::toy();
  cfg.bench.scenes = 10;
  cfg.bench.mask_filter = "off";
  cfg.bench.noise.bit_flip_prob = 0.05;
  const BenchmarkResult a = run_benchmark(cfg, {});
  const BenchmarkResult b = run_benchmark(cfg, {});
  for (std::size_t i = 0; i < a.samples.size(); ++i) {
    CHECK(a.samples[i].pred.rotation == b.samples[i].pred.rotation);
    CHECK(a.samples[i].pred.translation == b.samples[i].pred.translation);
  }
}
