#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gridpose/codes.hpp"
#include "gridpose/geometry.hpp"
#include "gridpose/metrics.hpp"
#include "gridpose/model.hpp"
#include "gridpose/solver.hpp"

namespace gridpose {

// splitmix64 finalizer and the per-stream seed scheme built on it:
// derive_seed(master, stream, i) = mix(mix(master + stream) + i).
std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream, std::uint64_t index);

namespace seed_stream {
constexpr std::uint64_t train_scenes = 1;
constexpr std::uint64_t test_scenes = 2;
constexpr std::uint64_t bench_scenes = 3;
constexpr std::uint64_t corruption = 4;
constexpr std::uint64_t model_init = 5;
constexpr std::uint64_t batches = 6;
constexpr std::uint64_t solver = 7;
constexpr std::uint64_t surface = 8;
}  // namespace seed_stream

struct PoseSampler {
  double z_min = 0.8;
  double z_max = 1.2;
  double xy_range = 0.1;  // translation x, y uniform in [-xy_range, xy_range]
  int max_attempts = 100;
};

struct NoiseModel {
  double bit_flip_prob = 0.0;  // per bit, independent
  double outlier_prob = 0.0;   // per keypoint: relocate to a uniform random cell
  double pixel_noise_sigma = 0.0;  // Gaussian noise added to decoded points, RoI pixels
  bool flip_v = false;
  bool flip_x = true;
  bool flip_y = true;
  int flip_bits = 0;  // only the first flip_bits bits of b_x/b_y may flip; 0 means all

  void validate() const;
  bool is_zero() const { return bit_flip_prob == 0.0 && outlier_prob == 0.0 && pixel_noise_sigma == 0.0; }
};

struct TrainConfig {
  int steps = 5000;
  int phase1_steps = 1500;  // stage-0 pretraining; 0 disables phase 1
  int batch = 8;
  double lr_phase1 = 1e-3;
  double lr_phase2 = 1e-3;
  // The last final_lr_steps steps run at lr_phase2 * final_lr_scale.
  int final_lr_steps = 0;
  double final_lr_scale = 1.0;
  int eval_interval = 500;
  bool teacher_forcing = false;
  // Training-time RoI jitter: box centre shifts up to +-roi_jitter of its side
  // and the side scales within [1 - roi_jitter, 1 + roi_jitter]. 0 disables it.
  double roi_jitter = 0.0;
  int train_scenes = 200;
  int test_scenes = 50;
};

struct BenchConfig {
  int scenes = 200;
  std::string mode = "oracle";  // oracle | network
  std::string checkpoint;       // network mode
  NoiseModel noise;
  std::string mask_filter = "auto";  // auto | on | off
};

struct RunConfig {
  std::uint64_t seed = 0;
  int keypoints = 512;
  int knn = 20;
  int depth = 6;
  int base_depth = 3;
  int stage0_layers = 2;
  int refine_layers = 3;
  int roi_size = 256;
  int patch = 1;
  int head_hidden = 64;
  std::vector<int> encoder_channels{16, 32, 64};
  std::vector<int> decoder_channels{32, 16, 16};
  CameraIntrinsics camera{572.4, 573.6, 325.3, 242.0};
  PoseSampler sampler;
  SolverConfig solver;
  std::string solver_name = "progx";  // progx | ransac
  std::string object = "toy";         // "toy" or a mesh path
  double object_size = 0.2;
  bool textureless = true;
  SymmetrySpec symmetry;
  TrainConfig train;
  BenchConfig bench;

  // Defaults of the desk-scale training run: N = 64 keypoints, 3x3 refinement
  // patches, batch 16, teacher forcing, RoI jitter and a decayed final phase.
  static RunConfig toy();
  // Values present in `j` override `base`.
  static RunConfig from_json(const nlohmann::json& j, const RunConfig& base);
  static RunConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
  void validate() const;

  GridSpec grid() const;
  ModelConfig model_config() const;
};

ObjectModel load_object(const RunConfig& cfg);

/// Geometry shared by every scene of one object.
struct SceneContext {
  ObjectModel model;
  std::vector<Vec3> keypoints;
  std::vector<Vec3> render_points;  // dense surface samples for the input image
  std::vector<Vec3> mask_points;    // sparser samples for the masks
  Vec3 box_min, box_max;            // normalization box of the coordinate image
  CameraIntrinsics camera;
  GridSpec grid;
};

SceneContext make_scene_context(const ObjectModel& model, std::vector<Vec3> keypoints, const CameraIntrinsics& camera,
                                const GridSpec& grid, std::uint64_t seed);

struct SceneSample {
  Pose pose;
  RoiTransform roi;
  std::vector<Vec2> projections;  // keypoints, full-image pixels
  BinaryCodeSet gt_codes;
  FeatureMap gt_masks;  // 2 x 2^d x 2^d binary; channel 0 full, 1 visible
  FeatureMap image;     // 3 x roi x roi object-coordinate rendering
};

Pose sample_pose(const PoseSampler& sampler, std::mt19937_64& rng);
SceneSample generate_scene(const SceneContext& ctx, const PoseSampler& sampler, std::mt19937_64& rng);
std::vector<SceneSample> generate_scenes(const SceneContext& ctx, const PoseSampler& sampler, std::uint64_t master,
                                         std::uint64_t stream, int count);

GridMask mask_channel(const FeatureMap& masks, int channel, double threshold = 0.5);

/// Re-crops a scene with a shifted and scaled box (fractions of the box side).
/// The image and visible mask are resampled from the original crop; codes and
/// the full mask are recomputed from the stored projections.
SceneSample jitter_roi(const SceneSample& s, const GridSpec& grid, const Vec2& shift, double scale);

BinaryCodeSet corrupt_codes(const BinaryCodeSet& codes, const NoiseModel& noise, std::mt19937_64& rng);

/// Median over keypoints with gt b_v = 1 of the RoI-pixel distance between the
/// cell centre of the first `bits` predicted bits and the exact projection.
double localization_error(const BinaryCodeSet& predicted, const SceneSample& scene, const GridSpec& grid,
                          int bits);
std::vector<double> localization_errors(const BinaryCodeSet& predicted, const SceneSample& scene,
                                        const GridSpec& grid, int bits);

struct InferenceOptions {
  SolverConfig solver;
  std::string solver_name = "progx";
  bool use_mask_filter = false;
  double pixel_noise_sigma = 0.0;
  std::uint64_t noise_seed = 0;
};

struct InferenceResult {
  bool failed = false;
  std::string error;
  PoseEstimate estimate;
  BinaryCodeSet codes;
  std::size_t correspondences = 0;  // valid pairs handed to the solver
  std::vector<double> stage_errors;  // median localization error per level d0..d (when gt is known)
};

CorrespondenceSet correspondences_from_codes(const BinaryCodeSet& codes, const std::vector<Vec3>& keypoints,
                                             const RoiTransform& roi, const GridSpec& grid);

// progx, ransac, or direct (EPnP plus refinement on every valid pair, no outlier rejection).
PoseEstimate solve_correspondences(const CorrespondenceSet& corrs, const CameraIntrinsics& camera,
                                   const std::string& solver_name, const SolverConfig& cfg);

// Codes to pose: decode, optional visible-mask filter, solve. Solver errors become failed results.
InferenceResult solve_codes(const BinaryCodeSet& codes, const SceneContext& ctx, const RoiTransform& roi,
                            const GridMask* visible_mask, const InferenceOptions& opt,
                            const SceneSample* truth = nullptr);
// Network forward followed by solve_codes with the predicted visible mask.
InferenceResult infer_pipeline(PoseNetwork& net, const SceneSample& scene, const SceneContext& ctx,
                               const InferenceOptions& opt);

struct TrainLogEntry {
  int step = 0;
  int phase = 1;
  LossBreakdown loss;           // batch mean
  double median_error = -1.0;   // held-out localization error, RoI pixels; -1 when not evaluated
};

struct TrainResult {
  std::vector<TrainLogEntry> log;
  double final_median_error = -1.0;
};

double evaluate_localization(PoseNetwork& net, const std::vector<SceneSample>& scenes, const GridSpec& grid);

TrainResult train_toy(PoseNetwork& net, const std::vector<SceneSample>& train, const std::vector<SceneSample>& test,
                      const TrainConfig& cfg, std::uint64_t seed,
                      const std::function<void(const TrainLogEntry&)>& progress = {});

void write_train_log(const TrainResult& result, const std::filesystem::path& csv_path);

struct SampleRecord {
  int index = 0;
  bool failed = false;
  std::string error;
  Pose gt;
  Pose pred;
  double add = -1.0, adds = -1.0, rot_deg = -1.0, trans_m = -1.0;
  std::size_t inliers = 0;
  std::size_t correspondences = 0;
};

struct BenchmarkResult {
  MetricsReport report;
  std::vector<SampleRecord> samples;
};

/// Generates cfg.bench.scenes scenes, runs oracle or network inference,
/// evaluates and writes report.json, report.csv and samples.csv to out_dir
/// (when non-empty).
BenchmarkResult run_benchmark(const RunConfig& cfg, const std::filesystem::path& out_dir);

}  // namespace gridpose
