#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <vector>

#include "gridpose/backbone.hpp"
#include "gridpose/graphnet.hpp"

namespace gridpose {

struct ModelConfig {
  BackboneConfig backbone;
  StagePlan plan;
  int knn = 20;

  void validate() const;
};

/// Backbone plus graph network over a fixed keypoint set.
class PoseNetwork {
 public:
  PoseNetwork(const ModelConfig& cfg, std::vector<Vec3> keypoints, std::uint64_t seed);

  struct Prediction {
    GraphPrediction soft;
    BinaryCodeSet codes;  // hardened at 0.5
    FeatureMap mask_logits;
  };
  Prediction predict(const FeatureMap& image);

  /// Forward, losses and backward for one sample; parameter gradients are
  /// accumulated with factor `weight`. Phase 1 runs stage 0 only and
  /// supervises the first d0 bits; phase 2 runs every stage.
  LossBreakdown train_sample(const FeatureMap& image, const BinaryCodeSet& target, const FeatureMap& target_masks,
                             int phase, bool teacher_forcing, double weight);

  static bool phase1_param(const nn::Param& p);

  nn::ParamStore& params() { return store_; }
  const KnnGraph& graph() const { return graph_; }
  const ModelConfig& config() const { return cfg_; }
  const std::vector<Vec3>& keypoints() const { return keypoints_; }

 private:
  ModelConfig cfg_;
  std::vector<Vec3> keypoints_;
  KnnGraph graph_;
  nn::ParamStore store_;
  std::unique_ptr<Backbone> backbone_;
  std::unique_ptr<GraphNet> graphnet_;
};

BinaryCodeSet harden_prediction(const GraphPrediction& p);

}  // namespace gridpose
