#pragma once

#include <optional>
#include <random>
#include <vector>

#include "gridpose/backbone.hpp"
#include "gridpose/codes.hpp"
#include "gridpose/geometry.hpp"
#include "gridpose/nn.hpp"

namespace gridpose {

using NodeFeatures = nn::Matrix;  // N x C, row i is keypoint i

struct EdgeConvCache {
  nn::Matrix input;
  nn::Matrix output;
  std::vector<int> source;  // N x C_out (column-major): neighbour node feeding the max, -1 when clipped
  bool valid = false;
};

struct EdgeConvGrads {
  nn::Matrix input;
  nn::Matrix theta;
  nn::Matrix phi;
};

/// e_ij = ReLU(theta (f_j - f_i) + phi f_i), f'_i = max over out-neighbours j.
/// Ties go to the lowest neighbour slot.
NodeFeatures edgeconv_forward(const NodeFeatures& f, const KnnGraph& g, const nn::Matrix& theta,
                              const nn::Matrix& phi, EdgeConvCache* cache = nullptr);
EdgeConvGrads edgeconv_backward(const nn::Matrix& grad_out, const EdgeConvCache& cache, const nn::Matrix& theta,
                                const nn::Matrix& phi);

class EdgeConv {
 public:
  EdgeConv() = default;
  EdgeConv(nn::ParamStore& store, const std::string& name, int in, int out, std::mt19937_64& rng);
  NodeFeatures forward(const NodeFeatures& f, const KnnGraph& g);
  nn::Matrix backward(const nn::Matrix& grad_out);
  nn::Param& theta() { return *theta_; }
  nn::Param& phi() { return *phi_; }

 private:
  nn::Param* theta_ = nullptr;
  nn::Param* phi_ = nullptr;
  EdgeConvCache cache_;
};

/// Flattens F0 to C_0 x 2^(2 d0) and mixes channels into one row per keypoint:
/// E = W F0 + B, W is N x C_0, B is N x 2^(2 d0). B gives every node a learned
/// identity that the refinement stages rely on.
class InitEmbedding {
 public:
  InitEmbedding() = default;
  InitEmbedding(nn::ParamStore& store, int keypoints, int channels, int slots, std::mt19937_64& rng);
  NodeFeatures forward(const FeatureMap& f0);
  FeatureMap backward(const nn::Matrix& grad);

 private:
  nn::Param* w_ = nullptr;
  nn::Param* b_ = nullptr;
  FeatureMap f0_;
  bool cached_ = false;
};

// Two-layer per-node MLP with sigmoid output.
class Head {
 public:
  Head() = default;
  Head(nn::ParamStore& store, const std::string& name, int in, int hidden, int out, std::mt19937_64& rng);
  nn::Matrix forward(const nn::Matrix& x);
  nn::Matrix backward(const nn::Matrix& grad_prob);

 private:
  nn::Dense l1_, l2_;
  nn::Matrix hidden_, prob_;
};

struct StagePlan {
  int keypoints = 512;
  int depth = 6;
  int base_depth = 3;
  int stage0_layers = 2;      // L_0
  int refine_layers = 3;      // L_j
  int head_hidden = 64;
  int patch = 1;              // odd
  bool teacher_forcing = false;

  void validate() const;
  int stages() const { return depth - base_depth; }
  int width() const { return 1 << (2 * base_depth); }
};

struct GraphPrediction {
  nn::Vector v;              // N probabilities
  nn::Matrix x;              // N x (bits produced so far)
  nn::Matrix y;
  std::vector<std::vector<CellIndex>> fusion_cells;  // per refinement stage, per node
};

/// Progressive bit predictor over a fixed k-NN graph.
class GraphNet {
 public:
  GraphNet(nn::ParamStore& store, const StagePlan& plan, int feature_channels,
           const std::vector<int>& pyramid_channels, std::mt19937_64& rng);

  NodeFeatures init_embedding(const FeatureMap& f0);
  // L_0 EdgeConv layers, then the v/x/y heads (1 + d0 + d0 probabilities per node).
  GraphPrediction predict_stage0(const NodeFeatures& f, const KnnGraph& g, NodeFeatures* updated = nullptr);
  // Stage j in 1..d-d0: concatenates the patches, projects back to the base
  // width, runs L_j EdgeConv layers and emits one x and one y bit.
  std::pair<nn::Vector, nn::Vector> predict_refinement(int stage, const NodeFeatures& f, const nn::Matrix& patches,
                                                       const KnnGraph& g, NodeFeatures* updated = nullptr);

  // Full forward from F0. `teacher` replaces predicted prefixes when choosing fusion cells.
  GraphPrediction forward(const FeatureMap& f0, const std::vector<FeatureMap>& pyramid, const KnnGraph& g,
                          int stages_to_run, const BinaryCodeSet* teacher = nullptr);

  struct Grads {
    FeatureMap f0;
    std::vector<FeatureMap> pyramid;
  };
  // Gradients w.r.t. the probabilities of the last forward(); columns beyond
  // the produced bits are ignored.
  Grads backward(const nn::Vector& grad_v, const nn::Matrix& grad_x, const nn::Matrix& grad_y);

  const StagePlan& plan() const { return plan_; }
  int patch_width(int stage) const;

 private:
  struct Refinement {
    nn::Dense projection;
    std::vector<EdgeConv> layers;
    Head head_x, head_y;
  };

  StagePlan plan_;
  std::vector<int> pyramid_channels_;
  InitEmbedding init_;
  std::vector<EdgeConv> stage0_;
  Head head_v_, head_x_, head_y_;
  std::vector<Refinement> refine_;

  // forward state
  int stages_run_ = 0;
  bool forward_done_ = false;
  std::vector<std::vector<CellIndex>> cells_;
  std::vector<int> pyramid_sizes_;
};

// Fusion cell at `level` from the first `level` bits of hardened probabilities.
std::vector<CellIndex> prefix_cells(const nn::Matrix& x_prob, const nn::Matrix& y_prob, int level);

struct LossBreakdown {
  double l_v = 0.0;
  double l_x = 0.0;
  double l_y = 0.0;
  double l_mask = 0.0;
  double total = 0.0;
};

LossBreakdown total_loss(double l_v, double l_x, double l_y, double l_mask);

constexpr double kLossEps = 1e-7;

// Mean binary cross-entropy over all keypoints.
double loss_v(const nn::Vector& prob, const BinaryCodeSet& target, nn::Vector* grad = nullptr);

struct IndexLoss {
  double l_x = 0.0;
  double l_y = 0.0;
  bool empty = false;  // no keypoint inside the RoI
};
// Bitwise cross-entropy over the first `bits` bits of keypoints with b_v = 1,
// normalized by bits * N_I.
IndexLoss loss_xy(const nn::Matrix& prob_x, const nn::Matrix& prob_y, const BinaryCodeSet& target, int bits,
                  nn::Matrix* grad_x = nullptr, nn::Matrix* grad_y = nullptr);

// Mean |sigmoid(logit) - target| over both mask channels.
double loss_mask(const FeatureMap& logits, const FeatureMap& target, FeatureMap* grad = nullptr);

}  // namespace gridpose
