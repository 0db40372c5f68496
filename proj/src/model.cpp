#include "gridpose/model.hpp"

#include <cmath>

#include "gridpose/errors.hpp"

namespace gridpose {

void ModelConfig::validate() const {
  backbone.validate();
  plan.validate();
  if (backbone.depth != plan.depth || backbone.base_depth != plan.base_depth) {
    throw InvalidArgument("backbone and stage plan disagree on d or d0");
  }
  if (knn < 1 || knn >= plan.keypoints) throw InvalidArgument("k must lie in [1, N)");
}

PoseNetwork::PoseNetwork(const ModelConfig& cfg, std::vector<Vec3> keypoints, std::uint64_t seed)
    : cfg_(cfg), keypoints_(std::move(keypoints)) {
  cfg_.validate();
  if (static_cast<int>(keypoints_.size()) != cfg_.plan.keypoints) {
    throw InvalidArgument("keypoint count does not match the stage plan");
  }
  graph_ = build_knn_graph(keypoints_, cfg_.knn);
  std::mt19937_64 rng(seed);
  backbone_ = std::make_unique<Backbone>(store_, cfg_.backbone, rng);
  graphnet_ = std::make_unique<GraphNet>(store_, cfg_.plan, cfg_.backbone.feature_channels(),
                                         cfg_.backbone.decoder_channels, rng);
}

BinaryCodeSet harden_prediction(const GraphPrediction& p) {
  BinaryCodeSet codes(static_cast<std::size_t>(p.v.size()));
  for (Eigen::Index i = 0; i < p.v.size(); ++i) {
    auto& c = codes[static_cast<std::size_t>(i)];
    c.v = p.v[i] >= 0.5 ? 1 : 0;
    for (Eigen::Index k = 0; k < p.x.cols(); ++k) {
      c.x.push_back(p.x(i, k) >= 0.5 ? 1 : 0);
      c.y.push_back(p.y(i, k) >= 0.5 ? 1 : 0);
    }
  }
  return codes;
}

PoseNetwork::Prediction PoseNetwork::predict(const FeatureMap& image) {
  const EncoderOutput enc = backbone_->encode_image(image);
  const DecoderOutput dec = backbone_->decode_pyramid(enc);
  Prediction out;
  out.soft = graphnet_->forward(enc.f0, dec.pyramid, graph_, cfg_.plan.stages());
  out.codes = harden_prediction(out.soft);
  out.mask_logits = dec.mask_logits;
  return out;
}

bool PoseNetwork::phase1_param(const nn::Param& p) {
  const auto& n = p.name;
  return n.starts_with("encoder") || n.starts_with("decoder") || n.starts_with("mask_head") ||
         n.starts_with("graph.init") || n.starts_with("graph.stage0");
}

LossBreakdown PoseNetwork::train_sample(const FeatureMap& image, const BinaryCodeSet& target,
                                        const FeatureMap& target_masks, int phase, bool teacher_forcing,
                                        double weight) {
  if (phase != 1 && phase != 2) throw InvalidArgument("training phase must be 1 or 2");
  if (static_cast<int>(target.size()) != cfg_.plan.keypoints) throw InvalidArgument("target code count");
  const int d0 = cfg_.plan.base_depth;
  const int stages = phase == 1 ? 0 : cfg_.plan.stages();
  const int bits = d0 + stages;

  const EncoderOutput enc = backbone_->encode_image(image);
  const DecoderOutput dec = backbone_->decode_pyramid(enc);
  const GraphPrediction p =
      graphnet_->forward(enc.f0, dec.pyramid, graph_, stages, teacher_forcing ? &target : nullptr);

  nn::Vector gv;
  nn::Matrix gx, gy;
  FeatureMap gmask;
  const double lv = loss_v(p.v, target, &gv);
  const IndexLoss lxy = loss_xy(p.x, p.y, target, bits, &gx, &gy);
  const double lm = loss_mask(dec.mask_logits, target_masks, &gmask);
  const LossBreakdown loss = total_loss(lv, lxy.l_x, lxy.l_y, lm);
  if (!std::isfinite(loss.total)) throw DivergenceError("non-finite training loss");

  gv *= weight;
  gx *= weight;
  gy *= weight;
  gmask.data *= weight;
  const GraphNet::Grads gg = graphnet_->backward(gv, gx, gy);
  backbone_->backward(gg.f0, gg.pyramid, gmask, false);
  return loss;
}

}  // namespace gridpose
