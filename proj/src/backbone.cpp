#include "gridpose/backbone.hpp"

#include <string>

#include "gridpose/errors.hpp"

namespace gridpose {

void BackboneConfig::validate() const {
  if (base_depth < 1 || depth <= base_depth) throw InvalidArgument("backbone needs 1 <= d0 < d");
  if (roi_size % (1 << depth) != 0) throw InvalidArgument("roi size must be a multiple of 2^d");
  if (static_cast<int>(encoder_channels.size()) != stages()) {
    throw InvalidArgument("encoder needs one channel entry per level between d and d0");
  }
  if (static_cast<int>(decoder_channels.size()) != stages()) {
    throw InvalidArgument("decoder needs one channel entry per refinement stage");
  }
  if (input_channels < 1) throw InvalidArgument("input needs at least one channel");
  for (int c : encoder_channels)
    if (c < 1) throw InvalidArgument("channel counts must be positive");
  for (int c : decoder_channels)
    if (c < 1) throw InvalidArgument("channel counts must be positive");
}

SegmentationMasks masks_from_logits(const FeatureMap& logits) {
  if (logits.channels != 2) throw InvalidArgument("mask logits need two channels");
  const nn::Matrix p = nn::sigmoid(logits.data);
  SegmentationMasks m;
  m.full.resize(logits.height, logits.width);
  m.visible.resize(logits.height, logits.width);
  for (int y = 0; y < logits.height; ++y) {
    for (int x = 0; x < logits.width; ++x) {
      m.full(y, x) = p(0, static_cast<Eigen::Index>(y) * logits.width + x);
      m.visible(y, x) = p(1, static_cast<Eigen::Index>(y) * logits.width + x);
    }
  }
  return m;
}

Backbone::Backbone(nn::ParamStore& store, const BackboneConfig& cfg, std::mt19937_64& rng) : cfg_(cfg) {
  cfg_.validate();
  int in = cfg_.input_channels;
  for (int e = 0; e < cfg_.stages(); ++e) {
    encoder_.emplace_back(store, "encoder." + std::to_string(e), in, cfg_.encoder_channels[e], 3, 2, rng);
    in = cfg_.encoder_channels[e];
  }
  int prev = cfg_.feature_channels();
  for (int j = 1; j <= cfg_.stages(); ++j) {
    const int skip = j == cfg_.stages() ? cfg_.input_channels : cfg_.encoder_channels[cfg_.stages() - j - 1];
    decoder_.emplace_back(store, "decoder." + std::to_string(j), prev + skip, cfg_.decoder_channels[j - 1], 3, 1, rng);
    dec_up_channels_.push_back(prev);
    prev = cfg_.decoder_channels[j - 1];
  }
  mask_head_ = nn::Conv2d(store, "mask_head", prev, 2, 1, 1, rng);
}

EncoderOutput Backbone::encode_image(const FeatureMap& roi_image) {
  if (roi_image.channels != cfg_.input_channels || roi_image.height != cfg_.roi_size ||
      roi_image.width != cfg_.roi_size) {
    throw InvalidArgument("RoI image must be " + std::to_string(cfg_.input_channels) + " x " +
                          std::to_string(cfg_.roi_size) + " x " + std::to_string(cfg_.roi_size));
  }
  EncoderOutput out;
  FeatureMap x = nn::avg_pool(roi_image, cfg_.roi_size >> cfg_.depth);
  out.skips.push_back(x);
  enc_out_.clear();
  for (std::size_t e = 0; e < encoder_.size(); ++e) {
    x = nn::relu(encoder_[e].forward(x));
    enc_out_.push_back(x);
    if (e + 1 < encoder_.size()) out.skips.push_back(x);
  }
  out.f0 = x;
  encoded_ = true;
  decoded_ = false;
  return out;
}

DecoderOutput Backbone::decode_pyramid(const EncoderOutput& enc) {
  if (enc.f0.channels != cfg_.feature_channels() || enc.f0.width != (1 << cfg_.base_depth) ||
      static_cast<int>(enc.skips.size()) != cfg_.stages()) {
    throw InvalidArgument("decoder input does not match the encoder layout");
  }
  DecoderOutput out;
  dec_out_.clear();
  FeatureMap prev = enc.f0;
  for (int j = 1; j <= cfg_.stages(); ++j) {
    // skips[0] is the pooled input at 2^d; skips[s] has size 2^(d-s)
    const FeatureMap& skip = enc.skips[cfg_.stages() - j];
    FeatureMap y = nn::relu(decoder_[j - 1].forward(nn::concat_channels(nn::upsample_nearest(prev, 2), skip)));
    dec_out_.push_back(y);
    out.pyramid.push_back(y);
    prev = y;
  }
  out.mask_logits = mask_head_.forward(prev);
  decoded_ = true;
  return out;
}

FeatureMap Backbone::backward(const FeatureMap& grad_f0, const std::vector<FeatureMap>& grad_pyramid,
                              const FeatureMap& grad_mask_logits, bool input_gradient) {
  if (!encoded_ || !decoded_) throw StateError("backbone backward without a full forward pass");
  if (static_cast<int>(grad_pyramid.size()) != cfg_.stages()) throw InvalidArgument("pyramid gradient count");
  const int s = cfg_.stages();
  std::vector<FeatureMap> grad_skip(s);
  FeatureMap g = mask_head_.backward(grad_mask_logits);
  for (int j = s; j >= 1; --j) {
    g.data += grad_pyramid[j - 1].data;
    g = nn::relu_backward(dec_out_[j - 1], g);
    const FeatureMap gin = decoder_[j - 1].backward(g);
    auto [gup, gskip] = nn::split_channels(gin, dec_up_channels_[j - 1]);
    grad_skip[s - j] = std::move(gskip);
    g = nn::upsample_nearest_backward(gup, 2);
  }
  g.data += grad_f0.data;
  for (int e = s - 1; e >= 0; --e) {
    if (e + 1 < s) g.data += grad_skip[e + 1].data;
    g = nn::relu_backward(enc_out_[e], g);
    g = encoder_[e].backward(g);
  }
  g.data += grad_skip[0].data;
  if (!input_gradient) return {};
  return nn::avg_pool_backward(g, cfg_.roi_size >> cfg_.depth);
}

namespace {

int map_level_of(const FeatureMap& m) {
  if (m.width != m.height || m.width < 1 || (m.width & (m.width - 1)) != 0) {
    throw InvalidArgument("feature map must be square with power-of-two size");
  }
  int level = 0;
  while ((1 << level) < m.width) ++level;
  return level;
}

template <typename F>
void for_each_tap(const FeatureMap& m, const CellIndex& cell, int patch, F&& visit) {
  if (patch < 1 || patch % 2 == 0) throw InvalidArgument("patch size must be odd and positive");
  const int level = map_level_of(m);
  if (cell.level > level) throw InvalidArgument("cell is finer than the feature map");
  const int block = 1 << (level - cell.level);
  const int r = patch / 2;
  const int span = patch * block;
  const int x0 = (cell.ix - r) * block, y0 = (cell.iy - r) * block;
  std::size_t idx = 0;
  for (int c = 0; c < m.channels; ++c) {
    for (int dy = 0; dy < span; ++dy) {
      for (int dx = 0; dx < span; ++dx, ++idx) {
        const int y = y0 + dy, x = x0 + dx;
        const bool inside = x >= 0 && y >= 0 && x < m.width && y < m.height;
        visit(idx, c, y, x, inside);
      }
    }
  }
}

}  // namespace

int crop_patch_size(int channels, int map_level, int cell_level, int patch) {
  const int span = patch * (1 << (map_level - cell_level));
  return channels * span * span;
}

nn::Vector crop_patch(const FeatureMap& level, const CellIndex& cell, int patch) {
  const int size = crop_patch_size(level.channels, map_level_of(level), std::min(cell.level, map_level_of(level)), patch);
  nn::Vector out = nn::Vector::Zero(size);
  for_each_tap(level, cell, patch, [&](std::size_t i, int c, int y, int x, bool inside) {
    if (inside) out[static_cast<Eigen::Index>(i)] = level.at(c, y, x);
  });
  return out;
}

void crop_patch_backward(const nn::Vector& grad, FeatureMap& grad_level, const CellIndex& cell, int patch) {
  for_each_tap(grad_level, cell, patch, [&](std::size_t i, int c, int y, int x, bool inside) {
    if (inside) grad_level.at(c, y, x) += grad[static_cast<Eigen::Index>(i)];
  });
}

}  // namespace gridpose
