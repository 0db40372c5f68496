#pragma once

#include <random>
#include <vector>

#include "gridpose/codes.hpp"
#include "gridpose/nn.hpp"

namespace gridpose {

using nn::FeatureMap;

struct BackboneConfig {
  int roi_size = 256;
  int depth = 6;       // finest grid level d
  int base_depth = 3;  // d_0, resolution of F0
  int input_channels = 3;
  std::vector<int> encoder_channels{16, 32, 64};  // one stride-2 conv per entry; last is C_0
  std::vector<int> decoder_channels{32, 16, 16};  // one level per refinement stage

  void validate() const;
  int stages() const { return depth - base_depth; }
  int feature_channels() const { return encoder_channels.back(); }
};

struct EncoderOutput {
  FeatureMap f0;                  // C_0 x 2^d0 x 2^d0
  std::vector<FeatureMap> skips;  // pooled input (2^d), then encoder maps from fine to coarse, excluding f0
};

struct DecoderOutput {
  std::vector<FeatureMap> pyramid;  // level j has spatial size 2^(d0+j), j = 1..d-d0
  FeatureMap mask_logits;           // 2 x 2^d x 2^d; channel 0 full, channel 1 visible
};

struct SegmentationMasks {
  nn::Matrix full;     // 2^d x 2^d, row = y
  nn::Matrix visible;
};

SegmentationMasks masks_from_logits(const FeatureMap& logits);

/// Small convolutional encoder/decoder. The input RoI image is average
/// pooled to 2^d, then stride-2 3x3 convolutions reach 2^d0. Each decoder
/// level upsamples by nearest neighbour, concatenates the encoder map of the
/// same size and applies a 3x3 convolution.
class Backbone {
 public:
  Backbone(nn::ParamStore& store, const BackboneConfig& cfg, std::mt19937_64& rng);

  EncoderOutput encode_image(const FeatureMap& roi_image);
  DecoderOutput decode_pyramid(const EncoderOutput& enc);

  // Gradients w.r.t. f0, every pyramid level (same shapes) and the mask logits.
  // Accumulates parameter gradients; returns the gradient w.r.t. the input image,
  // or an empty map when input_gradient is false.
  FeatureMap backward(const FeatureMap& grad_f0, const std::vector<FeatureMap>& grad_pyramid,
                      const FeatureMap& grad_mask_logits, bool input_gradient = true);

  const BackboneConfig& config() const { return cfg_; }

 private:
  BackboneConfig cfg_;
  std::vector<nn::Conv2d> encoder_;
  std::vector<nn::Conv2d> decoder_;
  nn::Conv2d mask_head_;
  std::vector<FeatureMap> enc_out_;  // post-ReLU
  std::vector<FeatureMap> dec_out_;  // post-ReLU
  std::vector<int> dec_up_channels_;
  bool encoded_ = false, decoded_ = false;
};

/// Window of patch x patch cells of `cell`'s level centred on `cell`, read
/// from a map whose level may be finer (each coarse cell then covers a
/// 2^k x 2^k block). Zero padded, flattened in (channel, row, col) order.
nn::Vector crop_patch(const FeatureMap& level, const CellIndex& cell, int patch);
void crop_patch_backward(const nn::Vector& grad, FeatureMap& grad_level, const CellIndex& cell, int patch);
int crop_patch_size(int channels, int map_level, int cell_level, int patch);

}  // namespace gridpose
