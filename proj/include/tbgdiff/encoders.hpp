#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include <torch/torch.h>

namespace tbgdiff::encoders {

// Per-frame multi-resolution features. Level i has shape [N, C_i, H / s_i, W / s_i]
// with strides s = (4, 8, 16, 32); N indexes frames.
struct FeaturePyramid {
  static constexpr std::array<int64_t, 4> kStrides = {4, 8, 16, 32};
  std::array<torch::Tensor, 4> levels;

  const torch::Tensor& top() const { return levels[3]; }
  int64_t frames() const { return levels[0].size(0); }
  FeaturePyramid index_select(const torch::Tensor& frame_indices) const;
};

struct EncoderOptions {
  std::array<int64_t, 4> channels = {32, 64, 96, 128};
  std::array<int64_t, 2> guidance_channels = {32, 128};
};

// GroupNorm with up to 8 groups.
torch::nn::GroupNorm make_group_norm(int64_t channels);

// 3x3 conv -> GroupNorm -> GELU.
class ConvNormActImpl : public torch::nn::Module {
 public:
  ConvNormActImpl(int64_t in_channels, int64_t out_channels);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Conv2d conv{nullptr};
  torch::nn::GroupNorm norm{nullptr};
};
TORCH_MODULE(ConvNormAct);

// Pre-norm residual block: x + conv(act(norm(conv(act(norm(x)))))).
class ResidualBlockImpl : public torch::nn::Module {
 public:
  explicit ResidualBlockImpl(int64_t channels);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::GroupNorm norm1{nullptr}, norm2{nullptr};
  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr};
};
TORCH_MODULE(ResidualBlock);

// Single-head global self-attention over all spatial positions of one frame, with residual.
class SpatialSelfAttentionImpl : public torch::nn::Module {
 public:
  explicit SpatialSelfAttentionImpl(int64_t channels);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::LayerNorm norm{nullptr};
  torch::nn::Linear qkv{nullptr}, proj{nullptr};
};
TORCH_MODULE(SpatialSelfAttention);

// Strided patch projection followed by two residual blocks and optional attention.
class EncoderStageImpl : public torch::nn::Module {
 public:
  EncoderStageImpl(int64_t in_channels, int64_t out_channels, int64_t stride, bool attention);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Conv2d proj{nullptr};
  torch::nn::GroupNorm proj_norm{nullptr};
  ResidualBlock block1{nullptr}, block2{nullptr};
  SpatialSelfAttention attn{nullptr};
};
TORCH_MODULE(EncoderStage);

// Hierarchical frame encoder. Frames are encoded independently of each other.
class FrameEncoderImpl : public torch::nn::Module {
 public:
  explicit FrameEncoderImpl(const EncoderOptions& options = {});
  // frames: [N, 3, H, W] with H, W multiples of 32.
  FeaturePyramid forward(const torch::Tensor& frames);
  int64_t top_channels() const { return channels_[3]; }

 private:
  std::array<int64_t, 4> channels_;
  EncoderStage stage1{nullptr}, stage2{nullptr}, stage3{nullptr}, stage4{nullptr};
};
TORCH_MODULE(FrameEncoder);

// Light two-stage encoder for (frame, mask) pairs; output at stride 32.
class GuidanceEncoderImpl : public torch::nn::Module {
 public:
  explicit GuidanceEncoderImpl(const EncoderOptions& options = {});
  // frame: [N, 3, H, W]; mask: [N, 1, H, W] probabilities. Returns [N, C_g, H/32, W/32].
  torch::Tensor forward(const torch::Tensor& frame, const torch::Tensor& mask);

 private:
  EncoderStage stage1{nullptr}, stage2{nullptr};
};
TORCH_MODULE(GuidanceEncoder);

// Stride-32 features -> three (2x upsample, concat pyramid skip, conv-norm-act) blocks
// to stride 4 -> 4x bilinear to full resolution.
class ProgressiveDecoderImpl : public torch::nn::Module {
 public:
  explicit ProgressiveDecoderImpl(const EncoderOptions& options = {});
  torch::Tensor forward(const torch::Tensor& top, const FeaturePyramid& skips);
  int64_t out_channels() const { return out_channels_; }

 private:
  int64_t out_channels_;
  ConvNormAct up1{nullptr}, up2{nullptr}, up3{nullptr};
};
TORCH_MODULE(ProgressiveDecoder);

struct AuxiliaryOutput {
  torch::Tensor pseudo_logits;    // [N, 1, H, W]
  torch::Tensor boundary_logits;  // [N, 1, H, W]
};

// Decodes aggregated features into pseudo-mask and boundary logits.
class AuxiliaryHeadImpl : public torch::nn::Module {
 public:
  explicit AuxiliaryHeadImpl(const EncoderOptions& options = {});
  AuxiliaryOutput forward(const torch::Tensor& aggregated, const FeaturePyramid& skips);

 private:
  ProgressiveDecoder decoder{nullptr};
  torch::nn::Conv2d pseudo_branch{nullptr}, boundary_branch{nullptr};
};
TORCH_MODULE(AuxiliaryHead);

// Area-average resize of [N, C, H, W] to the given spatial size.
torch::Tensor area_downsample(const torch::Tensor& x, int64_t height, int64_t width);

}  // namespace tbgdiff::encoders
