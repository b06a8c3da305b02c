#include "tbgdiff/encoders.hpp"

#include <cmath>

#include "tbgdiff/clip_data.hpp"

namespace tbgdiff::encoders {

namespace F = torch::nn::functional;

FeaturePyramid FeaturePyramid::index_select(const torch::Tensor& frame_indices) const {
  FeaturePyramid out;
  for (size_t i = 0; i < levels.size(); ++i) out.levels[i] = levels[i].index_select(0, frame_indices);
  return out;
}

torch::nn::GroupNorm make_group_norm(int64_t channels) {
  int64_t groups = std::min<int64_t>(8, channels);
  while (channels % groups != 0) --groups;
  return torch::nn::GroupNorm(torch::nn::GroupNormOptions(groups, channels));
}

torch::Tensor area_downsample(const torch::Tensor& x, int64_t height, int64_t width) {
  return F::adaptive_avg_pool2d(x, F::AdaptiveAvgPool2dFuncOptions({height, width}));
}

ConvNormActImpl::ConvNormActImpl(int64_t in_channels, int64_t out_channels)
    : conv(register_module(
          "conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(in_channels, out_channels, 3).padding(1)))),
      norm(register_module("norm", make_group_norm(out_channels))) {}

torch::Tensor ConvNormActImpl::forward(const torch::Tensor& x) {
  return torch::gelu(norm(conv(x)));
}

ResidualBlockImpl::ResidualBlockImpl(int64_t channels)
    : norm1(register_module("norm1", make_group_norm(channels))),
      norm2(register_module("norm2", make_group_norm(channels))),
      conv1(register_module(
          "conv1", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, channels, 3).padding(1)))),
      conv2(register_module(
          "conv2", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, channels, 3).padding(1)))) {}

torch::Tensor ResidualBlockImpl::forward(const torch::Tensor& x) {
  auto h = conv1(torch::gelu(norm1(x)));
  h = conv2(torch::gelu(norm2(h)));
  return x + h;
}

SpatialSelfAttentionImpl::SpatialSelfAttentionImpl(int64_t channels)
    : norm(register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({channels})))),
      qkv(register_module("qkv", torch::nn::Linear(channels, 3 * channels))),
      proj(register_module("proj", torch::nn::Linear(channels, channels))) {}

torch::Tensor SpatialSelfAttentionImpl::forward(const torch::Tensor& x) {
  const auto n = x.size(0), c = x.size(1), h = x.size(2), w = x.size(3);
  auto tokens = x.flatten(2).transpose(1, 2);  // [N, hw, C]
  auto parts = qkv(norm(tokens)).chunk(3, -1);
  auto weights = torch::softmax(torch::matmul(parts[0], parts[1].transpose(1, 2)) / std::sqrt(double(c)), -1);
  tokens = tokens + proj(torch::matmul(weights, parts[2]));
  return tokens.transpose(1, 2).reshape({n, c, h, w});
}

EncoderStageImpl::EncoderStageImpl(int64_t in_channels, int64_t out_channels, int64_t stride, bool attention)
    : proj(register_module("proj", torch::nn::Conv2d(torch::nn::Conv2dOptions(in_channels, out_channels, stride)
                                                         .stride(stride)))),
      proj_norm(register_module("proj_norm", make_group_norm(out_channels))),
      block1(register_module("block1", ResidualBlock(out_channels))),
      block2(register_module("block2", ResidualBlock(out_channels))) {
  if (attention) attn = register_module("attn", SpatialSelfAttention(out_channels));
}

torch::Tensor EncoderStageImpl::forward(const torch::Tensor& x) {
  auto h = block2(block1(proj_norm(proj(x))));
  if (attn) h = attn(h);
  return h;
}

FrameEncoderImpl::FrameEncoderImpl(const EncoderOptions& options)
    : channels_(options.channels),
      stage1(register_module("stage1", EncoderStage(3, channels_[0], 4, false))),
      stage2(register_module("stage2", EncoderStage(channels_[0], channels_[1], 2, false))),
      stage3(register_module("stage3", EncoderStage(channels_[1], channels_[2], 2, true))),
      stage4(register_module("stage4", EncoderStage(channels_[2], channels_[3], 2, true))) {}

FeaturePyramid FrameEncoderImpl::forward(const torch::Tensor& frames) {
  TORCH_CHECK(frames.dim() == 4 && frames.size(1) == 3, "FrameEncoder expects [N, 3, H, W]");
  data::check_frame_size(frames.size(2), frames.size(3));
  FeaturePyramid p;
  p.levels[0] = stage1(frames);
  p.levels[1] = stage2(p.levels[0]);
  p.levels[2] = stage3(p.levels[1]);
  p.levels[3] = stage4(p.levels[2]);
  return p;
}

GuidanceEncoderImpl::GuidanceEncoderImpl(const EncoderOptions& options)
    : stage1(register_module("stage1", EncoderStage(4, options.guidance_channels[0], 4, false))),
      stage2(register_module(
          "stage2", EncoderStage(options.guidance_channels[0], options.guidance_channels[1], 8, false))) {}

torch::Tensor GuidanceEncoderImpl::forward(const torch::Tensor& frame, const torch::Tensor& mask) {
  if (frame.dim() != 4 || mask.dim() != 4 || frame.size(0) != mask.size(0) || frame.size(2) != mask.size(2) ||
      frame.size(3) != mask.size(3) || mask.size(1) != 1) {
    throw std::invalid_argument("guidance pair: frame [N,3,H,W] and mask [N,1,H,W] must share N, H and W");
  }
  data::check_frame_size(frame.size(2), frame.size(3));
  return stage2(stage1(torch::cat({frame, mask.to(frame.dtype())}, 1)));
}

ProgressiveDecoderImpl::ProgressiveDecoderImpl(const EncoderOptions& options)
    : out_channels_(options.channels[0]),
      up1(register_module("up1", ConvNormAct(options.channels[3] + options.channels[2], options.channels[2]))),
      up2(register_module("up2", ConvNormAct(options.channels[2] + options.channels[1], options.channels[1]))),
      up3(register_module("up3", ConvNormAct(options.channels[1] + options.channels[0], options.channels[0]))) {}

torch::Tensor ProgressiveDecoderImpl::forward(const torch::Tensor& top, const FeaturePyramid& skips) {
  auto up = [](const torch::Tensor& x, double factor) {
    return F::interpolate(x, F::InterpolateFuncOptions()
                                 .scale_factor(std::vector<double>{factor, factor})
                                 .mode(torch::kBilinear)
                                 .align_corners(false));
  };
  auto x = up1(torch::cat({up(top, 2.0), skips.levels[2]}, 1));
  x = up2(torch::cat({up(x, 2.0), skips.levels[1]}, 1));
  x = up3(torch::cat({up(x, 2.0), skips.levels[0]}, 1));
  return up(x, 4.0);
}

AuxiliaryHeadImpl::AuxiliaryHeadImpl(const EncoderOptions& options)
    : decoder(register_module("decoder", ProgressiveDecoder(options))),
      pseudo_branch(register_module("pseudo_branch", torch::nn::Conv2d(torch::nn::Conv2dOptions(
                                                         options.channels[0], 1, 1)))),
      boundary_branch(register_module("boundary_branch", torch::nn::Conv2d(torch::nn::Conv2dOptions(
                                                             options.channels[0], 1, 1)))) {
  torch::NoGradGuard no_grad;
  pseudo_branch->bias.zero_();
  boundary_branch->bias.zero_();
}

AuxiliaryOutput AuxiliaryHeadImpl::forward(const torch::Tensor& aggregated, const FeaturePyramid& skips) {
  auto features = decoder(aggregated, skips);
  return {pseudo_branch(features), boundary_branch(features)};
}

}  // namespace tbgdiff::encoders
