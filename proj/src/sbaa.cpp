#include "tbgdiff/sbaa.hpp"

#include <cmath>
#include <stdexcept>

#include "tbgdiff/encoders.hpp"

namespace tbgdiff::sbaa {

torch::Tensor downsample_probability(const torch::Tensor& logits, int64_t height, int64_t width) {
  if (logits.dim() != 4 || logits.size(1) != 1) {
    throw std::invalid_argument("expected full-resolution logits [B, 1, H, W]");
  }
  if (logits.size(2) % height != 0 || logits.size(3) % width != 0) {
    throw std::invalid_argument("logit map size is not a multiple of the feature grid");
  }
  return encoders::area_downsample(torch::sigmoid(logits), height, width);
}

BoundaryAwareAttentionImpl::BoundaryAwareAttentionImpl(int64_t channels)
    : channels_(channels),
      patch_embed(register_module("patch_embed", torch::nn::Linear(channels, channels))),
      boundary_embed(register_module("boundary_embed", torch::nn::Linear(1, channels))),
      norm1(register_module("norm1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({channels})))),
      norm2(register_module("norm2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({channels})))),
      wq(register_module("wq", torch::nn::Linear(torch::nn::LinearOptions(channels, channels).bias(false)))),
      wk(register_module("wk", torch::nn::Linear(torch::nn::LinearOptions(channels, channels).bias(false)))),
      wv(register_module("wv", torch::nn::Linear(torch::nn::LinearOptions(channels, channels).bias(false)))),
      ffn1(register_module("ffn1", torch::nn::Linear(channels, 4 * channels))),
      ffn2(register_module("ffn2", torch::nn::Linear(4 * channels, channels))) {}

torch::Tensor BoundaryAwareAttentionImpl::boundary_embedding(const torch::Tensor& boundary_logits, int64_t height,
                                                             int64_t width) {
  auto prob = downsample_probability(boundary_logits, height, width);  // [B, 1, h, w]
  return boundary_embed(prob.flatten(2).transpose(1, 2));              // [B, n, C]
}

TokenSequence BoundaryAwareAttentionImpl::tokenize(const torch::Tensor& aggregated,
                                                   const torch::Tensor& boundary_logits) {
  if (aggregated.dim() != 4 || aggregated.size(1) != channels_) {
    throw std::invalid_argument("SBAA expects aggregated features [B, C, h, w]");
  }
  if (boundary_logits.size(0) != aggregated.size(0)) throw std::invalid_argument("SBAA batch mismatch");
  const int64_t h = aggregated.size(2), w = aggregated.size(3);
  auto tokens = patch_embed(aggregated.flatten(2).transpose(1, 2)) + boundary_embedding(boundary_logits, h, w);
  return {tokens, h, w};
}

torch::Tensor BoundaryAwareAttentionImpl::project_key(const torch::Tensor& normed_tokens,
                                                      const torch::Tensor& weighting) {
  return wk(normed_tokens * weighting);
}

torch::Tensor BoundaryAwareAttentionImpl::attend(const TokenSequence& tokens, const torch::Tensor& pseudo_logits,
                                                 AttentionTrace* trace) {
  const auto& x = tokens.tokens;
  if (pseudo_logits.size(0) != x.size(0)) throw std::invalid_argument("SBAA batch mismatch");
  auto weighting = downsample_probability(pseudo_logits, tokens.height, tokens.width).flatten(2).transpose(1, 2);

  auto h = norm1(x);
  auto weighted = h * weighting;
  auto q = wq(h);
  auto k = wk(weighted);
  auto v = wv(weighted);
  auto weights = torch::softmax(torch::matmul(q, k.transpose(1, 2)) / std::sqrt(double(channels_)), -1);
  auto attended = torch::matmul(weights, v);
  auto y = x + attended;
  y = y + ffn2(torch::gelu(ffn1(norm2(y))));

  if (trace) *trace = {weighting, q, k, v, weights, attended};
  return y.transpose(1, 2).reshape({x.size(0), channels_, tokens.height, tokens.width});
}

torch::Tensor BoundaryAwareAttentionImpl::forward(const torch::Tensor& aggregated,
                                                  const torch::Tensor& boundary_logits,
                                                  const torch::Tensor& pseudo_logits) {
  return attend(tokenize(aggregated, boundary_logits), pseudo_logits);
}

}  // namespace tbgdiff::sbaa
