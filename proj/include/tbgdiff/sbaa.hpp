#pragma once

#include <cstdint>

#include <torch/torch.h>

namespace tbgdiff::sbaa {

// Row-major tokens over the feature grid: [B, n, C] with n = h * w.
struct TokenSequence {
  torch::Tensor tokens;
  int64_t height = 0;
  int64_t width = 0;

  int64_t count() const { return tokens.size(1); }
};

struct AttentionTrace {
  torch::Tensor weighting;  // downsampled pseudo-mask probability [B, n, 1]
  torch::Tensor q, k, v;    // [B, n, C]
  torch::Tensor weights;    // softmax(q k^T / sqrt(C)), [B, n, n]
  torch::Tensor attended;   // weights * v, [B, n, C]
};

// sigmoid(logits) [B, 1, H, W] area-averaged down to [B, 1, h, w].
torch::Tensor downsample_probability(const torch::Tensor& logits, int64_t height, int64_t width);

class BoundaryAwareAttentionImpl : public torch::nn::Module {
 public:
  explicit BoundaryAwareAttentionImpl(int64_t channels = 128);

  // aggregated: [B, C, h, w]; boundary_logits: [B, 1, H, W] at full resolution.
  TokenSequence tokenize(const torch::Tensor& aggregated, const torch::Tensor& boundary_logits);

  // Boundary position embedding E_bp for the given logits, [B, n, C].
  torch::Tensor boundary_embedding(const torch::Tensor& boundary_logits, int64_t height, int64_t width);

  // Shadow-weighted attention followed by the feed-forward block. Returns [B, C, h, w].
  torch::Tensor attend(const TokenSequence& tokens, const torch::Tensor& pseudo_logits,
                       AttentionTrace* trace = nullptr);

  torch::Tensor forward(const torch::Tensor& aggregated, const torch::Tensor& boundary_logits,
                        const torch::Tensor& pseudo_logits);

  // Applies W_k to already-normalised tokens weighted by `weighting` ([B, n, 1]).
  torch::Tensor project_key(const torch::Tensor& normed_tokens, const torch::Tensor& weighting);

 private:
  int64_t channels_;
  torch::nn::Linear patch_embed{nullptr}, boundary_embed{nullptr};
  torch::nn::LayerNorm norm1{nullptr}, norm2{nullptr};
  torch::nn::Linear wq{nullptr}, wk{nullptr}, wv{nullptr};
  torch::nn::Linear ffn1{nullptr}, ffn2{nullptr};
};
TORCH_MODULE(BoundaryAwareAttention);

}  // namespace tbgdiff::sbaa
