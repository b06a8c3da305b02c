#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include <torch/torch.h>

#include "tbgdiff/diffusion.hpp"
#include "tbgdiff/dsa.hpp"
#include "tbgdiff/encoders.hpp"
#include "tbgdiff/sbaa.hpp"

namespace tbgdiff {

struct ModelOptions {
  encoders::EncoderOptions encoder;
  diffusion::GuidanceMode mode = diffusion::GuidanceMode::kStee;
  bool self_tile_rescale = true;
  bool full_resolution_state = false;
};

// Everything the denoiser conditions on, computed once per clip. Frame rows of the
// pyramid are clip-major: row b * L + l.
struct ClipConditioning {
  encoders::FeaturePyramid pyramid;
  torch::Tensor aggregated;       // [B, L, C, h, w]
  torch::Tensor pseudo_logits;    // [B, L, 1, H, W]
  torch::Tensor boundary_logits;  // [B, L, 1, H, W]
  torch::Tensor features;         // SBAA output, [B, L, C, h, w]

  int64_t batch() const { return aggregated.size(0); }
  int64_t length() const { return aggregated.size(1); }
};

struct TrainOutput {
  torch::Tensor final_logits;     // [B, L, 1, H, W]
  torch::Tensor pseudo_logits;    // [B, L, 1, H, W]
  torch::Tensor boundary_logits;  // [B, L, 1, H, W]
};

class TbgDiffModelImpl : public torch::nn::Module {
 public:
  explicit TbgDiffModelImpl(const ModelOptions& options = {});

  const ModelOptions& options() const { return options_; }

  // frames: [B, L, 3, H, W].
  ClipConditioning condition(const torch::Tensor& frames);

  // Guidance for every center from masks [B, L, 1, H, W].
  std::vector<diffusion::GuidanceBundle> clip_guidance(const torch::Tensor& frames, const torch::Tensor& masks);

  // Guidance for one center when only some masks exist yet.
  diffusion::GuidanceBundle frame_guidance(const torch::Tensor& frames,
                                           std::span<const std::optional<torch::Tensor>> masks, int64_t center);

  // Pools one bundle per center and stacks them clip-major to [B * L, C, h, w].
  diffusion::PooledGuidance pool_clip(const std::vector<diffusion::GuidanceBundle>& bundles,
                                      const ClipConditioning& cond);
  diffusion::PooledGuidance pool_frame(const diffusion::GuidanceBundle& bundle, const ClipConditioning& cond,
                                       int64_t center);

  // Mask logits for the selected clip-major frame rows.
  torch::Tensor predict(const torch::Tensor& y_t, const torch::Tensor& t, const ClipConditioning& cond,
                        const torch::Tensor& rows, const diffusion::PooledGuidance& guidance);

  // Full training pass: STEE guides with detached pseudo masks, PCE/PEE with the given
  // ground-truth masks (teacher forcing). y_t: [B, L, 1, H, W]; t: [B * L].
  TrainOutput forward_train(const torch::Tensor& frames, const torch::Tensor& gt_masks, const torch::Tensor& y_t,
                            const torch::Tensor& t);

  encoders::FrameEncoder& encoder() { return encoder_; }
  dsa::DualScaleAggregation& aggregation() { return dsa_; }
  encoders::AuxiliaryHead& aux_head() { return aux_head_; }
  sbaa::BoundaryAwareAttention& attention() { return sbaa_; }
  diffusion::MaskDenoiser& denoiser() { return denoiser_; }
  encoders::GuidanceEncoder* guidance_encoder() { return guidance_encoder_ ? &guidance_encoder_ : nullptr; }

 private:
  ModelOptions options_;
  encoders::FrameEncoder encoder_{nullptr};
  dsa::DualScaleAggregation dsa_{nullptr};
  encoders::AuxiliaryHead aux_head_{nullptr};
  sbaa::BoundaryAwareAttention sbaa_{nullptr};
  encoders::GuidanceEncoder guidance_encoder_{nullptr};
  diffusion::MaskDenoiser denoiser_{nullptr};
};
TORCH_MODULE(TbgDiffModel);

struct SamplingOptions {
  diffusion::NoiseSchedule schedule;
  int64_t steps = 20;
  double scale = 0.01;
  uint64_t seed = 42;
  // Worker threads for per-frame STEE sampling; sequential modes always run in frame order.
  int64_t workers = 1;
};

struct ClipSample {
  torch::Tensor masks;          // [L, H, W] uint8
  torch::Tensor probabilities;  // [L, H, W] float32
};

// Seed of frame `index` of a clip sampled with base seed `seed`.
uint64_t frame_seed(uint64_t seed, int64_t index);

// Samples every frame of one clip ([L, 3, H, W]) without gradients.
ClipSample sample_clip(TbgDiffModel& model, const torch::Tensor& frames, const SamplingOptions& options);

}  // namespace tbgdiff
