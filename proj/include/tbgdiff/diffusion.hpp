#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "tbgdiff/encoders.hpp"

namespace tbgdiff::diffusion {

// ---------------------------------------------------------------------------
// Noise schedule

enum class ScheduleKind { kCosine, kLinear };

ScheduleKind parse_schedule(const std::string& name);  // "cosine" | "linear", else ConfigError
std::string to_string(ScheduleKind kind);

// Cumulative signal retention alphabar(t) for t = 0..t_train, alphabar(0) = 1.
struct NoiseSchedule {
  ScheduleKind kind = ScheduleKind::kCosine;
  int64_t t_train = 1000;
  std::vector<double> alphabar;

  double at(int64_t t) const;
};

// cosine: f(t) = cos^2(((t / T) + s) / (1 + s) * pi / 2), s = 0.008, alphabar = f(t) / f(0).
// linear: betas evenly spaced in [1e-4, 0.02], alphabar(t) = prod_{i <= t} (1 - beta_i).
NoiseSchedule build_schedule(ScheduleKind kind, int64_t t_train);

// ---------------------------------------------------------------------------
// Analog bits

// A mask mapped to (2 * value - 1) * scale; the diffusion state variable.
struct AnalogMask {
  torch::Tensor values;
  double scale = 0.01;
};

AnalogMask bit_encode(const torch::Tensor& mask, double scale);

// 1 where the analog value is strictly positive; ties go to non-shadow. Returns uint8.
torch::Tensor bit_decode(const torch::Tensor& analog);
inline torch::Tensor bit_decode(const AnalogMask& analog) { return bit_decode(analog.values); }

// sqrt(alphabar(t)) * y0 + sqrt(1 - alphabar(t)) * eps.
AnalogMask forward_diffuse(const AnalogMask& y0, int64_t t, const torch::Tensor& eps, const NoiseSchedule& schedule);

// Per-sample timesteps: y0 and eps are [N, ...], t is a [N] integer tensor.
torch::Tensor forward_diffuse(const torch::Tensor& y0, const torch::Tensor& t, const torch::Tensor& eps,
                              const NoiseSchedule& schedule);

// ---------------------------------------------------------------------------
// Reverse process

struct DenoiserState {
  AnalogMask y;
  int64_t t = 0;
  int64_t frame_index = 0;
};

// Maps predicted mask logits to the analog clean-mask estimate (2 sigmoid(z) - 1) * scale.
torch::Tensor estimate_clean(const torch::Tensor& logits, double scale);

// Noise implied by a state and a clean estimate: (y_t - sqrt(ab_t) y0) / sqrt(1 - ab_t).
torch::Tensor estimate_noise(const torch::Tensor& y_t, const torch::Tensor& y0_hat, int64_t t,
                             const NoiseSchedule& schedule);

// Deterministic DDIM transition from a clean estimate. t_next = 0 returns the estimate.
DenoiserState ddim_step_from_estimate(const DenoiserState& state, const torch::Tensor& y0_hat, int64_t t_next,
                                      const NoiseSchedule& schedule);

DenoiserState ddim_step(const DenoiserState& state, const torch::Tensor& predicted_logits, int64_t t_next,
                        const NoiseSchedule& schedule);

// Evenly spaced descending timesteps round(T * (steps - i) / steps), i = 0..steps-1.
std::vector<int64_t> timestep_ladder(int64_t t_train, int64_t steps);

// Returns logits [N, 1, H, W] for a noisy state at timestep t.
using Denoiser = std::function<torch::Tensor(const torch::Tensor& y_t, int64_t t)>;

struct SampleResult {
  torch::Tensor mask;         // uint8, bit_decode of the final state
  torch::Tensor probability;  // sigmoid of the last predicted logits
  AnalogMask final_state;
};

torch::Tensor initial_noise(at::IntArrayRef shape, uint64_t seed, torch::Dtype dtype = torch::kFloat32);

// Runs predict + ddim_step over the ladder starting from y_T.
SampleResult sample_from(const Denoiser& denoise, const torch::Tensor& y_T, int64_t steps, double scale,
                         const NoiseSchedule& schedule, int64_t frame_index = 0);

// Draws y_T ~ N(0, 1) from the seed, then samples.
SampleResult sample(const Denoiser& denoise, at::IntArrayRef shape, int64_t steps, uint64_t seed, double scale,
                    const NoiseSchedule& schedule, int64_t frame_index = 0);

// ---------------------------------------------------------------------------
// Timeline guidance

enum class GuidanceMode { kPce, kPee, kStee };
enum class Direction { kPast, kFuture };

GuidanceMode parse_guidance_mode(const std::string& name);  // "pce" | "pee" | "stee"
std::string to_string(GuidanceMode mode);
inline bool is_sequential(GuidanceMode mode) { return mode != GuidanceMode::kStee; }

// Payload is a downsampled mask [B, 1, h, w] (PCE) or an encoded pair [B, C, h, w].
struct GuidanceItem {
  Direction direction = Direction::kPast;
  int64_t source_index = 0;
  torch::Tensor payload;
};

struct GuidanceBundle {
  GuidanceMode mode = GuidanceMode::kStee;
  std::vector<GuidanceItem> items;

  int64_t count(Direction direction) const;
};

// frames: [B, L, 3, H, W]. masks: one [B, 1, H, W] probability map per clip frame, or
// nullopt where no mask exists yet. PCE and PEE read every frame before `center`; STEE
// reads every frame except `center`. A required but missing mask throws SequencingError.
GuidanceBundle build_guidance(GuidanceMode mode, const torch::Tensor& frames,
                              std::span<const std::optional<torch::Tensor>> masks, int64_t center,
                              encoders::GuidanceEncoder* encoder);

// Bundles for every center of the clip with each (frame, mask) pair encoded once.
// masks: [B, L, 1, H, W], all present.
std::vector<GuidanceBundle> build_clip_guidance(GuidanceMode mode, const torch::Tensor& frames,
                                                const torch::Tensor& masks, encoders::GuidanceEncoder* encoder);

struct PooledGuidance {
  torch::Tensor past;    // [B, C, h, w], zeros when the bundle has no past items
  torch::Tensor future;  // [B, C, h, w]
};

// Fuses a feature map with the mean-pooled past and future guidance through a residual block.
class GuidanceInjectionImpl : public torch::nn::Module {
 public:
  GuidanceInjectionImpl(int64_t channels, GuidanceMode mode);

  PooledGuidance pool(const GuidanceBundle& bundle, const torch::Tensor& like);
  torch::Tensor forward(const torch::Tensor& feature, const GuidanceBundle& bundle);
  torch::Tensor fuse(const torch::Tensor& feature, const PooledGuidance& guidance);

 private:
  int64_t channels_;
  GuidanceMode mode_;
  torch::nn::Conv2d mask_proj{nullptr};
  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr}, zip{nullptr};
  torch::nn::GroupNorm norm1{nullptr}, norm2{nullptr};
};
TORCH_MODULE(GuidanceInjection);

// 128-dim sinusoidal embedding of (possibly fractional) timesteps, [N] -> [N, dim].
torch::Tensor timestep_embedding(const torch::Tensor& t, int64_t dim = 128);

struct DenoiserOptions {
  encoders::EncoderOptions encoder;
  GuidanceMode mode = GuidanceMode::kStee;
  bool full_resolution_state = false;
  int64_t time_dim = 128;
};

// Direct mask predictor: noisy analog mask + timestep + SBAA features + guidance -> logits.
class MaskDenoiserImpl : public torch::nn::Module {
 public:
  explicit MaskDenoiserImpl(const DenoiserOptions& options = {});

  // y_t: [N, 1, H, W]; t: [N]; features: [N, C, h, w]; skips: the frames' pyramids.
  torch::Tensor forward(const torch::Tensor& y_t, const torch::Tensor& t, const torch::Tensor& features,
                        const PooledGuidance& guidance, const encoders::FeaturePyramid& skips);

  GuidanceInjection& injection() { return injection_; }

 private:
  DenoiserOptions options_;
  torch::nn::Conv2d state_proj{nullptr};
  torch::nn::Linear time_proj{nullptr};
  GuidanceInjection injection_{nullptr};
  encoders::ProgressiveDecoder decoder{nullptr};
  torch::nn::Conv2d full_state_proj{nullptr};
  torch::nn::Conv2d out{nullptr};
};
TORCH_MODULE(MaskDenoiser);

}  // namespace tbgdiff::diffusion
