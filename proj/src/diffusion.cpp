#include "tbgdiff/diffusion.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <cmath>
#include <numbers>
#include <stdexcept>

#include "tbgdiff/errors.hpp"

namespace tbgdiff::diffusion {

namespace F = torch::nn::functional;

ScheduleKind parse_schedule(const std::string& name) {
  if (name == "cosine") return ScheduleKind::kCosine;
  if (name == "linear") return ScheduleKind::kLinear;
  throw ConfigError("unknown noise schedule '" + name + "' (expected cosine or linear)");
}

std::string to_string(ScheduleKind kind) { return kind == ScheduleKind::kCosine ? "cosine" : "linear"; }

double NoiseSchedule::at(int64_t t) const {
  if (t < 0 || t > t_train) {
    throw std::invalid_argument("timestep " + std::to_string(t) + " outside [0, " + std::to_string(t_train) + "]");
  }
  return alphabar[static_cast<size_t>(t)];
}

NoiseSchedule build_schedule(ScheduleKind kind, int64_t t_train) {
  if (t_train < 1) throw ConfigError("diffusion.t_train must be >= 1");
  NoiseSchedule s;
  s.kind = kind;
  s.t_train = t_train;
  s.alphabar.resize(static_cast<size_t>(t_train + 1));
  const double total = static_cast<double>(t_train);
  if (kind == ScheduleKind::kCosine) {
    constexpr double offset = 0.008;
    auto f = [&](double t) {
      const double c = std::cos((t / total + offset) / (1.0 + offset) * std::numbers::pi / 2.0);
      return c * c;
    };
    const double f0 = f(0.0);
    for (int64_t t = 0; t <= t_train; ++t) s.alphabar[static_cast<size_t>(t)] = f(static_cast<double>(t)) / f0;
    s.alphabar[0] = 1.0;
  } else {
    // The [1e-4, 0.02] range is defined for 1000 steps; other horizons rescale it so the
    // process still ends near pure noise.
    const double rescale = 1000.0 / total;
    const double lo = 1e-4 * rescale;
    const double hi = 0.02 * rescale;
    double prod = 1.0;
    s.alphabar[0] = 1.0;
    for (int64_t t = 1; t <= t_train; ++t) {
      const double frac = t_train == 1 ? 0.0 : static_cast<double>(t - 1) / (total - 1.0);
      const double beta = std::min(lo + (hi - lo) * frac, 0.999);
      prod *= 1.0 - beta;
      s.alphabar[static_cast<size_t>(t)] = prod;
    }
  }
  return s;
}

AnalogMask bit_encode(const torch::Tensor& mask, double scale) {
  if (!(scale > 0.0)) throw ConfigError("bit-analog scale must be positive");
  auto values = mask.is_floating_point() ? mask : mask.to(torch::kFloat32);
  if (values.numel() > 0 && (values.min().item<double>() < 0.0 || values.max().item<double>() > 1.0)) {
    throw std::invalid_argument("bit_encode expects values in [0, 1]");
  }
  return {(values * 2.0 - 1.0) * scale, scale};
}

torch::Tensor bit_decode(const torch::Tensor& analog) { return analog.gt(0).to(torch::kUInt8); }

AnalogMask forward_diffuse(const AnalogMask& y0, int64_t t, const torch::Tensor& eps, const NoiseSchedule& schedule) {
  const double ab = schedule.at(t);
  return {y0.values * std::sqrt(ab) + eps * std::sqrt(1.0 - ab), y0.scale};
}

torch::Tensor forward_diffuse(const torch::Tensor& y0, const torch::Tensor& t, const torch::Tensor& eps,
                              const NoiseSchedule& schedule) {
  TORCH_CHECK(t.dim() == 1 && t.size(0) == y0.size(0), "per-sample timesteps must be [N]");
  if (t.numel() > 0 && (t.min().item<int64_t>() < 0 || t.max().item<int64_t>() > schedule.t_train)) {
    throw std::invalid_argument("timestep outside the schedule");
  }
  const auto table = torch::tensor(schedule.alphabar, torch::kFloat64);
  const auto ab = table.index_select(0, t.to(torch::kLong).cpu());
  std::vector<int64_t> shape(static_cast<size_t>(y0.dim()), 1);
  shape[0] = y0.size(0);
  const auto signal = ab.sqrt().to(y0.dtype()).reshape(shape);
  const auto noise = (1.0 - ab).sqrt().to(y0.dtype()).reshape(shape);
  return y0 * signal + eps * noise;
}

torch::Tensor estimate_clean(const torch::Tensor& logits, double scale) {
  return (torch::sigmoid(logits) * 2.0 - 1.0) * scale;
}

torch::Tensor estimate_noise(const torch::Tensor& y_t, const torch::Tensor& y0_hat, int64_t t,
                             const NoiseSchedule& schedule) {
  const double ab = schedule.at(t);
  if (ab >= 1.0) throw std::invalid_argument("noise is undefined at a timestep with alphabar = 1");
  return (y_t - y0_hat * std::sqrt(ab)) / std::sqrt(1.0 - ab);
}

DenoiserState ddim_step_from_estimate(const DenoiserState& state, const torch::Tensor& y0_hat, int64_t t_next,
                                      const NoiseSchedule& schedule) {
  if (t_next >= state.t || t_next < 0) {
    throw std::invalid_argument("ddim_step: next timestep " + std::to_string(t_next) + " must lie in [0, " +
                                std::to_string(state.t) + ")");
  }
  DenoiserState next{{y0_hat, state.y.scale}, t_next, state.frame_index};
  if (t_next == 0) return next;
  const auto eps_hat = estimate_noise(state.y.values, y0_hat, state.t, schedule);
  const double ab_next = schedule.at(t_next);
  next.y.values = y0_hat * std::sqrt(ab_next) + eps_hat * std::sqrt(1.0 - ab_next);
  return next;
}

DenoiserState ddim_step(const DenoiserState& state, const torch::Tensor& predicted_logits, int64_t t_next,
                        const NoiseSchedule& schedule) {
  return ddim_step_from_estimate(state, estimate_clean(predicted_logits, state.y.scale), t_next, schedule);
}

std::vector<int64_t> timestep_ladder(int64_t t_train, int64_t steps) {
  if (steps < 1) throw ConfigError("diffusion.sample_steps must be >= 1");
  if (steps > t_train) throw ConfigError("diffusion.sample_steps cannot exceed diffusion.t_train");
  std::vector<int64_t> ladder;
  for (int64_t i = 0; i < steps; ++i) {
    ladder.push_back(static_cast<int64_t>(
        std::llround(static_cast<double>(t_train) * static_cast<double>(steps - i) / static_cast<double>(steps))));
  }
  return ladder;
}

torch::Tensor initial_noise(at::IntArrayRef shape, uint64_t seed, torch::Dtype dtype) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  return torch::randn(shape, gen, torch::TensorOptions().dtype(dtype));
}

SampleResult sample_from(const Denoiser& denoise, const torch::Tensor& y_T, int64_t steps, double scale,
                         const NoiseSchedule& schedule, int64_t frame_index) {
  const auto ladder = timestep_ladder(schedule.t_train, steps);
  DenoiserState state{{y_T, scale}, ladder.front(), frame_index};
  torch::Tensor logits;
  for (size_t i = 0; i < ladder.size(); ++i) {
    logits = denoise(state.y.values, state.t);
    const int64_t t_next = i + 1 < ladder.size() ? ladder[i + 1] : 0;
    state = ddim_step(state, logits, t_next, schedule);
  }
  return {bit_decode(state.y), torch::sigmoid(logits), state.y};
}

SampleResult sample(const Denoiser& denoise, at::IntArrayRef shape, int64_t steps, uint64_t seed, double scale,
                    const NoiseSchedule& schedule, int64_t frame_index) {
  return sample_from(denoise, initial_noise(shape, seed), steps, scale, schedule, frame_index);
}

GuidanceMode parse_guidance_mode(const std::string& name) {
  if (name == "pce") return GuidanceMode::kPce;
  if (name == "pee") return GuidanceMode::kPee;
  if (name == "stee") return GuidanceMode::kStee;
  throw ConfigError("unknown guidance mode '" + name + "' (expected pce, pee or stee)");
}

std::string to_string(GuidanceMode mode) {
  switch (mode) {
    case GuidanceMode::kPce: return "pce";
    case GuidanceMode::kPee: return "pee";
    case GuidanceMode::kStee: return "stee";
  }
  return "stee";
}

int64_t GuidanceBundle::count(Direction direction) const {
  int64_t n = 0;
  for (const auto& item : items) n += item.direction == direction ? 1 : 0;
  return n;
}

namespace {

void check_guidance_inputs(const torch::Tensor& frames, int64_t masks, int64_t center) {
  if (frames.dim() != 5 || frames.size(2) != 3) throw std::invalid_argument("guidance frames must be [B, L, 3, H, W]");
  if (masks != frames.size(1)) throw std::invalid_argument("guidance needs one mask slot per clip frame");
  if (center < 0 || center >= frames.size(1)) throw std::invalid_argument("guidance center out of range");
}

// Sources of guidance for a center frame, in clip order.
std::vector<std::pair<int64_t, Direction>> guidance_sources(GuidanceMode mode, int64_t length, int64_t center) {
  std::vector<std::pair<int64_t, Direction>> out;
  for (int64_t i = 0; i < center; ++i) out.emplace_back(i, Direction::kPast);
  if (mode == GuidanceMode::kStee) {
    for (int64_t i = center + 1; i < length; ++i) out.emplace_back(i, Direction::kFuture);
  }
  return out;
}

torch::Tensor encode_payloads(GuidanceMode mode, const torch::Tensor& frames, const torch::Tensor& masks,
                              encoders::GuidanceEncoder* encoder) {
  // frames [K, 3, H, W], masks [K, 1, H, W] -> payloads [K, C, h, w]
  const int64_t h = frames.size(2) / 32, w = frames.size(3) / 32;
  if (mode == GuidanceMode::kPce) return encoders::area_downsample(masks.to(frames.dtype()), h, w);
  if (encoder == nullptr || encoder->is_empty()) {
    throw std::invalid_argument("guidance mode " + to_string(mode) + " needs a guidance encoder");
  }
  return (*encoder)->forward(frames, masks.to(frames.dtype()));
}

}  // namespace

GuidanceBundle build_guidance(GuidanceMode mode, const torch::Tensor& frames,
                              std::span<const std::optional<torch::Tensor>> masks, int64_t center,
                              encoders::GuidanceEncoder* encoder) {
  check_guidance_inputs(frames, static_cast<int64_t>(masks.size()), center);
  const auto sources = guidance_sources(mode, frames.size(1), center);
  GuidanceBundle bundle{mode, {}};
  if (sources.empty()) return bundle;

  std::vector<torch::Tensor> frame_batch, mask_batch;
  for (const auto& [index, direction] : sources) {
    const auto& m = masks[static_cast<size_t>(index)];
    if (!m.has_value() || !m->defined()) {
      throw SequencingError("guidance mode " + to_string(mode) + " needs the mask of frame " + std::to_string(index) +
                            " before frame " + std::to_string(center) + " can be predicted");
    }
    frame_batch.push_back(frames.select(1, index));
    mask_batch.push_back(*m);
  }
  const int64_t b = frames.size(0);
  const auto payloads = encode_payloads(mode, torch::cat(frame_batch), torch::cat(mask_batch), encoder);
  for (size_t k = 0; k < sources.size(); ++k) {
    bundle.items.push_back({sources[k].second, sources[k].first,
                            payloads.narrow(0, static_cast<int64_t>(k) * b, b)});
  }
  return bundle;
}

std::vector<GuidanceBundle> build_clip_guidance(GuidanceMode mode, const torch::Tensor& frames,
                                                const torch::Tensor& masks, encoders::GuidanceEncoder* encoder) {
  check_guidance_inputs(frames, masks.size(1), 0);
  const int64_t b = frames.size(0), l = frames.size(1);
  // Frame-major batch so that frame i occupies rows [i * B, (i + 1) * B).
  const auto flat_frames = frames.transpose(0, 1).reshape({l * b, 3, frames.size(3), frames.size(4)});
  const auto flat_masks = masks.transpose(0, 1).reshape({l * b, 1, masks.size(3), masks.size(4)});
  const auto payloads = encode_payloads(mode, flat_frames, flat_masks, encoder);

  std::vector<GuidanceBundle> bundles;
  for (int64_t center = 0; center < l; ++center) {
    GuidanceBundle bundle{mode, {}};
    for (const auto& [index, direction] : guidance_sources(mode, l, center)) {
      bundle.items.push_back({direction, index, payloads.narrow(0, index * b, b)});
    }
    bundles.push_back(std::move(bundle));
  }
  return bundles;
}

GuidanceInjectionImpl::GuidanceInjectionImpl(int64_t channels, GuidanceMode mode)
    : channels_(channels),
      mode_(mode),
      conv1(register_module("conv1", torch::nn::Conv2d(torch::nn::Conv2dOptions(3 * channels, 3 * channels, 3).padding(1)))),
      conv2(register_module("conv2", torch::nn::Conv2d(torch::nn::Conv2dOptions(3 * channels, 3 * channels, 3).padding(1)))),
      zip(register_module("zip", torch::nn::Conv2d(torch::nn::Conv2dOptions(3 * channels, channels, 3).padding(1)))),
      norm1(register_module("norm1", encoders::make_group_norm(3 * channels))),
      norm2(register_module("norm2", encoders::make_group_norm(3 * channels))) {
  if (mode == GuidanceMode::kPce) {
    mask_proj = register_module("mask_proj", torch::nn::Conv2d(torch::nn::Conv2dOptions(1, channels, 1)));
  }
}

PooledGuidance GuidanceInjectionImpl::pool(const GuidanceBundle& bundle, const torch::Tensor& like) {
  if (bundle.mode != mode_) {
    throw std::invalid_argument("guidance bundle mode " + to_string(bundle.mode) + " does not match injection mode " +
                                to_string(mode_));
  }
  auto pool_direction = [&](Direction direction) {
    std::vector<torch::Tensor> payloads;
    for (const auto& item : bundle.items) {
      if (item.direction != direction) continue;
      if (item.payload.size(-2) != like.size(-2) || item.payload.size(-1) != like.size(-1)) {
        throw std::invalid_argument("guidance payload spatial size does not match the feature map");
      }
      payloads.push_back(mode_ == GuidanceMode::kPce ? mask_proj(item.payload) : item.payload);
    }
    if (payloads.empty()) return torch::zeros_like(like);
    return torch::stack(payloads).mean(0);
  };
  return {pool_direction(Direction::kPast), pool_direction(Direction::kFuture)};
}

torch::Tensor GuidanceInjectionImpl::forward(const torch::Tensor& feature, const GuidanceBundle& bundle) {
  return fuse(feature, pool(bundle, feature));
}

torch::Tensor GuidanceInjectionImpl::fuse(const torch::Tensor& feature, const PooledGuidance& guidance) {
  if (!guidance.past.sizes().equals(feature.sizes()) || !guidance.future.sizes().equals(feature.sizes())) {
    throw std::invalid_argument("pooled guidance must match the feature shape");
  }
  auto h = torch::gelu(norm1(conv1(torch::cat({feature, guidance.past, guidance.future}, 1))));
  h = torch::gelu(norm2(conv2(h)));
  return feature + zip(h);
}

torch::Tensor timestep_embedding(const torch::Tensor& t, int64_t dim) {
  const int64_t half = dim / 2;
  const auto opts = torch::TensorOptions().dtype(torch::kFloat64).device(t.device());
  const auto freqs = torch::exp(torch::arange(half, opts) * (-std::log(10000.0) / static_cast<double>(half)));
  const auto args = t.to(torch::kFloat64).unsqueeze(1) * freqs.unsqueeze(0);
  return torch::cat({args.sin(), args.cos()}, 1);
}

MaskDenoiserImpl::MaskDenoiserImpl(const DenoiserOptions& options)
    : options_(options),
      state_proj(register_module("state_proj", torch::nn::Conv2d(torch::nn::Conv2dOptions(1, options.encoder.channels[3], 1)))),
      time_proj(register_module("time_proj", torch::nn::Linear(options.time_dim, options.encoder.channels[3]))),
      injection_(register_module("injection", GuidanceInjection(options.encoder.channels[3], options.mode))),
      decoder(register_module("decoder", encoders::ProgressiveDecoder(options.encoder))),
      out(register_module("out", torch::nn::Conv2d(torch::nn::Conv2dOptions(options.encoder.channels[0], 1, 1)))) {
  if (options.full_resolution_state) {
    full_state_proj = register_module(
        "full_state_proj", torch::nn::Conv2d(torch::nn::Conv2dOptions(1, options.encoder.channels[0], 1)));
  }
  torch::NoGradGuard no_grad;
  out->bias.zero_();
}

torch::Tensor MaskDenoiserImpl::forward(const torch::Tensor& y_t, const torch::Tensor& t, const torch::Tensor& features,
                                        const PooledGuidance& guidance, const encoders::FeaturePyramid& skips) {
  const int64_t n = features.size(0), c = features.size(1), h = features.size(2), w = features.size(3);
  const auto y = y_t.to(features.dtype());
  auto x = features + state_proj(encoders::area_downsample(y, h, w)) +
           time_proj(timestep_embedding(t, options_.time_dim).to(features.dtype())).reshape({n, c, 1, 1});
  x = injection_->fuse(x, guidance);
  auto d = decoder(x, skips);
  if (full_state_proj) d = d + full_state_proj(y);
  return out(d);
}

}  // namespace tbgdiff::diffusion
