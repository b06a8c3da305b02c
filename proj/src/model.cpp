#include "tbgdiff/model.hpp"

#include <atomic>
#include <exception>
#include <mutex>
#include <thread>

#include "tbgdiff/seeding.hpp"

namespace tbgdiff {

TbgDiffModelImpl::TbgDiffModelImpl(const ModelOptions& options)
    : options_(options),
      encoder_(register_module("encoders", encoders::FrameEncoder(options.encoder))),
      dsa_(register_module("dsa", dsa::DualScaleAggregation(dsa::DsaOptions{options.encoder.channels[3],
                                                                            options.self_tile_rescale}))),
      aux_head_(register_module("aux_head", encoders::AuxiliaryHead(options.encoder))),
      sbaa_(register_module("sbaa", sbaa::BoundaryAwareAttention(options.encoder.channels[3]))),
      denoiser_(register_module("diffusion", diffusion::MaskDenoiser(diffusion::DenoiserOptions{
                                                 options.encoder, options.mode, options.full_resolution_state}))) {
  if (options.mode != diffusion::GuidanceMode::kPce) {
    TORCH_CHECK(options.encoder.guidance_channels[1] == options.encoder.channels[3],
                "guidance encoder output must match the top feature width");
    guidance_encoder_ = register_module("guidance_encoder", encoders::GuidanceEncoder(options.encoder));
  }
}

ClipConditioning TbgDiffModelImpl::condition(const torch::Tensor& frames) {
  TORCH_CHECK(frames.dim() == 5 && frames.size(2) == 3, "condition expects frames [B, L, 3, H, W]");
  const int64_t b = frames.size(0), l = frames.size(1), height = frames.size(3), width = frames.size(4);
  ClipConditioning cond;
  cond.pyramid = encoder_(frames.reshape({b * l, 3, height, width}));
  const auto& top = cond.pyramid.top();
  const int64_t c = top.size(1), h = top.size(2), w = top.size(3);
  cond.aggregated = dsa_->aggregate_clip(top.reshape({b, l, c, h, w}));
  const auto flat = cond.aggregated.reshape({b * l, c, h, w});
  auto aux = aux_head_(flat, cond.pyramid);
  cond.features = sbaa_(flat, aux.boundary_logits, aux.pseudo_logits).reshape({b, l, c, h, w});
  cond.pseudo_logits = aux.pseudo_logits.reshape({b, l, 1, height, width});
  cond.boundary_logits = aux.boundary_logits.reshape({b, l, 1, height, width});
  return cond;
}

std::vector<diffusion::GuidanceBundle> TbgDiffModelImpl::clip_guidance(const torch::Tensor& frames,
                                                                       const torch::Tensor& masks) {
  return diffusion::build_clip_guidance(options_.mode, frames, masks, guidance_encoder());
}

diffusion::GuidanceBundle TbgDiffModelImpl::frame_guidance(const torch::Tensor& frames,
                                                           std::span<const std::optional<torch::Tensor>> masks,
                                                           int64_t center) {
  return diffusion::build_guidance(options_.mode, frames, masks, center, guidance_encoder());
}

diffusion::PooledGuidance TbgDiffModelImpl::pool_frame(const diffusion::GuidanceBundle& bundle,
                                                       const ClipConditioning& cond, int64_t center) {
  return denoiser_->injection()->pool(bundle, cond.features.select(1, center));
}

diffusion::PooledGuidance TbgDiffModelImpl::pool_clip(const std::vector<diffusion::GuidanceBundle>& bundles,
                                                      const ClipConditioning& cond) {
  const int64_t b = cond.batch(), l = cond.length();
  TORCH_CHECK(static_cast<int64_t>(bundles.size()) == l, "one guidance bundle per center is required");
  std::vector<torch::Tensor> past, future;
  for (int64_t center = 0; center < l; ++center) {
    auto pooled = pool_frame(bundles[static_cast<size_t>(center)], cond, center);
    past.push_back(pooled.past);
    future.push_back(pooled.future);
  }
  auto stack = [&](const std::vector<torch::Tensor>& maps) {
    auto s = torch::stack(maps, 1);  // [B, L, C, h, w]
    return s.reshape({b * l, s.size(2), s.size(3), s.size(4)});
  };
  return {stack(past), stack(future)};
}

torch::Tensor TbgDiffModelImpl::predict(const torch::Tensor& y_t, const torch::Tensor& t,
                                        const ClipConditioning& cond, const torch::Tensor& rows,
                                        const diffusion::PooledGuidance& guidance) {
  const auto& f = cond.features;
  const auto features = f.reshape({f.size(0) * f.size(1), f.size(2), f.size(3), f.size(4)}).index_select(0, rows);
  return denoiser_(y_t, t, features, guidance, cond.pyramid.index_select(rows));
}

TrainOutput TbgDiffModelImpl::forward_train(const torch::Tensor& frames, const torch::Tensor& gt_masks,
                                            const torch::Tensor& y_t, const torch::Tensor& t) {
  const int64_t b = frames.size(0), l = frames.size(1), height = frames.size(3), width = frames.size(4);
  auto cond = condition(frames);
  const auto guide_masks = options_.mode == diffusion::GuidanceMode::kStee
                               ? torch::sigmoid(cond.pseudo_logits).detach()
                               : gt_masks.to(frames.dtype()).reshape({b, l, 1, height, width});
  const auto pooled = pool_clip(clip_guidance(frames, guide_masks), cond);
  const auto rows = torch::arange(b * l, torch::TensorOptions().dtype(torch::kLong).device(frames.device()));
  auto logits = predict(y_t.reshape({b * l, 1, height, width}), t, cond, rows, pooled);
  return {logits.reshape({b, l, 1, height, width}), cond.pseudo_logits, cond.boundary_logits};
}

uint64_t frame_seed(uint64_t seed, int64_t index) { return mix_seed(seed, 0x5a3d0000ull + static_cast<uint64_t>(index)); }

ClipSample sample_clip(TbgDiffModel& model, const torch::Tensor& frames, const SamplingOptions& options) {
  torch::NoGradGuard no_grad;
  TORCH_CHECK(frames.dim() == 4 && frames.size(1) == 3, "sample_clip expects [L, 3, H, W]");
  const int64_t l = frames.size(0), height = frames.size(2), width = frames.size(3);
  const auto clip = frames.unsqueeze(0).to(torch::kFloat32);
  const auto cond = model->condition(clip);

  ClipSample out;
  out.masks = torch::zeros({l, height, width}, torch::kUInt8);
  out.probabilities = torch::zeros({l, height, width}, torch::kFloat32);

  auto sample_frame = [&](int64_t index, const diffusion::PooledGuidance& guidance) {
    const auto rows = torch::tensor({index}, torch::kLong);
    diffusion::Denoiser denoise = [&](const torch::Tensor& y_t, int64_t t) {
      return model->predict(y_t, torch::full({1}, t, torch::kLong), cond, rows, guidance);
    };
    return diffusion::sample(denoise, {1, 1, height, width}, options.steps, frame_seed(options.seed, index),
                             options.scale, options.schedule, index);
  };

  const auto mode = model->options().mode;
  if (!diffusion::is_sequential(mode)) {
    const auto pseudo = torch::sigmoid(cond.pseudo_logits);
    const auto pooled = model->pool_clip(model->clip_guidance(clip, pseudo), cond);
    auto run = [&](int64_t index) {
      const auto rows = torch::tensor({index}, torch::kLong);
      const diffusion::PooledGuidance guidance{pooled.past.index_select(0, rows), pooled.future.index_select(0, rows)};
      auto result = sample_frame(index, guidance);
      out.masks[index].copy_(result.mask.reshape({height, width}));
      out.probabilities[index].copy_(result.probability.reshape({height, width}));
    };
    const int64_t workers = std::clamp<int64_t>(options.workers, 1, l);
    if (workers == 1) {
      for (int64_t i = 0; i < l; ++i) run(i);
    } else {
      std::atomic<int64_t> next{0};
      std::exception_ptr failure;
      std::mutex failure_mutex;
      std::vector<std::thread> pool;
      for (int64_t w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
          torch::NoGradGuard worker_no_grad;
          for (int64_t i = next++; i < l; i = next++) {
            try {
              run(i);
            } catch (...) {
              std::lock_guard<std::mutex> lock(failure_mutex);
              if (!failure) failure = std::current_exception();
            }
          }
        });
      }
      for (auto& th : pool) th.join();
      if (failure) std::rethrow_exception(failure);
    }
    return out;
  }

  // PCE / PEE: each frame waits for the predictions of the frames before it.
  std::vector<std::optional<torch::Tensor>> predicted(static_cast<size_t>(l));
  for (int64_t i = 0; i < l; ++i) {
    const auto bundle = model->frame_guidance(clip, predicted, i);
    auto result = sample_frame(i, model->pool_frame(bundle, cond, i));
    out.masks[i].copy_(result.mask.reshape({height, width}));
    out.probabilities[i].copy_(result.probability.reshape({height, width}));
    predicted[static_cast<size_t>(i)] = result.mask.to(torch::kFloat32).reshape({1, 1, height, width});
  }
  return out;
}

}  // namespace tbgdiff
