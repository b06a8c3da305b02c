#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include <torch/torch.h>

#include "tbgdiff/clip_data.hpp"

namespace tbgdiff::dsa {

enum class AffinityKind { kVanilla, kResidual, kSelf };

// Memory x query weights, [..., N * HW_mem, HW_query]. Memory rows are frame-major.
struct AffinityMatrix {
  torch::Tensor weights;
  AffinityKind kind = AffinityKind::kVanilla;
  int64_t memory_frames = 1;
};

// Negative squared Euclidean distance.
double l2_similarity(std::span<const double> a, std::span<const double> b);

// keys [..., C, M], query [..., C, Q] -> [..., M, Q] with entry -||k_m - q_q||^2.
torch::Tensor l2_similarity(const torch::Tensor& keys, const torch::Tensor& query);

// Softmax of l2_similarity over the memory axis, independently for each query column.
AffinityMatrix compute_affinity(const torch::Tensor& query, const torch::Tensor& memory_keys,
                                int64_t memory_frames = 1);

// values [..., C_V, N * HW_mem] times weights -> [..., C_V, HW_query].
torch::Tensor readout(const torch::Tensor& values, const AffinityMatrix& affinity);

// Self-affinity of the query tiled N times along the memory axis. With rescale each tile
// carries 1/N of the mass so columns still sum to one; it is evaluated as the softmax over
// N copies of the query, which is the same computation the long-term affinity performs.
AffinityMatrix self_affinity_broadcast(const torch::Tensor& query, int64_t memory_frames, bool rescale = true);

// |M_self(Q, Q') - M_long(Q, K_long)| with Q' the query broadcast to N frames.
AffinityMatrix residual_affinity(const torch::Tensor& query, const torch::Tensor& long_keys,
                                 int64_t memory_frames, bool rescale = true);

// Same, with the self term built from `self_keys` (the current frame seen through the
// memory key projection) instead of the query itself.
AffinityMatrix residual_affinity(const torch::Tensor& query, const torch::Tensor& self_keys,
                                 const torch::Tensor& long_keys, int64_t memory_frames, bool rescale = true);

struct DsaOptions {
  int64_t channels = 128;
  bool self_tile_rescale = true;
};

// Intermediate readouts of one aggregation, exposed for inspection and tests.
struct DsaTrace {
  torch::Tensor short_readout;  // [B, P, C, h, w]
  torch::Tensor long_readout;   // [B, P, C, h, w]
  torch::Tensor long_affinity;  // residual weights [B * P, N_long * hw, hw]
};

class DualScaleAggregationImpl : public torch::nn::Module {
 public:
  explicit DualScaleAggregationImpl(const DsaOptions& options = {});

  // top: [B, L, C, h, w] top-level features of a clip. Returns [B, C, h, w] for the
  // partition's center frame.
  torch::Tensor forward(const torch::Tensor& top, const data::TimelinePartition& partition,
                        DsaTrace* trace = nullptr);

  // Aggregates every center of the clip; returns [B, L, C, h, w].
  torch::Tensor aggregate_clip(const torch::Tensor& top, DsaTrace* trace = nullptr);

  torch::Tensor aggregate(const torch::Tensor& top, const std::vector<data::TimelinePartition>& partitions,
                          DsaTrace* trace = nullptr);

 private:
  DsaOptions options_;
  torch::nn::Conv2d query{nullptr}, key{nullptr}, value{nullptr};
  torch::nn::Conv2d fuse1{nullptr}, fuse2{nullptr}, skip{nullptr};
  torch::nn::GroupNorm norm1{nullptr}, norm2{nullptr};
};
TORCH_MODULE(DualScaleAggregation);

}  // namespace tbgdiff::dsa
