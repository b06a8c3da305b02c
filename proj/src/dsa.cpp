#include "tbgdiff/dsa.hpp"

#include <stdexcept>

#include "tbgdiff/encoders.hpp"

namespace tbgdiff::dsa {

double l2_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("l2_similarity: dimension mismatch");
  double d = 0.0;
  for (size_t i = 0; i < a.size(); ++i) d += (a[i] - b[i]) * (a[i] - b[i]);
  return -d;
}

torch::Tensor l2_similarity(const torch::Tensor& keys, const torch::Tensor& query) {
  if (keys.size(-2) != query.size(-2)) throw std::invalid_argument("l2_similarity: channel mismatch");
  auto cross = torch::matmul(keys.transpose(-2, -1), query);  // [..., M, Q]
  auto k2 = keys.pow(2).sum(-2).unsqueeze(-1);                 // [..., M, 1]
  auto q2 = query.pow(2).sum(-2).unsqueeze(-2);                // [..., 1, Q]
  return 2 * cross - k2 - q2;
}

AffinityMatrix compute_affinity(const torch::Tensor& query, const torch::Tensor& memory_keys,
                                int64_t memory_frames) {
  // softmax subtracts the per-column maximum before exponentiating.
  return {torch::softmax(l2_similarity(memory_keys, query), -2), AffinityKind::kVanilla, memory_frames};
}

torch::Tensor readout(const torch::Tensor& values, const AffinityMatrix& affinity) {
  if (values.size(-1) != affinity.weights.size(-2)) {
    throw std::invalid_argument("readout: " + std::to_string(values.size(-1)) + " value positions vs " +
                                std::to_string(affinity.weights.size(-2)) + " affinity rows");
  }
  return torch::matmul(values, affinity.weights);
}

namespace {

torch::Tensor tile_positions(const torch::Tensor& x, int64_t n) {
  std::vector<int64_t> reps(static_cast<size_t>(x.dim()), 1);
  reps.back() = n;
  return x.repeat(reps);
}

AffinityMatrix broadcast_self(const torch::Tensor& query, const torch::Tensor& self_keys, int64_t n,
                              bool rescale) {
  if (n < 1) throw std::invalid_argument("self_affinity_broadcast: memory frame count must be >= 1");
  torch::Tensor w;
  if (rescale) {
    w = compute_affinity(query, tile_positions(self_keys, n), n).weights;
  } else {
    auto single = compute_affinity(query, self_keys).weights;
    std::vector<int64_t> reps(static_cast<size_t>(single.dim()), 1);
    reps[reps.size() - 2] = n;
    w = single.repeat(reps);
  }
  return {w, AffinityKind::kSelf, n};
}

}  // namespace

AffinityMatrix self_affinity_broadcast(const torch::Tensor& query, int64_t memory_frames, bool rescale) {
  return broadcast_self(query, query, memory_frames, rescale);
}

AffinityMatrix residual_affinity(const torch::Tensor& query, const torch::Tensor& long_keys,
                                 int64_t memory_frames, bool rescale) {
  return residual_affinity(query, query, long_keys, memory_frames, rescale);
}

AffinityMatrix residual_affinity(const torch::Tensor& query, const torch::Tensor& self_keys,
                                 const torch::Tensor& long_keys, int64_t memory_frames, bool rescale) {
  if (memory_frames < 1 || long_keys.size(-1) != memory_frames * query.size(-1) ||
      self_keys.size(-1) != query.size(-1)) {
    throw std::invalid_argument("residual_affinity: long-term memory must hold N frames of the query's size");
  }
  auto self = broadcast_self(query, self_keys, memory_frames, rescale);
  auto lng = compute_affinity(query, long_keys, memory_frames);
  return {(self.weights - lng.weights).abs(), AffinityKind::kResidual, memory_frames};
}

DualScaleAggregationImpl::DualScaleAggregationImpl(const DsaOptions& options)
    : options_(options),
      query(register_module("query", torch::nn::Conv2d(torch::nn::Conv2dOptions(options.channels, options.channels, 1)))),
      key(register_module("key", torch::nn::Conv2d(torch::nn::Conv2dOptions(options.channels, options.channels, 1)))),
      value(register_module("value", torch::nn::Conv2d(torch::nn::Conv2dOptions(options.channels, options.channels, 1)))),
      fuse1(register_module("fuse1", torch::nn::Conv2d(torch::nn::Conv2dOptions(3 * options.channels,
                                                                                options.channels, 3)
                                                           .padding(1)))),
      fuse2(register_module("fuse2", torch::nn::Conv2d(torch::nn::Conv2dOptions(options.channels,
                                                                                options.channels, 3)
                                                           .padding(1)))),
      skip(register_module("skip", torch::nn::Conv2d(torch::nn::Conv2dOptions(options.channels, options.channels, 1)))),
      norm1(register_module("norm1", encoders::make_group_norm(options.channels))),
      norm2(register_module("norm2", encoders::make_group_norm(options.channels))) {}

torch::Tensor DualScaleAggregationImpl::forward(const torch::Tensor& top, const data::TimelinePartition& partition,
                                                DsaTrace* trace) {
  return aggregate(top, {partition}, trace).select(1, 0);
}

torch::Tensor DualScaleAggregationImpl::aggregate_clip(const torch::Tensor& top, DsaTrace* trace) {
  std::vector<data::TimelinePartition> parts;
  for (int64_t t = 0; t < top.size(1); ++t) parts.push_back(data::partition_timeline(top.size(1), t));
  return aggregate(top, parts, trace);
}

torch::Tensor DualScaleAggregationImpl::aggregate(const torch::Tensor& top,
                                                  const std::vector<data::TimelinePartition>& partitions,
                                                  DsaTrace* trace) {
  TORCH_CHECK(top.dim() == 5, "DSA expects top-level features [B, L, C, h, w]");
  TORCH_CHECK(!partitions.empty(), "DSA needs at least one partition");
  const int64_t b = top.size(0), l = top.size(1), c = top.size(2), h = top.size(3), w = top.size(4);
  const int64_t hw = h * w;
  const auto p = static_cast<int64_t>(partitions.size());
  const auto n_short = static_cast<int64_t>(partitions.front().short_term.size());
  const auto n_long = static_cast<int64_t>(partitions.front().long_term.size());

  std::vector<int64_t> centers, short_idx, long_idx;
  for (const auto& part : partitions) {
    TORCH_CHECK(static_cast<int64_t>(part.short_term.size()) == n_short &&
                    static_cast<int64_t>(part.long_term.size()) == n_long,
                "DSA partitions must share memory sizes");
    for (auto i : part.short_term) TORCH_CHECK(i >= 0 && i < l, "partition index out of range");
    for (auto i : part.long_term) TORCH_CHECK(i >= 0 && i < l, "partition index out of range");
    TORCH_CHECK(part.center >= 0 && part.center < l, "partition center out of range");
    centers.push_back(part.center);
    short_idx.insert(short_idx.end(), part.short_term.begin(), part.short_term.end());
    long_idx.insert(long_idx.end(), part.long_term.begin(), part.long_term.end());
  }
  auto as_index = [&](const std::vector<int64_t>& v) {
    return torch::tensor(v, torch::TensorOptions().dtype(torch::kLong).device(top.device()));
  };

  const auto frames = top.reshape({b * l, c, h, w});
  const auto q_all = query(frames).reshape({b, l, c, hw});
  const auto k_all = key(frames).reshape({b, l, c, hw});
  const auto v_all = value(frames).reshape({b, l, c, hw});

  // Gathers memory frames into [B * P, C, n * hw], frame-major along the last axis.
  auto memory = [&](const torch::Tensor& all, const std::vector<int64_t>& idx, int64_t n) {
    return all.index_select(1, as_index(idx))
        .reshape({b, p, n, c, hw})
        .permute({0, 1, 3, 2, 4})
        .reshape({b * p, c, n * hw});
  };
  const auto center_index = as_index(centers);
  const auto q = q_all.index_select(1, center_index).reshape({b * p, c, hw});
  const auto k_self = k_all.index_select(1, center_index).reshape({b * p, c, hw});

  const auto short_aff = compute_affinity(q, memory(k_all, short_idx, n_short), n_short);
  const auto f_short = readout(memory(v_all, short_idx, n_short), short_aff);
  const auto long_aff =
      residual_affinity(q, k_self, memory(k_all, long_idx, n_long), n_long, options_.self_tile_rescale);
  const auto f_long = readout(memory(v_all, long_idx, n_long), long_aff);

  const auto f_center = top.index_select(1, center_index).reshape({b * p, c, h, w});
  const auto stacked = torch::cat({f_center, f_short.reshape({b * p, c, h, w}), f_long.reshape({b * p, c, h, w})}, 1);
  auto fused = fuse2(torch::gelu(norm1(fuse1(stacked))));
  auto out = skip(f_center) + norm2(fused);

  if (trace) {
    trace->short_readout = f_short.reshape({b, p, c, h, w});
    trace->long_readout = f_long.reshape({b, p, c, h, w});
    trace->long_affinity = long_aff.weights;
  }
  return out.reshape({b, p, c, h, w});
}

}  // namespace tbgdiff::dsa
