#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <torch/torch.h>

namespace tbgdiff::losses {

// Mean binary cross-entropy on logits (numerically stable form).
torch::Tensor bce_loss(const torch::Tensor& logits, const torch::Tensor& targets);

// Discrete gradient of the Jaccard loss along a sorted ground-truth indicator.
torch::Tensor lovasz_grad(const torch::Tensor& gt_sorted);

// Lovasz hinge for one flattened image.
torch::Tensor lovasz_hinge_flat(const torch::Tensor& logits, const torch::Tensor& labels);

// logits/targets: [B, ...]; the per-image losses are averaged over B.
// Errors are sorted descending; equal errors put foreground pixels first, then index order.
torch::Tensor lovasz_hinge_loss(const torch::Tensor& logits, const torch::Tensor& targets);

// Mean over frames of bce(boundary) + bce(pseudo mask). Inputs are stacked per frame.
torch::Tensor aux_loss(const torch::Tensor& pseudo_logits, const torch::Tensor& boundary_logits,
                       const torch::Tensor& masks, const torch::Tensor& boundaries);

struct LossTerms {
  torch::Tensor bce;
  torch::Tensor hinge;
  torch::Tensor aux;
  torch::Tensor total;
};

// total = bce + hinge + aux, all weights 1.
LossTerms total_loss(const torch::Tensor& final_logits, const torch::Tensor& targets, const torch::Tensor& aux);

}  // namespace tbgdiff::losses

namespace tbgdiff::metrics {

struct ConfusionCounts {
  int64_t tp = 0, fp = 0, tn = 0, fn = 0;

  int64_t positives() const { return tp + fn; }
  int64_t negatives() const { return tn + fp; }
  int64_t total() const { return tp + fp + tn + fn; }
  ConfusionCounts& operator+=(const ConfusionCounts& o);
  bool operator==(const ConfusionCounts&) const = default;
};

ConfusionCounts confusion(const torch::Tensor& pred, const torch::Tensor& gt);

// How ratios over an empty class are defined: `perfect` scores an empty class as fully
// recovered (ratio 1), `zero` scores it as 0.
enum class EmptyClassPolicy { kPerfect, kZero };
EmptyClassPolicy parse_empty_class_policy(const std::string& name);

constexpr double kBetaSquared = 0.3;

double iou(const ConfusionCounts& c, EmptyClassPolicy policy);
double f_beta(const ConfusionCounts& c, EmptyClassPolicy policy);
double ber(const ConfusionCounts& c, EmptyClassPolicy policy);
double shadow_ber(const ConfusionCounts& c, EmptyClassPolicy policy);
double non_shadow_ber(const ConfusionCounts& c, EmptyClassPolicy policy);

struct FrameMetrics {
  double mae = 0, iou = 0, fbeta = 0, ber = 0, sber = 0, nber = 0;
  ConfusionCounts counts;
};

// prob: probabilities in [0, 1]; gt: binary mask of the same shape.
FrameMetrics frame_metrics(const torch::Tensor& prob, const torch::Tensor& gt, double threshold = 0.5,
                           EmptyClassPolicy policy = EmptyClassPolicy::kPerfect);

// MAE, IoU and F-beta are frame means; the BER family comes from pooled counts.
struct MetricFields {
  int64_t frames = 0;
  double mae = 0, iou = 0, fbeta = 0, ber = 0, sber = 0, nber = 0;
};

struct MetricReport {
  MetricFields all;
  std::vector<std::pair<std::string, MetricFields>> per_video;  // in first-seen order
};

class MetricAccumulator {
 public:
  explicit MetricAccumulator(EmptyClassPolicy policy = EmptyClassPolicy::kPerfect) : policy_(policy) {}
  void add(const std::string& video_id, const FrameMetrics& frame);
  MetricReport report() const;

 private:
  struct Totals {
    int64_t frames = 0;
    double mae = 0, iou = 0, fbeta = 0;
    ConfusionCounts counts;
  };
  MetricFields finish(const Totals& t) const;

  EmptyClassPolicy policy_;
  std::vector<std::string> order_;
  std::map<std::string, Totals> videos_;
  Totals all_;
};

// `video_id,frames,mae,iou,fbeta,ber,sber,nber`, one row per video then `__all__`.
std::string report_csv(const MetricReport& report);
void write_report_csv(const std::filesystem::path& path, const MetricReport& report);

}  // namespace tbgdiff::metrics
