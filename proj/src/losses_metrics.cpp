#include "tbgdiff/losses_metrics.hpp"

#include <cstdio>
#include <fstream>
#include <stdexcept>

#include "tbgdiff/errors.hpp"

namespace tbgdiff::losses {

namespace F = torch::nn::functional;

namespace {

void require_same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (!a.sizes().equals(b.sizes())) throw std::invalid_argument(std::string(what) + ": shape mismatch");
}

}  // namespace

torch::Tensor bce_loss(const torch::Tensor& logits, const torch::Tensor& targets) {
  require_same_shape(logits, targets, "bce_loss");
  return F::binary_cross_entropy_with_logits(logits, targets.to(logits.dtype()));
}

torch::Tensor lovasz_grad(const torch::Tensor& gt_sorted) {
  const auto gts = gt_sorted.sum();
  const auto intersection = gts - gt_sorted.cumsum(0);
  const auto union_ = gts + (1.0 - gt_sorted).cumsum(0);
  auto jaccard = 1.0 - intersection / union_;
  const int64_t p = gt_sorted.size(0);
  if (p > 1) {
    jaccard = torch::cat({jaccard.narrow(0, 0, 1), jaccard.narrow(0, 1, p - 1) - jaccard.narrow(0, 0, p - 1)});
  }
  return jaccard;
}

torch::Tensor lovasz_hinge_flat(const torch::Tensor& logits, const torch::Tensor& labels) {
  require_same_shape(logits, labels, "lovasz_hinge");
  if (logits.numel() == 0) return logits.sum() * 0.0;
  const auto y = labels.to(logits.dtype());
  const auto signs = y * 2.0 - 1.0;
  const auto errors = 1.0 - logits * signs;
  // Two stable sorts: by label (foreground first), then by error, descending.
  const auto by_label = std::get<1>(y.detach().sort(/*stable=*/true, /*dim=*/0, /*descending=*/true));
  const auto by_error =
      std::get<1>(errors.detach().index_select(0, by_label).sort(/*stable=*/true, /*dim=*/0, /*descending=*/true));
  const auto perm = by_label.index_select(0, by_error);
  const auto grad = lovasz_grad(y.index_select(0, perm));
  return torch::dot(torch::relu(errors.index_select(0, perm)), grad);
}

torch::Tensor lovasz_hinge_loss(const torch::Tensor& logits, const torch::Tensor& targets) {
  require_same_shape(logits, targets, "lovasz_hinge");
  if (!(targets.eq(0) | targets.eq(1)).all().item<bool>()) {
    throw std::invalid_argument("lovasz_hinge: targets must be binary");
  }
  const int64_t batch = logits.size(0);
  const auto flat_logits = logits.reshape({batch, -1});
  const auto flat_targets = targets.reshape({batch, -1});
  std::vector<torch::Tensor> per_image;
  per_image.reserve(static_cast<size_t>(batch));
  for (int64_t i = 0; i < batch; ++i) per_image.push_back(lovasz_hinge_flat(flat_logits[i], flat_targets[i]));
  return torch::stack(per_image).mean();
}

torch::Tensor aux_loss(const torch::Tensor& pseudo_logits, const torch::Tensor& boundary_logits,
                       const torch::Tensor& masks, const torch::Tensor& boundaries) {
  const int64_t frames = pseudo_logits.size(0);
  if (boundary_logits.size(0) != frames || masks.size(0) != frames || boundaries.size(0) != frames) {
    throw std::invalid_argument("aux_loss: every frame needs pseudo, boundary and both ground truths");
  }
  require_same_shape(pseudo_logits, masks, "aux_loss (pseudo mask)");
  require_same_shape(boundary_logits, boundaries, "aux_loss (boundary)");
  auto per_frame = [&](const torch::Tensor& z, const torch::Tensor& y) {
    return F::binary_cross_entropy_with_logits(z, y.to(z.dtype()),
                                               F::BinaryCrossEntropyWithLogitsFuncOptions().reduction(torch::kNone))
        .reshape({frames, -1})
        .mean(1);
  };
  return (per_frame(boundary_logits, boundaries) + per_frame(pseudo_logits, masks)).mean();
}

LossTerms total_loss(const torch::Tensor& final_logits, const torch::Tensor& targets, const torch::Tensor& aux) {
  LossTerms terms;
  terms.bce = bce_loss(final_logits, targets);
  terms.hinge = lovasz_hinge_loss(final_logits, targets);
  terms.aux = aux;
  terms.total = terms.bce + terms.hinge + terms.aux;
  return terms;
}

}  // namespace tbgdiff::losses

namespace tbgdiff::metrics {

ConfusionCounts& ConfusionCounts::operator+=(const ConfusionCounts& o) {
  tp += o.tp;
  fp += o.fp;
  tn += o.tn;
  fn += o.fn;
  return *this;
}

ConfusionCounts confusion(const torch::Tensor& pred, const torch::Tensor& gt) {
  if (!pred.sizes().equals(gt.sizes())) throw std::invalid_argument("confusion: shape mismatch");
  auto binary = [](const torch::Tensor& t) { return (t.eq(0) | t.eq(1)).all().item<bool>(); };
  if (!binary(pred) || !binary(gt)) throw std::invalid_argument("confusion: masks must be binary");
  const auto p = pred.ne(0);
  const auto g = gt.ne(0);
  ConfusionCounts c;
  c.tp = (p & g).sum().item<int64_t>();
  c.fp = (p & g.logical_not()).sum().item<int64_t>();
  c.fn = (p.logical_not() & g).sum().item<int64_t>();
  c.tn = pred.numel() - c.tp - c.fp - c.fn;
  return c;
}

EmptyClassPolicy parse_empty_class_policy(const std::string& name) {
  if (name == "perfect") return EmptyClassPolicy::kPerfect;
  if (name == "zero") return EmptyClassPolicy::kZero;
  throw ConfigError("unknown metrics.empty_class_policy '" + name + "' (expected perfect or zero)");
}

namespace {

double empty_value(EmptyClassPolicy policy) { return policy == EmptyClassPolicy::kPerfect ? 1.0 : 0.0; }

double ratio(int64_t num, int64_t den, EmptyClassPolicy policy) {
  return den == 0 ? empty_value(policy) : static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

double iou(const ConfusionCounts& c, EmptyClassPolicy policy) { return ratio(c.tp, c.tp + c.fp + c.fn, policy); }

double f_beta(const ConfusionCounts& c, EmptyClassPolicy policy) {
  if (c.tp + c.fp == 0 && c.tp + c.fn == 0) return empty_value(policy);
  if (c.tp == 0) return 0.0;
  const double precision = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
  const double recall = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
  return (1.0 + kBetaSquared) * precision * recall / (kBetaSquared * precision + recall);
}

double shadow_ber(const ConfusionCounts& c, EmptyClassPolicy policy) {
  return 100.0 * (1.0 - ratio(c.tp, c.positives(), policy));
}

double non_shadow_ber(const ConfusionCounts& c, EmptyClassPolicy policy) {
  return 100.0 * (1.0 - ratio(c.tn, c.negatives(), policy));
}

double ber(const ConfusionCounts& c, EmptyClassPolicy policy) {
  return 100.0 * (1.0 - 0.5 * (ratio(c.tp, c.positives(), policy) + ratio(c.tn, c.negatives(), policy)));
}

FrameMetrics frame_metrics(const torch::Tensor& prob, const torch::Tensor& gt, double threshold,
                           EmptyClassPolicy policy) {
  if (!prob.sizes().equals(gt.sizes())) throw std::invalid_argument("metrics: shape mismatch");
  if (!(threshold > 0.0 && threshold < 1.0)) throw std::invalid_argument("metrics: threshold must lie in (0, 1)");
  FrameMetrics m;
  const auto p = prob.to(torch::kFloat64);
  m.mae = (p - gt.to(torch::kFloat64)).abs().mean().item<double>();
  m.counts = confusion(p.gt(threshold).to(torch::kUInt8), gt);
  m.iou = iou(m.counts, policy);
  m.fbeta = f_beta(m.counts, policy);
  m.ber = ber(m.counts, policy);
  m.sber = shadow_ber(m.counts, policy);
  m.nber = non_shadow_ber(m.counts, policy);
  return m;
}

void MetricAccumulator::add(const std::string& video_id, const FrameMetrics& frame) {
  auto [it, inserted] = videos_.try_emplace(video_id);
  if (inserted) order_.push_back(video_id);
  for (Totals* t : {&it->second, &all_}) {
    t->frames += 1;
    t->mae += frame.mae;
    t->iou += frame.iou;
    t->fbeta += frame.fbeta;
    t->counts += frame.counts;
  }
}

MetricFields MetricAccumulator::finish(const Totals& t) const {
  MetricFields f;
  f.frames = t.frames;
  if (t.frames == 0) return f;
  const double n = static_cast<double>(t.frames);
  f.mae = t.mae / n;
  f.iou = t.iou / n;
  f.fbeta = t.fbeta / n;
  f.ber = ber(t.counts, policy_);
  f.sber = shadow_ber(t.counts, policy_);
  f.nber = non_shadow_ber(t.counts, policy_);
  return f;
}

MetricReport MetricAccumulator::report() const {
  MetricReport r;
  r.all = finish(all_);
  for (const auto& id : order_) r.per_video.emplace_back(id, finish(videos_.at(id)));
  return r;
}

std::string report_csv(const MetricReport& report) {
  std::string out = "video_id,frames,mae,iou,fbeta,ber,sber,nber\n";
  auto row = [&](const std::string& id, const MetricFields& f) {
    char buf[256];
    std::snprintf(buf, sizeof buf, ",%lld,%.6f,%.6f,%.6f,%.4f,%.4f,%.4f\n", static_cast<long long>(f.frames), f.mae,
                  f.iou, f.fbeta, f.ber, f.sber, f.nber);
    out += id + buf;
  };
  for (const auto& [id, fields] : report.per_video) row(id, fields);
  row("__all__", report.all);
  return out;
}

void write_report_csv(const std::filesystem::path& path, const MetricReport& report) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write metric report: " + path.string());
  out << report_csv(report);
}

}  // namespace tbgdiff::metrics
