#include "tbgdiff/harness.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <numeric>

#include "tbgdiff/dataset.hpp"
#include "tbgdiff/errors.hpp"
#include "tbgdiff/image_io.hpp"
#include "tbgdiff/seeding.hpp"

namespace tbgdiff {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Stream tags keep the per-step random sources independent of each other.
constexpr uint64_t kPermutationStream = 0x100000000ull;
constexpr uint64_t kAugmentStream = 0x200000000ull;
constexpr uint64_t kNoiseStream = 0x300000000ull;
constexpr uint64_t kEvalStream = 0x400000000ull;

void check_video_size(const data::Video& video, int64_t resolution) {
  if (video.frames.size(2) != resolution || video.frames.size(3) != resolution) {
    throw ConfigError("video " + video.id + " is " + std::to_string(video.frames.size(2)) + "x" +
                      std::to_string(video.frames.size(3)) + " but the configured resolution is " +
                      std::to_string(resolution));
  }
}

// Keys that change what a trained model means; evaluation and resume refuse to mix them.
const char* kStructuralKeys[] = {"resolution",         "diffusion.schedule",      "diffusion.scale",
                                 "diffusion.t_train",  "diffusion.guidance_mode", "diffusion.yt_resolution",
                                 "dsa.self_tile_rescale"};

json at_path(const json& j, const std::string& key) {
  const json* node = &j;
  size_t start = 0;
  for (auto dot = key.find('.'); ; dot = key.find('.', start)) {
    const auto part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!node->contains(part)) return json();
    node = &node->at(part);
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  return *node;
}

void check_compatible(const RunConfig& config, const json& trained) {
  const auto current = config.to_json();
  for (const char* key : kStructuralKeys) {
    const auto a = at_path(current, key), b = at_path(trained, key);
    if (a != b) {
      throw ConfigError(std::string("config key ") + key + " is " + a.dump() + " but the checkpoint was trained with " +
                        b.dump());
    }
  }
}

std::vector<int64_t> epoch_order(uint64_t seed, int64_t epoch, int64_t n) {
  std::vector<int64_t> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  Rng rng(mix_seed(seed, kPermutationStream + static_cast<uint64_t>(epoch)));
  for (int64_t i = n - 1; i > 0; --i) std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(rng.integer(0, i))]);
  return order;
}

std::string png_name(const std::string& name) { return fs::path(name).stem().string() + ".png"; }

}  // namespace

std::vector<data::Video> load_videos(const RunConfig& config) {
  std::vector<data::Video> videos;
  if (config.data.source == "synthetic") {
    data::SyntheticDatasetSpec spec;
    spec.videos = config.data.synthetic_videos;
    spec.frames = config.data.synthetic_frames;
    spec.height = spec.width = config.resolution;
    spec.seed = static_cast<uint64_t>(config.data.synthetic_seed);
    videos = data::synthetic_videos(spec);
  } else {
    videos = data::Dataset::open(config.data.root).load_all();
  }
  for (const auto& v : videos) check_video_size(v, config.resolution);
  return videos;
}

std::vector<data::VideoClip> training_clips(const std::vector<data::Video>& videos, const RunConfig& config) {
  std::vector<data::VideoClip> clips;
  for (const auto& v : videos) {
    auto more = data::make_clips(v, config.clip_len, config.data.clip_stride);
    clips.insert(clips.end(), std::make_move_iterator(more.begin()), std::make_move_iterator(more.end()));
  }
  return clips;
}

Trainer::Trainer(RunConfig config, std::vector<data::VideoClip> clips)
    : config_(std::move(config)), clips_(std::move(clips)) {
  config_.validate();
  torch::set_num_threads(static_cast<int>(config_.threads));
  for (const auto& c : clips_) {
    if (c.length() != config_.clip_len) throw DataError("clip of " + c.video_id + " has the wrong length");
  }
  if (clips_.empty() && total_steps() > 0) throw DataError("no training clips");
  schedule_ = config_.schedule();
  torch::manual_seed(static_cast<uint64_t>(config_.seed));
  model_ = TbgDiffModel(config_.model_options());
  optimizer_ = std::make_unique<torch::optim::AdamW>(
      model_->parameters(), torch::optim::AdamWOptions(config_.lr).weight_decay(config_.weight_decay));
}

int64_t Trainer::steps_per_epoch() const {
  const int64_t per_step = config_.batch_clips * config_.grad_accum;
  return (static_cast<int64_t>(clips_.size()) + per_step - 1) / per_step;
}

int64_t Trainer::total_steps() const {
  int64_t total = config_.epochs * steps_per_epoch();
  if (config_.max_steps > 0) total = std::min(total, config_.max_steps);
  return total;
}

StepRecord Trainer::train_step() {
  if (done()) throw std::logic_error("training is already complete");
  const int64_t per_epoch = steps_per_epoch();
  const int64_t epoch = step_ / per_epoch, within = step_ % per_epoch;
  const auto order = epoch_order(static_cast<uint64_t>(config_.seed), epoch, static_cast<int64_t>(clips_.size()));
  const uint64_t step_seed = mix_seed(static_cast<uint64_t>(config_.seed), static_cast<uint64_t>(step_));

  // Micro-batches of this step, in order; the last one of an epoch may be short.
  std::vector<std::vector<int64_t>> micro;
  for (int64_t m = 0; m < config_.grad_accum; ++m) {
    std::vector<int64_t> ids;
    const int64_t begin = (within * config_.grad_accum + m) * config_.batch_clips;
    for (int64_t j = begin; j < std::min<int64_t>(begin + config_.batch_clips, order.size()); ++j) {
      ids.push_back(order[static_cast<size_t>(j)]);
    }
    if (!ids.empty()) micro.push_back(std::move(ids));
  }

  model_->train();
  optimizer_->zero_grad();
  StepRecord rec;
  rec.step = step_ + 1;
  rec.epoch = epoch;
  const int64_t l = config_.clip_len, size = config_.resolution;
  auto gen = at::make_generator<at::CPUGeneratorImpl>(mix_seed(step_seed, kNoiseStream));
  int64_t slot = 0;
  for (const auto& ids : micro) {
    std::vector<torch::Tensor> frames, masks, boundaries;
    for (const auto id : ids) {
      const auto clip = data::augment_clip(clips_[static_cast<size_t>(id)],
                                           mix_seed(step_seed, kAugmentStream + static_cast<uint64_t>(slot++)),
                                           config_.data.flip_prob);
      frames.push_back(clip.frames);
      masks.push_back(clip.masks);
      boundaries.push_back(clip.boundaries);
    }
    const int64_t b = static_cast<int64_t>(ids.size());
    const auto x = torch::stack(frames);
    const auto y = torch::stack(masks).to(torch::kFloat32).reshape({b * l, 1, size, size});
    const auto edges = torch::stack(boundaries).to(torch::kFloat32).reshape({b * l, 1, size, size});

    const auto t = torch::randint(1, schedule_.t_train + 1, {b * l}, gen, torch::kLong);
    const auto eps = torch::randn({b * l, 1, size, size}, gen, torch::kFloat32);
    const auto y_t = diffusion::forward_diffuse(diffusion::bit_encode(y, config_.diffusion.scale).values, t, eps,
                                                schedule_);

    auto out = model_->forward_train(x, y.reshape({b, l, 1, size, size}), y_t.reshape({b, l, 1, size, size}), t);
    const auto aux = losses::aux_loss(out.pseudo_logits.reshape({b * l, 1, size, size}),
                                      out.boundary_logits.reshape({b * l, 1, size, size}), y, edges);
    const auto terms = losses::total_loss(out.final_logits.reshape({b * l, 1, size, size}), y, aux);
    const double scale = 1.0 / static_cast<double>(micro.size());
    rec.loss += terms.total.item<double>() * scale;
    rec.bce += terms.bce.item<double>() * scale;
    rec.hinge += terms.hinge.item<double>() * scale;
    rec.aux += terms.aux.item<double>() * scale;
    if (!std::isfinite(rec.loss)) break;
    (terms.total * scale).backward();
  }

  double grad_norm = 0;
  if (std::isfinite(rec.loss)) {
    grad_norm = torch::nn::utils::clip_grad_norm_(model_->parameters(),
                                                  config_.grad_clip > 0 ? config_.grad_clip
                                                                        : std::numeric_limits<double>::infinity());
  }
  if (!std::isfinite(rec.loss) || !std::isfinite(grad_norm)) {
    json dump = {{"step", rec.step},   {"epoch", rec.epoch}, {"loss", rec.loss},
                 {"bce", rec.bce},     {"hinge", rec.hinge}, {"aux", rec.aux},
                 {"grad_norm", grad_norm}, {"config", config_.to_json()}};
    dump["last_finite_loss"] = history_.empty() ? json() : json(history_.back().loss);
    std::string where;
    if (!dump_dir_.empty()) {
      fs::create_directories(dump_dir_);
      const auto path = dump_dir_ / ("nonfinite_step_" + std::to_string(rec.step) + ".json");
      std::ofstream(path) << dump.dump(2) << "\n";
      where = " (state dumped to " + path.string() + ")";
    }
    throw NumericalError("non-finite loss or gradient at step " + std::to_string(rec.step) + where);
  }
  optimizer_->step();
  ++step_;
  history_.push_back(rec);
  return rec;
}

void Trainer::run(int64_t steps) {
  for (int64_t i = 0; (steps < 0 || i < steps) && !done(); ++i) train_step();
}

Checkpoint Trainer::checkpoint() const {
  Checkpoint ckpt;
  const int64_t per_epoch = std::max<int64_t>(steps_per_epoch(), 1);
  ckpt.step = step_;
  ckpt.epoch = step_ / per_epoch;
  ckpt.config = config_.to_json();
  for (const auto& r : history_) {
    ckpt.history.push_back(
        {{"step", r.step}, {"epoch", r.epoch}, {"loss", r.loss}, {"bce", r.bce}, {"hinge", r.hinge}, {"aux", r.aux}});
  }
  ckpt.parameters = module_state(*model_);
  ckpt.optimizer = optimizer_state(*model_, *optimizer_);
  return ckpt;
}

void Trainer::resume(const Checkpoint& checkpoint) {
  check_compatible(config_, checkpoint.config);
  load_module_state(*model_, checkpoint.parameters);
  load_optimizer_state(*model_, *optimizer_, checkpoint.optimizer);
  step_ = checkpoint.step;
  history_.clear();
  for (const auto& r : checkpoint.history) {
    history_.push_back({r.at("step").get<int64_t>(), r.at("epoch").get<int64_t>(), r.at("loss").get<double>(),
                        r.at("bce").get<double>(), r.at("hinge").get<double>(), r.at("aux").get<double>()});
  }
}

std::string loss_log_csv(const std::vector<StepRecord>& history) {
  std::string out = "step,epoch,loss,bce,hinge,aux\n";
  char buf[256];
  for (const auto& r : history) {
    std::snprintf(buf, sizeof buf, "%lld,%lld,%.17g,%.17g,%.17g,%.17g\n", static_cast<long long>(r.step),
                  static_cast<long long>(r.epoch), r.loss, r.bce, r.hinge, r.aux);
    out += buf;
  }
  return out;
}

Checkpoint train(const RunConfig& config, const std::optional<fs::path>& resume_from) {
  config.validate();
  std::optional<Checkpoint> previous;
  if (resume_from) previous = load_checkpoint(*resume_from);
  auto clips = training_clips(load_videos(config), config);

  const fs::path dir = config.output_dir;
  fs::create_directories(dir);
  std::ofstream(dir / "config.json") << config.to_json().dump(2) << "\n";

  Trainer trainer(config, std::move(clips));
  trainer.set_dump_dir(dir);
  if (previous) trainer.resume(*previous);
  auto write_log = [&] { std::ofstream(dir / "loss_log.csv") << loss_log_csv(trainer.history()); };

  while (!trainer.done()) {
    const auto rec = trainer.train_step();
    if (rec.step % config.log_every == 0 || trainer.done()) {
      std::printf("step %lld/%lld epoch %lld loss %.6f (bce %.6f hinge %.6f aux %.6f)\n",
                  static_cast<long long>(rec.step), static_cast<long long>(trainer.total_steps()),
                  static_cast<long long>(rec.epoch), rec.loss, rec.bce, rec.hinge, rec.aux);
      std::fflush(stdout);
    }
    if (config.checkpoint_every > 0 && rec.step % config.checkpoint_every == 0) {
      char name[48];
      std::snprintf(name, sizeof name, "step_%06lld.tbg", static_cast<long long>(rec.step));
      save_checkpoint(dir / "checkpoints" / name, trainer.checkpoint());
      write_log();
    }
  }
  write_log();
  auto ckpt = trainer.checkpoint();
  save_checkpoint(dir / "final.tbg", ckpt);
  return ckpt;
}

TbgDiffModel model_from_checkpoint(const Checkpoint& checkpoint) {
  const auto config = config_from_json(checkpoint.config);
  config.validate();
  TbgDiffModel model(config.model_options());
  load_module_state(*model, checkpoint.parameters);
  model->eval();
  return model;
}

metrics::MetricReport evaluate(const RunConfig& config, const Checkpoint& checkpoint,
                               const std::vector<data::Video>& videos, const std::optional<fs::path>& out_dir) {
  config.validate();
  check_compatible(config, checkpoint.config);
  for (const auto& v : videos) check_video_size(v, config.resolution);
  torch::set_num_threads(static_cast<int>(config.threads));
  auto model = model_from_checkpoint(checkpoint);

  SamplingOptions sampling;
  sampling.schedule = config.schedule();
  sampling.steps = config.diffusion.sample_steps;
  sampling.scale = config.diffusion.scale;
  sampling.workers = config.eval.workers;

  metrics::MetricAccumulator acc(config.empty_class_policy());
  for (size_t vi = 0; vi < videos.size(); ++vi) {
    const auto& video = videos[vi];
    if (out_dir && config.eval.write_masks) fs::create_directories(*out_dir / "masks" / video.id);
    for (const auto& clip : data::make_clips(video, config.clip_len, config.clip_len)) {
      sampling.seed = mix_seed(mix_seed(static_cast<uint64_t>(config.seed), kEvalStream + vi),
                               static_cast<uint64_t>(clip.start_index));
      const auto sample = sample_clip(model, clip.frames, sampling);
      for (int64_t j = 0; j < clip.real_length(); ++j) {
        acc.add(video.id, metrics::frame_metrics(sample.probabilities[j], clip.masks[j], config.metrics.threshold,
                                                 config.empty_class_policy()));
        if (out_dir && config.eval.write_masks) {
          const auto name = png_name(video.names.at(static_cast<size_t>(clip.start_index + j)));
          io::encode_mask_file(*out_dir / "masks" / video.id / name, sample.masks[j]);
        }
      }
    }
  }
  auto report = acc.report();
  if (out_dir) {
    fs::create_directories(*out_dir);
    metrics::write_report_csv(*out_dir / "metrics.csv", report);
  }
  return report;
}

std::vector<fs::path> infer(const Checkpoint& checkpoint, const fs::path& frames_dir, const fs::path& out_dir) {
  const auto config = config_from_json(checkpoint.config);
  const auto paths = data::list_images(frames_dir);
  if (paths.empty()) throw DataError("no frame images in " + frames_dir.string());
  data::Video video;
  video.id = frames_dir.filename().string();
  std::vector<torch::Tensor> frames;
  for (const auto& p : paths) {
    frames.push_back(io::read_frame(p));
    video.names.push_back(p.filename().string());
  }
  for (size_t i = 1; i < frames.size(); ++i) {
    if (frames[i].sizes() != frames[0].sizes()) throw DataError("frame " + paths[i].string() + " differs in size");
  }
  video.frames = torch::stack(frames);
  const int64_t n = video.length(), h = video.frames.size(2), w = video.frames.size(3);
  video.masks = torch::zeros({n, h, w}, torch::kUInt8);
  video.boundaries = torch::zeros({n, h, w}, torch::kUInt8);
  check_video_size(video, config.resolution);

  torch::set_num_threads(static_cast<int>(config.threads));
  auto model = model_from_checkpoint(checkpoint);
  SamplingOptions sampling;
  sampling.schedule = config.schedule();
  sampling.steps = config.diffusion.sample_steps;
  sampling.scale = config.diffusion.scale;
  sampling.workers = config.eval.workers;

  std::vector<fs::path> written;
  fs::create_directories(out_dir);
  for (const auto& clip : data::make_clips(video, config.clip_len, config.clip_len)) {
    sampling.seed = mix_seed(mix_seed(static_cast<uint64_t>(config.seed), kEvalStream),
                             static_cast<uint64_t>(clip.start_index));
    const auto sample = sample_clip(model, clip.frames, sampling);
    for (int64_t j = 0; j < clip.real_length(); ++j) {
      const auto path = out_dir / png_name(video.names[static_cast<size_t>(clip.start_index + j)]);
      io::encode_mask_file(path, sample.masks[j]);
      written.push_back(path);
    }
  }
  return written;
}

}  // namespace tbgdiff
