#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "tbgdiff/checkpoint.hpp"
#include "tbgdiff/clip_data.hpp"
#include "tbgdiff/config.hpp"
#include "tbgdiff/losses_metrics.hpp"
#include "tbgdiff/model.hpp"

namespace tbgdiff {

struct StepRecord {
  int64_t step = 0;  // 1-based optimizer step
  int64_t epoch = 0;
  double loss = 0, bce = 0, hinge = 0, aux = 0;
};

// Videos named by the config: generated synthetic videos or a dataset directory.
// Frame sizes other than resolution x resolution raise ConfigError.
std::vector<data::Video> load_videos(const RunConfig& config);
std::vector<data::VideoClip> training_clips(const std::vector<data::Video>& videos, const RunConfig& config);

// Deterministic training loop. Everything random in step s (clip order, flips,
// timesteps, noise) is derived from (seed, s), so a resumed run replays exactly.
class Trainer {
 public:
  Trainer(RunConfig config, std::vector<data::VideoClip> clips);

  const RunConfig& config() const { return config_; }
  TbgDiffModel& model() { return model_; }
  int64_t step() const { return step_; }
  int64_t steps_per_epoch() const;
  int64_t total_steps() const;
  bool done() const { return step_ >= total_steps(); }

  StepRecord train_step();
  // Runs up to `steps` more steps (all remaining when negative).
  void run(int64_t steps = -1);

  const std::vector<StepRecord>& history() const { return history_; }

  Checkpoint checkpoint() const;
  void resume(const Checkpoint& checkpoint);

  // Where a diagnostic dump goes when the loss turns non-finite; none when empty.
  void set_dump_dir(std::filesystem::path dir) { dump_dir_ = std::move(dir); }

 private:
  RunConfig config_;
  std::vector<data::VideoClip> clips_;
  diffusion::NoiseSchedule schedule_;
  TbgDiffModel model_{nullptr};
  std::unique_ptr<torch::optim::AdamW> optimizer_;
  int64_t step_ = 0;
  std::vector<StepRecord> history_;
  std::filesystem::path dump_dir_;
};

std::string loss_log_csv(const std::vector<StepRecord>& history);

// Full run: validates, writes config.json, loss_log.csv, periodic checkpoints and final.tbg
// under output_dir, and returns the final checkpoint.
Checkpoint train(const RunConfig& config, const std::optional<std::filesystem::path>& resume_from = std::nullopt);

// Rebuilds the model a checkpoint was trained with.
TbgDiffModel model_from_checkpoint(const Checkpoint& checkpoint);

// Samples every real frame of every video and scores it. With an output directory, writes
// metrics.csv and (if eval.write_masks) masks/<video>/<frame>.png.
metrics::MetricReport evaluate(const RunConfig& config, const Checkpoint& checkpoint,
                               const std::vector<data::Video>& videos,
                               const std::optional<std::filesystem::path>& out_dir = std::nullopt);

// One 0/255 PNG per input frame, named after the input. Returns the written paths.
std::vector<std::filesystem::path> infer(const Checkpoint& checkpoint, const std::filesystem::path& frames_dir,
                                         const std::filesystem::path& out_dir);

}  // namespace tbgdiff
