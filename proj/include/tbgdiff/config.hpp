#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "tbgdiff/diffusion.hpp"
#include "tbgdiff/losses_metrics.hpp"
#include "tbgdiff/model.hpp"

namespace tbgdiff {

struct DataConfig {
  std::string source = "synthetic";  // synthetic | directory
  std::string root;
  int64_t synthetic_videos = 8;
  int64_t synthetic_frames = 5;
  int64_t synthetic_seed = 0;
  int64_t clip_stride = 5;
  double flip_prob = 0.5;
};

struct DiffusionConfig {
  std::string schedule = "cosine";
  double scale = 0.01;
  int64_t sample_steps = 20;
  int64_t t_train = 1000;
  std::string guidance_mode = "stee";
  std::string yt_resolution = "feature";  // feature | full
};

struct MetricsConfig {
  std::string empty_class_policy = "perfect";
  double threshold = 0.5;
};

struct EvalConfig {
  int64_t workers = 1;
  bool write_masks = true;
};

struct RunConfig {
  int64_t clip_len = 5;
  int64_t resolution = 64;
  int64_t batch_clips = 4;
  int64_t grad_accum = 1;
  double lr = 3e-5;
  double weight_decay = 1e-4;
  double grad_clip = 1.0;
  int64_t epochs = 20;
  int64_t max_steps = 0;  // 0: no cap besides epochs
  int64_t seed = 42;
  int64_t threads = 1;
  int64_t log_every = 10;
  int64_t checkpoint_every = 0;
  std::string output_dir = "runs/default";
  DataConfig data;
  DiffusionConfig diffusion;
  bool dsa_self_tile_rescale = true;
  MetricsConfig metrics;
  EvalConfig eval;

  // Throws ConfigError naming the first bad field.
  void validate() const;

  diffusion::NoiseSchedule schedule() const;
  diffusion::GuidanceMode guidance_mode() const;
  metrics::EmptyClassPolicy empty_class_policy() const;
  ModelOptions model_options() const;

  // Nested JSON with sorted keys.
  nlohmann::json to_json() const;
};

// Every accepted dotted key, sorted.
std::vector<std::string> config_keys();

// Accepts nested objects or flat dotted keys; unknown keys and wrong types throw ConfigError.
RunConfig config_from_json(const nlohmann::json& j);
RunConfig load_config(const std::filesystem::path& path);

// `key=value`; the value is parsed as JSON when possible, else taken as a string.
void apply_override(RunConfig& config, const std::string& assignment);

}  // namespace tbgdiff
