#include "tbgdiff/config.hpp"

#include <algorithm>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "tbgdiff/errors.hpp"

namespace tbgdiff {

using nlohmann::json;

namespace {

enum class Kind { kInt, kReal, kBool, kText };

struct Field {
  Kind kind;
  std::function<void(RunConfig&, const json&)> set;
  std::function<json(const RunConfig&)> get;
};

template <typename T>
Field field(Kind kind, std::function<T&(RunConfig&)> ref) {
  return {kind, [ref](RunConfig& c, const json& v) { ref(c) = v.get<T>(); },
          [ref](const RunConfig& c) { return json(ref(const_cast<RunConfig&>(c))); }};
}

#define TBG_FIELD(T, kind, expr) field<T>(kind, [](RunConfig& c) -> T& { return c.expr; })

const std::map<std::string, Field>& registry() {
  static const std::map<std::string, Field> fields = {
      {"clip_len", TBG_FIELD(int64_t, Kind::kInt, clip_len)},
      {"resolution", TBG_FIELD(int64_t, Kind::kInt, resolution)},
      {"batch_clips", TBG_FIELD(int64_t, Kind::kInt, batch_clips)},
      {"grad_accum", TBG_FIELD(int64_t, Kind::kInt, grad_accum)},
      {"lr", TBG_FIELD(double, Kind::kReal, lr)},
      {"weight_decay", TBG_FIELD(double, Kind::kReal, weight_decay)},
      {"grad_clip", TBG_FIELD(double, Kind::kReal, grad_clip)},
      {"epochs", TBG_FIELD(int64_t, Kind::kInt, epochs)},
      {"max_steps", TBG_FIELD(int64_t, Kind::kInt, max_steps)},
      {"seed", TBG_FIELD(int64_t, Kind::kInt, seed)},
      {"threads", TBG_FIELD(int64_t, Kind::kInt, threads)},
      {"log_every", TBG_FIELD(int64_t, Kind::kInt, log_every)},
      {"checkpoint_every", TBG_FIELD(int64_t, Kind::kInt, checkpoint_every)},
      {"output_dir", TBG_FIELD(std::string, Kind::kText, output_dir)},
      {"data.source", TBG_FIELD(std::string, Kind::kText, data.source)},
      {"data.root", TBG_FIELD(std::string, Kind::kText, data.root)},
      {"data.synthetic_videos", TBG_FIELD(int64_t, Kind::kInt, data.synthetic_videos)},
      {"data.synthetic_frames", TBG_FIELD(int64_t, Kind::kInt, data.synthetic_frames)},
      {"data.synthetic_seed", TBG_FIELD(int64_t, Kind::kInt, data.synthetic_seed)},
      {"data.clip_stride", TBG_FIELD(int64_t, Kind::kInt, data.clip_stride)},
      {"data.flip_prob", TBG_FIELD(double, Kind::kReal, data.flip_prob)},
      {"diffusion.schedule", TBG_FIELD(std::string, Kind::kText, diffusion.schedule)},
      {"diffusion.scale", TBG_FIELD(double, Kind::kReal, diffusion.scale)},
      {"diffusion.sample_steps", TBG_FIELD(int64_t, Kind::kInt, diffusion.sample_steps)},
      {"diffusion.t_train", TBG_FIELD(int64_t, Kind::kInt, diffusion.t_train)},
      {"diffusion.guidance_mode", TBG_FIELD(std::string, Kind::kText, diffusion.guidance_mode)},
      {"diffusion.yt_resolution", TBG_FIELD(std::string, Kind::kText, diffusion.yt_resolution)},
      {"dsa.self_tile_rescale", TBG_FIELD(bool, Kind::kBool, dsa_self_tile_rescale)},
      {"metrics.empty_class_policy", TBG_FIELD(std::string, Kind::kText, metrics.empty_class_policy)},
      {"metrics.threshold", TBG_FIELD(double, Kind::kReal, metrics.threshold)},
      {"eval.workers", TBG_FIELD(int64_t, Kind::kInt, eval.workers)},
      {"eval.write_masks", TBG_FIELD(bool, Kind::kBool, eval.write_masks)},
  };
  return fields;
}

#undef TBG_FIELD

const Field& lookup(const std::string& key) {
  const auto& fields = registry();
  auto it = fields.find(key);
  if (it == fields.end()) throw ConfigError("unknown config key '" + key + "'");
  return it->second;
}

void assign(RunConfig& config, const std::string& key, const json& value) {
  const auto& f = lookup(key);
  bool ok = false;
  switch (f.kind) {
    case Kind::kInt: ok = value.is_number_integer(); break;
    case Kind::kReal: ok = value.is_number(); break;
    case Kind::kBool: ok = value.is_boolean(); break;
    case Kind::kText: ok = value.is_string(); break;
  }
  if (!ok) throw ConfigError("config key '" + key + "' has the wrong type: " + value.dump());
  if (f.kind == Kind::kReal) {
    f.set(config, json(value.get<double>()));
  } else {
    f.set(config, value);
  }
}

void flatten(const json& j, const std::string& prefix, std::vector<std::pair<std::string, json>>& out) {
  for (const auto& [k, v] : j.items()) {
    const auto key = prefix.empty() ? k : prefix + "." + k;
    if (v.is_object()) {
      flatten(v, key, out);
    } else {
      out.emplace_back(key, v);
    }
  }
}

void require(bool ok, const std::string& what) {
  if (!ok) throw ConfigError("invalid config: " + what);
}

}  // namespace

void RunConfig::validate() const {
  require(clip_len >= 1, "clip_len must be >= 1");
  require(resolution >= 32 && resolution % 32 == 0, "resolution must be a positive multiple of 32");
  require(batch_clips >= 1, "batch_clips must be >= 1");
  require(grad_accum >= 1, "grad_accum must be >= 1");
  require(lr > 0, "lr must be > 0");
  require(weight_decay >= 0, "weight_decay must be >= 0");
  require(grad_clip >= 0, "grad_clip must be >= 0 (0 disables clipping)");
  require(epochs >= 0, "epochs must be >= 0");
  require(max_steps >= 0, "max_steps must be >= 0");
  require(seed >= 0, "seed must be >= 0");
  require(threads >= 1, "threads must be >= 1");
  require(log_every >= 1, "log_every must be >= 1");
  require(checkpoint_every >= 0, "checkpoint_every must be >= 0");
  require(!output_dir.empty(), "output_dir must not be empty");
  require(data.source == "synthetic" || data.source == "directory", "data.source must be synthetic or directory");
  require(data.source != "directory" || !data.root.empty(), "data.root is required for directory datasets");
  require(data.synthetic_videos >= 1, "data.synthetic_videos must be >= 1");
  require(data.synthetic_frames >= 1, "data.synthetic_frames must be >= 1");
  require(data.synthetic_seed >= 0, "data.synthetic_seed must be >= 0");
  require(data.clip_stride >= 1, "data.clip_stride must be >= 1");
  require(data.flip_prob >= 0 && data.flip_prob <= 1, "data.flip_prob must be in [0, 1]");
  diffusion::parse_schedule(diffusion.schedule);
  require(diffusion.scale > 0, "diffusion.scale must be > 0");
  require(diffusion.t_train >= 1, "diffusion.t_train must be >= 1");
  require(diffusion.sample_steps >= 1 && diffusion.sample_steps <= diffusion.t_train,
          "diffusion.sample_steps must be in [1, diffusion.t_train]");
  diffusion::parse_guidance_mode(diffusion.guidance_mode);
  require(diffusion.yt_resolution == "feature" || diffusion.yt_resolution == "full",
          "diffusion.yt_resolution must be feature or full");
  metrics::parse_empty_class_policy(metrics.empty_class_policy);
  require(metrics.threshold >= 0 && metrics.threshold <= 1, "metrics.threshold must be in [0, 1]");
  require(eval.workers >= 1, "eval.workers must be >= 1");
}

diffusion::NoiseSchedule RunConfig::schedule() const {
  return diffusion::build_schedule(diffusion::parse_schedule(diffusion.schedule), diffusion.t_train);
}

diffusion::GuidanceMode RunConfig::guidance_mode() const {
  return diffusion::parse_guidance_mode(diffusion.guidance_mode);
}

metrics::EmptyClassPolicy RunConfig::empty_class_policy() const {
  return metrics::parse_empty_class_policy(metrics.empty_class_policy);
}

ModelOptions RunConfig::model_options() const {
  ModelOptions options;
  options.mode = guidance_mode();
  options.self_tile_rescale = dsa_self_tile_rescale;
  options.full_resolution_state = diffusion.yt_resolution == "full";
  return options;
}

json RunConfig::to_json() const {
  json out = json::object();
  for (const auto& [key, f] : registry()) {
    json* node = &out;
    std::string rest = key;
    for (auto dot = rest.find('.'); dot != std::string::npos; dot = rest.find('.')) {
      node = &(*node)[rest.substr(0, dot)];
      rest = rest.substr(dot + 1);
    }
    (*node)[rest] = f.get(*this);
  }
  return out;
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& [key, f] : registry()) keys.push_back(key);
  return keys;
}

RunConfig config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  std::vector<std::pair<std::string, json>> entries;
  flatten(j, "", entries);
  RunConfig config;
  for (const auto& [key, value] : entries) assign(config, key, value);
  return config;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

void apply_override(RunConfig& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key=value: " + assignment);
  const auto key = assignment.substr(0, eq);
  const auto text = assignment.substr(eq + 1);
  if (lookup(key).kind == Kind::kText) {
    assign(config, key, json(text));
    return;
  }
  json value;
  try {
    value = json::parse(text);
  } catch (const json::parse_error&) {
    throw ConfigError("override value for '" + key + "' does not parse: " + text);
  }
  assign(config, key, value);
}

}  // namespace tbgdiff
