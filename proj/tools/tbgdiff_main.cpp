// Command-line front end: train, eval, infer, synth.

#include <cstdio>
#include <iostream>
#include <regex>

#include <CLI11.hpp>

#include "tbgdiff/config.hpp"
#include "tbgdiff/dataset.hpp"
#include "tbgdiff/errors.hpp"
#include "tbgdiff/harness.hpp"

namespace fs = std::filesystem;
using namespace tbgdiff;

namespace {

RunConfig resolve_config(const std::string& path, const std::vector<std::string>& overrides) {
  RunConfig config = path.empty() ? RunConfig{} : load_config(path);
  for (const auto& o : overrides) apply_override(config, o);
  config.validate();
  return config;
}

void print_summary(const metrics::MetricReport& report) {
  const auto& a = report.all;
  std::printf("frames %lld  mae %.6f  iou %.6f  fbeta %.6f  ber %.4f  sber %.4f  nber %.4f\n",
              static_cast<long long>(a.frames), a.mae, a.iou, a.fbeta, a.ber, a.sber, a.nber);
}

int code(ExitCode c) { return static_cast<int>(c); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tbgdiff: video shadow detection with timeline-guided mask diffusion"};
  app.require_subcommand(1);

  std::string config_path, checkpoint_path, data_dir, frames_dir, out_dir, resume_path, size = "64x64";
  std::vector<std::string> overrides;
  int64_t videos = 8, frames = 5, seed = 0;

  auto* train_cmd = app.add_subcommand("train", "train a model");
  train_cmd->add_option("--config", config_path, "JSON config file (flat or nested keys)");
  train_cmd->add_option("--override", overrides, "key=value, repeatable");
  train_cmd->add_option("--resume", resume_path, "continue from a checkpoint");

  auto* eval_cmd = app.add_subcommand("eval", "score a checkpoint on a dataset directory");
  eval_cmd->add_option("--config", config_path, "JSON config file")->required();
  eval_cmd->add_option("--checkpoint", checkpoint_path)->required();
  eval_cmd->add_option("--data", data_dir, "dataset root (<video>/frames, <video>/masks)")->required();
  eval_cmd->add_option("--out", out_dir, "report directory (default <output_dir>/eval)");
  eval_cmd->add_option("--override", overrides, "key=value, repeatable");

  auto* infer_cmd = app.add_subcommand("infer", "write masks for a directory of frames");
  infer_cmd->add_option("--checkpoint", checkpoint_path)->required();
  infer_cmd->add_option("--frames", frames_dir)->required();
  infer_cmd->add_option("--out", out_dir)->required();

  auto* synth_cmd = app.add_subcommand("synth", "write a synthetic dataset");
  synth_cmd->add_option("--out", out_dir)->required();
  synth_cmd->add_option("--videos", videos)->check(CLI::PositiveNumber);
  synth_cmd->add_option("--frames", frames)->check(CLI::PositiveNumber);
  synth_cmd->add_option("--size", size, "HxW");
  synth_cmd->add_option("--seed", seed)->check(CLI::NonNegativeNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : code(ExitCode::kConfig);
  }

  try {
    if (*train_cmd) {
      const auto config = resolve_config(config_path, overrides);
      std::optional<fs::path> resume;
      if (!resume_path.empty()) resume = resume_path;
      const auto ckpt = train(config, resume);
      std::printf("trained %lld steps; final checkpoint %s\n", static_cast<long long>(ckpt.step),
                  (fs::path(config.output_dir) / "final.tbg").c_str());
    } else if (*eval_cmd) {
      auto config = resolve_config(config_path, overrides);
      const auto ckpt = load_checkpoint(checkpoint_path);
      const auto videos = data::Dataset::open(data_dir).load_all();
      const fs::path out = out_dir.empty() ? fs::path(config.output_dir) / "eval" : fs::path(out_dir);
      print_summary(evaluate(config, ckpt, videos, out));
      std::printf("report %s\n", (out / "metrics.csv").c_str());
    } else if (*infer_cmd) {
      const auto written = infer(load_checkpoint(checkpoint_path), frames_dir, out_dir);
      std::printf("wrote %zu masks to %s\n", written.size(), out_dir.c_str());
    } else if (*synth_cmd) {
      std::smatch m;
      static const std::regex pattern(R"((\d+)x(\d+))");
      if (!std::regex_match(size, m, pattern)) throw ConfigError("--size must look like HxW, got " + size);
      data::SyntheticDatasetSpec spec;
      spec.videos = videos;
      spec.frames = frames;
      spec.height = std::stoll(m[1].str());
      spec.width = std::stoll(m[2].str());
      spec.seed = static_cast<uint64_t>(seed);
      data::write_synthetic_dataset(out_dir, spec);
      std::printf("wrote %lld videos to %s\n", static_cast<long long>(videos), out_dir.c_str());
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return code(ExitCode::kConfig);
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return code(ExitCode::kData);
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return code(ExitCode::kNumerical);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return code(ExitCode::kFailure);
  }
  return code(ExitCode::kSuccess);
}
