#include "tbgdiff/dataset.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <fstream>

#include <json.hpp>

#include "tbgdiff/errors.hpp"
#include "tbgdiff/image_io.hpp"
#include "tbgdiff/seeding.hpp"

namespace tbgdiff::data {

namespace fs = std::filesystem;

namespace {

bool is_image(const fs::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".bmp";
}

std::string frame_name(int64_t i) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "%05lld", static_cast<long long>(i));
  return buf;
}

}  // namespace

std::vector<fs::path> list_images(const fs::path& dir) {
  std::vector<fs::path> out;
  std::error_code ec;
  for (const auto& e : fs::directory_iterator(dir, ec)) {
    if (e.is_regular_file() && is_image(e.path())) out.push_back(e.path());
  }
  if (ec) throw DataError("cannot list directory: " + dir.string());
  std::sort(out.begin(), out.end());
  return out;
}

Dataset Dataset::open(const fs::path& root, const DatasetLayout& layout) {
  if (!fs::is_directory(root)) throw DataError("dataset root is not a directory: " + root.string());
  std::vector<fs::path> video_dirs;
  for (const auto& e : fs::directory_iterator(root)) {
    if (e.is_directory()) video_dirs.push_back(e.path());
  }
  std::sort(video_dirs.begin(), video_dirs.end());

  Dataset ds;
  for (const auto& dir : video_dirs) {
    const auto frames_dir = dir / layout.frames_dir;
    const auto masks_dir = dir / layout.masks_dir;
    if (!fs::is_directory(frames_dir) || !fs::is_directory(masks_dir)) {
      throw DataError("video directory lacks " + layout.frames_dir + "/ or " + layout.masks_dir +
                      "/: " + dir.string());
    }
    VideoEntry entry{dir.filename().string(), list_images(frames_dir), list_images(masks_dir)};
    if (entry.frames.size() != entry.masks.size()) {
      throw DataError("frame/mask count mismatch in " + dir.string() + ": " +
                      std::to_string(entry.frames.size()) + " frames vs " +
                      std::to_string(entry.masks.size()) + " masks");
    }
    for (size_t i = 0; i < entry.frames.size(); ++i) {
      if (entry.frames[i].stem() != entry.masks[i].stem()) {
        throw DataError("mask " + entry.masks[i].string() + " does not pair with frame " +
                        entry.frames[i].string());
      }
    }
    ds.entries_.push_back(std::move(entry));
  }
  return ds;
}

Video Dataset::load(size_t i) const {
  const auto& e = entries_.at(i);
  Video v;
  v.id = e.id;
  std::vector<torch::Tensor> frames;
  std::vector<torch::Tensor> masks;
  for (size_t k = 0; k < e.frames.size(); ++k) {
    auto f = io::read_frame(e.frames[k]);
    auto m = io::read_mask(e.masks[k]);
    if (f.size(1) != m.size(0) || f.size(2) != m.size(1)) {
      throw DataError("mask size differs from frame size: " + e.masks[k].string());
    }
    if (!frames.empty() && !f.sizes().equals(frames.front().sizes())) {
      throw DataError("frame size differs from the rest of the video: " + e.frames[k].string());
    }
    frames.push_back(std::move(f));
    masks.push_back(std::move(m));
    v.names.push_back(e.frames[k].stem().string());
  }
  if (frames.empty()) {
    v.frames = torch::empty({0, 3, 0, 0});
    v.masks = torch::empty({0, 0, 0}, torch::kUInt8);
  } else {
    v.frames = torch::stack(frames);
    v.masks = torch::stack(masks);
  }
  v.boundaries = extract_boundary(v.masks);
  return v;
}

std::vector<Video> Dataset::load_all() const {
  std::vector<Video> out;
  out.reserve(entries_.size());
  for (size_t i = 0; i < entries_.size(); ++i) out.push_back(load(i));
  return out;
}

std::vector<Video> synthetic_videos(const SyntheticDatasetSpec& spec) {
  std::vector<Video> out;
  for (int64_t i = 0; i < spec.videos; ++i) {
    const uint64_t seed = mix_seed(spec.seed, static_cast<uint64_t>(i));
    auto clip = generate_synthetic_clip(seed, spec.frames, spec.height, spec.width,
                                        random_motion(seed, spec.height, spec.width));
    Video v;
    v.id = "video" + frame_name(i);
    v.frames = clip.frames;
    v.masks = clip.masks;
    v.boundaries = clip.boundaries;
    for (int64_t k = 0; k < spec.frames; ++k) v.names.push_back(frame_name(k));
    out.push_back(std::move(v));
  }
  return out;
}

void write_synthetic_dataset(const fs::path& root, const SyntheticDatasetSpec& spec) {
  const auto videos = synthetic_videos(spec);
  fs::create_directories(root);
  nlohmann::json manifest;
  manifest["generator"] = "tbgdiff-synthetic";
  manifest["seed"] = spec.seed;
  manifest["height"] = spec.height;
  manifest["width"] = spec.width;
  manifest["videos"] = nlohmann::json::array();
  for (int64_t i = 0; i < static_cast<int64_t>(videos.size()); ++i) {
    const auto& v = videos[static_cast<size_t>(i)];
    const auto frames_dir = root / v.id / "frames";
    const auto masks_dir = root / v.id / "masks";
    fs::create_directories(frames_dir);
    fs::create_directories(masks_dir);
    for (int64_t k = 0; k < v.length(); ++k) {
      const auto& name = v.names[static_cast<size_t>(k)];
      io::write_frame(frames_dir / (name + ".png"), v.frames[k]);
      io::encode_mask_file(masks_dir / (name + ".png"), v.masks[k]);
    }
    manifest["videos"].push_back({{"id", v.id},
                                  {"seed", mix_seed(spec.seed, static_cast<uint64_t>(i))},
                                  {"frames", v.length()}});
  }
  std::ofstream out(root / "meta.json");
  if (!out) throw DataError("cannot write manifest: " + (root / "meta.json").string());
  out << manifest.dump(2) << '\n';
}

}  // namespace tbgdiff::data
