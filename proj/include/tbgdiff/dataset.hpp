#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "tbgdiff/clip_data.hpp"

namespace tbgdiff::data {

struct DatasetLayout {
  std::string frames_dir = "frames";
  std::string masks_dir = "masks";
};

struct VideoEntry {
  std::string id;
  std::vector<std::filesystem::path> frames;
  std::vector<std::filesystem::path> masks;
};

// Directory-backed dataset: `<root>/<video_id>/frames/*` paired by sorted name with
// `<root>/<video_id>/masks/*.png`. Pairing is checked when the dataset is opened; pixels
// are read lazily by load(), so disjoint videos can be loaded from separate workers.
class Dataset {
 public:
  static Dataset open(const std::filesystem::path& root, const DatasetLayout& layout = {});

  size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const VideoEntry& entry(size_t i) const { return entries_.at(i); }

  Video load(size_t i) const;
  std::vector<Video> load_all() const;

 private:
  std::vector<VideoEntry> entries_;
};

// Lists frame images (png/jpg/jpeg/bmp) of a directory in name order.
std::vector<std::filesystem::path> list_images(const std::filesystem::path& dir);

struct SyntheticDatasetSpec {
  int64_t videos = 8;
  int64_t frames = 5;
  int64_t height = 64;
  int64_t width = 64;
  uint64_t seed = 0;
};

// In-memory synthetic videos; video i is generated from mix_seed(seed, i).
std::vector<Video> synthetic_videos(const SyntheticDatasetSpec& spec);

// Writes synthetic videos in the dataset layout plus a meta.json manifest.
void write_synthetic_dataset(const std::filesystem::path& root, const SyntheticDatasetSpec& spec);

}  // namespace tbgdiff::data
