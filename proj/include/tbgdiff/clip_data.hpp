#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <torch/torch.h>

namespace tbgdiff::data {

// An ordered run of frames with aligned shadow and boundary masks.
//   frames:     [L, 3, H, W] float32, values in [0, 1]
//   masks:      [L, H, W] uint8, shadow = 1
//   boundaries: [L, H, W] uint8, boundary = 1
struct VideoClip {
  torch::Tensor frames;
  torch::Tensor masks;
  torch::Tensor boundaries;
  std::string video_id;
  int64_t start_index = 0;
  // Number of trailing frames that repeat the last real frame to reach the clip length.
  int64_t padded = 0;

  int64_t length() const { return frames.size(0); }
  int64_t height() const { return frames.size(2); }
  int64_t width() const { return frames.size(3); }
  int64_t real_length() const { return length() - padded; }
};

// A whole video (same tensor layout as VideoClip) with the source frame names.
struct Video {
  std::string id;
  torch::Tensor frames;
  torch::Tensor masks;
  torch::Tensor boundaries;
  std::vector<std::string> names;

  int64_t length() const { return frames.size(0); }
};

// Memory frame indices read by the aggregation step for one center frame.
struct TimelinePartition {
  int64_t center = 0;
  std::vector<int64_t> short_term;
  std::vector<int64_t> long_term;
};

enum class ShapeKind { kEllipse, kPolygon };

// One dark shape moving over the background. Positions are (row, col) in pixels;
// velocity is pixels per frame, growth is the per-frame relative radius change.
struct ShapeMotion {
  ShapeKind kind = ShapeKind::kEllipse;
  double center_y = 0.0;
  double center_x = 0.0;
  double radius_y = 8.0;
  double radius_x = 8.0;
  double velocity_y = 0.0;
  double velocity_x = 0.0;
  double growth = 0.0;
  double angle = 0.0;
  double angular_velocity = 0.0;
  double darkening = 0.45;  // luminance multiplier inside the shape, in [0.3, 0.6]
  std::vector<double> vertex_radii;  // polygon only, relative radius per vertex
};

struct MotionSpec {
  std::vector<ShapeMotion> shapes;
};

// Throws ConfigError unless H and W are positive multiples of 32.
void check_frame_size(int64_t height, int64_t width);

// Random but seed-determined motion for 1-2 shapes.
MotionSpec random_motion(uint64_t seed, int64_t height, int64_t width);

// Renders a clip: smooth seeded background texture, shapes darkened by their factor.
// Masks delimit the darkened pixels exactly.
VideoClip generate_synthetic_clip(uint64_t seed, int64_t length, int64_t height, int64_t width,
                                  const MotionSpec& motion);

// Shadow pixels with at least one non-shadow 4-neighbour. Pixels outside the image
// do not count as neighbours. Accepts [H, W] or [L, H, W] binary uint8 masks.
torch::Tensor extract_boundary(const torch::Tensor& mask);

std::vector<VideoClip> make_clips(const Video& video, int64_t clip_len, int64_t stride);

// Short-term = T-1, T+1; long-term = T-k..T-2, T+2..T+k with k = max(2, (L-1)/2).
// Out-of-range indices clamp to the clip edge (self-copy), duplicates are kept.
TimelinePartition partition_timeline(int64_t clip_len, int64_t center);

VideoClip flip_clip(const VideoClip& clip, bool horizontal, bool vertical);

// Draws one horizontal and one vertical flip decision from the seed and applies
// them to every frame, mask and boundary of the clip.
VideoClip augment_clip(const VideoClip& clip, uint64_t seed, double flip_probability = 0.5);

}  // namespace tbgdiff::data
