#include "tbgdiff/clip_data.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "tbgdiff/errors.hpp"
#include "tbgdiff/seeding.hpp"

namespace tbgdiff::data {

namespace {

constexpr int kTextureWaves = 3;

struct Wave {
  double freq_y, freq_x, phase, amplitude;
};

torch::Tensor render_background(Rng& rng, int64_t height, int64_t width) {
  auto bg = torch::empty({3, height, width}, torch::kFloat32);
  auto acc = bg.accessor<float, 3>();
  for (int64_t c = 0; c < 3; ++c) {
    const double base = rng.uniform(0.45, 0.8);
    std::array<Wave, kTextureWaves> waves{};
    for (auto& w : waves) {
      w = {rng.uniform(0.5, 3.0), rng.uniform(0.5, 3.0), rng.uniform(0.0, 2 * std::numbers::pi),
           rng.uniform(0.02, 0.06)};
    }
    for (int64_t y = 0; y < height; ++y) {
      for (int64_t x = 0; x < width; ++x) {
        double v = base;
        for (const auto& w : waves) {
          v += w.amplitude * std::sin(2 * std::numbers::pi *
                                          (w.freq_y * static_cast<double>(y) / height +
                                           w.freq_x * static_cast<double>(x) / width) +
                                      w.phase);
        }
        acc[c][y][x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return bg;
}

bool inside_polygon(const std::vector<std::pair<double, double>>& poly, double y, double x) {
  bool inside = false;
  for (size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    const auto [yi, xi] = poly[i];
    const auto [yj, xj] = poly[j];
    if ((yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi) inside = !inside;
  }
  return inside;
}

// Rasterises one shape at a given frame into a darkening-factor image (1 = untouched).
void rasterize(const ShapeMotion& s, int64_t frame, torch::TensorAccessor<float, 2> factor) {
  const double f = static_cast<double>(frame);
  const double cy = s.center_y + s.velocity_y * f;
  const double cx = s.center_x + s.velocity_x * f;
  const double grow = std::max(0.05, 1.0 + s.growth * f);
  const double ry = s.radius_y * grow;
  const double rx = s.radius_x * grow;
  const double theta = s.angle + s.angular_velocity * f;
  const double ct = std::cos(theta);
  const double st = std::sin(theta);
  const int64_t height = factor.size(0);
  const int64_t width = factor.size(1);

  std::vector<std::pair<double, double>> poly;
  if (s.kind == ShapeKind::kPolygon) {
    const auto n = s.vertex_radii.size();
    for (size_t k = 0; k < n; ++k) {
      const double a = theta + 2 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(n);
      poly.emplace_back(cy + ry * s.vertex_radii[k] * std::sin(a), cx + rx * s.vertex_radii[k] * std::cos(a));
    }
  }

  for (int64_t y = 0; y < height; ++y) {
    for (int64_t x = 0; x < width; ++x) {
      bool in = false;
      if (s.kind == ShapeKind::kEllipse) {
        const double dy = static_cast<double>(y) - cy;
        const double dx = static_cast<double>(x) - cx;
        const double u = (dx * ct + dy * st) / rx;
        const double v = (-dx * st + dy * ct) / ry;
        in = u * u + v * v <= 1.0;
      } else {
        in = inside_polygon(poly, static_cast<double>(y), static_cast<double>(x));
      }
      if (in) factor[y][x] = std::min(factor[y][x], static_cast<float>(s.darkening));
    }
  }
}

}  // namespace

void check_frame_size(int64_t height, int64_t width) {
  if (height <= 0 || width <= 0 || height % 32 != 0 || width % 32 != 0) {
    throw ConfigError("frame size " + std::to_string(height) + "x" + std::to_string(width) +
                      " must be a positive multiple of 32 in both dimensions");
  }
}

MotionSpec random_motion(uint64_t seed, int64_t height, int64_t width) {
  Rng rng(mix_seed(seed, 0x5eed));
  MotionSpec spec;
  const double extent = static_cast<double>(std::min(height, width));
  const int64_t count = rng.integer(1, 2);
  for (int64_t i = 0; i < count; ++i) {
    ShapeMotion s;
    s.kind = rng.bernoulli(0.5) ? ShapeKind::kEllipse : ShapeKind::kPolygon;
    s.radius_y = rng.uniform(0.14, 0.26) * extent;
    s.radius_x = rng.uniform(0.14, 0.26) * extent;
    s.center_y = rng.uniform(0.3, 0.7) * static_cast<double>(height);
    s.center_x = rng.uniform(0.3, 0.7) * static_cast<double>(width);
    s.velocity_y = rng.uniform(-1.5, 1.5) * extent / 64.0;
    s.velocity_x = rng.uniform(-1.5, 1.5) * extent / 64.0;
    s.growth = rng.uniform(-0.03, 0.03);
    s.angle = rng.uniform(0.0, std::numbers::pi);
    s.angular_velocity = rng.uniform(-0.1, 0.1);
    s.darkening = rng.uniform(0.3, 0.6);
    if (s.kind == ShapeKind::kPolygon) {
      const int64_t vertices = rng.integer(5, 8);
      for (int64_t k = 0; k < vertices; ++k) s.vertex_radii.push_back(rng.uniform(0.75, 1.0));
    }
    spec.shapes.push_back(std::move(s));
  }
  return spec;
}

VideoClip generate_synthetic_clip(uint64_t seed, int64_t length, int64_t height, int64_t width,
                                  const MotionSpec& motion) {
  if (length < 1) throw ConfigError("synthetic clip length must be at least 1");
  check_frame_size(height, width);
  for (const auto& s : motion.shapes) {
    if (s.darkening <= 0.0 || s.darkening >= 1.0) throw ConfigError("darkening factor must lie in (0, 1)");
    if (s.kind == ShapeKind::kPolygon && s.vertex_radii.size() < 3) {
      throw ConfigError("polygon shapes need at least 3 vertices");
    }
  }

  Rng rng(mix_seed(seed, 0x7e47));
  const auto background = render_background(rng, height, width);

  VideoClip clip;
  clip.video_id = "synthetic-" + std::to_string(seed);
  clip.frames = torch::empty({length, 3, height, width}, torch::kFloat32);
  clip.masks = torch::empty({length, height, width}, torch::kUInt8);
  for (int64_t f = 0; f < length; ++f) {
    auto factor = torch::ones({height, width}, torch::kFloat32);
    auto acc = factor.accessor<float, 2>();
    for (const auto& s : motion.shapes) rasterize(s, f, acc);
    clip.frames[f] = background * factor.unsqueeze(0);
    clip.masks[f] = factor.lt(1.0f).to(torch::kUInt8);
  }
  clip.boundaries = extract_boundary(clip.masks);
  return clip;
}

torch::Tensor extract_boundary(const torch::Tensor& mask) {
  TORCH_CHECK(mask.dim() == 2 || mask.dim() == 3, "extract_boundary expects [H, W] or [L, H, W]");
  const auto m = mask.to(torch::kBool);
  // Replicate padding makes out-of-image neighbours equal to the pixel itself.
  auto padded = torch::nn::functional::pad(m.to(torch::kFloat32).unsqueeze(m.dim() == 2 ? 0 : 1),
                                           torch::nn::functional::PadFuncOptions({1, 1, 1, 1})
                                               .mode(torch::kReplicate))
                    .to(torch::kBool);
  if (m.dim() == 2) padded = padded.squeeze(0);
  else padded = padded.squeeze(1);
  using torch::indexing::Slice;
  const auto up = padded.index({"...", Slice(0, -2), Slice(1, -1)});
  const auto down = padded.index({"...", Slice(2, torch::indexing::None), Slice(1, -1)});
  const auto left = padded.index({"...", Slice(1, -1), Slice(0, -2)});
  const auto right = padded.index({"...", Slice(1, -1), Slice(2, torch::indexing::None)});
  const auto touches_background = up.logical_not() | down.logical_not() | left.logical_not() |
                                  right.logical_not();
  return (m & touches_background).to(torch::kUInt8);
}

std::vector<VideoClip> make_clips(const Video& video, int64_t clip_len, int64_t stride) {
  if (clip_len < 1 || stride < 1) throw std::invalid_argument("clip_len and stride must be >= 1");
  std::vector<VideoClip> clips;
  const int64_t n = video.length();
  if (n == 0) return clips;

  auto window = [&](int64_t start) {
    const int64_t real = std::min(clip_len, n - start);
    auto idx = torch::arange(start, start + clip_len, torch::kLong).clamp_max(n - 1);
    VideoClip c;
    c.frames = video.frames.index_select(0, idx);
    c.masks = video.masks.index_select(0, idx);
    c.boundaries = video.boundaries.index_select(0, idx);
    c.video_id = video.id;
    c.start_index = start;
    c.padded = clip_len - real;
    return c;
  };

  int64_t start = 0;
  int64_t covered = -1;
  for (; start + clip_len <= n; start += stride) {
    clips.push_back(window(start));
    covered = start + clip_len - 1;
  }
  if (covered < n - 1 && start < n) clips.push_back(window(start));
  return clips;
}

TimelinePartition partition_timeline(int64_t clip_len, int64_t center) {
  if (clip_len < 1 || center < 0 || center >= clip_len) {
    throw std::invalid_argument("partition center " + std::to_string(center) +
                                " outside clip of length " + std::to_string(clip_len));
  }
  auto clamp = [&](int64_t i) { return std::clamp<int64_t>(i, 0, clip_len - 1); };
  TimelinePartition p;
  p.center = center;
  p.short_term = {clamp(center - 1), clamp(center + 1)};
  const int64_t reach = std::max<int64_t>(2, (clip_len - 1) / 2);
  for (int64_t off = reach; off >= 2; --off) p.long_term.push_back(clamp(center - off));
  for (int64_t off = 2; off <= reach; ++off) p.long_term.push_back(clamp(center + off));
  return p;
}

VideoClip flip_clip(const VideoClip& clip, bool horizontal, bool vertical) {
  std::vector<int64_t> image_dims;
  std::vector<int64_t> mask_dims;
  if (vertical) {
    image_dims.push_back(2);
    mask_dims.push_back(1);
  }
  if (horizontal) {
    image_dims.push_back(3);
    mask_dims.push_back(2);
  }
  if (image_dims.empty()) return clip;
  VideoClip out = clip;
  out.frames = clip.frames.flip(image_dims);
  out.masks = clip.masks.flip(mask_dims);
  out.boundaries = clip.boundaries.flip(mask_dims);
  return out;
}

VideoClip augment_clip(const VideoClip& clip, uint64_t seed, double flip_probability) {
  Rng rng(mix_seed(seed, 0xf11b));
  const bool horizontal = rng.bernoulli(flip_probability);
  const bool vertical = rng.bernoulli(flip_probability);
  return flip_clip(clip, horizontal, vertical);
}

}  // namespace tbgdiff::data
