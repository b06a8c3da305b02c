#include "tbgdiff/image_io.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "tbgdiff/errors.hpp"

namespace tbgdiff::io {

namespace fs = std::filesystem;

torch::Tensor read_frame(const fs::path& path) {
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw DataError("cannot read frame image: " + path.string());
  const auto t = torch::from_blob(bgr.data, {bgr.rows, bgr.cols, 3}, torch::kUInt8)
                     .flip({2})
                     .permute({2, 0, 1})
                     .to(torch::kFloat32)
                     .div(255.0f);
  return t.contiguous();
}

torch::Tensor read_mask(const fs::path& path) {
  cv::Mat gray = cv::imread(path.string(), cv::IMREAD_GRAYSCALE);
  if (gray.empty()) throw DataError("cannot read mask image: " + path.string());
  return torch::from_blob(gray.data, {gray.rows, gray.cols}, torch::kUInt8).ge(128).to(torch::kUInt8);
}

void write_frame(const fs::path& path, const torch::Tensor& frame) {
  TORCH_CHECK(frame.dim() == 3 && frame.size(0) == 3, "write_frame expects [3, H, W]");
  auto hwc = frame.detach()
                 .to(torch::kFloat32)
                 .clamp(0.0, 1.0)
                 .mul(255.0)
                 .round()
                 .to(torch::kUInt8)
                 .flip({0})
                 .permute({1, 2, 0})
                 .contiguous();
  cv::Mat bgr(static_cast<int>(hwc.size(0)), static_cast<int>(hwc.size(1)), CV_8UC3, hwc.data_ptr());
  if (!cv::imwrite(path.string(), bgr)) throw DataError("cannot write image: " + path.string());
}

void encode_mask_file(const fs::path& path, const torch::Tensor& mask) {
  TORCH_CHECK(mask.dim() == 2, "encode_mask_file expects [H, W]");
  auto bytes = mask.detach().ne(0).to(torch::kUInt8).mul(255).contiguous();
  cv::Mat gray(static_cast<int>(bytes.size(0)), static_cast<int>(bytes.size(1)), CV_8UC1, bytes.data_ptr());
  if (!cv::imwrite(path.string(), gray)) throw DataError("cannot write mask: " + path.string());
}

}  // namespace tbgdiff::io
