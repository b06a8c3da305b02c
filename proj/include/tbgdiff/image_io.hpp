#pragma once

#include <filesystem>

#include <torch/torch.h>

namespace tbgdiff::io {

// Reads a colour image as [3, H, W] float32 RGB in [0, 1]. Throws DataError naming the file.
torch::Tensor read_frame(const std::filesystem::path& path);

// Reads an 8-bit grayscale mask and binarises it (>= 128 is shadow). Returns [H, W] uint8.
torch::Tensor read_mask(const std::filesystem::path& path);

// Writes [3, H, W] RGB in [0, 1] as an 8-bit image (format from the extension).
void write_frame(const std::filesystem::path& path, const torch::Tensor& frame);

// Writes a binary [H, W] mask as 8-bit grayscale PNG, shadow = 255.
void encode_mask_file(const std::filesystem::path& path, const torch::Tensor& mask);

}  // namespace tbgdiff::io
