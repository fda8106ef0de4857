#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "dfpf/tensor.hpp"

namespace dfpf {

// Interleaved 8-bit raster, 1 (gray) or 3 (RGB) channels.
struct Image8 {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<uint8_t> pixels;

  uint8_t& at(int y, int x, int c) { return pixels[(static_cast<size_t>(y) * width + x) * channels + c]; }
  uint8_t at(int y, int x, int c) const { return pixels[(static_cast<size_t>(y) * width + x) * channels + c]; }
};

// Reads any PNG, expanding palettes and dropping alpha; 16-bit is reduced to 8.
Image8 read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Image8& image);

// [3, H, W] in [0, 1]; gray input is replicated.
Tensor image_to_tensor(const Image8& image);
// Values are clamped to [0, 1] then rounded.
Image8 tensor_to_image(const Tensor& chw);
// {0, 255} raster to a [1, H, W] binary mask; anything else throws IngestionError.
Tensor label_to_mask(const Image8& image, const std::string& name);
// Binary [1, H, W] or [H, W] mask to a single-channel {0, 255} raster.
Image8 mask_to_image(const Tensor& mask);

}  // namespace dfpf
