#pragma once

#include <filesystem>
#include <vector>

#include <torch/torch.h>

namespace bapgan {

// Single-channel image in raw intensity units [0, 255], row-major.
struct GrayImage {
  int width = 0;
  int height = 0;
  std::vector<float> pixels;

  GrayImage() = default;
  GrayImage(int w, int h, float fill = 0.0f)
      : width(w), height(h), pixels(static_cast<size_t>(w) * static_cast<size_t>(h), fill) {}

  float& at(int x, int y) { return pixels[static_cast<size_t>(y) * width + x]; }
  float at(int x, int y) const { return pixels[static_cast<size_t>(y) * width + x]; }
  bool empty() const { return pixels.empty(); }
};

// 8-bit grayscale PNG. Colour inputs are converted to luminance on read.
// Throws IngestionError.
GrayImage read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const GrayImage& image);
std::vector<unsigned char> encode_png(const GrayImage& image);

// Bilinear resampling with half-pixel centres.
GrayImage resize_bilinear(const GrayImage& image, int width, int height);

// [0, 255] -> [-1, 1] via v / 127.5 - 1; returns 1 x H x W float32.
torch::Tensor to_model_tensor(const GrayImage& image);
// Inverse mapping of a (1 x) H x W tensor in [-1, 1]; values are clipped.
GrayImage from_model_tensor(const torch::Tensor& image);

}  // namespace bapgan
