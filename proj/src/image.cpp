#include "bapgan/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

#include "bapgan/errors.hpp"

namespace bapgan {
namespace {

struct FileCloser {
  void operator()(FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

[[noreturn]] void png_fail(png_structp, png_const_charp msg) { throw IngestionError(msg); }
void png_warn(png_structp, png_const_charp) {}

unsigned char quantize(float v) {
  return static_cast<unsigned char>(std::clamp(std::lround(v), 0L, 255L));
}

}  // namespace

GrayImage read_png(const std::filesystem::path& path) {
  FilePtr file(std::fopen(path.c_str(), "rb"));
  if (!file) throw IngestionError("cannot open image " + path.string());
  png_byte header[8];
  if (std::fread(header, 1, 8, file.get()) != 8 || png_sig_cmp(header, 0, 8) != 0) {
    throw IngestionError("not a PNG file: " + path.string());
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_fail, png_warn);
  png_infop info = png_create_info_struct(png);
  GrayImage out;
  try {
    png_init_io(png, file.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);
    const auto color = png_get_color_type(png, info);
    if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) {
      png_set_expand_gray_1_2_4_to_8(png);
    }
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    if (color == PNG_COLOR_TYPE_RGB || color == PNG_COLOR_TYPE_RGB_ALPHA ||
        color == PNG_COLOR_TYPE_PALETTE) {
      png_set_rgb_to_gray_fixed(png, 1, -1, -1);
    }
    png_read_update_info(png, info);
    const int w = static_cast<int>(png_get_image_width(png, info));
    const int h = static_cast<int>(png_get_image_height(png, info));
    if (png_get_rowbytes(png, info) != static_cast<size_t>(w)) {
      throw IngestionError("unsupported PNG layout: " + path.string());
    }
    std::vector<png_byte> buffer(static_cast<size_t>(w) * h);
    std::vector<png_bytep> rows(static_cast<size_t>(h));
    for (int y = 0; y < h; ++y) rows[static_cast<size_t>(y)] = buffer.data() + static_cast<size_t>(y) * w;
    png_read_image(png, rows.data());
    out = GrayImage(w, h);
    std::transform(buffer.begin(), buffer.end(), out.pixels.begin(),
                   [](png_byte b) { return static_cast<float>(b); });
  } catch (...) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw;
  }
  png_destroy_read_struct(&png, &info, nullptr);
  if (out.empty()) throw IngestionError("empty image: " + path.string());
  return out;
}

namespace {

void write_rows(png_structp png, png_infop info, const GrayImage& image) {
  png_set_IHDR(png, info, static_cast<png_uint_32>(image.width), static_cast<png_uint_32>(image.height),
               8, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_byte> row(static_cast<size_t>(image.width));
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) row[static_cast<size_t>(x)] = quantize(image.at(x, y));
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
}

}  // namespace

void write_png(const std::filesystem::path& path, const GrayImage& image) {
  if (image.empty()) throw IngestionError("refusing to write an empty image");
  FilePtr file(std::fopen(path.c_str(), "wb"));
  if (!file) throw IngestionError("cannot write image " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_fail, png_warn);
  png_infop info = png_create_info_struct(png);
  try {
    png_init_io(png, file.get());
    write_rows(png, info, image);
  } catch (...) {
    png_destroy_write_struct(&png, &info);
    throw;
  }
  png_destroy_write_struct(&png, &info);
}

std::vector<unsigned char> encode_png(const GrayImage& image) {
  if (image.empty()) throw IngestionError("refusing to encode an empty image");
  std::vector<unsigned char> bytes;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_fail, png_warn);
  png_infop info = png_create_info_struct(png);
  auto sink = [](png_structp p, png_bytep data, png_size_t n) {
    auto* out = static_cast<std::vector<unsigned char>*>(png_get_io_ptr(p));
    out->insert(out->end(), data, data + n);
  };
  try {
    png_set_write_fn(png, &bytes, sink, nullptr);
    write_rows(png, info, image);
  } catch (...) {
    png_destroy_write_struct(&png, &info);
    throw;
  }
  png_destroy_write_struct(&png, &info);
  return bytes;
}

GrayImage resize_bilinear(const GrayImage& image, int width, int height) {
  if (image.empty()) throw IngestionError("cannot resize an empty image");
  GrayImage out(width, height);
  const double sx = static_cast<double>(image.width) / width;
  const double sy = static_cast<double>(image.height) / height;
  for (int y = 0; y < height; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, image.height - 1.0);
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, image.height - 1);
    const double wy = fy - y0;
    for (int x = 0; x < width; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, image.width - 1.0);
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, image.width - 1);
      const double wx = fx - x0;
      const double top = image.at(x0, y0) * (1 - wx) + image.at(x1, y0) * wx;
      const double bottom = image.at(x0, y1) * (1 - wx) + image.at(x1, y1) * wx;
      out.at(x, y) = static_cast<float>(top * (1 - wy) + bottom * wy);
    }
  }
  return out;
}

torch::Tensor to_model_tensor(const GrayImage& image) {
  if (image.empty()) throw IngestionError("empty image");
  auto t = torch::from_blob(const_cast<float*>(image.pixels.data()), {1, image.height, image.width},
                            torch::kFloat32)
               .clone();
  return t / 127.5 - 1.0;
}

GrayImage from_model_tensor(const torch::Tensor& image) {
  auto t = image.detach().to(torch::kFloat32).contiguous();
  if (t.dim() == 3) t = t.squeeze(0);
  if (t.dim() != 2) throw DimensionError("from_model_tensor expects an H x W image");
  GrayImage out(static_cast<int>(t.size(1)), static_cast<int>(t.size(0)));
  auto raw = ((t.clamp(-1.0, 1.0) + 1.0) * 127.5).contiguous();
  std::copy(raw.data_ptr<float>(), raw.data_ptr<float>() + raw.numel(), out.pixels.begin());
  return out;
}

}  // namespace bapgan
