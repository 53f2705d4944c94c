#include "stainshift/image_io.hpp"

#include <png.h>

#include <cstdio>
#include <memory>
#include <stdexcept>
#include <vector>

namespace stainshift::imageio {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

torch::Tensor quantize(const torch::Tensor& t) {
  TORCH_CHECK(torch::isfinite(t).all().item<bool>(),
              "png write: non-finite pixel values");
  return (t.to(torch::kFloat64) * 255.0).round().clamp(0.0, 255.0).to(torch::kUInt8);
}

void write_png(const std::string& path, const torch::Tensor& hwc_u8, int color_type) {
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw std::runtime_error("png write: cannot open " + path);

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw std::runtime_error("png write: allocation failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw std::runtime_error("png write: allocation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("png write: libpng failure for " + path);
  }

  const int height = static_cast<int>(hwc_u8.size(0));
  const int width = static_cast<int>(hwc_u8.size(1));
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, width, height, 8, color_type, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);

  auto contiguous = hwc_u8.contiguous();
  auto* data = contiguous.data_ptr<std::uint8_t>();
  const int stride = width * (color_type == PNG_COLOR_TYPE_RGB ? 3 : 1);
  std::vector<png_bytep> rows(height);
  for (int y = 0; y < height; ++y) rows[y] = data + y * stride;
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

torch::Tensor read_png(const std::string& path, bool want_rgb) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw std::runtime_error("png read: cannot open " + path);

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw std::runtime_error("png read: allocation failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw std::runtime_error("png read: allocation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("png read: libpng failure for " + path);
  }

  png_init_io(png, fp.get());
  png_read_info(png, info);

  // Normalize everything to 8-bit, strip alpha, expand palette/gray-low-bit.
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_set_palette_to_rgb(png);
  png_set_expand_gray_1_2_4_to_8(png);
  if (want_rgb) png_set_gray_to_rgb(png);
  png_read_update_info(png, info);

  const int height = static_cast<int>(png_get_image_height(png, info));
  const int width = static_cast<int>(png_get_image_width(png, info));
  const int channels = static_cast<int>(png_get_channels(png, info));
  if ((want_rgb && channels != 3) || (!want_rgb && channels != 1)) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("png read: unexpected channel count in " + path);
  }

  auto out = torch::empty({height, width, channels}, torch::kUInt8);
  auto* data = out.data_ptr<std::uint8_t>();
  std::vector<png_bytep> rows(height);
  for (int y = 0; y < height; ++y) rows[y] = data + y * width * channels;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return out;
}

}  // namespace

void write_rgb8(const std::string& path, const torch::Tensor& chw) {
  TORCH_CHECK(chw.dim() == 3 && chw.size(0) == 3,
              "write_rgb8: expected (3, H, W), got ", chw.sizes());
  auto hwc = quantize(chw).permute({1, 2, 0});
  write_png(path, hwc, PNG_COLOR_TYPE_RGB);
}

void write_gray8(const std::string& path, const torch::Tensor& hw) {
  TORCH_CHECK(hw.dim() == 2, "write_gray8: expected (H, W), got ", hw.sizes());
  write_png(path, quantize(hw), PNG_COLOR_TYPE_GRAY);
}

torch::Tensor read_rgb8(const std::string& path) {
  return read_rgb8_bytes(path).to(torch::kFloat32) / 255.0f;
}

torch::Tensor read_rgb8_bytes(const std::string& path) {
  return read_png(path, /*want_rgb=*/true).permute({2, 0, 1}).contiguous();
}

torch::Tensor read_gray8(const std::string& path) {
  return read_png(path, /*want_rgb=*/false).squeeze(-1).to(torch::kFloat32) / 255.0f;
}

}  // namespace stainshift::imageio
