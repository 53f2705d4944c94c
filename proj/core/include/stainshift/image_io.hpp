#pragma once

// 8-bit PNG encode/decode for patches and masks. Pixel contract: writing
// stores round(v * 255) per channel, reading returns value / 255 exactly.

#include <string>

#include <torch/torch.h>

namespace stainshift::imageio {

// (3, H, W) in [0, 1] -> 8-bit RGB PNG.
void write_rgb8(const std::string& path, const torch::Tensor& chw);

// (H, W) in [0, 1] -> 8-bit grayscale PNG (masks use 0 and 255 only).
void write_gray8(const std::string& path, const torch::Tensor& hw);

// 8-bit RGB (or gray, expanded) PNG -> (3, H, W) float32 with values v/255.
torch::Tensor read_rgb8(const std::string& path);

// As read_rgb8 but keeps raw bytes: (3, H, W) uint8.
torch::Tensor read_rgb8_bytes(const std::string& path);

// 8-bit grayscale PNG -> (H, W) float32 with values v/255.
torch::Tensor read_gray8(const std::string& path);

}  // namespace stainshift::imageio
