#pragma once

// Image containers, PNG codecs and resampling helpers. Images are 1 x 3 x H x W
// tensors normalized per channel; label maps are 8-bit.

#include <array>
#include <filesystem>

#include "dosr/tensor.hpp"

namespace dosr {

struct Normalization {
  std::array<double, 3> mean{0.485, 0.456, 0.406};
  std::array<double, 3> std{0.229, 0.224, 0.225};
};

/// Normalizes an interleaved 8-bit RGB buffer (H * W * 3).
Tensor image_from_rgb8(const std::uint8_t* rgb, int height, int width, const Normalization& norm);
/// Inverse of image_from_rgb8 with rounding and clamping to [0, 255].
std::vector<std::uint8_t> image_to_rgb8(const Tensor& image, const Normalization& norm);

Tensor read_rgb_png(const std::filesystem::path& path, const Normalization& norm);
void write_rgb_png(const std::filesystem::path& path, const Tensor& image, const Normalization& norm);
void write_rgb8_png(const std::filesystem::path& path, const std::vector<std::uint8_t>& rgb, int height, int width);

LabelMap read_label_png(const std::filesystem::path& path);
void write_label_png(const std::filesystem::path& path, const LabelMap& labels);

enum class Interp { kNearest, kBilinear, kArea };

/// Resizes a 1 x C x H x W image tensor.
Tensor resize_image(const Tensor& image, int height, int width, Interp interp = Interp::kBilinear);
LabelMap resize_labels(const LabelMap& labels, int height, int width);

/// Sub-image [y0, y0 + h) x [x0, x0 + w).
Tensor crop_image(const Tensor& image, int y0, int x0, int height, int width);
LabelMap crop_labels(const LabelMap& labels, int y0, int x0, int height, int width);

Tensor flip_image(const Tensor& image);
LabelMap flip_labels(const LabelMap& labels);

/// Stacks 1 x C x H x W images into a batch.
Tensor stack_images(const std::vector<const Tensor*>& images);

}  // namespace dosr
