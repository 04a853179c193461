#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "crossray/tensor.hpp"

namespace crossray {

/// Planar (C x H x W) image with values nominally in [0, 1].
struct Image {
  std::size_t channels = 3;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> data;

  Image() = default;
  Image(std::size_t c, std::size_t h, std::size_t w, double fill = 0.0)
      : channels(c), height(h), width(w), data(c * h * w, fill) {}

  double& at(std::size_t c, std::size_t r, std::size_t q) { return data[(c * height + r) * width + q]; }
  double at(std::size_t c, std::size_t r, std::size_t q) const { return data[(c * height + r) * width + q]; }
  std::size_t pixels() const noexcept { return height * width; }

  bool operator==(const Image&) const = default;

  template <std::floating_point T>
  Tensor<T> to_tensor() const {
    return Tensor<T>({channels, height, width}, std::vector<T>(data.begin(), data.end()));
  }

  template <std::floating_point T>
  static Image from_tensor(const Tensor<T>& t) {
    if (t.rank() != 3) throw ShapeError("image: expected C x H x W tensor, got " + shape_str(t.shape()));
    Image img(t.dim(0), t.dim(1), t.dim(2));
    std::copy(t.values().begin(), t.values().end(), img.data.begin());
    return img;
  }

  /// Top-left aligned crop.
  Image crop(std::size_t row, std::size_t col, std::size_t h, std::size_t w) const {
    if (row + h > height || col + w > width) throw ShapeError("image: crop outside bounds");
    Image out(channels, h, w);
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t r = 0; r < h; ++r)
        for (std::size_t q = 0; q < w; ++q) out.at(c, r, q) = at(c, row + r, col + q);
    return out;
  }
};

inline std::uint8_t quantize_u8(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

/// Writes an 8-bit PNG (RGB for 3 channels, grayscale for 1), no alpha.
inline void write_png(const std::filesystem::path& path, const Image& img) {
  if (img.channels != 1 && img.channels != 3) throw IoError("png: unsupported channel count for " + path.string());
  png_image out{};
  out.version = PNG_IMAGE_VERSION;
  out.width = static_cast<png_uint_32>(img.width);
  out.height = static_cast<png_uint_32>(img.height);
  out.format = img.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  std::vector<std::uint8_t> buf(img.pixels() * img.channels);
  for (std::size_t r = 0; r < img.height; ++r)
    for (std::size_t q = 0; q < img.width; ++q)
      for (std::size_t c = 0; c < img.channels; ++c)
        buf[(r * img.width + q) * img.channels + c] = quantize_u8(img.at(c, r, q));
  if (!png_image_write_to_file(&out, path.string().c_str(), 0, buf.data(), 0, nullptr)) {
    throw IoError("png: cannot write " + path.string() + ": " + out.message);
  }
}

/// Reads a PNG as `channels` (1 or 3) planes scaled to [0, 1].
inline Image read_png(const std::filesystem::path& path, std::size_t channels = 3) {
  png_image in{};
  in.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&in, path.string().c_str())) {
    throw IoError("png: cannot read " + path.string() + ": " + in.message);
  }
  in.format = channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(in));
  if (!png_image_finish_read(&in, nullptr, buf.data(), 0, nullptr)) {
    throw IoError("png: cannot decode " + path.string() + ": " + in.message);
  }
  Image img(channels, in.height, in.width);
  for (std::size_t r = 0; r < img.height; ++r)
    for (std::size_t q = 0; q < img.width; ++q)
      for (std::size_t c = 0; c < channels; ++c)
        img.at(c, r, q) = buf[(r * img.width + q) * channels + c] / 255.0;
  return img;
}

/// Round-trips values through 8-bit quantization (what a PNG stores).
inline Image quantized(Image img) {
  for (auto& v : img.data) v = quantize_u8(v) / 255.0;
  return img;
}

}  // namespace crossray
