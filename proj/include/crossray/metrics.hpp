#pragma once

#include <cmath>
#include <vector>

#include "crossray/image.hpp"

namespace crossray::metrics {

inline void require_same_shape(const Image& a, const Image& b, const char* what) {
  if (a.channels != b.channels || a.height != b.height || a.width != b.width) {
    throw ShapeError(std::string(what) + ": image shapes differ (" + std::to_string(a.channels) + "x" +
                     std::to_string(a.height) + "x" + std::to_string(a.width) + " vs " + std::to_string(b.channels) + "x" +
                     std::to_string(b.height) + "x" + std::to_string(b.width) + ")");
  }
}

/// Peak 1.0; 99 dB when the images are (numerically) identical.
inline double psnr(const Image& a, const Image& b) {
  require_same_shape(a, b, "psnr");
  double se = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const double d = a.data[i] - b.data[i];
    se += d * d;
  }
  const double mse = se / static_cast<double>(a.data.size());
  if (mse < 1e-10) return 99.0;
  return std::min(99.0, 10.0 * std::log10(1.0 / mse));
}

inline std::vector<double> luma(const Image& img) {
  if (img.channels == 1) return img.data;
  if (img.channels != 3) throw ShapeError("luma: expected 1 or 3 channels");
  std::vector<double> y(img.pixels());
  for (std::size_t i = 0; i < y.size(); ++i) {
    y[i] = 0.299 * img.data[i] + 0.587 * img.data[img.pixels() + i] + 0.114 * img.data[2 * img.pixels() + i];
  }
  return y;
}

/// Mean SSIM over every 8x8 window (stride 1, uniform weights, population
/// moments) of the luma channel; C1 = 0.01^2, C2 = 0.03^2.
inline double ssim(const Image& a, const Image& b, std::size_t window = 8) {
  require_same_shape(a, b, "ssim");
  if (a.height < window || a.width < window) throw ShapeError("ssim: image smaller than the window");
  const auto x = luma(a), y = luma(b);
  const std::size_t w = a.width;
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03, n = static_cast<double>(window * window);
  double total = 0;
  std::size_t count = 0;
  for (std::size_t r = 0; r + window <= a.height; ++r)
    for (std::size_t q = 0; q + window <= a.width; ++q) {
      double mx = 0, my = 0;
      for (std::size_t i = 0; i < window; ++i)
        for (std::size_t j = 0; j < window; ++j) {
          mx += x[(r + i) * w + q + j];
          my += y[(r + i) * w + q + j];
        }
      mx /= n;
      my /= n;
      double vx = 0, vy = 0, cxy = 0;
      for (std::size_t i = 0; i < window; ++i)
        for (std::size_t j = 0; j < window; ++j) {
          const double dx = x[(r + i) * w + q + j] - mx, dy = y[(r + i) * w + q + j] - my;
          vx += dx * dx;
          vy += dy * dy;
          cxy += dx * dy;
        }
      vx /= n;
      vy /= n;
      cxy /= n;
      total += ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
      ++count;
    }
  return total / static_cast<double>(count);
}

/// IoU of {a > 0.5} and {b > 0.5}; 1 when both are empty.
inline double mask_iou(const Image& a, const Image& b) {
  require_same_shape(a, b, "mask_iou");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const bool pa = a.data[i] > 0.5, pb = b.data[i] > 0.5;
    inter += pa && pb;
    uni += pa || pb;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

}  // namespace crossray::metrics
