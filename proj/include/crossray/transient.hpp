#pragma once

#include <random>

#include "crossray/appearance.hpp"

namespace crossray::transient {

/// Segmentation net `transient.S`: 3 -> 16 -> 16 -> 16 -> 1, 3x3 convs.
template <std::floating_point T>
void init_segmenter(ParamSet<T>& params, std::mt19937_64& rng, bool zero_out = false, std::size_t hidden = 16) {
  appearance::add_conv(params, "transient.S.c0", 3, hidden, rng);
  appearance::add_conv(params, "transient.S.c1", hidden, hidden, rng);
  appearance::add_conv(params, "transient.S.c2", hidden, hidden, rng);
  appearance::add_conv(params, "transient.S.c3", hidden, 1, rng, zero_out);
}

/// Per-pixel transient probability, 1 x H x W; 1 marks a transient pixel.
template <std::floating_point T>
Tensor<T> segment_transient(const Weights<T>& w, const Tensor<T>& image) {
  if (image.rank() != 3 || image.dim(0) != 3) {
    throw ShapeError("segment_transient: expected 3 x H x W image, got " + shape_str(image.shape()));
  }
  using appearance::conv;
  auto h = relu(conv(w, "transient.S.c0", image));
  h = relu(conv(w, "transient.S.c1", h));
  h = relu(conv(w, "transient.S.c2", h));
  return sigmoid(conv(w, "transient.S.c3", h));
}

/// Bilinear samples of a 1 x H x W map at (row, col) pixel coordinates -> 1 x N.
template <std::floating_point T>
Tensor<T> grid_sample_map(const Tensor<T>& map, const std::vector<PixelCoord>& pixels) {
  if (pixels.empty()) throw ShapeError("grid_sample_map: empty pixel list");
  return bilinear_sample(map, pixels);
}

/// Pixel coordinates of the p x p block with top-left (row, col), row-major.
inline std::vector<PixelCoord> patch_coords(std::size_t row, std::size_t col, std::size_t p) {
  std::vector<PixelCoord> out;
  out.reserve(p * p);
  for (std::size_t r = 0; r < p; ++r)
    for (std::size_t q = 0; q < p; ++q) out.push_back({static_cast<double>(row + r), static_cast<double>(col + q)});
  return out;
}

/// ||(1 - M) * (I_n - I_a)^2||_1 + mask_reg * sum(M). M is 1 x p x p and
/// broadcasts over colour channels; the images are 3 x p x p.
template <std::floating_point T>
Tensor<T> transient_loss(const Tensor<T>& map, const Tensor<T>& rendered, const Tensor<T>& reference, T mask_reg) {
  if (rendered.shape() != reference.shape() || rendered.rank() != 3 || map.rank() != 3 || map.dim(0) != 1 ||
      map.dim(1) != rendered.dim(1) || map.dim(2) != rendered.dim(2)) {
    throw ShapeError("transient_loss: map " + shape_str(map.shape()) + ", rendered " + shape_str(rendered.shape()) +
                     ", reference " + shape_str(reference.shape()));
  }
  const auto diff = sub(rendered, reference);
  const auto gated = mul(sub(Tensor<T>({1}, T(1)), map), mul(diff, diff));
  // The gated residual is non-negative, so its L1 norm is a plain sum; sum
  // also keeps the one-sided derivative -r at M = 1 where |.| has a kink.
  auto loss = sum(gated);
  if (mask_reg != T(0)) loss = add(loss, scalar_mul(sum(map), mask_reg));
  return loss;
}

}  // namespace crossray::transient
