#pragma once

#include <random>
#include <string>

#include "crossray/params.hpp"

namespace crossray::appearance {

struct AppearanceConfig {
  std::size_t channels = 16;  // must match the field's feature channels
  std::size_t hidden = 32;
  std::size_t grid = 8;       // pooled embedding size
};

/// Adds a 3x3 conv layer `name`.{w,b} with He-uniform weights (or zeros).
template <std::floating_point T>
void add_conv(ParamSet<T>& params, const std::string& name, std::size_t cin, std::size_t cout, std::mt19937_64& rng,
              bool zero = false) {
  params.add(name + ".w", zero ? Tensor<T>({cout, cin, 3, 3}) : he_uniform<T>({cout, cin, 3, 3}, cin * 9, rng));
  params.add(name + ".b", Tensor<T>({cout}));
}

template <std::floating_point T>
Tensor<T> conv(const Weights<T>& w, const std::string& name, const Tensor<T>& x) {
  return conv2d(x, w[name + ".w"], w[name + ".b"]);
}

/// Encoders `app.E2` (appearance) and `app.E5` (content), transform nets
/// `app.phi1..3`, decoder `app.D`.
template <std::floating_point T>
void init_appearance(ParamSet<T>& params, const AppearanceConfig& cfg, std::mt19937_64& rng, bool zero_decoder_out = false) {
  const std::size_t c = cfg.channels, h = cfg.hidden;
  for (const char* enc : {"app.E2", "app.E5"}) {
    const std::string e = enc;
    add_conv(params, e + ".c0", 3, h, rng);
    add_conv(params, e + ".c1", h, h, rng);
    add_conv(params, e + ".c2", h, c, rng);
  }
  for (const char* phi : {"app.phi1", "app.phi2", "app.phi3"}) {
    const std::string f = phi;
    add_conv(params, f + ".c0", c, c, rng);
    add_conv(params, f + ".c1", c, c, rng);
  }
  add_conv(params, "app.D.c0", c, h, rng);
  add_conv(params, "app.D.c1", h, h, rng);
  add_conv(params, "app.D.c2", h, 3, rng, zero_decoder_out);
}

/// Image 3 x H x W -> C x g x g. `prefix` selects E2 or E5.
template <std::floating_point T>
Tensor<T> encode(const Weights<T>& w, const std::string& prefix, const Tensor<T>& image, std::size_t grid = 8) {
  if (image.rank() != 3 || image.dim(0) != 3) throw ShapeError("encode: expected 3 x H x W image, got " + shape_str(image.shape()));
  if (image.dim(1) < grid || image.dim(2) < grid) {
    throw ShapeError("encode: image " + shape_str(image.shape()) + " smaller than the " + std::to_string(grid) + "x" +
                     std::to_string(grid) + " embedding grid");
  }
  auto h = relu(conv(w, prefix + ".c0", image));
  h = relu(conv(w, prefix + ".c1", h));
  h = conv(w, prefix + ".c2", h);
  return adaptive_avg_pool(h, grid, grid);
}

template <std::floating_point T>
Tensor<T> encode_appearance(const Weights<T>& w, const Tensor<T>& image, std::size_t grid = 8) {
  return encode(w, "app.E2", image, grid);
}

template <std::floating_point T>
Tensor<T> phi(const Weights<T>& w, int k, const Tensor<T>& x) {
  const std::string p = "app.phi" + std::to_string(k);
  return conv(w, p + ".c1", relu(conv(w, p + ".c0", x)));
}

/// Cov(phi2(F_cr)) Cov(phi3(F_a)) applied to every position of phi1(F_cr).
template <std::floating_point T>
Tensor<T> learned_transform(const Weights<T>& w, const Tensor<T>& cross, const Tensor<T>& app) {
  if (cross.rank() != 3 || app.rank() != 3 || cross.dim(0) != app.dim(0)) {
    throw ShapeError("learned_transform: channel mismatch between cross-ray grid " + shape_str(cross.shape()) +
                     " and appearance embedding " + shape_str(app.shape()));
  }
  const std::size_t c = cross.dim(0), h = cross.dim(1), wd = cross.dim(2);
  const auto t = matmul(spatial_covariance(phi(w, 2, cross)), spatial_covariance(phi(w, 3, app)));
  const auto content = reshape(phi(w, 1, cross), {c, h * wd});
  return reshape(matmul(t, content), {c, h, wd});
}

/// C x H x W grid -> 3 x H x W colours in (0, 1).
template <std::floating_point T>
Tensor<T> decode(const Weights<T>& w, const Tensor<T>& grid) {
  auto h = relu(conv(w, "app.D.c0", grid));
  h = relu(conv(w, "app.D.c1", h));
  return sigmoid(conv(w, "app.D.c2", h));
}

template <std::floating_point T>
struct AppearanceLoss {
  Tensor<T> loss;      // scalar
  Tensor<T> rendered;  // I_n, 3 x p x p
};

/// ||E2(D(T(F_cr))) - F_a||^2 + beta ||E5(D(T(F_cr))) - E5(D(F_cr))||^2,
/// with F_a = E2(reference).
template <std::floating_point T>
AppearanceLoss<T> appearance_loss(const Weights<T>& w, const Tensor<T>& cross, const Tensor<T>& reference, T beta,
                                  std::size_t grid = 8) {
  if (beta < T(0)) throw ConfigError("appearance_loss: beta must be >= 0");
  const auto fa = encode_appearance(w, reference, grid);
  AppearanceLoss<T> out;
  out.rendered = decode(w, learned_transform(w, cross, fa));
  auto loss = squared_l2_norm(sub(encode_appearance(w, out.rendered, grid), fa));
  if (beta > T(0)) {
    const auto content = sub(encode(w, "app.E5", out.rendered, grid), encode(w, "app.E5", decode(w, cross), grid));
    loss = add(loss, scalar_mul(squared_l2_norm(content), beta));
  }
  out.loss = loss;
  return out;
}

}  // namespace crossray::appearance
