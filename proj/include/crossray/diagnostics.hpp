#pragma once

#include <random>

#include "crossray/trainer.hpp"

namespace crossray::diagnostics {

inline const std::vector<OpKind>& differentiable_ops() {
  static const std::vector<OpKind> kinds = {
      OpKind::kMatmul,  OpKind::kConv2d, OpKind::kAdd,        OpKind::kSub,        OpKind::kMul,
      OpKind::kScalarMul, OpKind::kRelu, OpKind::kSoftplus,   OpKind::kSigmoid,    OpKind::kSin,
      OpKind::kCos,     OpKind::kExp,    OpKind::kMean,       OpKind::kSum,        OpKind::kReshape,
      OpKind::kConcat,  OpKind::kAdaptiveAvgPool, OpKind::kSpatialCovariance, OpKind::kL1Norm,
      OpKind::kSquaredL2Norm, OpKind::kBilinearSample, OpKind::kTranspose};
  return kinds;
}

/// Uniform values in [lo, hi], nudged at least 1e-2 away from 0 where relu
/// and |x| have kinks.
inline Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) {
    x = u(rng);
    if (std::abs(x) < 1e-2) x += x < 0 ? -2e-2 : 2e-2;
  }
  return Tensor<double>(std::move(shape), std::move(v));
}

/// Finite-difference check of one op on a random instance drawn from `seed`:
/// inputs become parameters and a fixed random projection makes the output
/// scalar. Odd seeds exercise broadcasting and axis reductions.
inline GradCheckReport check_op(OpKind kind, std::uint64_t seed, const GradCheckOptions& base = {}) {
  std::mt19937_64 rng(seed * 7919 + static_cast<std::uint64_t>(kind));
  auto dim = [&](std::size_t lo, std::size_t hi) { return std::uniform_int_distribution<std::size_t>(lo, hi)(rng); };
  std::vector<Tensor<double>> inputs;
  OpAttrs attrs;
  const std::size_t a = dim(1, 4), b = dim(2, 5), c = dim(2, 5);
  switch (kind) {
    case OpKind::kMatmul:
      inputs = {random_tensor({a, b}, rng), random_tensor({b, c}, rng)};
      break;
    case OpKind::kConv2d:
      inputs = {random_tensor({a, b, c}, rng), random_tensor({2, a, 3, 3}, rng), random_tensor({2}, rng)};
      break;
    case OpKind::kAdd:
    case OpKind::kSub:
    case OpKind::kMul:
      if (seed % 2 == 0) {
        inputs = {random_tensor({a, b, c}, rng), random_tensor({a, b, c}, rng)};
      } else {
        inputs = {random_tensor({a, b, c}, rng), random_tensor({b, 1}, rng)};
      }
      break;
    case OpKind::kScalarMul:
      attrs.scalar = -1.7;
      inputs = {random_tensor({a, b}, rng)};
      break;
    case OpKind::kMean:
    case OpKind::kSum:
      if (seed % 2 == 1) attrs.axis = static_cast<int>(seed % 3);
      inputs = {random_tensor({a, b, c}, rng)};
      break;
    case OpKind::kReshape:
      attrs.shape = {a * b, c};
      inputs = {random_tensor({a, b, c}, rng)};
      break;
    case OpKind::kConcat:
      attrs.axis = static_cast<int>(seed % 2);
      inputs = {random_tensor({b, c}, rng), attrs.axis == 0 ? random_tensor({a, c}, rng) : random_tensor({b, a}, rng)};
      break;
    case OpKind::kAdaptiveAvgPool:
      attrs.out_h = dim(1, 3);
      attrs.out_w = dim(1, 3);
      inputs = {random_tensor({a, b + 2, c + 2}, rng)};
      break;
    case OpKind::kSpatialCovariance:
      inputs = {random_tensor({a + 1, b, c}, rng)};
      break;
    case OpKind::kBilinearSample: {
      std::uniform_real_distribution<double> ur(0.1, static_cast<double>(b) - 1.1);
      std::uniform_real_distribution<double> uc(0.1, static_cast<double>(c) - 1.1);
      for (int k = 0; k < 6; ++k) attrs.coords.push_back({ur(rng), uc(rng)});
      attrs.coords.push_back({0, 0});
      inputs = {random_tensor({a, b, c}, rng)};
      break;
    }
    case OpKind::kLeaf:
      throw ConfigError("check_op: leaves have no gradient rule");
    default:  // elementwise ops and norms
      inputs = {random_tensor({a + 1, b}, rng, -2, 2)};
      break;
  }
  ParamSet<double> point;
  for (std::size_t i = 0; i < inputs.size(); ++i) point.add("in" + std::to_string(i), inputs[i]);
  const auto probe = random_tensor(apply_op(kind, inputs, attrs).shape(), rng);
  const std::size_t n_in = inputs.size();
  auto f = [&](const Weights<double>& w) {
    std::vector<Tensor<double>> in;
    for (std::size_t i = 0; i < n_in; ++i) in.push_back(w["in" + std::to_string(i)]);
    return sum(mul(apply_op(kind, in, attrs), probe));
  };
  GradCheckOptions opt = base;
  opt.seed = seed;
  return grad_check(f, point, opt);
}

/// Small full-variant model on an 8x8 patch of a 16x16 in-memory render,
/// with lambda = beta = 0.5 so both loss terms register at the checker's
/// tolerance and random biases so no pre-activation sits on a ReLU kink.
inline GradCheckReport check_toy_pipeline(std::uint64_t seed = 0, std::size_t max_coords = 24) {
  TrainConfig cfg;
  cfg.rays = 64;
  cfg.samples = 8;
  cfg.field.depth = 3;
  cfg.field.width = 16;
  cfg.field.skip = 2;
  cfg.field.pos_levels = 4;
  cfg.field.dir_levels = 2;
  cfg.field.channels = 4;
  cfg.app_hidden = 4;
  cfg.seg_hidden = 4;
  cfg.lambda = 0.5;
  cfg.beta = 0.5;
  cfg.seed = seed;
  auto params = init_model<double>(cfg);
  std::mt19937_64 rng(seed + 1);
  std::uniform_real_distribution<double> u(-0.1, 0.1);
  for (const auto& n : params.names()) {
    if (n.back() != 'b') continue;
    auto v = params.value(n).clone();
    for (auto& x : v.mutable_values()) x = u(rng);
    params.set_value(n, v);
  }
  const auto sc = scene::default_scene();
  const auto cam = scene::CameraModel::look_at({1.2, 1.5, 2.4}, {0, 0, 0}, {0, 1, 0}, 16, 16);
  const auto image = scene::gt_render(sc, cam, scene::AppearanceVariant::identity());
  const auto batch = make_batch<double>(cam, image, 4, 5, cfg.patch());
  auto f = [&](const Weights<double>& w) { return forward_losses(w, cfg, batch, sc.near, sc.far, nullptr).total; };
  GradCheckOptions opt;
  opt.max_coords = max_coords;
  opt.seed = seed;
  return grad_check(f, params, opt);
}

}  // namespace crossray::diagnostics
