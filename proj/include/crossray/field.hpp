#pragma once

#include <cmath>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "crossray/params.hpp"
#include "crossray/scene.hpp"

namespace crossray::field {

using scene::Ray;
using scene::Vec3;

/// sin/cos ladder over frequencies 2^0 .. 2^(L-1), times pi. For each level
/// the k sines come first, then the k cosines.
inline std::vector<double> positional_encoding(std::span<const double> v, int levels) {
  if (levels < 1) throw ConfigError("positional_encoding: levels must be >= 1");
  const double pi = std::acos(-1.0);
  std::vector<double> out;
  out.reserve(2 * static_cast<std::size_t>(levels) * v.size());
  for (int j = 0; j < levels; ++j) {
    const double f = std::ldexp(pi, j);
    for (double x : v) out.push_back(std::sin(f * x));
    for (double x : v) out.push_back(std::cos(f * x));
  }
  return out;
}

struct RaySampleSet {
  std::vector<double> t;
  std::vector<double> deltas;
};

/// One sample per equal-width bin of [tn, tf]: the midpoint, or uniform
/// within the bin when `rng` is given. The last delta is (tf - tn) / n.
inline RaySampleSet sample_ray_points(std::size_t n, double tn, double tf, std::mt19937_64* rng = nullptr) {
  if (n < 2) throw ConfigError("sample_ray_points: need at least 2 samples");
  if (!(tn > 0) || !(tf > tn)) throw ConfigError("sample_ray_points: invalid bounds");
  const double width = (tf - tn) / static_cast<double>(n);
  RaySampleSet s;
  s.t.resize(n);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double offset = rng ? u(*rng) : 0.5;
    s.t[i] = tn + (static_cast<double>(i) + offset) * width;
  }
  s.deltas.resize(n);
  for (std::size_t i = 0; i + 1 < n; ++i) s.deltas[i] = s.t[i + 1] - s.t[i];
  s.deltas[n - 1] = width;
  return s;
}

// ---------------------------------------------------------------------------
// Plain volume rendering (inference, diagnostics, oracle comparisons)

struct Rendered {
  std::vector<double> output;   // sum_i w_i payload_i
  std::vector<double> weights;  // w_i
  double opacity = 0;           // sum_i w_i
  double depth = 0;             // sum_i w_i t_i
};

/// `payload` is n x P row-major. Weights come from a single forward scan.
inline Rendered volume_render(std::span<const double> payload, std::size_t width, std::span<const double> sigma,
                              std::span<const double> deltas, std::span<const double> t = {}) {
  const std::size_t n = sigma.size();
  if (deltas.size() != n || payload.size() != n * width || (!t.empty() && t.size() != n)) {
    throw ShapeError("volume_render: sample counts differ");
  }
  Rendered r;
  r.output.assign(width, 0.0);
  r.weights.resize(n);
  double optical_depth = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (sigma[i] < 0) throw ConfigError("volume_render: negative density");
    const double sd = sigma[i] * deltas[i];
    const double w = std::exp(-optical_depth) * -std::expm1(-sd);
    optical_depth += sd;
    r.weights[i] = w;
    r.opacity += w;
    if (!t.empty()) r.depth += w * t[i];
    for (std::size_t c = 0; c < width; ++c) r.output[c] += w * payload[i * width + c];
  }
  return r;
}

// ---------------------------------------------------------------------------
// Differentiable volume rendering

/// n x n matrix U with U[l][i] = 1 for l < i, so (s U)_i = sum_{l<i} s_l.
template <std::floating_point T>
Tensor<T> exclusive_cumsum_matrix(std::size_t n) {
  Tensor<T> u({n, n});
  auto v = u.mutable_values();
  for (std::size_t l = 0; l < n; ++l)
    for (std::size_t i = l + 1; i < n; ++i) v[l * n + i] = T(1);
  return u;
}

/// Rendering weights for R rays of n samples: sigma and deltas are R x n.
template <std::floating_point T>
Tensor<T> render_weights(const Tensor<T>& sigma, const Tensor<T>& deltas) {
  if (sigma.rank() != 2 || sigma.shape() != deltas.shape()) {
    throw ShapeError("render_weights: sigma " + shape_str(sigma.shape()) + " vs deltas " + shape_str(deltas.shape()));
  }
  const auto sd = mul(sigma, deltas);
  const auto cum = matmul(sd, exclusive_cumsum_matrix<T>(sigma.dim(1)));
  const auto transmittance = exp(scalar_mul(cum, T(-1)));
  const auto alpha = sub(Tensor<T>({1}, T(1)), exp(scalar_mul(sd, T(-1))));
  return mul(transmittance, alpha);
}

/// payload R x n x P, weights R x n  ->  R x P.
template <std::floating_point T>
Tensor<T> accumulate(const Tensor<T>& payload, const Tensor<T>& weights) {
  if (payload.rank() != 3 || weights.rank() != 2 || payload.dim(0) != weights.dim(0) || payload.dim(1) != weights.dim(1)) {
    throw ShapeError("accumulate: payload " + shape_str(payload.shape()) + " vs weights " + shape_str(weights.shape()));
  }
  const auto w = reshape(weights, {weights.dim(0), weights.dim(1), 1});
  return sum(mul(w, payload), 1);
}

// ---------------------------------------------------------------------------
// Field MLP

struct FieldConfig {
  std::size_t depth = 8;
  std::size_t width = 256;
  std::size_t skip = 5;  // layer whose input is concat(h, encoded x); 0 disables
  int pos_levels = 10;
  int dir_levels = 4;
  std::size_t channels = 16;
  double position_scale = 0.25;  // world -> encoder input; keeps points inside one period of the lowest band

  std::size_t pos_dim() const { return 6 * static_cast<std::size_t>(pos_levels); }
  std::size_t dir_dim() const { return 6 * static_cast<std::size_t>(dir_levels); }

  void validate() const {
    if (depth < 1 || width < 1 || channels < 1) throw ConfigError("field: depth, width and channels must be positive");
    if (skip >= depth) throw ConfigError("field: skip layer must be below depth");
  }
};

inline std::string layer_name(std::size_t i, const char* what) {
  return "field.l" + std::to_string(i) + "." + what;
}

/// He-uniform trunk; heads likewise unless `zero_heads` (then both heads
/// start at zero: features 0, density softplus(0) = ln 2).
template <std::floating_point T>
void init_field(ParamSet<T>& params, const FieldConfig& cfg, std::mt19937_64& rng, bool zero_heads = false) {
  cfg.validate();
  for (std::size_t i = 0; i < cfg.depth; ++i) {
    std::size_t in = i == 0 ? cfg.pos_dim() : cfg.width;
    if (cfg.skip != 0 && i == cfg.skip) in += cfg.pos_dim();
    params.add(layer_name(i, "w"), he_uniform<T>({in, cfg.width}, in, rng));
    params.add(layer_name(i, "b"), Tensor<T>({cfg.width}));
  }
  const std::size_t fin = cfg.width + cfg.dir_dim();
  if (zero_heads) {
    params.add("field.sigma.w", Tensor<T>({cfg.width, 1}));
    params.add("field.feat.w", Tensor<T>({fin, cfg.channels}));
  } else {
    params.add("field.sigma.w", he_uniform<T>({cfg.width, 1}, cfg.width, rng));
    params.add("field.feat.w", he_uniform<T>({fin, cfg.channels}, fin, rng));
  }
  params.add("field.sigma.b", Tensor<T>({1}));
  params.add("field.feat.b", Tensor<T>({cfg.channels}));
}

template <std::floating_point T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  return add(matmul(x, w), b);
}

template <std::floating_point T>
struct FieldOutput {
  Tensor<T> feature;  // N x C
  Tensor<T> density;  // N x 1, softplus so >= 0
};

/// Batched query on pre-encoded inputs: enc_x N x pos_dim, enc_d N x dir_dim.
template <std::floating_point T>
FieldOutput<T> field_forward(const Weights<T>& w, const FieldConfig& cfg, const Tensor<T>& enc_x, const Tensor<T>& enc_d) {
  if (enc_x.rank() != 2 || enc_x.dim(1) != cfg.pos_dim() || enc_d.rank() != 2 || enc_d.dim(1) != cfg.dir_dim() ||
      enc_d.dim(0) != enc_x.dim(0)) {
    throw ShapeError("field: encoded inputs " + shape_str(enc_x.shape()) + " / " + shape_str(enc_d.shape()) +
                     " do not match the configured encoder");
  }
  Tensor<T> h = enc_x;
  for (std::size_t i = 0; i < cfg.depth; ++i) {
    if (cfg.skip != 0 && i == cfg.skip) h = concat<T>({h, enc_x}, 1);
    h = relu(linear(h, w[layer_name(i, "w")], w[layer_name(i, "b")]));
  }
  FieldOutput<T> out;
  out.density = softplus(linear(h, w["field.sigma.w"], w["field.sigma.b"]));
  out.feature = linear(concat<T>({h, enc_d}, 1), w["field.feat.w"], w["field.feat.b"]);
  return out;
}

/// Encoded sample positions and directions for a batch of rays.
template <std::floating_point T>
struct EncodedSamples {
  Tensor<T> enc_x;   // (R n) x pos_dim
  Tensor<T> enc_d;   // (R n) x dir_dim
  Tensor<T> deltas;  // R x n
  std::vector<double> t;  // R n, for depth diagnostics
};

/// Samples and encodes every ray. With `rng`, each ray gets its own jitter.
template <std::floating_point T>
EncodedSamples<T> encode_rays(const std::vector<Ray>& rays, const FieldConfig& cfg, std::size_t n, double tn, double tf,
                              std::mt19937_64* rng = nullptr) {
  if (rays.empty()) throw ConfigError("field: empty ray batch");
  const std::size_t r = rays.size(), pd = cfg.pos_dim(), dd = cfg.dir_dim();
  std::vector<T> ex(r * n * pd), ed(r * n * dd), dl(r * n);
  EncodedSamples<T> out;
  out.t.resize(r * n);
  for (std::size_t k = 0; k < r; ++k) {
    const auto& ray = rays[k];
    if (std::abs(scene::norm(ray.direction) - 1.0) > 1e-9) throw ConfigError("field: ray direction is not unit length");
    const auto samples = sample_ray_points(n, tn, tf, rng);
    const auto denc = positional_encoding(ray.direction, cfg.dir_levels);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t row = k * n + i;
      const double t = samples.t[i];
      const std::array<double, 3> x{cfg.position_scale * (ray.origin[0] + t * ray.direction[0]),
                                    cfg.position_scale * (ray.origin[1] + t * ray.direction[1]),
                                    cfg.position_scale * (ray.origin[2] + t * ray.direction[2])};
      const auto xenc = positional_encoding(x, cfg.pos_levels);
      std::copy(xenc.begin(), xenc.end(), ex.begin() + static_cast<std::ptrdiff_t>(row * pd));
      std::copy(denc.begin(), denc.end(), ed.begin() + static_cast<std::ptrdiff_t>(row * dd));
      dl[row] = static_cast<T>(samples.deltas[i]);
      out.t[row] = t;
    }
  }
  out.enc_x = Tensor<T>({r * n, pd}, std::move(ex));
  out.enc_d = Tensor<T>({r * n, dd}, std::move(ed));
  out.deltas = Tensor<T>({r, n}, std::move(dl));
  return out;
}

/// Single-point query (x world position, d unit direction).
template <std::floating_point T>
FieldOutput<T> field_query(const Weights<T>& w, const FieldConfig& cfg, const Vec3& x, const Vec3& d) {
  const Vec3 xs{cfg.position_scale * x[0], cfg.position_scale * x[1], cfg.position_scale * x[2]};
  const auto ex = positional_encoding(xs, cfg.pos_levels);
  const auto ed = positional_encoding(d, cfg.dir_levels);
  return field_forward<T>(w, cfg, Tensor<T>({1, ex.size()}, std::vector<T>(ex.begin(), ex.end())),
                          Tensor<T>({1, ed.size()}, std::vector<T>(ed.begin(), ed.end())));
}

/// Per-ray outputs of rendering a batch.
template <std::floating_point T>
struct RayBatch {
  Tensor<T> features;  // R x C, volume-rendered
  Tensor<T> weights;   // R x n
  Tensor<T> samples;   // R x n x C, raw per-sample features
  std::vector<double> t;
};

template <std::floating_point T>
RayBatch<T> render_rays(const Weights<T>& w, const FieldConfig& cfg, const std::vector<Ray>& rays, std::size_t n,
                        double tn, double tf, std::mt19937_64* rng = nullptr) {
  const auto enc = encode_rays<T>(rays, cfg, n, tn, tf, rng);
  const auto out = field_forward(w, cfg, enc.enc_x, enc.enc_d);
  const std::size_t r = rays.size();
  RayBatch<T> b;
  b.weights = render_weights(reshape(out.density, {r, n}), enc.deltas);
  b.samples = reshape(out.feature, {r, n, cfg.channels});
  b.features = accumulate(b.samples, b.weights);
  b.t = enc.t;
  return b;
}

/// Feature grid C x p x p for a p x p patch given in row-major pixel order.
template <std::floating_point T>
Tensor<T> cross_ray_feature(const Weights<T>& w, const FieldConfig& cfg, const std::vector<Ray>& rays, std::size_t n,
                            double tn, double tf, std::mt19937_64* rng = nullptr) {
  const auto p = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(rays.size()))));
  if (p * p != rays.size()) throw ShapeError("cross_ray_feature: ray count " + std::to_string(rays.size()) + " is not a square");
  const auto b = render_rays(w, cfg, rays, n, tn, tf, rng);
  return reshape(transpose(b.features), {cfg.channels, p, p});
}

/// Rays of the p x p patch with top-left pixel (row, col), row-major.
inline std::vector<Ray> patch_rays(const scene::CameraModel& cam, std::size_t row, std::size_t col, std::size_t p) {
  if (row + p > cam.height || col + p > cam.width) throw ShapeError("patch_rays: patch outside the image");
  std::vector<Ray> rays;
  rays.reserve(p * p);
  for (std::size_t r = 0; r < p; ++r)
    for (std::size_t q = 0; q < p; ++q) rays.push_back(cam.ray(row + r, col + q));
  return rays;
}

}  // namespace crossray::field
