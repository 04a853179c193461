#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "crossray/metrics.hpp"
#include "crossray/trainer.hpp"

namespace crossray {

/// Cached per-view field output: the cross-ray grid and, for the raypoint
/// variant, the per-sample grid and rendering weights.
template <std::floating_point T>
struct CrossCache {
  std::size_t height = 0, width = 0;
  Tensor<T> grid;     // C x H x W
  Tensor<T> points;   // C x H x (W n), raypoint variant only
  Tensor<T> weights;  // (H W) x n, raypoint variant only
};

/// Field pass over the full image in row tiles. Midpoint samples, so the
/// result is deterministic and independent of `tile_rows`.
template <std::floating_point T>
CrossCache<T> compute_cross(const Weights<T>& w, const TrainConfig& cfg, const scene::CameraModel& cam, double near,
                            double far, std::size_t tile_rows = 8) {
  cam.validate();
  if (tile_rows == 0) throw ConfigError("tile_rows must be positive");
  const std::size_t h = cam.height, wd = cam.width, c = cfg.field.channels, n = cfg.samples;
  const bool raypoint = select_variant(cfg.variant).raypoint;
  CrossCache<T> out;
  out.height = h;
  out.width = wd;
  std::vector<T> grid(c * h * wd), points, weights;
  if (raypoint) {
    points.resize(c * h * wd * n);
    weights.resize(h * wd * n);
  }
  for (std::size_t r0 = 0; r0 < h; r0 += tile_rows) {
    const std::size_t r1 = std::min(h, r0 + tile_rows);
    std::vector<scene::Ray> rays;
    for (std::size_t r = r0; r < r1; ++r)
      for (std::size_t q = 0; q < wd; ++q) rays.push_back(cam.ray(r, q));
    const auto b = field::render_rays(w, cfg.field, rays, n, near, far, nullptr);
    for (std::size_t k = 0; k < rays.size(); ++k) {
      const std::size_t pix = r0 * wd + k;
      for (std::size_t ci = 0; ci < c; ++ci) grid[ci * h * wd + pix] = b.features[k * c + ci];
      if (raypoint) {
        for (std::size_t i = 0; i < n; ++i) {
          weights[pix * n + i] = b.weights[k * n + i];
          for (std::size_t ci = 0; ci < c; ++ci) points[(ci * h * wd + pix) * n + i] = b.samples[(k * n + i) * c + ci];
        }
      }
    }
  }
  out.grid = Tensor<T>({c, h, wd}, std::move(grid));
  if (raypoint) {
    out.points = Tensor<T>({c, h, wd * n}, std::move(points));
    out.weights = Tensor<T>({h * wd, n}, std::move(weights));
  }
  return out;
}

template <std::floating_point T>
Tensor<T> embed_reference(const Weights<T>& w, const Image& reference) {
  if (reference.channels != 3) throw ShapeError("reference image must be RGB");
  return appearance::encode_appearance(w, reference.to_tensor<T>());
}

/// Transform (when the variant has one) and decode a cached view.
template <std::floating_point T>
Image decode_view(const Weights<T>& w, const TrainConfig& cfg, const CrossCache<T>& cache, const Tensor<T>* fa) {
  const auto g = select_variant(cfg.variant);
  if (g.appearance && !fa) throw ConfigError("variant '" + variant_name(cfg.variant) + "' needs a reference image");
  if (!g.appearance && fa) {
    throw ConfigError("variant '" + variant_name(cfg.variant) + "' has no appearance stage and cannot take a reference image");
  }
  Tensor<T> grid = cache.grid;
  if (g.appearance) {
    if (g.raypoint) {
      const std::size_t c = cfg.field.channels, n = cfg.samples, hw = cache.height * cache.width;
      const auto moved = appearance::learned_transform(w, cache.points, *fa);
      const auto per_sample = reshape(transpose(reshape(moved, {c, hw * n})), {hw, n, c});
      grid = reshape(transpose(field::accumulate(per_sample, cache.weights)), {c, cache.height, cache.width});
    } else {
      grid = appearance::learned_transform(w, cache.grid, *fa);
    }
  }
  return Image::from_tensor(appearance::decode(w, grid));
}

/// Full-image inference: segmenter and content encoder are not used.
template <std::floating_point T>
Image render_novel_view(const Weights<T>& w, const TrainConfig& cfg, const scene::CameraModel& cam, double near,
                        double far, const Image* reference, std::size_t tile_rows = 8) {
  const auto cache = compute_cross(w, cfg, cam, near, far, tile_rows);
  if (!reference) return decode_view<T>(w, cfg, cache, nullptr);
  const auto fa = embed_reference(w, *reference);
  return decode_view(w, cfg, cache, &fa);
}

struct MultiTiming {
  double cross_seconds = 0;
  std::vector<double> per_image_seconds;
  double total_seconds = 0;
};

/// One field pass, then one transform + decode per reference.
template <std::floating_point T>
std::vector<Image> render_multi_appearance(const Weights<T>& w, const TrainConfig& cfg, const scene::CameraModel& cam,
                                           double near, double far, const std::vector<Image>& references,
                                           MultiTiming* timing = nullptr, std::size_t tile_rows = 8) {
  if (references.empty()) throw ConfigError("render_multi_appearance: need at least one reference");
  using clock = std::chrono::steady_clock;
  const auto t0 = clock::now();
  const auto cache = compute_cross(w, cfg, cam, near, far, tile_rows);
  MultiTiming t;
  t.cross_seconds = std::chrono::duration<double>(clock::now() - t0).count();
  std::vector<Image> out;
  for (const auto& ref : references) {
    const auto s = clock::now();
    const auto fa = embed_reference(w, ref);
    out.push_back(decode_view(w, cfg, cache, &fa));
    t.per_image_seconds.push_back(std::chrono::duration<double>(clock::now() - s).count());
  }
  t.total_seconds = std::chrono::duration<double>(clock::now() - t0).count();
  if (timing) *timing = t;
  return out;
}

/// Frames for F_a(alpha) = (1 - alpha) F_a(ref_a) + alpha F_a(ref_b).
template <std::floating_point T>
std::vector<Image> interpolate_appearance(const Weights<T>& w, const TrainConfig& cfg, const scene::CameraModel& cam,
                                          double near, double far, const Image& ref_a, const Image& ref_b,
                                          const std::vector<double>& alphas, std::size_t tile_rows = 8) {
  if (!std::is_sorted(alphas.begin(), alphas.end())) throw ConfigError("interpolate: alphas must be sorted");
  for (double a : alphas)
    if (a < 0 || a > 1) throw ConfigError("interpolate: alphas must lie in [0, 1]");
  const auto cache = compute_cross(w, cfg, cam, near, far, tile_rows);
  const auto fa = embed_reference(w, ref_a), fb = embed_reference(w, ref_b);
  std::vector<Image> out;
  // Lerp form so equal references give bit-identical frames; endpoints exact.
  const auto delta = sub(fb, fa);
  for (double a : alphas) {
    const auto mix = a == 0 ? fa : a == 1 ? fb : add(fa, scalar_mul(delta, static_cast<T>(a)));
    out.push_back(decode_view(w, cfg, cache, &mix));
  }
  return out;
}

/// Runs `fn(weights, config)` at the checkpoint's training precision.
template <class Fn>
void with_model(const Checkpoint& ck, Fn&& fn) {
  if (ck.config.precision == "double") {
    fn(ck.params.weights(), ck.config);
  } else {
    fn(ck.params.cast<float>().weights(), ck.config);
  }
}

// ---------------------------------------------------------------------------
// Dataset evaluation

struct ImageMetrics {
  std::string id;
  double psnr = 0, ssim = 0;
};

struct MaskMetrics {
  std::string id;
  double iou = 0;
  bool has_transient = false;  // ground truth marks at least one pixel
};

struct MetricsReport {
  std::vector<ImageMetrics> images;
  std::vector<MaskMetrics> masks;  // empty unless the model has a segmenter
  double mean_psnr = 0, mean_ssim = 0;
  double mean_iou = 0;  // over train images whose ground truth has transients
  bool has_iou = false;

  std::string to_csv() const {
    std::string s = has_iou ? "id,split,psnr,ssim,iou\n" : "id,split,psnr,ssim\n";
    char buf[160];
    for (const auto& m : images) {
      std::snprintf(buf, sizeof(buf), has_iou ? "%s,test,%.6f,%.6f,\n" : "%s,test,%.6f,%.6f\n", m.id.c_str(), m.psnr, m.ssim);
      s += buf;
    }
    for (const auto& m : masks) {
      std::snprintf(buf, sizeof(buf), "%s,train,,,%.6f\n", m.id.c_str(), m.iou);
      s += buf;
    }
    if (has_iou) {
      std::snprintf(buf, sizeof(buf), "mean,all,%.6f,%.6f,%.6f\n", mean_psnr, mean_ssim, mean_iou);
    } else {
      std::snprintf(buf, sizeof(buf), "mean,all,%.6f,%.6f\n", mean_psnr, mean_ssim);
    }
    return s + buf;
  }
};

/// Renders every test view (with its designated reference when the variant
/// takes one) against the stored ground truth; with a segmenter, also scores
/// thresholded transient maps on the training images and, if `masks_out` is
/// given, writes them there as PNG.
inline MetricsReport evaluate_dataset(const Checkpoint& ck, const scene::Dataset& ds,
                                      const std::optional<std::filesystem::path>& masks_out = {}) {
  const auto tests = ds.split("test");
  if (tests.empty()) throw ConfigError("dataset has no test split");
  const auto g = select_variant(ck.config.variant);
  MetricsReport rep;
  with_model(ck, [&](const auto& w, const TrainConfig& cfg) {
    using T = typename std::decay_t<decltype(w)>::value_type;
    for (const auto* e : tests) {
      const Image* ref = nullptr;
      if (g.appearance) {
        if (e->reference_id.empty()) throw ConfigError("test view '" + e->id + "' names no reference image");
        ref = &ds.images.at(e->reference_id);
      }
      const auto img = render_novel_view<T>(w, cfg, e->camera, ds.scene.near, ds.scene.far, ref);
      const auto& gt = ds.images.at(e->id);
      rep.images.push_back({e->id, metrics::psnr(quantized(img), gt), metrics::ssim(quantized(img), gt)});
    }
    if (g.transient && !ds.masks.empty()) {
      rep.has_iou = true;
      if (masks_out) std::filesystem::create_directories(*masks_out);
      for (const auto* e : ds.split("train")) {
        auto it = ds.masks.find(e->id);
        if (it == ds.masks.end()) continue;
        const auto pred = Image::from_tensor(transient::segment_transient(w, ds.images.at(e->id).template to_tensor<T>()));
        if (masks_out) write_png(*masks_out / (e->id + ".png"), pred);
        bool any = false;
        for (double v : it->second.data) any = any || v > 0.5;
        rep.masks.push_back({e->id, metrics::mask_iou(pred, it->second), any});
      }
    }
  });
  for (const auto& m : rep.images) {
    rep.mean_psnr += m.psnr / static_cast<double>(rep.images.size());
    rep.mean_ssim += m.ssim / static_cast<double>(rep.images.size());
  }
  std::size_t counted = 0;
  for (const auto& m : rep.masks)
    if (m.has_transient) rep.mean_iou += m.iou, ++counted;
  if (counted) rep.mean_iou /= static_cast<double>(counted);
  return rep;
}

}  // namespace crossray
