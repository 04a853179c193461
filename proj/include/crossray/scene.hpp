#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "crossray/image.hpp"

namespace crossray::scene {

using Vec3 = std::array<double, 3>;

inline Vec3 operator+(Vec3 a, const Vec3& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
inline Vec3 operator-(Vec3 a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
inline Vec3 operator*(double s, const Vec3& a) { return {s * a[0], s * a[1], s * a[2]}; }
inline double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
inline Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}
inline double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }
inline Vec3 normalized(const Vec3& a) { return (1.0 / norm(a)) * a; }

// ---------------------------------------------------------------------------
// Scene

struct Primitive {
  enum class Kind { kSphere, kBox };
  Kind kind = Kind::kSphere;
  Vec3 center{};
  double radius = 0.5;     // spheres
  Vec3 half_extents{};     // boxes
  Vec3 albedo{0.5, 0.5, 0.5};
  double density = 10.0;   // constant density amplitude, carried for volumetric consumers
};

struct SceneSpec {
  std::vector<Primitive> primitives;
  Vec3 background{0.55, 0.7, 0.9};
  double near = 1.2;
  double far = 5.0;
  Vec3 light_dir = normalized(Vec3{0.4, 0.8, 0.3});
  double ambient = 0.25;

  void validate() const {
    if (!(near > 0)) throw ConfigError("scene: near plane must be positive");
    if (!(far > near)) throw ConfigError("scene: far plane must exceed near plane");
    for (const auto& p : primitives)
      for (double a : p.albedo)
        if (a < 0 || a > 1) throw ConfigError("scene: albedo outside [0, 1]");
  }

  /// Radius of a sphere about the origin containing every primitive.
  double bounding_radius() const {
    double r = 0;
    for (const auto& p : primitives) {
      const double extent = p.kind == Primitive::Kind::kSphere ? p.radius : norm(p.half_extents);
      r = std::max(r, norm(p.center) + extent);
    }
    return r;
  }
};

inline SceneSpec default_scene() {
  SceneSpec s;
  using K = Primitive::Kind;
  s.primitives = {
      {K::kBox, {0, -0.6, 0}, 0, {1.2, 0.1, 1.2}, {0.55, 0.5, 0.45}, 10},
      {K::kSphere, {0, 0, 0}, 0.5, {}, {0.8, 0.25, 0.2}, 10},
      {K::kBox, {0.65, -0.25, 0.45}, 0, {0.22, 0.25, 0.22}, {0.2, 0.5, 0.8}, 10},
      {K::kSphere, {-0.6, -0.25, 0.5}, 0.25, {}, {0.25, 0.7, 0.3}, 10},
      {K::kBox, {-0.4, 0.0, -0.6}, 0, {0.2, 0.5, 0.2}, {0.9, 0.8, 0.3}, 10},
  };
  return s;
}

struct Hit {
  double t = std::numeric_limits<double>::infinity();
  Vec3 normal{};
  Vec3 albedo{};
};

inline std::optional<Hit> intersect(const Primitive& p, const Vec3& o, const Vec3& d) {
  if (p.kind == Primitive::Kind::kSphere) {
    const Vec3 oc = o - p.center;
    const double b = dot(oc, d);
    const double c = dot(oc, oc) - p.radius * p.radius;
    const double disc = b * b - c;
    if (disc < 0) return std::nullopt;
    const double sq = std::sqrt(disc);
    double t = -b - sq;
    if (t <= 1e-9) t = -b + sq;
    if (t <= 1e-9) return std::nullopt;
    const Vec3 x = o + t * d;
    return Hit{t, normalized(x - p.center), p.albedo};
  }
  // Slab test for an axis-aligned box.
  double t0 = -std::numeric_limits<double>::infinity(), t1 = std::numeric_limits<double>::infinity();
  int axis0 = 0, axis1 = 0;
  for (int i = 0; i < 3; ++i) {
    const double lo = p.center[i] - p.half_extents[i], hi = p.center[i] + p.half_extents[i];
    if (d[i] == 0) {
      if (o[i] < lo || o[i] > hi) return std::nullopt;
      continue;
    }
    double a = (lo - o[i]) / d[i], b = (hi - o[i]) / d[i];
    if (a > b) std::swap(a, b);
    if (a > t0) t0 = a, axis0 = i;
    if (b < t1) t1 = b, axis1 = i;
  }
  if (t0 > t1 || t1 <= 1e-9) return std::nullopt;
  const bool inside = t0 <= 1e-9;
  const double t = inside ? t1 : t0;
  const int axis = inside ? axis1 : axis0;
  Vec3 n{0, 0, 0};
  n[axis] = d[axis] > 0 ? -1.0 : 1.0;
  if (inside) n[axis] = -n[axis];
  return Hit{t, n, p.albedo};
}

inline std::optional<Hit> trace(const SceneSpec& scene, const Vec3& o, const Vec3& d) {
  std::optional<Hit> best;
  for (const auto& p : scene.primitives) {
    auto h = intersect(p, o, d);
    if (h && (!best || h->t < best->t)) best = h;
  }
  return best;
}

// ---------------------------------------------------------------------------
// Camera

struct Ray {
  Vec3 origin{};
  Vec3 direction{};
  std::array<double, 2> pixel{};  // (row, col) of the pixel the ray passes through
};

/// Pinhole camera. `pose` is camera-to-world, row-major; camera axes are
/// x right, y down, z forward.
struct CameraModel {
  double fx = 1, fy = 1, cx = 0, cy = 0;
  std::size_t height = 0, width = 0;
  std::array<double, 16> pose{1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1};

  void validate() const {
    if (!(fx > 0) || !(fy > 0)) throw ConfigError("camera: focal lengths must be positive");
    if (height == 0 || width == 0) throw ConfigError("camera: empty image size");
    if (rotation_error() > 1e-8) throw ConfigError("camera: rotation block is not orthonormal");
  }

  double rotation_error() const {
    double worst = 0;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        double s = 0;
        for (int k = 0; k < 3; ++k) s += pose[k * 4 + i] * pose[k * 4 + j];
        worst = std::max(worst, std::abs(s - (i == j ? 1.0 : 0.0)));
      }
    return worst;
  }

  Vec3 origin() const { return {pose[3], pose[7], pose[11]}; }
  Vec3 forward() const { return {pose[2], pose[6], pose[10]}; }

  /// Ray through the centre of pixel (row, col).
  Ray ray(std::size_t row, std::size_t col) const {
    const double u = static_cast<double>(col) + 0.5, v = static_cast<double>(row) + 0.5;
    const Vec3 dc{(u - cx) / fx, (v - cy) / fy, 1.0};
    Vec3 dw{};
    for (int i = 0; i < 3; ++i) dw[i] = pose[i * 4 + 0] * dc[0] + pose[i * 4 + 1] * dc[1] + pose[i * 4 + 2] * dc[2];
    return Ray{origin(), normalized(dw), {static_cast<double>(row), static_cast<double>(col)}};
  }

  static CameraModel look_at(const Vec3& eye, const Vec3& target, const Vec3& up, std::size_t h, std::size_t w,
                             double fov_deg = 45.0) {
    CameraModel cam;
    cam.height = h;
    cam.width = w;
    const double f = 0.5 * static_cast<double>(w) / std::tan(0.5 * fov_deg * std::acos(-1.0) / 180.0);
    cam.fx = cam.fy = f;
    cam.cx = 0.5 * static_cast<double>(w);
    cam.cy = 0.5 * static_cast<double>(h);
    const Vec3 fwd = normalized(target - eye);
    const Vec3 right = normalized(cross(fwd, up));
    const Vec3 down = cross(fwd, right);
    for (int i = 0; i < 3; ++i) {
      cam.pose[i * 4 + 0] = right[i];
      cam.pose[i * 4 + 1] = down[i];
      cam.pose[i * 4 + 2] = fwd[i];
      cam.pose[i * 4 + 3] = eye[i];
    }
    return cam;
  }
};

// ---------------------------------------------------------------------------
// Photometric variation and transients

struct AppearanceVariant {
  int id = 0;
  Vec3 gain{1, 1, 1};
  Vec3 tint{0, 0, 0};
  double gamma = 1.0;
  Vec3 sky_gradient{0, 0, 0};  // added to the background, +g/2 at the top row to -g/2 at the bottom

  static AppearanceVariant identity(int id = 0) {
    AppearanceVariant v;
    v.id = id;
    return v;
  }

  static AppearanceVariant random(int id, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> gain(0.6, 1.4), tint(-0.1, 0.1), gamma(0.8, 1.25), sky(-0.2, 0.2);
    AppearanceVariant v;
    v.id = id;
    for (auto& g : v.gain) g = gain(rng);
    for (auto& t : v.tint) t = tint(rng);
    v.gamma = gamma(rng);
    for (auto& s : v.sky_gradient) s = sky(rng);
    return v;
  }

  void validate() const {
    for (double g : gain)
      if (g < 0.4 || g > 1.6) throw ConfigError("variant: gain outside [0.4, 1.6]");
    for (double t : tint)
      if (t < -0.2 || t > 0.2) throw ConfigError("variant: tint outside [-0.2, 0.2]");
    if (gamma < 0.7 || gamma > 1.4) throw ConfigError("variant: gamma outside [0.7, 1.4]");
  }

  double apply(std::size_t channel, double value) const {
    double v = std::clamp(gain[channel] * value + tint[channel], 0.0, 1.0);
    if (gamma != 1.0) v = std::pow(v, gamma);
    return v;
  }
};

struct Occluder {
  enum class Kind { kDisk, kRect };
  Kind kind = Kind::kRect;
  double row = 0, col = 0;        // top-left corner (rect) or centre (disk)
  double height = 0, width = 0;   // rect size in pixels
  double radius = 0;              // disk
  Vec3 fill{0, 0, 0};

  bool covers(std::size_t r, std::size_t c) const {
    const double pr = static_cast<double>(r) + 0.5, pc = static_cast<double>(c) + 0.5;
    if (kind == Kind::kRect) return pr >= row && pr < row + height && pc >= col && pc < col + width;
    const double dr = pr - row, dc = pc - col;
    return dr * dr + dc * dc <= radius * radius;
  }
};

struct TransientSpec {
  std::vector<Occluder> occluders;
};

/// Base render without photometric variation: nearest hit, Lambertian
/// shading against the scene's directional light.
inline Image render_base(const SceneSpec& scene, const CameraModel& camera) {
  camera.validate();
  Image img(3, camera.height, camera.width);
  for (std::size_t r = 0; r < camera.height; ++r)
    for (std::size_t q = 0; q < camera.width; ++q) {
      const Ray ray = camera.ray(r, q);
      const auto hit = trace(scene, ray.origin, ray.direction);
      for (std::size_t c = 0; c < 3; ++c) {
        double v = scene.background[c];
        if (hit) {
          const double lambert = std::max(0.0, dot(hit->normal, scene.light_dir));
          v = hit->albedo[c] * (scene.ambient + (1.0 - scene.ambient) * lambert);
        }
        img.at(c, r, q) = v;
      }
    }
  return img;
}

/// Ground-truth render under an appearance variant; output in [0, 1].
inline Image gt_render(const SceneSpec& scene, const CameraModel& camera, const AppearanceVariant& variant) {
  Image img = render_base(scene, camera);
  const double denom = camera.height > 1 ? static_cast<double>(camera.height - 1) : 1.0;
  for (std::size_t r = 0; r < camera.height; ++r) {
    const double sky = 0.5 - static_cast<double>(r) / denom;
    for (std::size_t q = 0; q < camera.width; ++q) {
      const Ray ray = camera.ray(r, q);
      const bool background = !trace(scene, ray.origin, ray.direction);
      for (std::size_t c = 0; c < 3; ++c) {
        double v = img.at(c, r, q);
        if (background && variant.sky_gradient[c] != 0.0) v += variant.sky_gradient[c] * sky;
        img.at(c, r, q) = variant.apply(c, v);
      }
    }
  }
  return img;
}

struct Composited {
  Image image;
  Image mask;  // 1 x H x W, 1 on occluder pixels
};

inline Composited composite_transients(const Image& image, const TransientSpec& spec) {
  Composited out{image, Image(1, image.height, image.width, 0.0)};
  for (const auto& occ : spec.occluders) {
    for (std::size_t r = 0; r < image.height; ++r)
      for (std::size_t q = 0; q < image.width; ++q) {
        if (!occ.covers(r, q)) continue;
        for (std::size_t c = 0; c < 3; ++c) out.image.at(c, r, q) = occ.fill[c];
        out.mask.at(0, r, q) = 1.0;
      }
  }
  return out;
}

inline double mask_coverage(const TransientSpec& spec, std::size_t h, std::size_t w) {
  std::size_t n = 0;
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t q = 0; q < w; ++q)
      if (std::any_of(spec.occluders.begin(), spec.occluders.end(), [&](const auto& o) { return o.covers(r, q); })) ++n;
  return static_cast<double>(n) / static_cast<double>(h * w);
}

/// 1-3 random disks/rectangles with total coverage at most `max_coverage`.
inline TransientSpec sample_transients(std::size_t h, std::size_t w, std::mt19937_64& rng, double max_coverage = 0.4) {
  TransientSpec spec;
  std::uniform_int_distribution<int> count(1, 3);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double scale = static_cast<double>(std::min(h, w));
  const int n = count(rng);
  for (int i = 0; i < n; ++i) {
    for (int attempt = 0; attempt < 20; ++attempt) {
      Occluder o;
      o.kind = unit(rng) < 0.5 ? Occluder::Kind::kDisk : Occluder::Kind::kRect;
      // Saturated fills that rarely match the scene palette.
      o.fill = {unit(rng), unit(rng), unit(rng)};
      o.fill[static_cast<std::size_t>(unit(rng) * 3) % 3] = unit(rng) < 0.5 ? 0.05 : 0.95;
      if (o.kind == Occluder::Kind::kDisk) {
        o.radius = scale * (0.08 + 0.12 * unit(rng));
        o.row = unit(rng) * static_cast<double>(h);
        o.col = unit(rng) * static_cast<double>(w);
      } else {
        o.height = scale * (0.12 + 0.3 * unit(rng));
        o.width = scale * (0.08 + 0.22 * unit(rng));
        o.row = unit(rng) * (static_cast<double>(h) - o.height);
        o.col = unit(rng) * (static_cast<double>(w) - o.width);
      }
      TransientSpec trial = spec;
      trial.occluders.push_back(o);
      if (mask_coverage(trial, h, w) <= max_coverage) {
        spec = std::move(trial);
        break;
      }
    }
  }
  return spec;
}

// ---------------------------------------------------------------------------
// Dataset on disk

struct DatasetOptions {
  std::size_t height = 64, width = 64;
  std::size_t n_train = 30, n_test = 8, n_variants = 5;
  double occluder_rate = 0.3;
  std::uint64_t seed = 0;
  double camera_radius = 3.0;
  double min_elevation_deg = 15.0, max_elevation_deg = 45.0;
};

struct CameraEntry {
  std::string id;
  CameraModel camera;
  std::string split;  // "train" or "test"
  int variant_id = 0;
  std::string reference_id;  // test views: training image whose appearance is used
};

inline nlohmann::json to_json(const Vec3& v) { return nlohmann::json::array({v[0], v[1], v[2]}); }
inline Vec3 vec3_from(const nlohmann::json& j) { return {j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>()}; }

inline nlohmann::json scene_to_json(const SceneSpec& s) {
  nlohmann::json prims = nlohmann::json::array();
  for (const auto& p : s.primitives) {
    nlohmann::json j;
    j["kind"] = p.kind == Primitive::Kind::kSphere ? "sphere" : "box";
    j["center"] = to_json(p.center);
    if (p.kind == Primitive::Kind::kSphere) {
      j["radius"] = p.radius;
    } else {
      j["half_extents"] = to_json(p.half_extents);
    }
    j["albedo"] = to_json(p.albedo);
    j["density"] = p.density;
    prims.push_back(j);
  }
  return {{"primitives", prims}, {"background", to_json(s.background)}, {"near", s.near}, {"far", s.far},
          {"light_dir", to_json(s.light_dir)}, {"ambient", s.ambient}};
}

inline SceneSpec scene_from_json(const nlohmann::json& j) {
  SceneSpec s;
  s.primitives.clear();
  for (const auto& pj : j.at("primitives")) {
    Primitive p;
    p.kind = pj.at("kind") == "sphere" ? Primitive::Kind::kSphere : Primitive::Kind::kBox;
    p.center = vec3_from(pj.at("center"));
    if (p.kind == Primitive::Kind::kSphere) {
      p.radius = pj.at("radius").get<double>();
    } else {
      p.half_extents = vec3_from(pj.at("half_extents"));
    }
    p.albedo = vec3_from(pj.at("albedo"));
    p.density = pj.value("density", 10.0);
    s.primitives.push_back(p);
  }
  s.background = vec3_from(j.at("background"));
  s.near = j.at("near").get<double>();
  s.far = j.at("far").get<double>();
  s.light_dir = vec3_from(j.at("light_dir"));
  s.ambient = j.value("ambient", 0.25);
  s.validate();
  return s;
}

inline nlohmann::json variant_to_json(const AppearanceVariant& v) {
  return {{"id", v.id}, {"gain", to_json(v.gain)}, {"tint", to_json(v.tint)}, {"gamma", v.gamma},
          {"sky_gradient", to_json(v.sky_gradient)}};
}

inline AppearanceVariant variant_from_json(const nlohmann::json& j) {
  AppearanceVariant v;
  v.id = j.at("id").get<int>();
  v.gain = vec3_from(j.at("gain"));
  v.tint = vec3_from(j.at("tint"));
  v.gamma = j.at("gamma").get<double>();
  v.sky_gradient = vec3_from(j.at("sky_gradient"));
  return v;
}

inline nlohmann::json camera_entry_to_json(const CameraEntry& e) {
  nlohmann::json j{{"id", e.id},
                   {"fx", e.camera.fx},
                   {"fy", e.camera.fy},
                   {"cx", e.camera.cx},
                   {"cy", e.camera.cy},
                   {"H", e.camera.height},
                   {"W", e.camera.width},
                   {"pose", e.camera.pose},
                   {"split", e.split},
                   {"variant_id", e.variant_id}};
  if (!e.reference_id.empty()) j["reference_id"] = e.reference_id;
  return j;
}

inline CameraEntry camera_entry_from_json(const nlohmann::json& j) {
  CameraEntry e;
  e.id = j.at("id").get<std::string>();
  e.camera.fx = j.at("fx").get<double>();
  e.camera.fy = j.at("fy").get<double>();
  e.camera.cx = j.at("cx").get<double>();
  e.camera.cy = j.at("cy").get<double>();
  e.camera.height = j.at("H").get<std::size_t>();
  e.camera.width = j.at("W").get<std::size_t>();
  const auto pose = j.at("pose").get<std::vector<double>>();
  if (pose.size() != 16) throw ConfigError("cameras.json: pose of '" + e.id + "' must have 16 entries");
  std::copy(pose.begin(), pose.end(), e.camera.pose.begin());
  e.split = j.at("split").get<std::string>();
  e.variant_id = j.at("variant_id").get<int>();
  e.reference_id = j.value("reference_id", std::string{});
  return e;
}

inline CameraModel sample_camera(const DatasetOptions& opt, std::mt19937_64& rng) {
  const double pi = std::acos(-1.0);
  std::uniform_real_distribution<double> az(0.0, 2 * pi);
  std::uniform_real_distribution<double> el(opt.min_elevation_deg * pi / 180, opt.max_elevation_deg * pi / 180);
  const double a = az(rng), e = el(rng);
  const Vec3 eye{opt.camera_radius * std::cos(e) * std::sin(a), opt.camera_radius * std::sin(e),
                 opt.camera_radius * std::cos(e) * std::cos(a)};
  return CameraModel::look_at(eye, {0, 0, 0}, {0, 1, 0}, opt.height, opt.width);
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f << text;
  if (!f) throw IoError("write failed for " + path.string());
}

inline nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

/// Writes cameras.json, variants.json, scene.json, images/<id>.png and
/// masks/<id>.png (train only). Test views are occluder-free and name a
/// training image with the same variant as their appearance reference.
inline std::vector<CameraEntry> generate_dataset(const SceneSpec& scene, const DatasetOptions& opt,
                                                 const std::filesystem::path& out_dir) {
  scene.validate();
  if (opt.n_variants < 1) throw ConfigError("dataset: need at least one appearance variant");
  if (opt.n_train < 1) throw ConfigError("dataset: need at least one training view");
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir / "images", ec);
  fs::create_directories(out_dir / "masks", ec);
  if (ec) throw IoError("cannot create dataset directories under " + out_dir.string() + ": " + ec.message());

  std::mt19937_64 rng(opt.seed);
  std::vector<AppearanceVariant> variants{AppearanceVariant::identity(0)};
  for (std::size_t v = 1; v < opt.n_variants; ++v) variants.push_back(AppearanceVariant::random(static_cast<int>(v), rng));

  std::vector<CameraEntry> entries;
  char name[32];
  for (std::size_t i = 0; i < opt.n_train; ++i) {
    std::snprintf(name, sizeof(name), "train_%03zu", i);
    entries.push_back({name, sample_camera(opt, rng), "train", static_cast<int>(i % opt.n_variants), ""});
  }
  for (std::size_t i = 0; i < opt.n_test; ++i) {
    std::snprintf(name, sizeof(name), "test_%03zu", i);
    CameraEntry e{name, sample_camera(opt, rng), "test", static_cast<int>(i % opt.n_variants), ""};
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < opt.n_train; ++k) {
      if (entries[k].variant_id != e.variant_id) continue;
      const double d = norm(entries[k].camera.origin() - e.camera.origin());
      if (d < best) best = d, e.reference_id = entries[k].id;
    }
    entries.push_back(e);
  }

  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (const auto& e : entries) {
    Image img = gt_render(scene, e.camera, variants[static_cast<std::size_t>(e.variant_id)]);
    if (e.split == "train") {
      TransientSpec spec;
      if (unit(rng) < opt.occluder_rate) spec = sample_transients(opt.height, opt.width, rng);
      auto comp = composite_transients(img, spec);
      img = std::move(comp.image);
      write_png(out_dir / "masks" / (e.id + ".png"), comp.mask);
    }
    write_png(out_dir / "images" / (e.id + ".png"), img);
  }

  nlohmann::json cams = nlohmann::json::array();
  for (const auto& e : entries) cams.push_back(camera_entry_to_json(e));
  nlohmann::json vars = nlohmann::json::array();
  for (const auto& v : variants) vars.push_back(variant_to_json(v));
  write_text(out_dir / "cameras.json", cams.dump(2) + "\n");
  write_text(out_dir / "variants.json", vars.dump(2) + "\n");
  write_text(out_dir / "scene.json", scene_to_json(scene).dump(2) + "\n");
  return entries;
}

/// A dataset loaded back from disk.
struct Dataset {
  std::filesystem::path root;
  SceneSpec scene;
  std::vector<CameraEntry> cameras;
  std::map<std::string, Image> images;
  std::map<std::string, Image> masks;

  const CameraEntry& camera(const std::string& id) const {
    for (const auto& c : cameras)
      if (c.id == id) return c;
    throw ConfigError("dataset: unknown camera id '" + id + "'");
  }
  std::vector<const CameraEntry*> split(const std::string& name) const {
    std::vector<const CameraEntry*> out;
    for (const auto& c : cameras)
      if (c.split == name) out.push_back(&c);
    return out;
  }
};

inline Dataset load_dataset(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  if (!fs::exists(dir / "cameras.json")) throw IoError("dataset: missing " + (dir / "cameras.json").string());
  Dataset ds;
  ds.root = dir;
  ds.scene = scene_from_json(read_json(dir / "scene.json"));
  for (const auto& j : read_json(dir / "cameras.json")) ds.cameras.push_back(camera_entry_from_json(j));
  for (const auto& c : ds.cameras) {
    Image img = read_png(dir / "images" / (c.id + ".png"), 3);
    if (img.height != c.camera.height || img.width != c.camera.width) {
      throw IoError("dataset: image size of '" + c.id + "' does not match cameras.json");
    }
    ds.images.emplace(c.id, std::move(img));
    const auto mask_path = dir / "masks" / (c.id + ".png");
    if (c.split == "train" && fs::exists(mask_path)) ds.masks.emplace(c.id, read_png(mask_path, 1));
  }
  return ds;
}

}  // namespace crossray::scene
