#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "crossray/appearance.hpp"
#include "crossray/field.hpp"
#include "crossray/scene.hpp"
#include "crossray/transient.hpp"

namespace crossray {

enum class Variant { kFull, kAppearanceOnly, kTransientOnly, kBase, kRaypointFusion };

inline std::string variant_name(Variant v) {
  switch (v) {
    case Variant::kFull: return "full";
    case Variant::kAppearanceOnly: return "appearance-only";
    case Variant::kTransientOnly: return "transient-only";
    case Variant::kBase: return "base";
    case Variant::kRaypointFusion: return "raypoint-fusion";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  for (auto v : {Variant::kFull, Variant::kAppearanceOnly, Variant::kTransientOnly, Variant::kBase, Variant::kRaypointFusion})
    if (variant_name(v) == s) return v;
  throw ConfigError("unknown variant '" + s + "' (expected full, appearance-only, transient-only, base, raypoint-fusion)");
}

/// Which stages a variant wires into the graph, and the parameter-name
/// prefixes of its groups.
struct VariantGraph {
  bool appearance = false;  // E2, phi1..3, E5 and the appearance loss
  bool transient = false;   // segmenter and the learned map M
  bool raypoint = false;    // transform applied per ray point before rendering
  std::vector<std::string> groups;
};

inline VariantGraph select_variant(Variant v) {
  VariantGraph g;
  g.appearance = v == Variant::kFull || v == Variant::kAppearanceOnly || v == Variant::kRaypointFusion;
  g.transient = v == Variant::kFull || v == Variant::kTransientOnly || v == Variant::kRaypointFusion;
  g.raypoint = v == Variant::kRaypointFusion;
  g.groups = {"field.", "app.D."};
  if (g.appearance) g.groups.insert(g.groups.end(), {"app.E2.", "app.phi", "app.E5."});
  if (g.transient) g.groups.push_back("transient.S.");
  return g;
}

struct TrainConfig {
  std::size_t rays = 1024;  // m, a perfect square
  double learning_rate = 5e-4;
  double lambda = 1e-3;
  double beta = 1e-5;
  std::size_t samples = 64;
  std::size_t steps = 0;
  std::uint64_t seed = 0;
  std::string precision = "float";
  Variant variant = Variant::kFull;
  double mask_reg = 0.05;
  std::size_t checkpoint_every = 1000;
  field::FieldConfig field;
  std::size_t app_hidden = 32;
  std::size_t seg_hidden = 16;
  bool record_wall_time = true;  // false writes 0 in the seconds column so logs compare bitwise

  std::size_t patch() const { return static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(rays)))); }

  appearance::AppearanceConfig app() const {
    appearance::AppearanceConfig a;
    a.channels = field.channels;
    a.hidden = app_hidden;
    return a;
  }

  void validate() const {
    if (rays == 0 || patch() * patch() != rays) throw ConfigError("rays must be a perfect square, got " + std::to_string(rays));
    if (lambda < 0 || beta < 0 || mask_reg < 0) throw ConfigError("lambda, beta and mask_reg must be >= 0");
    if (!(learning_rate > 0)) throw ConfigError("learning rate must be positive");
    if (samples < 2) throw ConfigError("need at least 2 samples per ray");
    if (precision != "float" && precision != "double") throw ConfigError("precision must be float or double");
    field.validate();
  }
};

inline nlohmann::json config_to_json(const TrainConfig& c) {
  return {{"rays", c.rays},
          {"learning_rate", c.learning_rate},
          {"lambda", c.lambda},
          {"beta", c.beta},
          {"samples", c.samples},
          {"steps", c.steps},
          {"seed", c.seed},
          {"precision", c.precision},
          {"variant", variant_name(c.variant)},
          {"mask_reg", c.mask_reg},
          {"checkpoint_every", c.checkpoint_every},
          {"record_wall_time", c.record_wall_time},
          {"field",
           {{"depth", c.field.depth},
            {"width", c.field.width},
            {"skip", c.field.skip},
            {"pos_levels", c.field.pos_levels},
            {"dir_levels", c.field.dir_levels},
            {"channels", c.field.channels},
            {"position_scale", c.field.position_scale}}},
          {"app_hidden", c.app_hidden},
          {"seg_hidden", c.seg_hidden}};
}

inline TrainConfig config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.rays = j.at("rays");
  c.learning_rate = j.at("learning_rate");
  c.lambda = j.at("lambda");
  c.beta = j.at("beta");
  c.samples = j.at("samples");
  c.steps = j.at("steps");
  c.seed = j.at("seed");
  c.precision = j.at("precision");
  c.variant = parse_variant(j.at("variant"));
  c.mask_reg = j.at("mask_reg");
  c.checkpoint_every = j.at("checkpoint_every");
  c.record_wall_time = j.value("record_wall_time", true);
  const auto& f = j.at("field");
  c.field.depth = f.at("depth");
  c.field.width = f.at("width");
  c.field.skip = f.at("skip");
  c.field.pos_levels = f.at("pos_levels");
  c.field.dir_levels = f.at("dir_levels");
  c.field.channels = f.at("channels");
  c.field.position_scale = f.at("position_scale");
  c.app_hidden = j.at("app_hidden");
  c.seg_hidden = j.at("seg_hidden");
  c.validate();
  return c;
}

/// Seeded initialisation of every group in the variant. All groups are drawn
/// in a fixed order and then pruned, so shared groups start identical across
/// variants with the same seed.
template <std::floating_point T>
ParamSet<T> init_model(const TrainConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  ParamSet<T> p;
  field::init_field(p, cfg.field, rng);
  appearance::init_appearance(p, cfg.app(), rng);
  transient::init_segmenter(p, rng, false, cfg.seg_hidden);
  const auto g = select_variant(cfg.variant);
  ParamSet<T> kept;
  for (const auto& [name, param] : p.items()) {
    for (const auto& prefix : g.groups) {
      if (name.rfind(prefix, 0) == 0) {
        kept.add_param(name, param);
        break;
      }
    }
  }
  return kept;
}

/// One training example: a p x p patch of one training image.
template <std::floating_point T>
struct PatchBatch {
  std::vector<scene::Ray> rays;  // p*p, row-major
  std::size_t row = 0, col = 0;
  Tensor<T> reference;  // full training image I_a, 3 x H x W
  Tensor<T> target;     // the patch of I_a, 3 x p x p
};

template <std::floating_point T>
PatchBatch<T> make_batch(const scene::CameraModel& cam, const Image& image, std::size_t row, std::size_t col,
                         std::size_t p) {
  PatchBatch<T> b;
  b.rays = field::patch_rays(cam, row, col, p);
  b.row = row;
  b.col = col;
  b.reference = image.to_tensor<T>();
  b.target = image.crop(row, col, p, p).to_tensor<T>();
  return b;
}

template <std::floating_point T>
struct LossTerms {
  Tensor<T> total;
  Tensor<T> appearance;  // L_a (zero when the variant has no appearance stage)
  Tensor<T> transient;   // L_t
  Tensor<T> rendered;    // I_n, 3 x p x p
  Tensor<T> map;         // M samples, 1 x p x p (absent without the transient stage)
};

/// Forward pass of the variant's graph on one patch.
template <std::floating_point T>
LossTerms<T> forward_losses(const Weights<T>& w, const TrainConfig& cfg, const PatchBatch<T>& batch, double near,
                            double far, std::mt19937_64* jitter) {
  const auto g = select_variant(cfg.variant);
  const std::size_t p = cfg.patch(), c = cfg.field.channels, n = cfg.samples;
  if (batch.rays.size() != p * p) throw ShapeError("batch ray count does not match the configured patch");
  const auto rb = field::render_rays(w, cfg.field, batch.rays, n, near, far, jitter);
  const auto cross = reshape(transpose(rb.features), {c, p, p});

  LossTerms<T> out;
  if (g.appearance) {
    const auto fa = appearance::encode_appearance(w, batch.reference);
    Tensor<T> transformed;
    if (g.raypoint) {
      // C x p x (p n) grid of ray-point features, transformed, then rendered.
      const auto points = reshape(transpose(reshape(rb.samples, {p * p * n, c})), {c, p, p * n});
      const auto moved = appearance::learned_transform(w, points, fa);
      const auto per_sample = reshape(transpose(reshape(moved, {c, p * p * n})), {p * p, n, c});
      transformed = reshape(transpose(field::accumulate(per_sample, rb.weights)), {c, p, p});
    } else {
      transformed = appearance::learned_transform(w, cross, fa);
    }
    out.rendered = appearance::decode(w, transformed);
    out.appearance = squared_l2_norm(sub(appearance::encode_appearance(w, out.rendered), fa));
    if (cfg.beta > 0) {
      const auto content = sub(appearance::encode(w, "app.E5", out.rendered),
                               appearance::encode(w, "app.E5", appearance::decode(w, cross)));
      out.appearance = add(out.appearance, scalar_mul(squared_l2_norm(content), static_cast<T>(cfg.beta)));
    }
  } else {
    out.rendered = appearance::decode(w, cross);
    out.appearance = Tensor<T>::scalar(T(0));
  }

  if (g.transient) {
    const auto full = transient::segment_transient(w, batch.reference);
    out.map = reshape(transient::grid_sample_map(full, transient::patch_coords(batch.row, batch.col, p)), {1, p, p});
    out.transient = transient::transient_loss(out.map, out.rendered, batch.target, static_cast<T>(cfg.mask_reg));
  } else {
    out.transient = transient::transient_loss(Tensor<T>({1, p, p}), out.rendered, batch.target, T(0));
  }
  out.total = cfg.lambda == 0 ? out.appearance : add(out.appearance, scalar_mul(out.transient, static_cast<T>(cfg.lambda)));
  return out;
}

struct StepRecord {
  std::size_t step = 0;
  double loss_total = 0, loss_a = 0, loss_t = 0, seconds = 0;
};

/// One Adam step on every parameter of the variant. Returns the losses
/// evaluated before the update.
template <std::floating_point T>
StepRecord train_step(ParamSet<T>& params, const TrainConfig& cfg, const PatchBatch<T>& batch, double near, double far,
                      std::mt19937_64* jitter, std::size_t step = 0) {
  Tape<T> tape;
  const auto w = params.bind(tape);
  LossTerms<T> terms;
  try {
    terms = forward_losses(w, cfg, batch, near, far, jitter);
  } catch (const NonFiniteError& e) {
    throw NumericalError("non-finite value at step " + std::to_string(step) + ": " + e.what());
  }
  StepRecord r{step, terms.total.item(), terms.appearance.item(), terms.transient.item(), 0};
  if (!std::isfinite(r.loss_total)) throw NumericalError("non-finite loss at step " + std::to_string(step));
  adam_update(params, named_gradients(w, backprop(tape, terms.total)),
              AdamOptions{static_cast<T>(cfg.learning_rate), T(0.9), T(0.999), T(1e-8)});
  return r;
}

// ---------------------------------------------------------------------------
// Checkpoints

struct Checkpoint {
  TrainConfig config;
  std::size_t step = 0;
  ParamSet<double> params;  // stored losslessly as double regardless of training precision
};

inline constexpr const char* kCheckpointFormat = "crossray-ckpt-v1";

template <std::floating_point T>
void save_checkpoint(const std::filesystem::path& path, const ParamSet<T>& params, const TrainConfig& cfg,
                     std::size_t step) {
  nlohmann::json j;
  j["format"] = kCheckpointFormat;
  j["config"] = config_to_json(cfg);
  j["step"] = step;
  auto& ps = j["params"];
  auto as_vec = [](const Tensor<T>& t) { return std::vector<double>(t.values().begin(), t.values().end()); };
  for (const auto& [name, p] : params.items()) {
    ps[name] = {{"shape", p.value.shape()},
                {"value", as_vec(p.value)},
                {"m", as_vec(p.first_moment)},
                {"v", as_vec(p.second_moment)},
                {"step", p.step}};
  }
  const auto bytes = nlohmann::json::to_cbor(j);
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw IoError("cannot write checkpoint " + tmp);
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("write failed for checkpoint " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), {});
  nlohmann::json j;
  try {
    j = nlohmann::json::from_cbor(bytes);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed checkpoint " + path.string() + ": " + e.what());
  }
  if (j.value("format", std::string{}) != kCheckpointFormat) throw IoError("unsupported checkpoint format in " + path.string());
  Checkpoint ck;
  ck.config = config_from_json(j.at("config"));
  ck.step = j.at("step");
  for (const auto& [name, pj] : j.at("params").items()) {
    const Shape shape = pj.at("shape").get<Shape>();
    Param<double> p{Tensor<double>(shape, pj.at("value").get<std::vector<double>>()),
                    Tensor<double>(shape, pj.at("m").get<std::vector<double>>()),
                    Tensor<double>(shape, pj.at("v").get<std::vector<double>>()), pj.at("step").get<std::int64_t>()};
    ck.params.add_param(name, std::move(p));
  }
  return ck;
}

// ---------------------------------------------------------------------------
// Training loop

/// Per-step generator derived from (seed, step) so resumed runs replay exactly.
inline std::mt19937_64 step_rng(std::uint64_t seed, std::size_t step) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(step), static_cast<std::uint32_t>(static_cast<std::uint64_t>(step) >> 32),
                    0x63727279u};
  return std::mt19937_64(seq);
}

struct TrainResult {
  std::filesystem::path checkpoint;
  std::vector<StepRecord> log;
};

inline std::string format_log_row(const StepRecord& r) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%zu,%.9g,%.9g,%.9g,%.3f", r.step, r.loss_total, r.loss_a, r.loss_t, r.seconds);
  return buf;
}

inline constexpr const char* kLogHeader = "step,loss_total,loss_a,loss_t,seconds";

struct TrainHooks {
  std::function<void(const StepRecord&)> on_step;
};

template <std::floating_point T>
TrainResult run_training_typed(const scene::Dataset& ds, TrainConfig cfg, const std::filesystem::path& out_dir,
                               const std::optional<Checkpoint>& resume, const TrainHooks& hooks) {
  namespace fs = std::filesystem;
  const auto train = ds.split("train");
  if (train.empty()) throw ConfigError("dataset has no training images");
  const std::size_t p = cfg.patch();
  for (const auto* e : train) {
    if (e->camera.height < p || e->camera.width < p) {
      throw ConfigError("patch " + std::to_string(p) + "x" + std::to_string(p) + " does not fit image '" + e->id + "'");
    }
  }
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());

  ParamSet<T> params;
  std::size_t start = 0;
  TrainResult result;
  if (resume) {
    params = resume->params.template cast<T>();
    start = resume->step;
    // Keep earlier log rows up to the checkpoint.
    std::ifstream old(out_dir / "train_log.csv");
    std::string line;
    std::getline(old, line);
    while (std::getline(old, line)) {
      StepRecord r;
      if (std::sscanf(line.c_str(), "%zu,%lf,%lf,%lf,%lf", &r.step, &r.loss_total, &r.loss_a, &r.loss_t, &r.seconds) == 5 &&
          r.step < start) {
        result.log.push_back(r);
      }
    }
  } else {
    params = init_model<T>(cfg);
  }
  scene::write_text(out_dir / "run_config.json", config_to_json(cfg).dump(2) + "\n");

  std::ofstream log(out_dir / "train_log.csv", std::ios::trunc);
  if (!log) throw IoError("cannot write " + (out_dir / "train_log.csv").string());
  log << kLogHeader << "\n";
  for (const auto& r : result.log) log << format_log_row(r) << "\n";

  auto checkpoint = [&](std::size_t step) {
    char name[48];
    std::snprintf(name, sizeof(name), "ckpt_%06zu.cbor", step);
    save_checkpoint(out_dir / name, params, cfg, step);
    save_checkpoint(out_dir / "checkpoint.cbor", params, cfg, step);
    result.checkpoint = out_dir / "checkpoint.cbor";
  };
  if (!resume) checkpoint(0);

  const auto t0 = std::chrono::steady_clock::now();
  for (std::size_t step = start; step < cfg.steps; ++step) {
    auto rng = step_rng(cfg.seed, step);
    const auto* entry = train[std::uniform_int_distribution<std::size_t>(0, train.size() - 1)(rng)];
    const std::size_t row = std::uniform_int_distribution<std::size_t>(0, entry->camera.height - p)(rng);
    const std::size_t col = std::uniform_int_distribution<std::size_t>(0, entry->camera.width - p)(rng);
    const auto batch = make_batch<T>(entry->camera, ds.images.at(entry->id), row, col, p);
    auto rec = train_step(params, cfg, batch, ds.scene.near, ds.scene.far, &rng, step);
    if (cfg.record_wall_time) rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.log.push_back(rec);
    log << format_log_row(rec) << "\n" << std::flush;
    if (hooks.on_step) hooks.on_step(rec);
    if (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0) checkpoint(step + 1);
  }
  if (result.checkpoint.empty() || (cfg.steps > start && (cfg.checkpoint_every == 0 || cfg.steps % cfg.checkpoint_every != 0))) {
    checkpoint(std::max(cfg.steps, start));
  }
  return result;
}

/// Trains on a dataset directory, writing checkpoints, train_log.csv and
/// run_config.json into `out_dir`. With `resume`, continues from that
/// checkpoint's step using its parameters, Adam state and configuration
/// (only `steps` is taken from `cfg`).
inline TrainResult run_training(const std::filesystem::path& dataset_dir, TrainConfig cfg,
                                const std::filesystem::path& out_dir, const std::optional<std::filesystem::path>& resume = {},
                                const TrainHooks& hooks = {}) {
  std::optional<Checkpoint> ck;
  if (resume) {
    ck = load_checkpoint(*resume);
    const std::size_t steps = cfg.steps;
    const bool wall = cfg.record_wall_time;
    cfg = ck->config;
    cfg.steps = steps;
    cfg.record_wall_time = wall;
  }
  cfg.validate();
  const auto ds = scene::load_dataset(dataset_dir);
  if (cfg.precision == "double") return run_training_typed<double>(ds, cfg, out_dir, ck, hooks);
  return run_training_typed<float>(ds, cfg, out_dir, ck, hooks);
}

}  // namespace crossray
