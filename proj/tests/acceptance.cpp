// One line per acceptance criterion: PASS, FAIL or SKIP with the measured
// numbers. Criteria 4, 5 and 9 need long training runs; they read the
// report written by `crossray ablate` from $CROSSRAY_ABLATION_REPORT.
//
// Usage: acceptance [--only 1,2,3]
// Exit: 1 if anything failed, else 77 if anything was skipped, else 0.
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <set>
#include <sstream>

#include "crossray/diagnostics.hpp"
#include "crossray/linalg.hpp"
#include "crossray/render.hpp"
#include "crossray/runtime.hpp"

using namespace crossray;
namespace fs = std::filesystem;
using clk = std::chrono::steady_clock;

namespace {

enum class Status { kPass, kFail, kSkip };

struct Outcome {
  Status status;
  std::string detail;
};

double since(clk::time_point t) { return std::chrono::duration<double>(clk::now() - t).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), f, args...);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

fs::path work_dir() {
  static const fs::path d = [] {
    auto p = fs::temp_directory_path() / ("crossray_acceptance_" + std::to_string(::getpid()));
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return d;
}

// 64x64 collection shared by the inference criteria.
const scene::Dataset& inference_dataset() {
  static const scene::Dataset ds = [] {
    scene::DatasetOptions opt;
    opt.n_train = 10;
    opt.n_test = 2;
    opt.seed = 11;
    scene::generate_dataset(scene::default_scene(), opt, work_dir() / "ds64");
    return scene::load_dataset(work_dir() / "ds64");
  }();
  return ds;
}

// ---------------------------------------------------------------------------

Outcome transform_optimality() {
  const auto t0 = clk::now();
  const auto trials = linalg::verify_transform_optimality(0, 50, 200, 2026);
  const double secs = since(t0);
  std::size_t optimal = 0;
  double worst_res = 0, worst_gap = -1e300;
  for (const auto& t : trials) {
    optimal += t.optimal() && t.constraint_residual < 1e-8;
    worst_res = std::max(worst_res, t.constraint_residual);
    worst_gap = std::max(worst_gap, t.objective_closed_form - t.min_objective_random);
  }
  const bool ok = optimal == trials.size() && secs < 30;
  return {ok ? Status::kPass : Status::kFail,
          fmt("%zu/%zu instances optimal and feasible; max residual %.1e; max (closed - best random) %.3g; %.1fs", optimal,
              trials.size(), worst_res, worst_gap, secs)};
}

Outcome gradient_integrity() {
  const auto t0 = clk::now();
  double worst = 0;
  std::string worst_op;
  for (auto kind : diagnostics::differentiable_ops()) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const double e = diagnostics::check_op(kind, seed).max_error();
      if (e > worst) worst = e, worst_op = op_name(kind);
    }
  }
  const auto pipe = diagnostics::check_toy_pipeline();
  const double secs = since(t0);
  const bool ok = worst < 1e-4 && pipe.max_error() < 1e-4 && secs < 300;
  return {ok ? Status::kPass : Status::kFail,
          fmt("%zu ops x 5 instances max rel error %.2e (%s); full objective on 8x8 toy %.2e over %zu parameters; %.1fs",
              diagnostics::differentiable_ops().size(), worst, worst_op.c_str(), pipe.max_error(), pipe.entries.size(),
              secs)};
}

Outcome volume_rendering() {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0, 1);
  double oracle_err = 0, tensor_err = 0, opaque_err = 0;
  std::size_t bad_invariants = 0;
  for (int ray = 0; ray < 1000; ++ray) {
    const std::size_t n = 2 + static_cast<std::size_t>(u(rng) * 63), c = 3;
    const double tn = 0.5 + u(rng), tf = tn + 0.5 + 4 * u(rng);
    const auto s = field::sample_ray_points(n, tn, tf, &rng);
    std::vector<double> payload(n * c), sigma(n);
    for (auto& v : payload) v = u(rng);
    for (auto& v : sigma) v = u(rng) < 0.2 ? 0.0 : 20 * u(rng) * u(rng);
    const auto r = field::volume_render(payload, c, sigma, s.deltas, s.t);
    // Literal sum: every term rebuilds its transmittance product.
    std::vector<double> lit(c, 0.0);
    double total = 0;
    for (std::size_t i = 0; i < n; ++i) {
      double phi = 1.0;
      for (std::size_t l = 0; l < i; ++l) phi *= std::exp(-sigma[l] * s.deltas[l]);
      if (i == 0 && phi != 1.0) ++bad_invariants;
      const double w = phi * (1.0 - std::exp(-sigma[i] * s.deltas[i]));
      if (r.weights[i] < 0) ++bad_invariants;
      total += r.weights[i];
      for (std::size_t k = 0; k < c; ++k) lit[k] += w * payload[i * c + k];
    }
    if (total > 1.0 + 1e-15) ++bad_invariants;
    if (std::abs(r.weights[0] + std::expm1(-sigma[0] * s.deltas[0])) > 1e-15) ++bad_invariants;  // phi_1 = 1
    const auto w = field::render_weights(Tensor<double>({1, n}, sigma), Tensor<double>({1, n}, s.deltas));
    const auto acc = field::accumulate(Tensor<double>({1, n, c}, payload), w);
    for (std::size_t k = 0; k < c; ++k) {
      oracle_err = std::max(oracle_err, std::abs(r.output[k] - lit[k]));
      tensor_err = std::max(tensor_err, std::abs(acc[k] - lit[k]));
    }
    // Single opaque sample: everything before it empty.
    std::vector<double> opaque(n, 0.0);
    const std::size_t k0 = static_cast<std::size_t>(u(rng) * static_cast<double>(n));
    opaque[k0] = 1e6;
    const auto ro = field::volume_render(payload, c, opaque, s.deltas, s.t);
    for (std::size_t k = 0; k < c; ++k) opaque_err = std::max(opaque_err, std::abs(ro.output[k] - payload[k0 * c + k]));
  }
  const bool ok = bad_invariants == 0 && oracle_err <= 1e-12 && tensor_err <= 1e-12 && opaque_err <= 1e-6;
  return {ok ? Status::kPass : Status::kFail,
          fmt("1000 rays: %zu invariant violations; |render - literal| %.1e (tensor path %.1e); opaque limit %.1e",
              bad_invariants, oracle_err, tensor_err, opaque_err)};
}

// Reads the ablation report; returns nullopt with a skip reason when absent
// or when it does not follow the full protocol.
struct AblationRun {
  std::string name, variant;
  std::size_t rays = 0, steps = 0;
  double psnr = 0, iou = 0;
  bool has_iou = false;
};

struct Ablation {
  std::vector<AblationRun> runs;
  std::string scale_note;  // non-empty: report exists but is scaled down

  const AblationRun* find(const std::string& variant, std::size_t rays = 1024) const {
    for (const auto& r : runs)
      if (r.variant == variant && r.rays == rays) return &r;
    return nullptr;
  }

  // Variant runs are named after the variant and trained at the report's base ray count.
  const AblationRun* named(const std::string& name) const {
    for (const auto& r : runs)
      if (r.name == name) return &r;
    return nullptr;
  }
};

std::optional<Ablation> load_ablation(std::string& why) {
  const char* path = std::getenv("CROSSRAY_ABLATION_REPORT");
  if (!path || !*path) {
    why = "needs 30k-step training runs; set CROSSRAY_ABLATION_REPORT to the ablation_report.json of `crossray ablate`";
    return std::nullopt;
  }
  std::ifstream f(path);
  if (!f) {
    why = std::string("cannot read ") + path;
    return std::nullopt;
  }
  const auto j = nlohmann::json::parse(f);
  Ablation a;
  for (const auto& r : j.at("runs")) {
    a.runs.push_back({r.at("name").get<std::string>(), r.at("variant").get<std::string>(), r.at("rays").get<std::size_t>(), r.at("steps").get<std::size_t>(),
                      r.at("mean_psnr").get<double>(), r.at("mean_iou").get<double>(), r.at("has_iou").get<bool>()});
  }
  const auto ds = scene::load_dataset(j.at("dataset").get<std::string>());
  const auto train = ds.split("train"), test = ds.split("test");
  const auto& cam = ds.cameras.front().camera;
  std::size_t min_steps = SIZE_MAX;
  std::size_t min_rays = SIZE_MAX;
  for (const auto& r : a.runs) min_steps = std::min(min_steps, r.steps), min_rays = std::min(min_rays, r.rays);
  if (min_steps < 30000 || min_rays < 1024 || train.size() != 30 || test.size() != 8 || cam.height != 64 ||
      cam.width != 64 || j.at("seed").get<std::uint64_t>() != 0) {
    a.scale_note = fmt("scaled-down report (%zu steps, %zu min rays, %zux%zu, %zu/%zu views)",
                       min_steps == SIZE_MAX ? 0 : min_steps, min_rays == SIZE_MAX ? 0 : min_rays, cam.height, cam.width,
                       train.size(), test.size());
  }
  return a;
}

// PASS/FAIL at full protocol; a scaled-down report only yields SKIP with the
// observed outcome, since the criterion is defined at full scale.
Outcome judge(const Ablation& a, bool holds, const std::string& detail) {
  if (!a.scale_note.empty()) {
    return {Status::kSkip, a.scale_note + "; property would " + (holds ? "hold" : "not hold") + ": " + detail};
  }
  return {holds ? Status::kPass : Status::kFail, detail};
}

Outcome ablation_ordering() {
  std::string why;
  const auto a = load_ablation(why);
  if (!a) return {Status::kSkip, why};
  const auto *full = a->named("full"), *app = a->named("appearance-only"), *tr = a->named("transient-only"),
             *base = a->named("base");
  if (!full || !app || !tr || !base) return {Status::kFail, "report lacks one of full/appearance-only/transient-only/base"};
  const bool holds = full->psnr >= app->psnr && full->psnr - base->psnr >= 2.0 && app->psnr - base->psnr >= 1.5 &&
                     tr->psnr >= base->psnr;
  return judge(*a, holds,
               fmt("PSNR full %.2f, appearance-only %.2f, transient-only %.2f, base %.2f", full->psnr, app->psnr, tr->psnr,
                   base->psnr));
}

Outcome transient_detection() {
  std::string why;
  const auto a = load_ablation(why);
  if (!a) return {Status::kSkip, why};
  const auto* full = a->named("full");
  if (!full || !full->has_iou) return {Status::kFail, "report has no full-variant IoU"};
  return judge(*a, full->iou >= 0.5, fmt("mean IoU %.3f (needs >= 0.5)", full->iou));
}

Outcome amortized_inference() {
  const auto& ds = inference_dataset();
  TrainConfig cfg;  // default architecture, untrained weights
  const auto params = init_model<float>(cfg);
  const auto w = params.weights();
  std::vector<Image> refs;
  for (const auto* e : ds.split("train")) refs.push_back(ds.images.at(e->id));
  const auto& cam = ds.split("test").front()->camera;
  auto t0 = clk::now();
  const auto multi = render_multi_appearance(w, cfg, cam, ds.scene.near, ds.scene.far, refs);
  const double amortized = since(t0);
  t0 = clk::now();
  bool identical = true;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    identical = identical && render_novel_view(w, cfg, cam, ds.scene.near, ds.scene.far, &refs[i]) == multi[i];
  }
  const double independent = since(t0);
  const double speedup = independent / amortized;
  return {speedup >= 3 && identical ? Status::kPass : Status::kFail,
          fmt("k=10 at 64x64: %.2fs cached vs %.2fs independent (%.1fx); outputs %s", amortized, independent, speedup,
              identical ? "bit-identical" : "DIFFER")};
}

Outcome interpolation_endpoints() {
  const auto& ds = inference_dataset();
  TrainConfig cfg;
  const auto params = init_model<float>(cfg);
  const auto w = params.weights();
  const auto& a = ds.images.at("train_000");
  const auto& b = ds.images.at("train_001");
  const auto& cam = ds.split("test").front()->camera;
  const auto frames = interpolate_appearance(w, cfg, cam, ds.scene.near, ds.scene.far, a, b, {0.0, 0.5, 1.0});
  const bool first = frames.front() == render_novel_view(w, cfg, cam, ds.scene.near, ds.scene.far, &a);
  const bool last = frames.back() == render_novel_view(w, cfg, cam, ds.scene.near, ds.scene.far, &b);
  const bool moved = !(frames[1] == frames[0]);
  return {first && last ? Status::kPass : Status::kFail,
          fmt("alpha=0 %s, alpha=1 %s, alpha=0.5 %s the endpoints", first ? "bit-identical" : "DIFFERS",
              last ? "bit-identical" : "DIFFERS", moved ? "differs from" : "equals")};
}

Outcome determinism() {
  const auto& ds = inference_dataset();
  TrainConfig cfg;
  cfg.rays = 64;
  cfg.samples = 8;
  cfg.field.depth = 3;
  cfg.field.width = 32;
  cfg.field.skip = 2;
  cfg.field.pos_levels = 4;
  cfg.field.dir_levels = 2;
  cfg.field.channels = 4;
  cfg.app_hidden = 8;
  cfg.seg_hidden = 4;
  cfg.steps = 20;
  cfg.seed = 7;
  cfg.checkpoint_every = 10;
  cfg.record_wall_time = false;
  const auto r1 = run_training(ds.root, cfg, work_dir() / "det_a");
  const auto r2 = run_training(ds.root, cfg, work_dir() / "det_b");
  const bool logs = slurp(work_dir() / "det_a" / "train_log.csv") == slurp(work_dir() / "det_b" / "train_log.csv");
  const bool ckpts = slurp(r1.checkpoint) == slurp(r2.checkpoint);
  const auto ck = load_checkpoint(r1.checkpoint);
  const auto* test = ds.split("test").front();
  const auto& ref = ds.images.at(test->reference_id);
  bool pngs = false;
  with_model(ck, [&](const auto& w, const TrainConfig& c) {
    write_png(work_dir() / "r1.png", render_novel_view(w, c, test->camera, ds.scene.near, ds.scene.far, &ref));
    write_png(work_dir() / "r2.png", render_novel_view(w, c, test->camera, ds.scene.near, ds.scene.far, &ref));
    pngs = slurp(work_dir() / "r1.png") == slurp(work_dir() / "r2.png");
  });
  return {logs && ckpts && pngs ? Status::kPass : Status::kFail,
          fmt("two 20-step runs: train_log.csv %s, checkpoints %s; two renders: PNG %s", logs ? "identical" : "DIFFER",
              ckpts ? "identical" : "DIFFER", pngs ? "identical" : "DIFFER")};
}

Outcome ray_count_sweep() {
  std::string why;
  const auto a = load_ablation(why);
  if (!a) return {Status::kSkip, why};
  std::string detail;
  double best = -1e300, worst = 1e300;
  for (std::size_t m : {400u, 576u, 784u, 1024u}) {
    const auto* r = a->find("full", m);
    if (!r) return {Status::kFail, fmt("report lacks the full variant at %zu rays", m)};
    best = std::max(best, r->psnr);
    worst = std::min(worst, r->psnr);
    detail += fmt("%s%zu: %.2f", detail.empty() ? "" : ", ", m, r->psnr);
  }
  return judge(*a, best - worst <= 3.0, "PSNR by rays " + detail + fmt(" (spread %.2f dB, limit 3)", best - worst));
}

}  // namespace

int main(int argc, char** argv) {
  tune_process(argv);
  std::set<int> only;
  for (int i = 1; i + 1 < argc; ++i) {
    if (std::string(argv[i]) == "--only") {
      std::stringstream ss(argv[i + 1]);
      for (std::string s; std::getline(ss, s, ',');) only.insert(std::stoi(s));
    }
  }
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"closed-form transform is feasible and optimal", transform_optimality},
      {"gradients match finite differences", gradient_integrity},
      {"volume rendering weights and oracle", volume_rendering},
      {"ablation ordering of test PSNR", ablation_ordering},
      {"unsupervised transient detection IoU", transient_detection},
      {"amortized multi-appearance inference", amortized_inference},
      {"interpolation endpoints", interpolation_endpoints},
      {"training and inference determinism", determinism},
      {"ray-count sweep within 3 dB", ray_count_sweep},
  };
  bool failed = false, skipped = false;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && !only.count(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {Status::kFail, std::string("error: ") + e.what()};
    }
    const char* tag = o.status == Status::kPass ? "PASS" : o.status == Status::kFail ? "FAIL" : "SKIP";
    std::printf("[%s] %d %s: %s\n", tag, id, criteria[i].first.c_str(), o.detail.c_str());
    std::fflush(stdout);
    failed = failed || o.status == Status::kFail;
    skipped = skipped || o.status == Status::kSkip;
  }
  fs::remove_all(work_dir());
  return failed ? 1 : skipped ? 77 : 0;
}
