// Command-line front end: dataset generation, training, rendering,
// evaluation and the numerical self-checks.
#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "crossray/diagnostics.hpp"
#include "crossray/linalg.hpp"
#include "crossray/render.hpp"
#include "crossray/runtime.hpp"

using namespace crossray;
namespace fs = std::filesystem;

namespace {

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');)
    if (!item.empty()) out.push_back(item);
  return out;
}

std::vector<double> parse_doubles(const std::string& s) {
  std::vector<double> out;
  for (const auto& item : split_list(s)) {
    std::size_t used = 0;
    const double v = std::stod(item, &used);
    if (used != item.size()) throw ConfigError("not a number: '" + item + "'");
    out.push_back(v);
  }
  return out;
}

void add_model_flags(CLI::App* app, TrainConfig& cfg) {
  app->add_option("--samples", cfg.samples, "Samples per ray");
  app->add_option("--depth", cfg.field.depth, "Field MLP depth");
  app->add_option("--hidden", cfg.field.width, "Field MLP width");
  app->add_option("--skip", cfg.field.skip, "Layer that re-injects the position encoding");
  app->add_option("--pos-levels", cfg.field.pos_levels, "Position encoding frequencies");
  app->add_option("--dir-levels", cfg.field.dir_levels, "Direction encoding frequencies");
  app->add_option("--channels", cfg.field.channels, "Feature channels C");
  app->add_option("--app-hidden", cfg.app_hidden, "Hidden channels of encoders and decoder");
  app->add_option("--seg-hidden", cfg.seg_hidden, "Hidden channels of the segmenter");
}

void add_train_flags(CLI::App* app, TrainConfig& cfg, std::string& variant) {
  app->add_option("--steps", cfg.steps, "Optimisation steps")->required();
  app->add_option("--seed", cfg.seed, "Seed for init, patches and jitter");
  app->add_option("--lr", cfg.learning_rate, "Adam learning rate");
  app->add_option("--lambda", cfg.lambda, "Weight of the transient loss");
  app->add_option("--beta", cfg.beta, "Weight of the content term");
  app->add_option("--mask-reg", cfg.mask_reg, "Weight of the transient-map regulariser");
  app->add_option("--precision", cfg.precision, "float or double")->check(CLI::IsMember({"float", "double"}));
  app->add_option("--checkpoint-every", cfg.checkpoint_every, "Checkpoint interval in steps (0: final only)");
  app->add_option("--variant", variant, "full, appearance-only, transient-only, base or raypoint-fusion");
  app->add_flag("!--no-wall-time", cfg.record_wall_time, "Write 0 in the seconds column so logs compare bitwise");
  add_model_flags(app, cfg);
}

void progress(const StepRecord& r, std::size_t total, std::size_t every) {
  if (every == 0 || ((r.step + 1) % every != 0 && r.step + 1 != total)) return;
  std::fprintf(stderr, "step %zu/%zu  loss %.6g  (a %.6g, t %.6g)  %.1fs\n", r.step + 1, total, r.loss_total, r.loss_a,
               r.loss_t, r.seconds);
}

struct ViewInputs {
  Checkpoint ck;
  scene::Dataset ds;
  const scene::CameraEntry* cam = nullptr;
};

ViewInputs load_view(const std::string& ckpt, const std::string& dataset, const std::string& camera_id) {
  ViewInputs v{load_checkpoint(ckpt), scene::load_dataset(dataset)};
  v.cam = &v.ds.camera(camera_id);
  return v;
}

void write_frames(const fs::path& dir, const std::string& stem, const std::vector<Image>& frames) {
  fs::create_directories(dir);
  for (std::size_t i = 0; i < frames.size(); ++i) {
    char name[64];
    std::snprintf(name, sizeof(name), "%s_%03zu.png", stem.c_str(), i);
    write_png(dir / name, frames[i]);
  }
}

struct AblationRun {
  std::string name;
  Variant variant;
  std::size_t rays;
};

nlohmann::json report_to_json(const MetricsReport& r) {
  return {{"mean_psnr", r.mean_psnr}, {"mean_ssim", r.mean_ssim}, {"has_iou", r.has_iou}, {"mean_iou", r.mean_iou}};
}

}  // namespace

int main(int argc, char** argv) {
  tune_process(argv);
  CLI::App app{"Cross-ray neural radiance fields on synthetic photo collections"};
  app.require_subcommand(1);

  // generate-data
  auto* gen = app.add_subcommand("generate-data", "Render a synthetic photo collection");
  std::string gen_out;
  scene::DatasetOptions gen_opt;
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--height", gen_opt.height);
  gen->add_option("--width", gen_opt.width);
  gen->add_option("--train", gen_opt.n_train, "Training views");
  gen->add_option("--test", gen_opt.n_test, "Test views");
  gen->add_option("--variants", gen_opt.n_variants, "Appearance variants");
  gen->add_option("--occluder-rate", gen_opt.occluder_rate, "Probability that a training view has occluders");
  gen->add_option("--seed", gen_opt.seed);

  // train
  auto* train = app.add_subcommand("train", "Optimise a model on a dataset");
  TrainConfig train_cfg;
  std::string train_dataset, train_out, train_resume, train_variant = "full";
  std::size_t log_every = 100;
  train->add_option("--dataset", train_dataset)->required();
  train->add_option("--out", train_out)->required();
  train->add_option("--rays", train_cfg.rays, "Rays per step (a perfect square)");
  train->add_option("--resume", train_resume, "Continue from this checkpoint");
  train->add_option("--log-every", log_every, "Progress interval on stderr (0: silent)");
  add_train_flags(train, train_cfg, train_variant);

  // render
  auto* render = app.add_subcommand("render", "Render one view");
  std::string r_ckpt, r_dataset, r_camera, r_reference, r_out;
  std::size_t r_tile = 8;
  render->add_option("--ckpt", r_ckpt)->required();
  render->add_option("--dataset", r_dataset, "Dataset holding the camera")->required();
  render->add_option("--camera-id", r_camera)->required();
  render->add_option("--reference", r_reference, "Appearance image (PNG)");
  render->add_option("--out", r_out, "Output PNG")->required();
  render->add_option("--tile-rows", r_tile, "Image rows per field pass");

  // render-multi
  auto* multi = app.add_subcommand("render-multi", "Render one view under several reference appearances");
  std::string m_ckpt, m_dataset, m_camera, m_refs, m_out, m_timing;
  bool m_compare = false;
  multi->add_option("--ckpt", m_ckpt)->required();
  multi->add_option("--dataset", m_dataset)->required();
  multi->add_option("--camera-id", m_camera)->required();
  multi->add_option("--references", m_refs, "Comma-separated PNG paths")->required();
  multi->add_option("--out", m_out, "Output directory")->required();
  multi->add_option("--timing-csv", m_timing);
  multi->add_flag("--compare-independent", m_compare, "Also time one full render per reference");

  // interpolate
  auto* interp = app.add_subcommand("interpolate", "Blend the appearance of two references");
  std::string i_ckpt, i_dataset, i_camera, i_ref_a, i_ref_b, i_alphas = "0,0.25,0.5,0.75,1", i_out;
  interp->add_option("--ckpt", i_ckpt)->required();
  interp->add_option("--dataset", i_dataset)->required();
  interp->add_option("--camera-id", i_camera)->required();
  interp->add_option("--ref-a", i_ref_a)->required();
  interp->add_option("--ref-b", i_ref_b)->required();
  interp->add_option("--alphas", i_alphas, "Comma-separated, sorted, in [0, 1]");
  interp->add_option("--out", i_out, "Output directory")->required();

  // evaluate
  auto* eval = app.add_subcommand("evaluate", "PSNR/SSIM on the test split, transient IoU on the training split");
  std::string e_ckpt, e_dataset, e_csv, e_masks;
  eval->add_option("--ckpt", e_ckpt)->required();
  eval->add_option("--dataset", e_dataset)->required();
  eval->add_option("--report-csv", e_csv);
  eval->add_option("--masks-out", e_masks, "Write predicted transient maps here");

  // check-grad
  auto* cg = app.add_subcommand("check-grad", "Finite-difference check of every op and of the training objective");
  std::size_t cg_seeds = 5;
  cg->add_option("--seeds", cg_seeds, "Random instances per op");

  // verify-transform
  auto* vt = app.add_subcommand("verify-transform", "Compare the closed-form transform with random feasible ones");
  std::size_t vt_dim = 0, vt_trials = 50, vt_samples = 200;
  std::uint64_t vt_seed = 0;
  std::string vt_csv;
  vt->add_option("--dim", vt_dim, "Feature dimension (0: cycle 2..8)");
  vt->add_option("--trials", vt_trials);
  vt->add_option("--feasible-samples", vt_samples);
  vt->add_option("--seed", vt_seed);
  vt->add_option("--csv", vt_csv, "Write here instead of stdout");

  // ablate
  auto* abl = app.add_subcommand("ablate", "Train and evaluate every variant, then the full model at several ray counts");
  TrainConfig abl_cfg;
  std::string a_dataset, a_out, a_variants = "full,appearance-only,transient-only,base,raypoint-fusion",
                                a_rays = "400,576,784,1024", a_unused;
  std::size_t a_base_rays = 1024;
  abl->add_option("--dataset", a_dataset)->required();
  abl->add_option("--out", a_out)->required();
  abl->add_option("--variants", a_variants, "Variants trained at --base-rays");
  abl->add_option("--rays", a_rays, "Ray counts for the full-variant sweep (empty: no sweep)");
  abl->add_option("--base-rays", a_base_rays, "Rays per step for the variant comparison");
  abl->add_option("--log-every", log_every);
  add_train_flags(abl, abl_cfg, a_unused);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      const auto cams = scene::generate_dataset(scene::default_scene(), gen_opt, gen_out);
      std::printf("wrote %zu views to %s\n", cams.size(), gen_out.c_str());
    } else if (*train) {
      train_cfg.variant = parse_variant(train_variant);
      TrainHooks hooks;
      const std::size_t total = train_cfg.steps;
      hooks.on_step = [&](const StepRecord& r) { progress(r, total, log_every); };
      std::optional<fs::path> resume;
      if (!train_resume.empty()) resume = train_resume;
      const auto res = run_training(train_dataset, train_cfg, train_out, resume, hooks);
      std::printf("checkpoint: %s\n", res.checkpoint.string().c_str());
    } else if (*render) {
      const auto v = load_view(r_ckpt, r_dataset, r_camera);
      std::optional<Image> ref;
      if (!r_reference.empty()) ref = read_png(r_reference);
      with_model(v.ck, [&](const auto& w, const TrainConfig& cfg) {
        write_png(r_out, render_novel_view(w, cfg, v.cam->camera, v.ds.scene.near, v.ds.scene.far,
                                           ref ? &*ref : nullptr, r_tile));
      });
    } else if (*multi) {
      const auto v = load_view(m_ckpt, m_dataset, m_camera);
      std::vector<Image> refs;
      for (const auto& p : split_list(m_refs)) refs.push_back(read_png(p));
      MultiTiming t;
      double independent = -1;
      bool identical = true;
      with_model(v.ck, [&](const auto& w, const TrainConfig& cfg) {
        const auto& cam = v.cam->camera;
        const auto frames = render_multi_appearance(w, cfg, cam, v.ds.scene.near, v.ds.scene.far, refs, &t);
        write_frames(m_out, "appearance", frames);
        if (m_compare) {
          const auto s = std::chrono::steady_clock::now();
          for (std::size_t i = 0; i < refs.size(); ++i) {
            identical = identical && render_novel_view(w, cfg, cam, v.ds.scene.near, v.ds.scene.far, &refs[i]) == frames[i];
          }
          independent = std::chrono::duration<double>(std::chrono::steady_clock::now() - s).count();
        }
      });
      std::string csv = "phase,index,seconds\ncross_features,,";
      csv += std::to_string(t.cross_seconds) + "\n";
      for (std::size_t i = 0; i < t.per_image_seconds.size(); ++i) {
        csv += "transform_decode," + std::to_string(i) + "," + std::to_string(t.per_image_seconds[i]) + "\n";
      }
      csv += "amortized_total,," + std::to_string(t.total_seconds) + "\n";
      if (independent >= 0) {
        csv += "independent_total,," + std::to_string(independent) + "\n";
        csv += "speedup,," + std::to_string(independent / t.total_seconds) + "\n";
        std::printf("speedup %.2fx, outputs %s\n", independent / t.total_seconds, identical ? "bit-identical" : "DIFFER");
      }
      if (!m_timing.empty()) scene::write_text(m_timing, csv);
      if (!identical) return 1;
    } else if (*interp) {
      const auto v = load_view(i_ckpt, i_dataset, i_camera);
      const auto a = read_png(i_ref_a), b = read_png(i_ref_b);
      with_model(v.ck, [&](const auto& w, const TrainConfig& cfg) {
        write_frames(i_out, "alpha",
                     interpolate_appearance(w, cfg, v.cam->camera, v.ds.scene.near, v.ds.scene.far, a, b,
                                            parse_doubles(i_alphas)));
      });
    } else if (*eval) {
      std::optional<fs::path> masks;
      if (!e_masks.empty()) masks = e_masks;
      const auto rep = evaluate_dataset(load_checkpoint(e_ckpt), scene::load_dataset(e_dataset), masks);
      if (!e_csv.empty()) scene::write_text(e_csv, rep.to_csv());
      std::printf("mean PSNR %.3f dB  SSIM %.4f", rep.mean_psnr, rep.mean_ssim);
      if (rep.has_iou) std::printf("  transient IoU %.4f", rep.mean_iou);
      std::printf("\n");
    } else if (*cg) {
      bool ok = true;
      for (auto kind : diagnostics::differentiable_ops()) {
        double worst = 0;
        for (std::uint64_t s = 0; s < cg_seeds; ++s) worst = std::max(worst, diagnostics::check_op(kind, s).max_error());
        const bool pass = worst < 1e-4;
        ok = ok && pass;
        std::printf("%-22s max rel error %.3e  %s\n", op_name(kind), worst, pass ? "ok" : "FAIL");
      }
      const auto rep = diagnostics::check_toy_pipeline();
      for (const auto& e : rep.entries) {
        if (!e.passed) std::printf("  %s: %.3e\n", e.name.c_str(), e.max_relative_error);
      }
      std::printf("%-22s max rel error %.3e  %s\n", "training objective", rep.max_error(), rep.passed() ? "ok" : "FAIL");
      return ok && rep.passed() ? 0 : 1;
    } else if (*vt) {
      const auto trials = linalg::verify_transform_optimality(vt_dim, vt_trials, vt_samples, vt_seed);
      std::string csv = "trial,objective_closed_form,min_objective_random,constraint_residual\n";
      bool ok = true;
      for (const auto& t : trials) {
        char buf[160];
        std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g,%.3e\n", t.trial, t.objective_closed_form, t.min_objective_random,
                      t.constraint_residual);
        csv += buf;
        ok = ok && t.optimal() && t.constraint_residual < 1e-8;
      }
      if (vt_csv.empty()) {
        std::fputs(csv.c_str(), stdout);
      } else {
        scene::write_text(vt_csv, csv);
      }
      return ok ? 0 : 1;
    } else if (*abl) {
      std::vector<AblationRun> runs;
      for (const auto& name : split_list(a_variants)) runs.push_back({name, parse_variant(name), a_base_rays});
      for (const auto& m : split_list(a_rays)) {
        const std::size_t rays = std::stoul(m);
        bool dup = false;
        for (const auto& r : runs) dup = dup || (r.variant == Variant::kFull && r.rays == rays);
        if (!dup) runs.push_back({"full-rays" + m, Variant::kFull, rays});
      }
      const auto ds = scene::load_dataset(a_dataset);
      nlohmann::json report = {{"dataset", fs::absolute(a_dataset).string()},
                               {"steps", abl_cfg.steps},
                               {"seed", abl_cfg.seed},
                               {"config", config_to_json(abl_cfg)},
                               {"runs", nlohmann::json::array()}};
      std::string csv = "run,variant,rays,steps,final_loss,mean_psnr,mean_ssim,mean_iou\n";
      for (const auto& r : runs) {
        TrainConfig cfg = abl_cfg;
        cfg.variant = r.variant;
        cfg.rays = r.rays;
        const fs::path dir = fs::path(a_out) / r.name;
        std::optional<fs::path> resume;
        if (fs::exists(dir / "checkpoint.cbor")) resume = dir / "checkpoint.cbor";  // continue an interrupted sweep
        std::fprintf(stderr, "== %s (%s, %zu rays)\n", r.name.c_str(), variant_name(r.variant).c_str(), r.rays);
        TrainHooks hooks;
        hooks.on_step = [&](const StepRecord& rec) { progress(rec, cfg.steps, log_every); };
        const auto res = run_training(a_dataset, cfg, dir, resume, hooks);
        const auto ck = load_checkpoint(res.checkpoint);
        const auto rep = evaluate_dataset(ck, ds, dir / "masks");
        scene::write_text(dir / "metrics.csv", rep.to_csv());
        const double final_loss = res.log.empty() ? 0.0 : res.log.back().loss_total;
        auto j = report_to_json(rep);
        j["name"] = r.name;
        j["variant"] = variant_name(r.variant);
        j["rays"] = r.rays;
        j["steps"] = ck.step;
        j["final_loss"] = final_loss;
        report["runs"].push_back(j);
        char buf[256];
        std::snprintf(buf, sizeof(buf), "%s,%s,%zu,%zu,%.6g,%.4f,%.4f,%s\n", r.name.c_str(), variant_name(r.variant).c_str(),
                      r.rays, ck.step, final_loss, rep.mean_psnr, rep.mean_ssim,
                      rep.has_iou ? std::to_string(rep.mean_iou).c_str() : "");
        csv += buf;
        std::fputs(buf, stderr);
        // Rewritten after every run so a partial sweep still leaves a report.
        scene::write_text(fs::path(a_out) / "ablation_report.json", report.dump(2) + "\n");
        scene::write_text(fs::path(a_out) / "ablation.csv", csv);
      }
      std::fputs(csv.c_str(), stdout);
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
