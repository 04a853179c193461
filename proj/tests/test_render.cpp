#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "crossray/render.hpp"

using namespace crossray;
namespace fs = std::filesystem;

namespace {

Image random_image(std::size_t c, std::size_t h, std::size_t w, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0, 1);
  Image img(c, h, w);
  for (auto& v : img.data) v = u(rng);
  return img;
}

// Independent SSIM: moments via E[xy] - E[x]E[y] with a separate luma pass.
double ssim_oracle(const Image& a, const Image& b) {
  const std::size_t h = a.height, w = a.width;
  auto gray = [&](const Image& im, std::size_t r, std::size_t q) {
    return 0.299 * im.at(0, r, q) + 0.587 * im.at(1, r, q) + 0.114 * im.at(2, r, q);
  };
  double total = 0;
  int count = 0;
  for (std::size_t r = 0; r + 8 <= h; ++r)
    for (std::size_t q = 0; q + 8 <= w; ++q) {
      long double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
      for (std::size_t i = 0; i < 64; ++i) {
        const double x = gray(a, r + i / 8, q + i % 8), y = gray(b, r + i / 8, q + i % 8);
        sx += x, sy += y, sxx += x * x, syy += y * y, sxy += x * y;
      }
      const long double mx = sx / 64, my = sy / 64;
      const long double vx = sxx / 64 - mx * mx, vy = syy / 64 - my * my, cxy = sxy / 64 - mx * my;
      const long double c1 = 1e-4L, c2 = 9e-4L;
      total += static_cast<double>((2 * mx * my + c1) * (2 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2)));
      ++count;
    }
  return total / count;
}

TrainConfig tiny(Variant v) {
  TrainConfig c;
  c.rays = 64;
  c.samples = 6;
  c.field.depth = 2;
  c.field.width = 16;
  c.field.skip = 1;
  c.field.pos_levels = 3;
  c.field.dir_levels = 1;
  c.field.channels = 4;
  c.app_hidden = 4;
  c.seg_hidden = 4;
  c.variant = v;
  c.precision = "double";
  return c;
}

Checkpoint make_ckpt(Variant v, std::uint64_t seed = 0) {
  auto cfg = tiny(v);
  cfg.seed = seed;
  return Checkpoint{cfg, 0, init_model<double>(cfg)};
}

const scene::Dataset& dataset() {
  static const scene::Dataset ds = [] {
    auto d = fs::temp_directory_path() / "crossray_render_ds";
    fs::remove_all(d);
    scene::DatasetOptions opt;
    opt.height = opt.width = 16;
    opt.n_train = 4, opt.n_test = 2, opt.n_variants = 2, opt.occluder_rate = 1.0, opt.seed = 5;
    scene::generate_dataset(scene::default_scene(), opt, d);
    return scene::load_dataset(d);
  }();
  return ds;
}

const scene::CameraModel& camera() { return dataset().cameras.front().camera; }

}  // namespace

TEST(Psnr, IdenticalIsCappedAndOffsetIsTwentyDb) {
  std::mt19937_64 rng(1);
  auto a = random_image(3, 8, 8, rng);
  EXPECT_EQ(metrics::psnr(a, a), 99.0);
  Image x(3, 8, 8, 0.3), y(3, 8, 8, 0.4);
  EXPECT_NEAR(metrics::psnr(x, y), 20.0, 1e-9);
  EXPECT_THROW(metrics::psnr(x, Image(3, 8, 9)), ShapeError);
}

TEST(Psnr, MatchesPerPixelOracle) {
  std::mt19937_64 rng(2);
  for (int i = 0; i < 100; ++i) {
    const auto a = random_image(3, 9, 11, rng), b = random_image(3, 9, 11, rng);
    long double se = 0;
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t r = 0; r < 9; ++r)
        for (std::size_t q = 0; q < 11; ++q) se += std::pow(a.at(c, r, q) - b.at(c, r, q), 2);
    const double oracle = -10.0 * std::log10(static_cast<double>(se / (3 * 9 * 11)));
    EXPECT_NEAR(metrics::psnr(a, b), oracle, 1e-9);
  }
}

TEST(Ssim, IdenticalIsOne) {
  std::mt19937_64 rng(3);
  const auto a = random_image(3, 12, 12, rng);
  EXPECT_NEAR(metrics::ssim(a, a), 1.0, 1e-12);
  EXPECT_THROW(metrics::ssim(Image(3, 7, 12), Image(3, 7, 12)), ShapeError);
}

TEST(Ssim, NegativeImageCollapses) {
  std::mt19937_64 rng(4);
  auto a = random_image(3, 16, 16, rng);
  Image neg = a;
  for (auto& v : neg.data) v = 1.0 - v;
  const double s = metrics::ssim(a, neg);
  EXPECT_LT(s, 0.0);  // anticorrelated windows: structure term negative
  EXPECT_NEAR(s, ssim_oracle(a, neg), 1e-9);
}

TEST(Ssim, MatchesWindowOracle) {
  std::mt19937_64 rng(5);
  for (int i = 0; i < 100; ++i) {
    const auto a = random_image(3, 10, 12, rng), b = random_image(3, 10, 12, rng);
    EXPECT_NEAR(metrics::ssim(a, b), ssim_oracle(a, b), 1e-9);
  }
}

TEST(MaskIou, CountsOverlap) {
  Image a(1, 2, 2, 0.0), b(1, 2, 2, 0.0);
  EXPECT_EQ(metrics::mask_iou(a, b), 1.0);
  a.data = {1, 1, 0, 0};
  b.data = {1, 0, 1, 0};
  EXPECT_DOUBLE_EQ(metrics::mask_iou(a, b), 1.0 / 3.0);
}

TEST(Render, DeterministicAndSized) {
  const auto ck = make_ckpt(Variant::kFull);
  const auto w = ck.params.weights();
  const auto& ref = dataset().images.at("train_000");
  const auto a = render_novel_view(w, ck.config, camera(), 1.2, 5.0, &ref);
  const auto b = render_novel_view(w, ck.config, camera(), 1.2, 5.0, &ref);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.height, camera().height);
  EXPECT_EQ(a.width, camera().width);
  EXPECT_EQ(a.channels, 3u);
}

TEST(Render, TilingDoesNotChangeOutput) {
  for (auto v : {Variant::kFull, Variant::kRaypointFusion, Variant::kBase}) {
    const auto ck = make_ckpt(v);
    const auto w = ck.params.weights();
    const auto untiled = compute_cross(w, ck.config, camera(), 1.2, 5.0, camera().height);
    for (std::size_t tile : {1u, 3u, 8u}) {
      const auto tiled = compute_cross(w, ck.config, camera(), 1.2, 5.0, tile);
      EXPECT_TRUE(std::equal(tiled.grid.values().begin(), tiled.grid.values().end(), untiled.grid.values().begin()))
          << variant_name(v) << " tile " << tile;
    }
  }
}

TEST(Render, BaseVariantRefusesReference) {
  const auto ck = make_ckpt(Variant::kBase);
  const auto& ref = dataset().images.at("train_000");
  EXPECT_THROW(render_novel_view(ck.params.weights(), ck.config, camera(), 1.2, 5.0, &ref), ConfigError);
  EXPECT_NO_THROW(render_novel_view(ck.params.weights(), ck.config, camera(), 1.2, 5.0, nullptr));
  const auto full = make_ckpt(Variant::kFull);
  EXPECT_THROW(render_novel_view(full.params.weights(), full.config, camera(), 1.2, 5.0, nullptr), ConfigError);
}

TEST(RenderMulti, CachedOutputsEqualIndependentRenders) {
  const auto ck = make_ckpt(Variant::kFull);
  const auto w = ck.params.weights();
  std::vector<Image> refs;
  std::mt19937_64 rng(6);
  for (int i = 0; i < 10; ++i) refs.push_back(random_image(3, 12 + i, 16, rng));
  MultiTiming t;
  const auto multi = render_multi_appearance(w, ck.config, camera(), 1.2, 5.0, refs, &t);
  ASSERT_EQ(multi.size(), 10u);
  EXPECT_EQ(t.per_image_seconds.size(), 10u);
  for (int i = 0; i < 10; ++i) EXPECT_EQ(multi[i], render_novel_view(w, ck.config, camera(), 1.2, 5.0, &refs[i])) << i;
  const auto one = render_multi_appearance(w, ck.config, camera(), 1.2, 5.0, {refs[0]});
  EXPECT_EQ(one[0], multi[0]);
  EXPECT_THROW(render_multi_appearance(w, ck.config, camera(), 1.2, 5.0, {}), ConfigError);
}

TEST(RenderMulti, CrossFeaturesIndependentOfReference) {
  // Amortisation: the cached grid is computed without any reference.
  const auto ck = make_ckpt(Variant::kFull);
  const auto a = compute_cross(ck.params.weights(), ck.config, camera(), 1.2, 5.0);
  const auto b = compute_cross(ck.params.weights(), ck.config, camera(), 1.2, 5.0);
  EXPECT_TRUE(std::equal(a.grid.values().begin(), a.grid.values().end(), b.grid.values().begin()));
}

TEST(Interpolate, EndpointsMatchDirectRenders) {
  for (auto v : {Variant::kFull, Variant::kRaypointFusion}) {
    const auto ck = make_ckpt(v, 2);
    const auto w = ck.params.weights();
    const auto& ra = dataset().images.at("train_000");
    const auto& rb = dataset().images.at("train_001");
    const auto frames = interpolate_appearance(w, ck.config, camera(), 1.2, 5.0, ra, rb, {0.0, 0.25, 0.5, 1.0});
    ASSERT_EQ(frames.size(), 4u);
    EXPECT_EQ(frames[0], render_novel_view(w, ck.config, camera(), 1.2, 5.0, &ra));
    EXPECT_EQ(frames[3], render_novel_view(w, ck.config, camera(), 1.2, 5.0, &rb));
    const auto same = interpolate_appearance(w, ck.config, camera(), 1.2, 5.0, ra, ra, {0.0, 0.3, 0.7, 1.0});
    for (const auto& f : same) EXPECT_EQ(f, same[0]);
    EXPECT_THROW(interpolate_appearance(w, ck.config, camera(), 1.2, 5.0, ra, rb, {0.5, 0.2}), ConfigError);
  }
}

TEST(Evaluate, GroundTruthAgainstItselfIsPerfect) {
  for (const auto* e : dataset().split("test")) {
    const auto& gt = dataset().images.at(e->id);
    EXPECT_EQ(metrics::psnr(gt, gt), 99.0);
    EXPECT_NEAR(metrics::ssim(gt, gt), 1.0, 1e-12);
  }
}

TEST(Evaluate, BaseHasNoIouAndFullDumpsMasks) {
  const auto base = evaluate_dataset(make_ckpt(Variant::kBase), dataset());
  EXPECT_FALSE(base.has_iou);
  EXPECT_EQ(base.images.size(), 2u);
  EXPECT_EQ(base.to_csv().substr(0, 19), "id,split,psnr,ssim\n");
  const auto out = fs::temp_directory_path() / "crossray_masks_out";
  fs::remove_all(out);
  const auto full = evaluate_dataset(make_ckpt(Variant::kFull), dataset(), out);
  EXPECT_TRUE(full.has_iou);
  EXPECT_EQ(full.masks.size(), 4u);
  EXPECT_TRUE(fs::exists(out / "train_000.png"));
  for (const auto& m : full.images) {
    EXPECT_GT(m.psnr, 0.0);
    EXPECT_LE(m.ssim, 1.0);
  }
}
