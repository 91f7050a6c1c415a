#include "mvp/diffusion.hpp"

#include <gtest/gtest.h>

#include <filesystem>

#include "mvp/synthetic.hpp"
#include "support/finite_diff.hpp"

namespace mvp {
namespace {

DiffusionConfig micro() {
  DiffusionConfig c;
  c.n_views = 2;
  c.image_size = 8;
  c.patch_size = 2;
  c.token_dim = 8;
  c.n_heads = 2;
  c.scheduler.T = 100;
  return c;
}

Matrix random_matrix(std::size_t r, std::size_t c, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  return randn(r, c, scale, rng);
}

TEST(Scheduler, AlphaBarIsMonotoneInUnitInterval) {
  for (auto kind : {BetaSchedule::linear, BetaSchedule::cosine}) {
    Scheduler s({1000, kind});
    EXPECT_GT(s.alpha_bar(0), 0.99);
    for (std::size_t t = 0; t < s.steps(); ++t) {
      EXPECT_GT(s.alpha_bar(t), 0.0);
      EXPECT_LE(s.alpha_bar(t), 1.0);
      if (t > 0) EXPECT_LE(s.alpha_bar(t), s.alpha_bar(t - 1));
    }
    EXPECT_LT(s.alpha_bar(999), 0.01);
  }
  EXPECT_THROW(Scheduler::from_alpha_bars({0.5, 0.9}), ValidationError);
  EXPECT_THROW(Scheduler::from_alpha_bars({1.5}), ValidationError);
}

TEST(Scheduler, NoiseEndpoints) {
  const auto s = Scheduler::from_alpha_bars({1.0, 0.5, 1e-30});
  const Matrix x0 = random_matrix(4, 12, 1), eps = random_matrix(1, 12, 2);
  EXPECT_EQ(add_noise(x0, eps, 0, s), x0);
  const Matrix noisy = add_noise(x0, eps, 2, s);
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 12; ++c) EXPECT_NEAR(noisy(r, c), eps(0, c), 1e-14);
  EXPECT_THROW(add_noise(x0, eps, 3, s), std::out_of_range);
  EXPECT_THROW(add_noise(x0, random_matrix(2, 12, 3), 1, s), ShapeError);
}

TEST(Scheduler, EstimateX0Specializations) {
  const auto s = Scheduler::from_alpha_bars({1.0, 0.25, 1e-25});
  const Matrix xt = random_matrix(2, 6, 4), eh = random_matrix(2, 6, 5);
  EXPECT_EQ(estimate_x0(xt, eh, 0, s), xt);
  const Matrix zero(2, 6, 0.0);
  const Matrix r = estimate_x0(xt, zero, 1, s);
  for (std::size_t i = 0; i < r.size(); ++i) EXPECT_DOUBLE_EQ(r.data[i], xt.data[i] / 0.5);
  EXPECT_THROW(estimate_x0(xt, eh, 2, s), std::domain_error);
}

TEST(Scheduler, RoundTripWithTrueNoiseIsExact) {
  const Matrix x0 = random_matrix(4, 48, 6), eps = random_matrix(1, 48, 7);
  for (auto kind : {BetaSchedule::linear, BetaSchedule::cosine}) {
    Scheduler s({1000, kind});
    double worst = 0.0;
    for (std::size_t t = 0; t < 1000; ++t) {
      const Matrix back = estimate_x0(add_noise(x0, eps, t, s), broadcast_noise(eps, 4), t, s);
      for (std::size_t i = 0; i < x0.size(); ++i) worst = std::max(worst, std::abs(back.data[i] - x0.data[i]));
    }
    EXPECT_LT(worst, 1e-10);
  }
}

TEST(Scheduler, SharedNoiseIsIdenticalAcrossViews) {
  Scheduler s({50, BetaSchedule::linear});
  const Matrix x0(4, 12, 0.0), eps = random_matrix(1, 12, 8);
  const Matrix xt = add_noise(x0, eps, 30, s);
  for (std::size_t r = 1; r < 4; ++r)
    for (std::size_t c = 0; c < 12; ++c) EXPECT_EQ(xt(r, c), xt(0, c));
}

TEST(PretrainLoss, MeanReductionAndSymmetry) {
  const Matrix a = random_matrix(4, 6, 9), b = random_matrix(4, 6, 10);
  EXPECT_EQ(pretrain_loss(a, a), 0.0);
  EXPECT_DOUBLE_EQ(pretrain_loss(Matrix(4, 6, 0.0), Matrix(4, 6, 1.0)), 1.0);
  EXPECT_DOUBLE_EQ(pretrain_loss(a, b), pretrain_loss(b, a));
  EXPECT_THROW(pretrain_loss(a, Matrix(4, 5, 0.0)), ShapeError);
}

TEST(Denoiser, ShapeAndDeterminism) {
  const auto c = micro();
  const auto m = init_diffusion_model(c, 1);
  const Image prompt = synth_prompt_image(8, 8, 2);
  const Matrix xt = random_matrix(c.slots(), c.latent_len(), 11);
  const Matrix e1 = predict_noise(m, xt, prompt, 40);
  EXPECT_EQ(e1.rows, xt.rows);
  EXPECT_EQ(e1.cols, xt.cols);
  EXPECT_EQ(predict_noise(m, xt, prompt, 40), e1);
  EXPECT_THROW(predict_noise(m, random_matrix(3, c.latent_len(), 1), prompt, 40), ShapeError);
  EXPECT_THROW(predict_noise(m, xt, synth_prompt_image(6, 6, 2), 40), ShapeError);
  EXPECT_THROW(predict_noise(m, xt, prompt, 100), std::out_of_range);
}

TEST(Denoiser, CrossViewAttentionCouplesViews) {
  const auto c = micro();
  auto m = init_diffusion_model(c, 3);
  const Image prompt = synth_prompt_image(8, 8, 4);
  const Matrix xt = random_matrix(c.slots(), c.latent_len(), 12);
  Matrix moved = xt;
  for (std::size_t i = 0; i < c.latent_len(); ++i) moved(2, i) += 0.5;

  auto row_diff = [&](const Matrix& a, const Matrix& b, std::size_t r) {
    double d = 0.0;
    for (std::size_t i = 0; i < a.cols; ++i) d = std::max(d, std::abs(a(r, i) - b(r, i)));
    return d;
  };
  EXPECT_GT(row_diff(predict_noise(m, xt, prompt, 10), predict_noise(m, moved, prompt, 10), 0), 1e-6);

  for (auto& [name, t] : m.params.tensors())
    if (name.rfind("cross_view.attn.", 0) == 0) t = Matrix(t.rows, t.cols, 0.0);
  const Matrix a = predict_noise(m, xt, prompt, 10), b = predict_noise(m, moved, prompt, 10);
  for (std::size_t r = 0; r < c.slots(); ++r) {
    if (r == 2) continue;
    EXPECT_EQ(row_diff(a, b, r), 0.0) << "slot " << r;
  }
  EXPECT_GT(row_diff(a, b, 2), 1e-6);
}

TEST(Decoder, PixelModeClamps) {
  const auto c = micro();
  const auto m = init_diffusion_model(c, 5);
  Matrix lat = random_matrix(c.slots(), c.latent_len(), 13, 2.0);
  const auto views = decode(m, lat);
  ASSERT_EQ(views.size(), c.slots());
  for (std::size_t s = 0; s < views.size(); ++s)
    for (std::size_t i = 0; i < c.latent_len(); ++i)
      EXPECT_EQ(views[s].image.pixels[i], std::clamp(lat(s, i), 0.0, 1.0));
  EXPECT_EQ(views[0].domain, Domain::rgb);
  EXPECT_EQ(views[c.n_views].domain, Domain::normal);
  EXPECT_THROW(decode(m, Matrix(c.slots(), 5, 0.0)), ShapeError);
}

TEST(Decoder, LatentModeRangeAndGradient) {
  auto c = micro();
  c.pixel_space = false;
  c.decoder_hidden = 8;
  auto m = init_diffusion_model(c, 7);
  EXPECT_EQ(c.latent_len(), 4u * 4u * 3u);
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto views = decode(m, random_matrix(c.slots(), c.latent_len(), seed, 10.0));
    for (const auto& v : views)
      for (double p : v.image.pixels) {
        EXPECT_GE(p, 0.0);
        EXPECT_LE(p, 1.0);
      }
  }
  // d(weighted sum of decoded pixels)/d(latent and decoder weights)
  const Matrix wts = random_matrix(c.slots(), c.image_len(), 21);
  ParamStore lat;
  lat.add("latent", random_matrix(c.slots(), c.latent_len(), 22));
  auto objective = [&](Bindings& lb, Bindings& mb) {
    return ad::sum(ad::mul(diffusion::decode(mb, c, lb["latent"]), ad::constant(wts)));
  };
  Bindings lb = Bindings::all(lat), mb = Bindings::all(m.params);
  ad::backward(objective(lb, mb));
  auto f = [&] {
    Bindings l2 = Bindings::frozen(lat), m2 = Bindings::frozen(m.params);
    return objective(l2, m2).scalar();
  };
  auto res = testing::check_gradients(lat, lb.gradients(), f);
  EXPECT_LT(res.max_rel_error, 1e-4) << res.worst;
  auto grads = mb.gradients();
  std::map<std::string, Matrix> dec;
  for (auto& [n, g] : grads)
    if (n.rfind("decoder.", 0) == 0) dec.emplace(n, g);
  res = testing::check_gradients(m.params, dec, f);
  EXPECT_GT(res.checked, 0u);
  EXPECT_LT(res.max_rel_error, 1e-4) << res.worst;
}

TEST(Denoiser, ParameterGradientMatchesFiniteDifferences) {
  const auto c = micro();
  auto m = init_diffusion_model(c, 9);
  const Matrix prompt = image_row(synth_prompt_image(8, 8, 5), 8);
  const Matrix xt = random_matrix(c.slots(), c.latent_len(), 14);
  const Matrix wts = random_matrix(c.slots(), c.latent_len(), 15);
  auto objective = [&](Bindings& b) {
    return ad::sum(ad::mul(diffusion::predict_noise(b, c, ad::constant(xt), ad::constant(prompt), 33),
                           ad::constant(wts)));
  };
  Bindings b = Bindings::all(m.params);
  ad::backward(objective(b));
  // key biases have an exactly-zero gradient (softmax shift invariance); their
  // central differences are pure roundoff of an O(10) objective, ~1e-9
  auto res = testing::check_gradients(
      m.params, b.gradients(),
      [&] {
        Bindings fb = Bindings::frozen(m.params);
        return objective(fb).scalar();
      },
      1e-5, 1e-5);
  EXPECT_EQ(res.checked, m.params.count());
  EXPECT_LT(res.max_rel_error, 1e-4) << res.worst;
}

std::vector<DiffusionItem> toy_items(const DiffusionConfig& c, std::size_t n, std::uint64_t seed) {
  std::vector<DiffusionItem> items;
  SynthConfig s;
  s.n_views = c.n_views;
  s.domains = c.domains;
  for (const auto& p : synth_prompts(n, c.image_size, seed))
    items.push_back(make_diffusion_item(c, p.image, synth_asset_generator(p, 0.9, seed, s)));
  return items;
}

TEST(Pretraining, HeldOutLossHalves) {
  auto c = micro();
  c.token_dim = 16;
  c.scheduler.T = 200;
  auto m = init_diffusion_model(c, 11);
  const auto train = toy_items(c, 24, 30);
  const auto held = toy_items(c, 8, 31);
  const double before = heldout_pretrain_loss(m, held, 5);
  PretrainConfig pc;
  pc.steps = 300;
  pc.seed = 3;
  const auto hist = pretrain_dm(m, train, pc);
  ASSERT_EQ(hist.size(), pc.steps);
  const double after = heldout_pretrain_loss(m, held, 5);
  EXPECT_LE(after, 0.5 * before) << "before=" << before << " after=" << after;
}

TEST(Diffusion, CheckpointRoundTripAndSampling) {
  const auto c = micro();
  const auto m = init_diffusion_model(c, 13);
  const auto path = std::filesystem::temp_directory_path() / "mvp_diffusion_test.ckpt";
  save_diffusion_model(path, m);
  const auto back = load_diffusion_model(path);
  EXPECT_EQ(back.params, m.params);
  EXPECT_EQ(back.scheduler.alpha_bars(), m.scheduler.alpha_bars());
  std::filesystem::remove(path);

  const Image prompt = synth_prompt_image(8, 8, 6);
  const Matrix s1 = sample_latent(m, prompt, 4);
  EXPECT_EQ(s1, sample_latent(m, prompt, 4));
  const Image grid = view_grid(decode(m, s1), c.n_views, c.domains.size());
  EXPECT_EQ(grid.height, 16u);
  EXPECT_EQ(grid.width, 16u);
}

}  // namespace
}  // namespace mvp
