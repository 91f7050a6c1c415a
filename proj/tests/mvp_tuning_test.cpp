#include "mvp/mvp_tuning.hpp"

#include <gtest/gtest.h>

#include <filesystem>

#include "support/finite_diff.hpp"

namespace mvp {
namespace {

DiffusionConfig dm_config() {
  DiffusionConfig c;
  c.n_views = 2;
  c.image_size = 8;
  c.patch_size = 2;
  c.token_dim = 8;
  c.n_heads = 2;
  c.scheduler.T = 1000;
  return c;
}

RewardModelConfig rm_config() {
  RewardModelConfig c;
  c.n_views = 2;
  c.image_size = 8;
  c.patch_size = 4;
  c.token_dim = 8;
  c.n_heads = 2;
  c.encoder_depth = 1;
  return c;
}

std::vector<DiffusionItem> items(const DiffusionConfig& c, std::size_t n, std::uint64_t seed) {
  std::vector<DiffusionItem> out;
  SynthConfig s;
  s.n_views = c.n_views;
  s.domains = c.domains;
  for (const auto& p : synth_prompts(n, c.image_size, seed))
    out.push_back(make_diffusion_item(c, p.image, synth_asset_generator(p, 0.7, seed, s)));
  return out;
}

TuningConfig tuning(std::vector<std::string> scope = {"cross_view.", "out."}) {
  TuningConfig t;
  t.trainable_scope = std::move(scope);
  t.learning_rate = 1e-3;
  t.steps = 3;
  t.seed = 5;
  return t;
}

TEST(RewardToLoss, Values) {
  EXPECT_EQ(reward_to_loss(0.0, RewardPsi::negated), 0.0);
  EXPECT_EQ(reward_to_loss(2.5, RewardPsi::negated), -2.5);
  EXPECT_NEAR(reward_to_loss(0.0, RewardPsi::softplus_negated), 0.693147180559945, 1e-12);
  EXPECT_LT(reward_to_loss(800.0, RewardPsi::softplus_negated), 1e-300);
  for (auto psi : {RewardPsi::negated, RewardPsi::softplus_negated})
    for (double r = -5; r < 5; r += 0.5) EXPECT_GT(reward_to_loss(r, psi), reward_to_loss(r + 0.5, psi));
  EXPECT_THROW(reward_to_loss(std::nan(""), RewardPsi::negated), std::domain_error);
  EXPECT_THROW(nlohmann::json("hinge").get<RewardPsi>(), ValidationError);
  EXPECT_EQ(nlohmann::json("negated").get<RewardPsi>(), RewardPsi::negated);
}

TEST(MidStep, WindowArithmetic) {
  EXPECT_EQ(mid_step_window(1000, 0.75, 0.99), (std::pair<std::size_t, std::size_t>{750, 990}));
  Rng rng(1);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(sample_mid_step(10, 0.5, 0.5, rng), 5u);
  EXPECT_THROW(sample_mid_step(10, 1.0, 1.0, rng), ValidationError);
  EXPECT_THROW(sample_mid_step(1, 0.5, 0.5, rng), ValidationError);
  EXPECT_EQ(mid_step_window(10, 0.9, 0.99).second, 9u);
}

TEST(MidStep, EmpiricalRange) {
  Rng rng(2);
  std::size_t lo = 1000, hi = 0;
  for (int i = 0; i < 10000; ++i) {
    const auto k = sample_mid_step(1000, 0.75, 0.99, rng);
    lo = std::min(lo, k);
    hi = std::max(hi, k);
  }
  EXPECT_GE(lo, 750u);
  EXPECT_LE(hi, 990u);
  EXPECT_LT(lo, 760u);
  EXPECT_GT(hi, 980u);
  EXPECT_EQ(progress_to_timestep(1000, 990), 9u);
}

TEST(TuningConfig, Validation) {
  TuningConfig t;
  EXPECT_THROW(t.validate(), ValidationError);
  t.trainable_scope = {"out."};
  EXPECT_NO_THROW(t.validate());
  t.lambda = 0;
  EXPECT_THROW(t.validate(), ValidationError);
  EXPECT_THROW(nlohmann::json::object().get<TuningConfig>(), ValidationError);
  const auto j = nlohmann::json(tuning());
  const auto back = j.get<TuningConfig>();
  EXPECT_EQ(back.trainable_scope, tuning().trainable_scope);
  EXPECT_EQ(back.psi, RewardPsi::softplus_negated);
}

TEST(MvpStep, ConstantScorerGivesScaledPretrainGradient) {
  const auto dc = dm_config();
  const auto m = init_diffusion_model(dc, 1);
  auto rm = init_reward_model(rm_config(), 2);
  rm.params.at("score.out.w") = Matrix(rm.params.at("score.out.w").rows, 1, 0.0);
  const auto data = items(dc, 1, 3);
  auto cfg = tuning();
  Rng rng(4);
  const MvpSample s = draw_mvp_sample(m, cfg, rng);

  Bindings b1 = Bindings::all(m.params);
  auto terms = mvp_objective(b1, m, rm, data[0], s, cfg);
  ad::backward(terms.combined);
  Bindings b2 = Bindings::all(m.params);
  ad::backward(pretrain_objective(b2, m, data[0], s.eps, s.t));
  const auto g1 = b1.gradients(), g2 = b2.gradients();
  ASSERT_EQ(g1.size(), g2.size());
  for (const auto& [name, g] : g1)
    for (std::size_t i = 0; i < g.size(); ++i)
      EXPECT_NEAR(g.data[i], cfg.lambda * g2.at(name).data[i], 1e-12 * (1 + std::abs(g.data[i]))) << name;
  EXPECT_DOUBLE_EQ(terms.combined.scalar(), cfg.lambda * terms.l_pt.scalar() + terms.l_rm->scalar());
}

TEST(MvpStep, FullStepGradientMatchesFiniteDifferences) {
  const auto dc = dm_config();
  auto m = init_diffusion_model(dc, 5);
  const auto rm = init_reward_model(rm_config(), 6);
  const auto data = items(dc, 1, 7);
  auto cfg = tuning({""});
  Rng rng(8);
  const MvpSample s = draw_mvp_sample(m, cfg, rng);
  Bindings b(m.params, scope_predicate(cfg.trainable_scope));
  ad::backward(mvp_objective(b, m, rm, data[0], s, cfg).combined);
  auto res = testing::check_gradients(m.params, b.gradients(), [&] {
    Bindings fb = Bindings::frozen(m.params);
    return mvp_objective(fb, m, rm, data[0], s, cfg).combined.scalar();
  });
  EXPECT_EQ(res.checked, m.params.count());
  EXPECT_LT(res.max_rel_error, 1e-3) << res.worst;
}

TEST(Tune, ScopeRewardFreezeAndMetrics) {
  const auto dc = dm_config();
  auto m = init_diffusion_model(dc, 9);
  const auto before = m.params;
  const auto rm = init_reward_model(rm_config(), 10);
  const auto rm_before = rm.params;
  const auto cfg = tuning();
  const auto hist = tune(m, rm, items(dc, 4, 11), cfg);
  ASSERT_EQ(hist.size(), cfg.steps);
  EXPECT_EQ(rm.params, rm_before);
  const auto in_scope = scope_predicate(cfg.trainable_scope);
  bool changed = false;
  for (const auto& [name, t] : m.params.tensors()) {
    if (in_scope(name))
      changed = changed || !(t == before.at(name));
    else
      EXPECT_EQ(t, before.at(name)) << name;
  }
  EXPECT_TRUE(changed);
  for (const auto& h : hist) {
    ASSERT_TRUE(h.l_rm.has_value());
    EXPECT_EQ(h.combined, cfg.lambda * h.l_pt + *h.l_rm);
  }
}

TEST(Tune, PtOnlyZeroStepsAndDeterminism) {
  const auto dc = dm_config();
  const auto rm = init_reward_model(rm_config(), 12);
  const auto data = items(dc, 3, 13);
  auto cfg = tuning();
  cfg.mode = TuneMode::pt_only;
  auto m = init_diffusion_model(dc, 14);
  const auto hist = tune(m, rm, data, cfg);
  for (const auto& h : hist) {
    EXPECT_FALSE(h.l_rm.has_value());
    EXPECT_TRUE(nlohmann::json(h)["l_rm"].is_null());
    EXPECT_EQ(h.combined, cfg.lambda * h.l_pt);
  }

  cfg.steps = 0;
  auto z = init_diffusion_model(dc, 14);
  EXPECT_TRUE(tune(z, rm, data, cfg).empty());
  EXPECT_EQ(z.params, init_diffusion_model(dc, 14).params);

  cfg = tuning();
  auto a = init_diffusion_model(dc, 15), b = init_diffusion_model(dc, 15);
  const auto ha = tune(a, rm, data, cfg);
  const auto hb = tune(b, rm, data, cfg);
  EXPECT_EQ(a.params, b.params);
  EXPECT_EQ(nlohmann::json(ha), nlohmann::json(hb));
}

TEST(Tune, IncompatibleRewardModelFailsBeforeUpdate) {
  const auto dc = dm_config();
  auto m = init_diffusion_model(dc, 16);
  const auto before = m.params;
  auto rc = rm_config();
  rc.n_views = 4;
  const auto rm = init_reward_model(rc, 17);
  EXPECT_THROW(tune(m, rm, items(dc, 2, 18), tuning()), ValidationError);
  EXPECT_EQ(m.params, before);
}

TEST(Tune, WritesPeriodicCheckpoints) {
  const auto dc = dm_config();
  auto m = init_diffusion_model(dc, 19);
  const auto rm = init_reward_model(rm_config(), 20);
  auto cfg = tuning();
  cfg.steps = 4;
  cfg.checkpoint_every = 2;
  const auto dir = std::filesystem::temp_directory_path() / "mvp_tune_ckpt_test";
  std::filesystem::remove_all(dir);
  const auto hist = tune(m, rm, items(dc, 2, 21), cfg, dir);
  EXPECT_EQ(hist[1].checkpoint, std::optional<std::size_t>(0));
  EXPECT_EQ(hist[3].checkpoint, std::optional<std::size_t>(1));
  EXPECT_FALSE(hist[0].checkpoint.has_value());
  EXPECT_EQ(load_diffusion_model(dir / "step_4.ckpt").params, m.params);
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace mvp
