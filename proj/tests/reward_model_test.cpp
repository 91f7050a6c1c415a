#include "mvp/reward_model.hpp"

#include <gtest/gtest.h>

#include <filesystem>

#include "mvp/reward_training.hpp"
#include "support/finite_diff.hpp"

namespace mvp {
namespace {

RewardModelConfig micro_config() {
  RewardModelConfig c;
  c.n_views = 2;
  c.image_size = 8;
  c.patch_size = 4;
  c.token_dim = 8;
  c.n_heads = 2;
  c.encoder_depth = 1;
  return c;
}

ImagePrompt prompt_for(std::size_t size, std::uint64_t seed = 1) {
  ImagePrompt p;
  p.id = "p" + std::to_string(seed);
  p.image = synth_prompt_image(size, size, seed);
  return p;
}

MultiViewAsset asset_for(const RewardModelConfig& c, const ImagePrompt& p, double q, std::uint64_t seed = 3) {
  SynthConfig s;
  s.n_views = c.n_views;
  s.domains = c.domains;
  return synth_asset_generator(p, q, seed, s);
}

TEST(RewardModel, ConfigValidation) {
  auto c = micro_config();
  c.n_heads = 3;
  EXPECT_THROW(init_reward_model(c, 1), ValidationError);
  c = micro_config();
  c.patch_size = 3;
  EXPECT_THROW(init_reward_model(c, 1), ValidationError);
}

TEST(RewardModel, EncoderSharesParametersAcrossSlots) {
  auto c = micro_config();
  c.n_views = 4;
  auto m = init_reward_model(c, 2);
  auto p = prompt_for(8);
  auto a = asset_for(c, p, 0.6);
  ViewImage at0 = a.views[0];
  ViewImage at3 = a.views[0];
  at3.view_index = 3;
  EXPECT_EQ(encode_view_pair(m, p.image, at0), encode_view_pair(m, p.image, at3));
  // and within a full encoding, identical content in slots 0 and 3 gives identical tokens
  a.views[3].image = a.views[0].image;
  Matrix enc = build_multiview_encoding(m, p.image, a);
  for (std::size_t d = 0; d < c.token_dim; ++d) EXPECT_EQ(enc(0, d), enc(3, d));
}

TEST(RewardModel, EncodeViewPairIsDeterministicWithLeadingCls) {
  auto c = micro_config();
  auto m = init_reward_model(c, 2);
  auto p = prompt_for(8);
  auto a = asset_for(c, p, 0.6);
  Matrix j1 = encode_view_pair(m, p.image, a.views[1]);
  Matrix j2 = encode_view_pair(m, p.image, a.views[1]);
  EXPECT_EQ(j1, j2);
  EXPECT_EQ(j1.rows, c.tokens_per_image());
  Matrix enc = build_multiview_encoding(m, p.image, a);
  for (std::size_t d = 0; d < c.token_dim; ++d) EXPECT_NEAR(enc(1, d), j1(0, d), 1e-12);
}

TEST(RewardModel, WrongResolutionIsShapeError) {
  auto c = micro_config();
  auto m = init_reward_model(c, 2);
  auto p = prompt_for(8);
  ViewImage v{Domain::rgb, 0, Image(16, 16, 0.5)};
  try {
    encode_view_pair(m, p.image, v);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("16x16"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("8x8"), std::string::npos);
  }
}

TEST(RewardModel, EncodingLengthFollowsConfig) {
  RewardModelConfig c = micro_config();
  c.n_views = 6;
  auto m = init_reward_model(c, 5);
  auto p = prompt_for(8);
  EXPECT_EQ(build_multiview_encoding(m, p.image, asset_for(c, p, 0.5)).rows, 12u);

  RewardModelConfig one = micro_config();
  one.n_views = 1;
  one.domains = {Domain::rgb};
  auto m1 = init_reward_model(one, 5);
  EXPECT_EQ(build_multiview_encoding(m1, p.image, asset_for(one, p, 0.5)).rows, 1u);

  auto bad = asset_for(one, p, 0.5);
  EXPECT_THROW(build_multiview_encoding(m, p.image, bad), ValidationError);
}

TEST(RewardModel, PerViewTokensFollowViewPermutation) {
  auto c = micro_config();
  auto m = init_reward_model(c, 7);
  auto p = prompt_for(8);
  Matrix px = asset_pixels(c, asset_for(c, p, 0.3));
  const std::vector<std::size_t> perm{2, 0, 3, 1};
  Matrix permuted(px.rows, px.cols);
  for (std::size_t s = 0; s < perm.size(); ++s)
    std::copy(px.row(perm[s]).begin(), px.row(perm[s]).end(), permuted.row(s).begin());
  Bindings b = Bindings::frozen(m.params);
  auto prompt = ad::constant(image_row(p.image, 8));
  Matrix base = reward::multiview_encoding(b, c, prompt, ad::constant(px)).value();
  Matrix moved = reward::multiview_encoding(b, c, prompt, ad::constant(permuted)).value();
  for (std::size_t s = 0; s < perm.size(); ++s)
    for (std::size_t d = 0; d < c.token_dim; ++d) EXPECT_NEAR(moved(s, d), base(perm[s], d), 1e-12);
}

TEST(RewardModel, PositionalEncodingIsAdditivePerSlot) {
  auto c = micro_config();
  auto m = init_reward_model(c, 7);
  Matrix enc(c.seq_len(), c.token_dim, 0.25);
  Matrix out = apply_positional_encoding(m, enc);
  // slot 0 is (rgb,0), slot 2 is (normal,0)
  EXPECT_NE(Matrix(1, c.token_dim, std::vector<double>(out.row(0).begin(), out.row(0).end())),
            Matrix(1, c.token_dim, std::vector<double>(out.row(2).begin(), out.row(2).end())));
  auto zeroed = m;
  zeroed.params.at("score.pos") = Matrix(c.seq_len(), c.token_dim, 0.0);
  EXPECT_EQ(apply_positional_encoding(zeroed, enc), enc);
  auto off = m;
  off.config.use_positional_encoding = false;
  EXPECT_EQ(apply_positional_encoding(off, enc), enc);
}

TEST(RewardModel, SelfAttentionIsPermutationEquivariant) {
  auto c = micro_config();
  c.n_views = 3;
  auto m = init_reward_model(c, 11);
  Rng rng(4);
  Matrix x = randn(c.seq_len(), c.token_dim, 1.0, rng);
  const std::vector<std::size_t> perm{5, 2, 0, 4, 1, 3};
  Matrix px(x.rows, x.cols);
  for (std::size_t i = 0; i < perm.size(); ++i)
    for (std::size_t d = 0; d < x.cols; ++d) px(i, d) = x(perm[i], d);
  Bindings b = Bindings::frozen(m.params);
  Matrix y = reward::mv_self_attention(b, c, ad::constant(x)).value();
  Matrix py = reward::mv_self_attention(b, c, ad::constant(px)).value();
  for (std::size_t i = 0; i < perm.size(); ++i)
    for (std::size_t d = 0; d < x.cols; ++d) EXPECT_NEAR(py(i, d), y(perm[i], d), 1e-12);
}

TEST(RewardModel, ScoreIsFiniteAndDeterministic) {
  auto c = micro_config();
  auto m = init_reward_model(c, 13);
  auto p = prompt_for(8);
  for (double q : {0.0, 0.5, 1.0}) {
    auto a = asset_for(c, p, q);
    const double s1 = score(m, p.image, a);
    EXPECT_TRUE(std::isfinite(s1));
    EXPECT_EQ(s1, score(m, p.image, a));
  }
}

TEST(RewardModel, ScoreGradientMatchesFiniteDifferences) {
  auto c = micro_config();
  auto m = init_reward_model(c, 17);
  auto p = prompt_for(8);
  auto a = asset_for(c, p, 0.4);
  const Matrix prompt = image_row(p.image, 8);
  const Matrix views = asset_pixels(c, a);
  Bindings b = Bindings::all(m.params);
  ad::backward(reward::score_graph(b, c, ad::constant(prompt), ad::constant(views)));
  auto f = [&] {
    Bindings fb = Bindings::frozen(m.params);
    return reward::score_graph(fb, c, ad::constant(prompt), ad::constant(views)).scalar();
  };
  auto res = testing::check_gradients(m.params, b.gradients(), f);
  EXPECT_EQ(res.checked, m.params.count());
  EXPECT_LT(res.max_rel_error, 1e-4) << res.worst;
}

TEST(RewardModel, ScoreIsDifferentiableInViewPixels) {
  auto c = micro_config();
  auto m = init_reward_model(c, 19);
  auto p = prompt_for(8);
  ParamStore px;
  px.add("views", asset_pixels(c, asset_for(c, p, 0.4)));
  const Matrix prompt = image_row(p.image, 8);
  Bindings pb = Bindings::all(px);
  Bindings mb = Bindings::frozen(m.params);
  ad::backward(reward::score_graph(mb, c, ad::constant(prompt), pb["views"]));
  auto f = [&] {
    Bindings fb = Bindings::frozen(m.params);
    return reward::score_graph(fb, c, ad::constant(prompt), ad::constant(px.at("views"))).scalar();
  };
  auto res = testing::check_gradients(px, pb.gradients(), f);
  EXPECT_LT(res.max_rel_error, 1e-4) << res.worst;
}

TEST(RewardModel, FreezesEarliestHalfOfEncoder) {
  auto c = micro_config();
  c.encoder_depth = 3;
  auto m = init_reward_model(c, 23);
  auto frozen = frozen_parameter_names(m);
  std::size_t enc_total = 0, frozen_total = 0;
  for (const auto& [name, t] : m.params.tensors()) {
    if (name.rfind("enc.", 0) == 0 || name.rfind("fuse.", 0) == 0) enc_total += t.size();
    if (frozen.contains(name)) frozen_total += t.size();
  }
  EXPECT_GE(2 * frozen_total, enc_total);
  EXPECT_TRUE(frozen.contains("enc.embed.patch.w"));
  EXPECT_TRUE(frozen.contains("enc.block0.attn.q.w"));
  EXPECT_FALSE(frozen.contains("fuse.attn.q.w"));
  for (const auto& n : frozen) EXPECT_EQ(n.rfind("score.", 0), std::string::npos);
  c.freeze_fraction = 0.0;
  EXPECT_TRUE(frozen_parameter_names(init_reward_model(c, 23)).empty());
}

TEST(RewardModel, CheckpointRoundTripIsBitwise) {
  auto c = micro_config();
  auto m = init_reward_model(c, 29);
  auto path = std::filesystem::temp_directory_path() / "mvp_reward_ckpt_test.ndjson";
  save_reward_model(path, m);
  auto back = load_reward_model(path);
  EXPECT_EQ(back.params, m.params);
  EXPECT_EQ(back.config.token_dim, c.token_dim);
  EXPECT_EQ(back.config.domains, c.domains);
  EXPECT_THROW(load_checkpoint(path, "diffusion"), LoadError);
}

TEST(RewardModel, BackboneHookCopiesEncoderOnly) {
  auto c = micro_config();
  auto a = init_reward_model(c, 1);
  auto b = init_reward_model(c, 2);
  load_backbone(a, b.params);
  EXPECT_EQ(a.params.at("enc.embed.patch.w"), b.params.at("enc.embed.patch.w"));
  EXPECT_EQ(a.params.at("fuse.attn.q.w"), b.params.at("fuse.attn.q.w"));
  EXPECT_NE(a.params.at("score.fc0.w"), b.params.at("score.fc0.w"));
}

}  // namespace
}  // namespace mvp
