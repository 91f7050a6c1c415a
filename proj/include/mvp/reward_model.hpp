#pragma once
// Multi-view preference reward model.
//
// Pipeline for one (prompt image, asset) pair:
//   shared patch-token encoder over the prompt and every view
//   -> cross-attention with view tokens as queries, prompt tokens as keys/values
//   -> the leading [CLS] row of each joint encoding, in canonical slot order
//   -> additive learned (domain, view) embedding
//   -> one multi-view self-attention layer
//   -> concatenation -> MLP -> scalar.

#include <filesystem>
#include <map>
#include <memory>
#include <nlohmann/json.hpp>
#include <set>
#include <string>
#include <vector>

#include "mvp/checkpoint.hpp"
#include "mvp/dataset.hpp"
#include "mvp/nn.hpp"
#include "mvp/tensor.hpp"

namespace mvp {

struct RewardModelConfig {
  std::size_t n_views = 6;
  std::vector<Domain> domains{Domain::rgb, Domain::normal};
  std::size_t image_size = 16;
  std::size_t patch_size = 4;
  std::size_t token_dim = 32;
  std::size_t n_heads = 4;
  std::size_t encoder_depth = 2;
  double freeze_fraction = 0.5;
  bool use_mv_self_attention = true;
  bool use_positional_encoding = true;
  std::size_t mlp_hidden = 0;  // 0 means token_dim

  [[nodiscard]] std::size_t seq_len() const { return n_views * domains.size(); }
  [[nodiscard]] std::size_t patches_per_side() const { return image_size / patch_size; }
  [[nodiscard]] std::size_t n_patches() const { return patches_per_side() * patches_per_side(); }
  [[nodiscard]] std::size_t tokens_per_image() const { return n_patches() + 1; }
  [[nodiscard]] std::size_t hidden() const { return mlp_hidden ? mlp_hidden : token_dim; }

  void validate() const {
    if (n_views == 0 || domains.empty()) throw ValidationError("reward model: need at least one view and domain");
    if (n_heads == 0 || token_dim % n_heads != 0)
      throw ValidationError("reward model: token_dim " + std::to_string(token_dim) + " not divisible by n_heads " +
                            std::to_string(n_heads));
    if (patch_size == 0 || image_size % patch_size != 0)
      throw ValidationError("reward model: image_size must be a multiple of patch_size");
    if (freeze_fraction < 0.0 || freeze_fraction > 1.0)
      throw ValidationError("reward model: freeze_fraction outside [0,1]");
  }
};

inline void to_json(nlohmann::json& j, const RewardModelConfig& c) {
  j = nlohmann::json{{"n_views", c.n_views},
                     {"domains", c.domains},
                     {"image_size", c.image_size},
                     {"patch_size", c.patch_size},
                     {"token_dim", c.token_dim},
                     {"n_heads", c.n_heads},
                     {"encoder_depth", c.encoder_depth},
                     {"freeze_fraction", c.freeze_fraction},
                     {"use_mv_self_attention", c.use_mv_self_attention},
                     {"use_positional_encoding", c.use_positional_encoding},
                     {"mlp_hidden", c.mlp_hidden}};
}

inline void from_json(const nlohmann::json& j, RewardModelConfig& c) {
  RewardModelConfig d;
  c.n_views = j.value("n_views", d.n_views);
  c.domains = j.value("domains", d.domains);
  c.image_size = j.value("image_size", d.image_size);
  c.patch_size = j.value("patch_size", d.patch_size);
  c.token_dim = j.value("token_dim", d.token_dim);
  c.n_heads = j.value("n_heads", d.n_heads);
  c.encoder_depth = j.value("encoder_depth", d.encoder_depth);
  c.freeze_fraction = j.value("freeze_fraction", d.freeze_fraction);
  c.use_mv_self_attention = j.value("use_mv_self_attention", d.use_mv_self_attention);
  c.use_positional_encoding = j.value("use_positional_encoding", d.use_positional_encoding);
  c.mlp_hidden = j.value("mlp_hidden", d.mlp_hidden);
}

struct RewardModel {
  RewardModelConfig config;
  ParamStore params;
};

namespace reward {

inline void add_attention(ParamStore& ps, const std::string& p, std::size_t d, Rng& rng) {
  for (const char* n : {".q", ".k", ".v", ".o"}) add_linear(ps, p + n, d, d, rng);
}

inline void add_mlp_block(ParamStore& ps, const std::string& p, std::size_t d, Rng& rng) {
  add_layer_norm(ps, p + ".ln", d);
  add_linear(ps, p + ".fc1", d, 2 * d, rng);
  add_linear(ps, p + ".fc2", 2 * d, d, rng);
}

/// Encoder parameter groups, earliest first. Freezing walks this order.
inline std::vector<std::string> encoder_units(const RewardModelConfig& c) {
  std::vector<std::string> units{"enc.embed."};
  for (std::size_t i = 0; i < c.encoder_depth; ++i) units.push_back("enc.block" + std::to_string(i) + ".");
  units.push_back("enc.final.");
  units.push_back("fuse.");
  return units;
}

inline bool starts_with(const std::string& s, const std::string& prefix) { return s.rfind(prefix, 0) == 0; }

}  // namespace reward

inline RewardModel init_reward_model(const RewardModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  RewardModel m{cfg, {}};
  auto& ps = m.params;
  const std::size_t D = cfg.token_dim, pdim = cfg.patch_size * cfg.patch_size * 3;
  add_linear(ps, "enc.embed.patch", pdim, D, rng);
  ps.add("enc.embed.cls", randn(1, D, 0.5, rng));
  ps.add("enc.embed.pos", randn(cfg.tokens_per_image(), D, 0.1, rng));
  for (std::size_t i = 0; i < cfg.encoder_depth; ++i) {
    const std::string b = "enc.block" + std::to_string(i);
    add_layer_norm(ps, b + ".ln", D);
    reward::add_attention(ps, b + ".attn", D, rng);
    reward::add_mlp_block(ps, b + ".mlp", D, rng);
  }
  add_layer_norm(ps, "enc.final.ln", D);
  add_layer_norm(ps, "fuse.ln_q", D);
  add_layer_norm(ps, "fuse.ln_kv", D);
  reward::add_attention(ps, "fuse.attn", D, rng);
  reward::add_mlp_block(ps, "fuse.mlp", D, rng);
  ps.add("score.pos", randn(cfg.seq_len(), D, 0.5, rng));
  add_layer_norm(ps, "score.ln", D);
  reward::add_attention(ps, "score.attn", D, rng);
  const std::size_t H = cfg.hidden();
  add_linear(ps, "score.fc0", cfg.seq_len() * D, H, rng);
  add_linear(ps, "score.fc1", H, H, rng);
  add_linear(ps, "score.out", H, 1, rng);
  return m;
}

/// Names of the encoder parameters held fixed during training: whole encoder
/// units, earliest first, until at least `freeze_fraction` of the encoder's
/// scalar parameters are covered.
inline std::set<std::string> frozen_parameter_names(const RewardModel& m) {
  std::set<std::string> frozen;
  const auto units = reward::encoder_units(m.config);
  std::size_t total = 0;
  for (const auto& [name, t] : m.params.tensors())
    if (reward::starts_with(name, "enc.") || reward::starts_with(name, "fuse.")) total += t.size();
  const double target = m.config.freeze_fraction * static_cast<double>(total);
  std::size_t covered = 0;
  for (const auto& u : units) {
    if (static_cast<double>(covered) >= target) break;
    for (const auto& [name, t] : m.params.tensors())
      if (reward::starts_with(name, u)) {
        frozen.insert(name);
        covered += t.size();
      }
  }
  return frozen;
}

/// Replace encoder and fusion weights with those of a pretrained model of
/// the same shape (the backbone-initialization hook).
inline void load_backbone(RewardModel& m, const ParamStore& backbone) {
  for (auto& [name, t] : m.params.tensors()) {
    if (!(reward::starts_with(name, "enc.") || reward::starts_with(name, "fuse."))) continue;
    const Matrix& src = backbone.at(name);
    require_shape(src, t.rows, t.cols, "load_backbone " + name);
    t = src;
  }
}

namespace reward {

/// Flat-buffer indices that cut (n_img x H*W*3) pixels into
/// (n_img*n_patches x p*p*3) patch rows, patches in raster order.
inline std::shared_ptr<const std::vector<std::size_t>> patch_index(std::size_t n_img, std::size_t size,
                                                                   std::size_t patch) {
  auto idx = std::make_shared<std::vector<std::size_t>>();
  const std::size_t side = size / patch, img_len = size * size * 3;
  idx->reserve(n_img * img_len);
  for (std::size_t i = 0; i < n_img; ++i)
    for (std::size_t py = 0; py < side; ++py)
      for (std::size_t px = 0; px < side; ++px)
        for (std::size_t y = 0; y < patch; ++y)
          for (std::size_t x = 0; x < patch; ++x)
            for (std::size_t c = 0; c < 3; ++c)
              idx->push_back(i * img_len + ((py * patch + y) * size + (px * patch + x)) * 3 + c);
  return idx;
}

inline ad::Var multihead(Bindings& b, const std::string& p, const ad::Var& q_in, const ad::Var& kv_in,
                         std::size_t heads, std::size_t q_groups, std::size_t kv_groups) {
  ad::Var q = apply_linear(b, p + ".q", q_in);
  ad::Var k = apply_linear(b, p + ".k", kv_in);
  ad::Var v = apply_linear(b, p + ".v", kv_in);
  return apply_linear(b, p + ".o", ad::attention(q, k, v, heads, q_groups, kv_groups));
}

inline ad::Var mlp_block(Bindings& b, const std::string& p, const ad::Var& h) {
  ad::Var x = apply_layer_norm(b, p + ".ln", h);
  x = apply_linear(b, p + ".fc2", ad::gelu(apply_linear(b, p + ".fc1", x)));
  return ad::add(h, x);
}

/// Shared visual encoder. `pixels` is (n_img x H*W*3); returns
/// (n_img*(n_patches+1) x D) with each image's [CLS] row first.
inline ad::Var encode_images(Bindings& b, const RewardModelConfig& c, const ad::Var& pixels) {
  const std::size_t n_img = pixels.rows(), img_len = c.image_size * c.image_size * 3;
  if (pixels.cols() != img_len)
    throw ShapeError("reward encoder: expected images of " + std::to_string(c.image_size) + "x" +
                     std::to_string(c.image_size) + "x3 (" + std::to_string(img_len) + " values), got " +
                     std::to_string(pixels.cols()) + " values");
  const std::size_t np = c.n_patches(), tpi = c.tokens_per_image(), D = c.token_dim;
  const std::size_t pdim = c.patch_size * c.patch_size * 3;
  ad::Var patches = ad::gather(ad::add_scalar(pixels, -0.5), patch_index(n_img, c.image_size, c.patch_size),
                               n_img * np, pdim);
  ad::Var tokens = apply_linear(b, "enc.embed.patch", patches);
  // rows [cls x n_img ; patch tokens], reordered to [cls, patches] per image
  ad::Var stacked = ad::concat_rows({ad::tile_rows(b["enc.embed.cls"], n_img), tokens});
  auto order = std::make_shared<std::vector<std::size_t>>();
  order->reserve(n_img * tpi * D);
  for (std::size_t i = 0; i < n_img; ++i)
    for (std::size_t t = 0; t < tpi; ++t) {
      const std::size_t src_row = t == 0 ? i : n_img + i * np + (t - 1);
      for (std::size_t d = 0; d < D; ++d) order->push_back(src_row * D + d);
    }
  ad::Var h = ad::gather(stacked, order, n_img * tpi, D);
  h = ad::add(h, ad::tile_rows(b["enc.embed.pos"], n_img));
  for (std::size_t i = 0; i < c.encoder_depth; ++i) {
    const std::string blk = "enc.block" + std::to_string(i);
    ad::Var x = apply_layer_norm(b, blk + ".ln", h);
    h = ad::add(h, multihead(b, blk + ".attn", x, x, c.n_heads, n_img, n_img));
    h = mlp_block(b, blk + ".mlp", h);
  }
  return apply_layer_norm(b, "enc.final.ln", h);
}

/// Joint prompt/view encodings: view tokens query the prompt tokens.
/// Returns (n_views*(n_patches+1) x D).
inline ad::Var fuse(Bindings& b, const RewardModelConfig& c, const ad::Var& view_tokens, const ad::Var& prompt_tokens) {
  const std::size_t n_img = view_tokens.rows() / c.tokens_per_image();
  ad::Var q = apply_layer_norm(b, "fuse.ln_q", view_tokens);
  ad::Var kv = apply_layer_norm(b, "fuse.ln_kv", prompt_tokens);
  ad::Var h = ad::add(view_tokens, multihead(b, "fuse.attn", q, kv, c.n_heads, n_img, 1));
  return mlp_block(b, "fuse.mlp", h);
}

/// [CLS] row of each joint encoding, in input order.
inline ad::Var cls_rows(const RewardModelConfig& c, const ad::Var& joint) {
  const std::size_t tpi = c.tokens_per_image(), D = c.token_dim, n = joint.rows() / tpi;
  auto idx = std::make_shared<std::vector<std::size_t>>();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t d = 0; d < D; ++d) idx->push_back(i * tpi * D + d);
  return ad::gather(joint, idx, n, D);
}

inline ad::Var positional(Bindings& b, const RewardModelConfig& c, const ad::Var& tokens) {
  if (!c.use_positional_encoding) return tokens;
  return ad::add(tokens, b["score.pos"]);
}

/// The multi-view self-attention sublayer (pre-norm, residual). No position
/// information enters here.
inline ad::Var mv_self_attention(Bindings& b, const RewardModelConfig& c, const ad::Var& tokens) {
  ad::Var x = apply_layer_norm(b, "score.ln", tokens);
  return ad::add(tokens, multihead(b, "score.attn", x, x, c.n_heads, 1, 1));
}

inline ad::Var head(Bindings& b, const RewardModelConfig& c, const ad::Var& tokens) {
  ad::Var x = ad::reshape(tokens, 1, tokens.value().size());
  x = ad::gelu(apply_linear(b, "score.fc0", x));
  x = ad::gelu(apply_linear(b, "score.fc1", x));
  return apply_linear(b, "score.out", x);
}

/// Multi-view encoding sequence for stacked view pixels (n_slots x H*W*3).
inline ad::Var multiview_encoding(Bindings& b, const RewardModelConfig& c, const ad::Var& prompt_pixels,
                                  const ad::Var& view_pixels) {
  ad::Var prompt_tokens = encode_images(b, c, prompt_pixels);
  ad::Var view_tokens = encode_images(b, c, view_pixels);
  return cls_rows(c, fuse(b, c, view_tokens, prompt_tokens));
}

/// Full scoring graph; returns a 1x1 Var.
inline ad::Var score_graph(Bindings& b, const RewardModelConfig& c, const ad::Var& prompt_pixels,
                           const ad::Var& view_pixels) {
  if (view_pixels.rows() != c.seq_len())
    throw ShapeError("reward model: expected " + std::to_string(c.seq_len()) + " views, got " +
                     std::to_string(view_pixels.rows()));
  ad::Var h = positional(b, c, multiview_encoding(b, c, prompt_pixels, view_pixels));
  if (c.use_mv_self_attention) h = mv_self_attention(b, c, h);
  return head(b, c, h);
}

}  // namespace reward

inline Matrix image_row(const Image& img, std::size_t expected_size) {
  if (img.height != expected_size || img.width != expected_size)
    throw ShapeError("image is " + std::to_string(img.height) + "x" + std::to_string(img.width) + ", expected " +
                     std::to_string(expected_size) + "x" + std::to_string(expected_size));
  return Matrix(1, img.pixels.size(), img.pixels);
}

/// Stack an asset's views as (n_slots x H*W*3) after checking the layout.
inline Matrix asset_pixels(const RewardModelConfig& c, const MultiViewAsset& asset) {
  validate_asset(asset, c.n_views, c.domains);
  const std::size_t len = c.image_size * c.image_size * 3;
  Matrix out(asset.views.size(), len);
  for (std::size_t s = 0; s < asset.views.size(); ++s) {
    const Matrix r = image_row(asset.views[s].image, c.image_size);
    std::copy(r.data.begin(), r.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(s * len));
  }
  return out;
}

/// Joint token sequence for one (prompt, view) pair, [CLS] first.
inline Matrix encode_view_pair(const RewardModel& m, const Image& prompt, const ViewImage& view) {
  Bindings b = Bindings::frozen(m.params);
  const auto& c = m.config;
  ad::Var prompt_tokens = reward::encode_images(b, c, ad::constant(image_row(prompt, c.image_size)));
  ad::Var view_tokens = reward::encode_images(b, c, ad::constant(image_row(view.image, c.image_size)));
  return reward::fuse(b, c, view_tokens, prompt_tokens).value();
}

/// (seq_len x token_dim) [CLS] sequence in canonical slot order.
inline Matrix build_multiview_encoding(const RewardModel& m, const Image& prompt, const MultiViewAsset& asset) {
  Bindings b = Bindings::frozen(m.params);
  const auto& c = m.config;
  return reward::multiview_encoding(b, c, ad::constant(image_row(prompt, c.image_size)),
                                    ad::constant(asset_pixels(c, asset)))
      .value();
}

inline Matrix apply_positional_encoding(const RewardModel& m, const Matrix& encoding) {
  require_shape(encoding, m.config.seq_len(), m.config.token_dim, "apply_positional_encoding");
  Bindings b = Bindings::frozen(m.params);
  return reward::positional(b, m.config, ad::constant(encoding)).value();
}

inline double score(const RewardModel& m, const Image& prompt, const MultiViewAsset& asset) {
  Bindings b = Bindings::frozen(m.params);
  const auto& c = m.config;
  return reward::score_graph(b, c, ad::constant(image_row(prompt, c.image_size)), ad::constant(asset_pixels(c, asset)))
      .scalar();
}

inline void save_reward_model(const std::filesystem::path& path, const RewardModel& m) {
  save_checkpoint(path, {"reward_model", nlohmann::json(m.config), m.params});
}

inline RewardModel load_reward_model(const std::filesystem::path& path) {
  Checkpoint c = load_checkpoint(path, "reward_model");
  RewardModel m{c.config.get<RewardModelConfig>(), std::move(c.params)};
  m.config.validate();
  const RewardModel shape = init_reward_model(m.config, 0);
  for (const auto& [name, t] : shape.params.tensors()) {
    if (!m.params.contains(name)) throw LoadError(path.string() + ": missing tensor " + name);
    require_shape(m.params.at(name), t.rows, t.cols, "checkpoint tensor " + name);
  }
  return m;
}

}  // namespace mvp
