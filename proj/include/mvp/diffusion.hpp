#pragma once
// Toy multi-view diffusion model: variance-preserving scheduler with noise
// shared across views, a patch-token denoiser with prompt cross-attention and
// one cross-view attention layer, and a pixel-space or learned decoder.

#include <cmath>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <random>
#include <string>
#include <vector>

#include "mvp/checkpoint.hpp"
#include "mvp/dataset.hpp"
#include "mvp/nn.hpp"
#include "mvp/reward_model.hpp"
#include "mvp/tensor.hpp"

namespace mvp {

enum class BetaSchedule { linear, cosine };
NLOHMANN_JSON_SERIALIZE_ENUM(BetaSchedule, {{BetaSchedule::linear, "linear"}, {BetaSchedule::cosine, "cosine"}})

struct SchedulerConfig {
  std::size_t T = 1000;
  BetaSchedule beta_schedule = BetaSchedule::linear;
};

/// Cumulative signal fractions alpha_bar[t], t = 0..T-1, t = 0 least noisy.
class Scheduler {
 public:
  static constexpr double kAlphaBarFloor = 1e-20;

  explicit Scheduler(SchedulerConfig cfg = {}) : cfg_(cfg) {
    if (cfg.T < 1) throw ValidationError("scheduler: T must be >= 1");
    alpha_bar_.resize(cfg.T);
    const double T = static_cast<double>(cfg.T);
    if (cfg.beta_schedule == BetaSchedule::linear) {
      // betas 1e-4 .. 0.02, scaled to the step count as in DDPM at T=1000
      const double lo = 1e-4 * 1000.0 / T, hi = std::min(0.999, 0.02 * 1000.0 / T);
      double prod = 1.0;
      for (std::size_t t = 0; t < cfg.T; ++t) {
        const double beta = cfg.T == 1 ? lo : lo + (hi - lo) * static_cast<double>(t) / (T - 1.0);
        prod *= 1.0 - beta;
        alpha_bar_[t] = prod;
      }
    } else {
      constexpr double s = 0.008;
      auto f = [&](double t) {
        const double v = std::cos((t / T + s) / (1.0 + s) * M_PI / 2.0);
        return v * v;
      };
      double prod = 1.0;
      for (std::size_t t = 0; t < cfg.T; ++t) {
        const double beta = std::min(0.999, 1.0 - f(static_cast<double>(t + 1)) / f(static_cast<double>(t)));
        prod *= 1.0 - beta;
        alpha_bar_[t] = prod;
      }
    }
  }

  /// Scheduler over explicit cumulative products (must be nonincreasing, in (0,1]).
  static Scheduler from_alpha_bars(std::vector<double> alpha_bars) {
    if (alpha_bars.empty()) throw ValidationError("scheduler: empty alpha_bar table");
    for (std::size_t i = 0; i < alpha_bars.size(); ++i) {
      if (!(alpha_bars[i] > 0.0 && alpha_bars[i] <= 1.0)) throw ValidationError("scheduler: alpha_bar outside (0,1]");
      if (i > 0 && alpha_bars[i] > alpha_bars[i - 1]) throw ValidationError("scheduler: alpha_bar must not increase");
    }
    Scheduler s({alpha_bars.size(), BetaSchedule::linear});
    s.alpha_bar_ = std::move(alpha_bars);
    return s;
  }

  [[nodiscard]] std::size_t steps() const { return alpha_bar_.size(); }
  [[nodiscard]] const SchedulerConfig& config() const { return cfg_; }
  [[nodiscard]] const std::vector<double>& alpha_bars() const { return alpha_bar_; }
  [[nodiscard]] double alpha_bar(std::size_t t) const {
    check(t);
    return alpha_bar_[t];
  }
  void check(std::size_t t) const {
    if (t >= alpha_bar_.size())
      throw std::out_of_range("timestep " + std::to_string(t) + " outside [0, " + std::to_string(alpha_bar_.size()) +
                              ")");
  }

 private:
  SchedulerConfig cfg_;
  std::vector<double> alpha_bar_;
};

namespace detail {

// eps may be one row broadcast to every slot, or one row per slot.
inline double eps_at(const Matrix& eps, std::size_t r, std::size_t c) { return eps.rows == 1 ? eps(0, c) : eps(r, c); }

inline void check_noise_shape(const Matrix& x, const Matrix& eps) {
  if (eps.cols != x.cols || !(eps.rows == 1 || eps.rows == x.rows))
    throw ShapeError("noise shape " + eps.shape_str() + " does not match latent " + x.shape_str());
}

}  // namespace detail

/// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps. A single-row eps is the
/// shared noise grid applied to every view and domain.
inline Matrix add_noise(const Matrix& x0, const Matrix& eps, std::size_t t, const Scheduler& sched) {
  detail::check_noise_shape(x0, eps);
  const double ab = sched.alpha_bar(t);
  const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
  Matrix out(x0.rows, x0.cols);
  for (std::size_t r = 0; r < x0.rows; ++r)
    for (std::size_t c = 0; c < x0.cols; ++c) out(r, c) = a * x0(r, c) + b * detail::eps_at(eps, r, c);
  return out;
}

/// x0' = (x_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t).
inline Matrix estimate_x0(const Matrix& x_t, const Matrix& eps_hat, std::size_t t, const Scheduler& sched) {
  detail::check_noise_shape(x_t, eps_hat);
  const double ab = sched.alpha_bar(t);
  if (ab < Scheduler::kAlphaBarFloor) throw std::domain_error("estimate_x0: alpha_bar below underflow floor");
  const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
  Matrix out(x_t.rows, x_t.cols);
  for (std::size_t r = 0; r < x_t.rows; ++r)
    for (std::size_t c = 0; c < x_t.cols; ++c) out(r, c) = (x_t(r, c) - b * detail::eps_at(eps_hat, r, c)) / a;
  return out;
}

inline ad::Var estimate_x0(const ad::Var& x_t, const ad::Var& eps_hat, std::size_t t, const Scheduler& sched) {
  const double ab = sched.alpha_bar(t);
  if (ab < Scheduler::kAlphaBarFloor) throw std::domain_error("estimate_x0: alpha_bar below underflow floor");
  return ad::scale(ad::sub(x_t, ad::scale(eps_hat, std::sqrt(1.0 - ab))), 1.0 / std::sqrt(ab));
}

/// Mean squared error over every element of every view.
inline double pretrain_loss(const Matrix& eps, const Matrix& eps_hat) {
  require_shape(eps_hat, eps.rows, eps.cols, "pretrain_loss");
  double s = 0.0;
  for (std::size_t i = 0; i < eps.size(); ++i) s += (eps.data[i] - eps_hat.data[i]) * (eps.data[i] - eps_hat.data[i]);
  return s / static_cast<double>(eps.size());
}

// ---------------------------------------------------------------------------
// Denoiser and decoder

struct DiffusionConfig {
  std::size_t n_views = 2;
  std::vector<Domain> domains{Domain::rgb, Domain::normal};
  std::size_t image_size = 8;
  std::size_t patch_size = 2;
  std::size_t token_dim = 16;
  std::size_t n_heads = 2;
  bool pixel_space = true;        // otherwise a 2x-downsampled latent and learned decoder
  std::size_t decoder_hidden = 32;
  SchedulerConfig scheduler{};

  [[nodiscard]] std::size_t slots() const { return n_views * domains.size(); }
  [[nodiscard]] std::size_t latent_size() const { return pixel_space ? image_size : image_size / 2; }
  [[nodiscard]] std::size_t latent_len() const { return latent_size() * latent_size() * 3; }
  [[nodiscard]] std::size_t image_len() const { return image_size * image_size * 3; }
  [[nodiscard]] std::size_t side_patches() const { return latent_size() / patch_size; }
  [[nodiscard]] std::size_t n_patches() const { return side_patches() * side_patches(); }
  [[nodiscard]] std::size_t prompt_patch() const { return image_size / side_patches(); }

  void validate() const {
    if (slots() == 0) throw ValidationError("diffusion: need at least one view and domain");
    if (!pixel_space && image_size % 2 != 0) throw ValidationError("diffusion: latent mode needs an even image size");
    if (patch_size == 0 || latent_size() % patch_size != 0)
      throw ValidationError("diffusion: latent size must be a multiple of patch_size");
    if (n_heads == 0 || token_dim % n_heads != 0) throw ValidationError("diffusion: token_dim not divisible by n_heads");
    if (scheduler.T < 2) throw ValidationError("diffusion: scheduler needs T >= 2");
  }
};

inline void to_json(nlohmann::json& j, const DiffusionConfig& c) {
  j = nlohmann::json{{"n_views", c.n_views},
                     {"domains", c.domains},
                     {"image_size", c.image_size},
                     {"patch_size", c.patch_size},
                     {"token_dim", c.token_dim},
                     {"n_heads", c.n_heads},
                     {"pixel_space", c.pixel_space},
                     {"decoder_hidden", c.decoder_hidden},
                     {"T", c.scheduler.T},
                     {"beta_schedule", c.scheduler.beta_schedule}};
}

inline void from_json(const nlohmann::json& j, DiffusionConfig& c) {
  DiffusionConfig d;
  c.n_views = j.value("n_views", d.n_views);
  c.domains = j.value("domains", d.domains);
  c.image_size = j.value("image_size", d.image_size);
  c.patch_size = j.value("patch_size", d.patch_size);
  c.token_dim = j.value("token_dim", d.token_dim);
  c.n_heads = j.value("n_heads", d.n_heads);
  c.pixel_space = j.value("pixel_space", d.pixel_space);
  c.decoder_hidden = j.value("decoder_hidden", d.decoder_hidden);
  c.scheduler.T = j.value("T", d.scheduler.T);
  c.scheduler.beta_schedule = j.value("beta_schedule", d.scheduler.beta_schedule);
}

struct DiffusionModel {
  DiffusionConfig config;
  ParamStore params;
  Scheduler scheduler;
};

/// Denoiser submodules, usable as trainable-scope selectors.
inline const std::vector<std::string>& denoiser_modules() {
  static const std::vector<std::string> m{"in.", "embed.", "time.", "cond.", "mlp.", "cross_view.", "out."};
  return m;
}

inline DiffusionModel init_diffusion_model(const DiffusionConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  DiffusionModel m{cfg, {}, Scheduler(cfg.scheduler)};
  auto& ps = m.params;
  const std::size_t D = cfg.token_dim, pdim = cfg.patch_size * cfg.patch_size * 3;
  const std::size_t cdim = cfg.prompt_patch() * cfg.prompt_patch() * 3;
  add_linear(ps, "in.patch", pdim, D, rng);
  ps.add("embed.slot", randn(cfg.slots(), D, 0.1, rng));
  ps.add("embed.pos", randn(cfg.n_patches(), D, 0.1, rng));
  add_linear(ps, "time.fc1", D, D, rng);
  add_linear(ps, "time.fc2", D, D, rng);
  add_linear(ps, "cond.patch", cdim, D, rng);
  ps.add("cond.pos", randn(cfg.n_patches(), D, 0.1, rng));
  add_layer_norm(ps, "cond.ln", D);
  reward::add_attention(ps, "cond.attn", D, rng);
  reward::add_mlp_block(ps, "mlp", D, rng);
  add_layer_norm(ps, "cross_view.ln", D);
  reward::add_attention(ps, "cross_view.attn", D, rng);
  add_layer_norm(ps, "out.ln", D);
  add_linear(ps, "out.proj", D, pdim, rng, 0.5);
  if (!cfg.pixel_space) {
    add_linear(ps, "decoder.fc1", cfg.latent_len(), cfg.decoder_hidden, rng);
    add_linear(ps, "decoder.fc2", cfg.decoder_hidden, cfg.image_len(), rng);
  }
  return m;
}

namespace diffusion {

inline Matrix timestep_embedding(std::size_t t, std::size_t dim) {
  Matrix e(1, dim);
  const std::size_t half = dim / 2;
  for (std::size_t i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
    e(0, i) = std::sin(static_cast<double>(t) * freq);
    e(0, half + i) = std::cos(static_cast<double>(t) * freq);
  }
  return e;
}

// Indices taking (n x size*size*3) grids to (n*patches x p*p*3) rows.
inline std::shared_ptr<const std::vector<std::size_t>> patchify_index(std::size_t n, std::size_t size,
                                                                      std::size_t patch) {
  return reward::patch_index(n, size, patch);
}

// Inverse permutation of patchify_index.
inline std::shared_ptr<const std::vector<std::size_t>> unpatchify_index(std::size_t n, std::size_t size,
                                                                        std::size_t patch) {
  const auto fwd = patchify_index(n, size, patch);
  auto inv = std::make_shared<std::vector<std::size_t>>(fwd->size());
  for (std::size_t i = 0; i < fwd->size(); ++i) (*inv)[(*fwd)[i]] = i;
  return inv;
}

/// Noise prediction graph; x_t is (slots x latent_len).
inline ad::Var predict_noise(Bindings& b, const DiffusionConfig& c, const ad::Var& x_t, const ad::Var& prompt_pixels,
                             std::size_t t) {
  if (x_t.rows() != c.slots() || x_t.cols() != c.latent_len())
    throw ShapeError("predict_noise: expected latent [" + std::to_string(c.slots()) + "x" +
                     std::to_string(c.latent_len()) + "], got " + x_t.value().shape_str());
  if (prompt_pixels.rows() != 1 || prompt_pixels.cols() != c.image_len())
    throw ShapeError("predict_noise: expected prompt [1x" + std::to_string(c.image_len()) + "], got " +
                     prompt_pixels.value().shape_str());
  const std::size_t S = c.slots(), np = c.n_patches(), pdim = c.patch_size * c.patch_size * 3;
  const std::size_t cp = c.prompt_patch();
  ad::Var patches = ad::gather(x_t, patchify_index(S, c.latent_size(), c.patch_size), S * np, pdim);
  ad::Var h = apply_linear(b, "in.patch", patches);
  h = ad::add(h, ad::repeat_rows(b["embed.slot"], np));
  h = ad::add(h, ad::tile_rows(b["embed.pos"], S));
  ad::Var temb = ad::constant(timestep_embedding(t, c.token_dim));
  temb = apply_linear(b, "time.fc2", ad::gelu(apply_linear(b, "time.fc1", temb)));
  h = ad::add_row(h, temb);

  // prompt embedder: strided patch projection of the prompt image
  ad::Var cond = ad::gather(ad::add_scalar(prompt_pixels, -0.5), patchify_index(1, c.image_size, cp), np,
                            cp * cp * 3);
  cond = ad::add(apply_linear(b, "cond.patch", cond), b["cond.pos"]);
  h = ad::add(h, reward::multihead(b, "cond.attn", apply_layer_norm(b, "cond.ln", h), cond, c.n_heads, S, 1));
  h = reward::mlp_block(b, "mlp", h);
  ad::Var x = apply_layer_norm(b, "cross_view.ln", h);
  h = ad::add(h, reward::multihead(b, "cross_view.attn", x, x, c.n_heads, 1, 1));
  ad::Var out = apply_linear(b, "out.proj", apply_layer_norm(b, "out.ln", h));
  return ad::gather(out, unpatchify_index(S, c.latent_size(), c.patch_size), S, c.latent_len());
}

/// Latent grids to view pixels in [0,1].
inline ad::Var decode(Bindings& b, const DiffusionConfig& c, const ad::Var& latent) {
  if (latent.rows() != c.slots() || latent.cols() != c.latent_len())
    throw ShapeError("decode: expected latent [" + std::to_string(c.slots()) + "x" + std::to_string(c.latent_len()) +
                     "], got " + latent.value().shape_str());
  if (c.pixel_space) return ad::clamp(latent, 0.0, 1.0);
  ad::Var h = ad::gelu(apply_linear(b, "decoder.fc1", latent));
  return ad::sigmoid(apply_linear(b, "decoder.fc2", h));
}

}  // namespace diffusion

/// Fixed encoder into the model's latent space: identity in pixel space,
/// 2x2 average pooling otherwise.
inline Matrix encode_latent(const DiffusionConfig& c, const Matrix& pixels) {
  require_shape(pixels, c.slots(), c.image_len(), "encode_latent");
  if (c.pixel_space) return pixels;
  const std::size_t H = c.image_size, h = c.latent_size();
  Matrix out(pixels.rows, c.latent_len());
  for (std::size_t s = 0; s < pixels.rows; ++s)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < h; ++x)
        for (std::size_t ch = 0; ch < 3; ++ch) {
          double acc = 0.0;
          for (std::size_t dy = 0; dy < 2; ++dy)
            for (std::size_t dx = 0; dx < 2; ++dx) acc += pixels(s, ((2 * y + dy) * H + 2 * x + dx) * 3 + ch);
          out(s, (y * h + x) * 3 + ch) = acc / 4.0;
        }
  return out;
}

inline Matrix predict_noise(const DiffusionModel& m, const Matrix& x_t, const Image& prompt, std::size_t t) {
  m.scheduler.check(t);
  Bindings b = Bindings::frozen(m.params);
  return diffusion::predict_noise(b, m.config, ad::constant(x_t), ad::constant(image_row(prompt, m.config.image_size)), t)
      .value();
}

inline std::vector<ViewImage> decode(const DiffusionModel& m, const Matrix& latent) {
  Bindings b = Bindings::frozen(m.params);
  const Matrix px = diffusion::decode(b, m.config, ad::constant(latent)).value();
  std::vector<ViewImage> views;
  const auto& c = m.config;
  for (std::size_t d = 0; d < c.domains.size(); ++d)
    for (std::size_t k = 0; k < c.n_views; ++k) {
      const std::size_t s = d * c.n_views + k;
      Image img(c.image_size, c.image_size);
      std::copy(px.row(s).begin(), px.row(s).end(), img.pixels.begin());
      views.push_back({c.domains[d], k, std::move(img)});
    }
  return views;
}

/// One training example: prompt image plus ground-truth views stacked as
/// (slots x H*W*3) pixels.
struct DiffusionItem {
  std::string prompt_id;
  Image prompt;
  Matrix views;
};

inline DiffusionItem make_diffusion_item(const DiffusionConfig& c, const Image& prompt, const MultiViewAsset& asset) {
  validate_asset(asset, c.n_views, c.domains);
  RewardModelConfig shape;
  shape.n_views = c.n_views;
  shape.domains = c.domains;
  shape.image_size = c.image_size;
  return {asset.prompt_id, prompt, asset_pixels(shape, asset)};
}

/// Draw a standard-normal noise grid (1 x len) shared by all slots.
inline Matrix sample_shared_noise(std::size_t len, Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix e(1, len);
  for (auto& v : e.data) v = n(rng);
  return e;
}

/// Broadcast a shared noise row to every slot.
inline Matrix broadcast_noise(const Matrix& eps, std::size_t slots) {
  Matrix out(slots, eps.cols);
  for (std::size_t s = 0; s < slots; ++s) std::copy(eps.data.begin(), eps.data.end(), out.row(s).begin());
  return out;
}

/// Standard denoising objective for one item at timestep t with shared noise.
inline ad::Var pretrain_objective(Bindings& b, const DiffusionModel& m, const DiffusionItem& item, const Matrix& eps,
                                  std::size_t t) {
  const auto& c = m.config;
  const Matrix x0 = encode_latent(c, item.views);
  const Matrix x_t = add_noise(x0, eps, t, m.scheduler);
  ad::Var eps_hat =
      diffusion::predict_noise(b, c, ad::constant(x_t), ad::constant(image_row(item.prompt, c.image_size)), t);
  return ad::mse(eps_hat, ad::constant(broadcast_noise(eps, c.slots())));
}

struct PretrainConfig {
  std::size_t steps = 500;
  std::size_t batch_size = 4;
  double learning_rate = 2e-3;
  std::uint64_t seed = 0;
};

/// Evaluation-mode mean denoising loss over items with seeded (t, eps) draws.
inline double heldout_pretrain_loss(const DiffusionModel& m, const std::vector<DiffusionItem>& items,
                                    std::uint64_t seed, std::size_t draws_per_item = 4) {
  if (items.empty()) throw ValidationError("heldout_pretrain_loss: no items");
  Rng rng(seed);
  double acc = 0.0;
  std::size_t n = 0;
  for (const auto& item : items)
    for (std::size_t d = 0; d < draws_per_item; ++d) {
      const std::size_t t = static_cast<std::size_t>(rng() % m.scheduler.steps());
      const Matrix eps = sample_shared_noise(m.config.latent_len(), rng);
      Bindings b = Bindings::frozen(m.params);
      acc += pretrain_objective(b, m, item, eps, t).scalar();
      ++n;
    }
  return acc / static_cast<double>(n);
}

/// Plain denoising pretraining with Adam and uniform timesteps. Returns the
/// per-step training loss.
inline std::vector<double> pretrain_dm(DiffusionModel& m, const std::vector<DiffusionItem>& data,
                                       const PretrainConfig& cfg) {
  if (data.empty()) throw ValidationError("pretrain_dm: empty dataset");
  Rng rng(cfg.seed);
  Adam opt;
  std::vector<double> history;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    Bindings b = Bindings::all(m.params);
    std::vector<ad::Var> terms;
    for (std::size_t i = 0; i < cfg.batch_size; ++i) {
      const auto& item = data[static_cast<std::size_t>(rng() % data.size())];
      const std::size_t t = static_cast<std::size_t>(rng() % m.scheduler.steps());
      terms.push_back(pretrain_objective(b, m, item, sample_shared_noise(m.config.latent_len(), rng), t));
    }
    ad::Var loss = ad::scale(ad::sum(ad::concat_rows(terms)), 1.0 / static_cast<double>(terms.size()));
    ad::backward(loss);
    opt.step(m.params, b.gradients(), scheduled_lr(cfg.learning_rate, Schedule::cosine, step, cfg.steps));
    history.push_back(loss.scalar());
  }
  return history;
}

/// Plain ancestral sampling from shared noise; returns the final latent.
inline Matrix sample_latent(const DiffusionModel& m, const Image& prompt, std::uint64_t seed) {
  const auto& c = m.config;
  const auto& ab = m.scheduler.alpha_bars();
  Rng rng(seed);
  Matrix x = broadcast_noise(sample_shared_noise(c.latent_len(), rng), c.slots());
  for (std::size_t t = ab.size(); t-- > 0;) {
    const Matrix x0 = estimate_x0(x, predict_noise(m, x, prompt, t), t, m.scheduler);
    if (t == 0) return x0;
    const double a_prev = ab[t - 1], alpha = ab[t] / a_prev, beta = 1.0 - alpha;
    const double c0 = std::sqrt(a_prev) * beta / (1.0 - ab[t]);
    const double ct = std::sqrt(alpha) * (1.0 - a_prev) / (1.0 - ab[t]);
    const double sigma = std::sqrt(beta * (1.0 - a_prev) / (1.0 - ab[t]));
    const Matrix z = sample_shared_noise(c.latent_len(), rng);
    for (std::size_t r = 0; r < x.rows; ++r)
      for (std::size_t i = 0; i < x.cols; ++i) x(r, i) = c0 * x0(r, i) + ct * x(r, i) + sigma * z(0, i);
  }
  return x;
}

/// Tile views into one image: one row per domain, one column per view.
inline Image view_grid(const std::vector<ViewImage>& views, std::size_t n_views, std::size_t n_domains) {
  if (views.empty() || views.size() != n_views * n_domains) throw ShapeError("view_grid: view count mismatch");
  const std::size_t h = views[0].image.height, w = views[0].image.width;
  Image grid(h * n_domains, w * n_views);
  for (std::size_t s = 0; s < views.size(); ++s) {
    const std::size_t gy = s / n_views, gx = s % n_views;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        for (std::size_t ch = 0; ch < 3; ++ch) grid.at(gy * h + y, gx * w + x, ch) = views[s].image.at(y, x, ch);
  }
  return grid;
}

inline void save_diffusion_model(const std::filesystem::path& path, const DiffusionModel& m) {
  save_checkpoint(path, {"diffusion", nlohmann::json(m.config), m.params});
}

inline DiffusionModel load_diffusion_model(const std::filesystem::path& path) {
  Checkpoint c = load_checkpoint(path, "diffusion");
  DiffusionConfig cfg = c.config.get<DiffusionConfig>();
  cfg.validate();
  const DiffusionModel shape = init_diffusion_model(cfg, 0);
  for (const auto& [name, t] : shape.params.tensors()) {
    if (!c.params.contains(name)) throw LoadError(path.string() + ": missing tensor " + name);
    require_shape(c.params.at(name), t.rows, t.cols, "checkpoint tensor " + name);
  }
  return {cfg, std::move(c.params), Scheduler(cfg.scheduler)};
}

}  // namespace mvp
