#pragma once
// Reward-feedback tuning of the multi-view diffusion model: one-step x0
// estimates at a late denoising step are decoded, scored by a frozen reward
// model, and the negated reward is added to the lambda-weighted denoising loss.

#include <cmath>
#include <filesystem>
#include <functional>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "mvp/diffusion.hpp"
#include "mvp/reward_model.hpp"

namespace mvp {

enum class RewardPsi { negated, softplus_negated };

inline RewardPsi parse_psi(const std::string& s) {
  if (s == "negated") return RewardPsi::negated;
  if (s == "softplus_negated") return RewardPsi::softplus_negated;
  throw ValidationError("unknown psi '" + s + "' (expected negated or softplus_negated)");
}
inline void to_json(nlohmann::json& j, RewardPsi p) { j = p == RewardPsi::negated ? "negated" : "softplus_negated"; }
inline void from_json(const nlohmann::json& j, RewardPsi& p) { p = parse_psi(j.get<std::string>()); }

enum class TuneMode { mvp, pt_only };

inline TuneMode parse_mode(const std::string& s) {
  if (s == "mvp") return TuneMode::mvp;
  if (s == "pt_only" || s == "pt-only") return TuneMode::pt_only;
  throw ValidationError("unknown tuning mode '" + s + "' (expected mvp or pt-only)");
}
inline void to_json(nlohmann::json& j, TuneMode m) { j = m == TuneMode::mvp ? "mvp" : "pt-only"; }
inline void from_json(const nlohmann::json& j, TuneMode& m) { m = parse_mode(j.get<std::string>()); }

struct TuningConfig {
  double lambda = 10.0;
  RewardPsi psi = RewardPsi::softplus_negated;
  double midstep_low = 0.75;
  double midstep_high = 0.99;
  double learning_rate = 5e-6;
  std::size_t warmup_steps = 0;
  std::size_t steps = 100;
  std::size_t batch_size = 1;
  /// Parameter-name prefixes that are updated; everything else stays fixed.
  std::vector<std::string> trainable_scope;
  TuneMode mode = TuneMode::mvp;
  std::size_t checkpoint_every = 0;
  std::uint64_t seed = 0;

  void validate() const {
    if (trainable_scope.empty()) throw ValidationError("tuning config: trainable_scope is required");
    if (!(lambda > 0) || !std::isfinite(lambda)) throw ValidationError("tuning config: lambda must be finite and > 0");
    if (!(midstep_low > 0 && midstep_low <= midstep_high && midstep_high < 1))
      throw ValidationError("tuning config: need 0 < midstep_low <= midstep_high < 1");
    if (!(learning_rate > 0)) throw ValidationError("tuning config: learning_rate must be > 0");
    if (batch_size < 1) throw ValidationError("tuning config: batch_size must be >= 1");
  }
};

inline void to_json(nlohmann::json& j, const TuningConfig& c) {
  j = nlohmann::json{{"lambda", c.lambda},
                     {"psi", c.psi},
                     {"midstep_range", {c.midstep_low, c.midstep_high}},
                     {"learning_rate", c.learning_rate},
                     {"warmup_steps", c.warmup_steps},
                     {"steps", c.steps},
                     {"batch_size", c.batch_size},
                     {"trainable_scope", c.trainable_scope},
                     {"mode", c.mode},
                     {"checkpoint_every", c.checkpoint_every},
                     {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, TuningConfig& c) {
  TuningConfig d;
  if (!j.contains("trainable_scope")) throw ValidationError("tuning config: trainable_scope is required");
  c.trainable_scope = j.at("trainable_scope").get<std::vector<std::string>>();
  c.lambda = j.value("lambda", d.lambda);
  c.psi = j.value("psi", d.psi);
  if (j.contains("midstep_range")) {
    const auto r = j.at("midstep_range").get<std::vector<double>>();
    if (r.size() != 2) throw ValidationError("tuning config: midstep_range needs two values");
    c.midstep_low = r[0];
    c.midstep_high = r[1];
  }
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.warmup_steps = j.value("warmup_steps", d.warmup_steps);
  c.steps = j.value("steps", d.steps);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.mode = j.value("mode", d.mode);
  c.checkpoint_every = j.value("checkpoint_every", d.checkpoint_every);
  c.seed = j.value("seed", d.seed);
  c.validate();
}

inline double reward_to_loss(double r, RewardPsi psi) {
  if (!std::isfinite(r)) throw std::domain_error("reward_to_loss: non-finite reward");
  return psi == RewardPsi::negated ? -r : ad::softplus_value(-r);
}

inline ad::Var reward_to_loss(const ad::Var& r, RewardPsi psi) {
  return psi == RewardPsi::negated ? ad::scale(r, -1.0) : ad::softplus(ad::scale(r, -1.0));
}

/// Denoising-progress index k in [floor(low*T), ceil(high*T)] clipped to
/// [0, T-1]; k counts steps already taken from pure noise.
inline std::pair<std::size_t, std::size_t> mid_step_window(std::size_t T, double low, double high) {
  if (T < 2) throw ValidationError("mid_step_window: T must be >= 2");
  if (!(low >= 0 && low <= high && high <= 1)) throw ValidationError("mid_step_window: invalid range");
  const auto lo = static_cast<std::size_t>(std::floor(low * static_cast<double>(T)));
  const auto hi = std::min(static_cast<std::size_t>(std::ceil(high * static_cast<double>(T))), T - 1);
  if (lo > hi)
    throw ValidationError("mid_step_window: range [" + std::to_string(low) + ", " + std::to_string(high) +
                          "] contains no step for T=" + std::to_string(T));
  return {lo, hi};
}

inline std::size_t sample_mid_step(std::size_t T, double low, double high, Rng& rng) {
  const auto [lo, hi] = mid_step_window(T, low, high);
  return lo + static_cast<std::size_t>(rng() % (hi - lo + 1));
}

/// Noise timestep reached after k denoising steps.
inline std::size_t progress_to_timestep(std::size_t T, std::size_t k) { return T - 1 - k; }

/// Random draws for one tuning example; fixing them makes the objective a
/// deterministic function of the parameters.
struct MvpSample {
  Matrix eps;  // shared noise row
  std::size_t t = 0;
};

inline MvpSample draw_mvp_sample(const DiffusionModel& m, const TuningConfig& cfg, Rng& rng) {
  const std::size_t T = m.scheduler.steps();
  const std::size_t k = sample_mid_step(T, cfg.midstep_low, cfg.midstep_high, rng);
  return {sample_shared_noise(m.config.latent_len(), rng), progress_to_timestep(T, k)};
}

struct MvpTerms {
  ad::Var l_pt;
  std::optional<ad::Var> l_rm;
  ad::Var combined;
  double reward = 0.0;
};

inline void check_compatible(const DiffusionConfig& dc, const RewardModelConfig& rc) {
  if (dc.n_views != rc.n_views || dc.domains != rc.domains || dc.image_size != rc.image_size)
    throw ValidationError("reward model expects " + std::to_string(rc.n_views) + " views x " +
                          std::to_string(rc.domains.size()) + " domains at " + std::to_string(rc.image_size) +
                          "px; diffusion model produces " + std::to_string(dc.n_views) + " x " +
                          std::to_string(dc.domains.size()) + " at " + std::to_string(dc.image_size) + "px");
}

/// Objective for one item. Reward parameters enter as constants; gradients
/// flow through the decoded one-step estimate into the denoiser.
inline MvpTerms mvp_objective(Bindings& b, const DiffusionModel& m, const RewardModel& rm, const DiffusionItem& item,
                              const MvpSample& s, const TuningConfig& cfg) {
  const auto& c = m.config;
  const Matrix x0 = encode_latent(c, item.views);
  const Matrix x_t = add_noise(x0, s.eps, s.t, m.scheduler);
  const ad::Var prompt = ad::constant(image_row(item.prompt, c.image_size));
  ad::Var xt = ad::constant(x_t);
  ad::Var eps_hat = diffusion::predict_noise(b, c, xt, prompt, s.t);
  MvpTerms out;
  out.l_pt = ad::mse(eps_hat, ad::constant(broadcast_noise(s.eps, c.slots())));
  ad::Var x0_hat = estimate_x0(xt, eps_hat, s.t, m.scheduler);
  ad::Var views = diffusion::decode(b, c, x0_hat);
  Bindings rb = Bindings::frozen(rm.params);
  ad::Var r = reward::score_graph(rb, rm.config, prompt, cfg.mode == TuneMode::mvp ? views : ad::constant(views.value()));
  out.reward = r.scalar();
  out.combined = ad::scale(out.l_pt, cfg.lambda);
  if (cfg.mode == TuneMode::mvp) {
    out.l_rm = reward_to_loss(r, cfg.psi);
    out.combined = ad::add(out.combined, *out.l_rm);
  }
  return out;
}

struct TuningStep {
  std::size_t step = 0;
  double l_pt = 0.0;
  std::optional<double> l_rm;  // absent in pt-only mode
  double combined = 0.0;
  double mean_reward = 0.0;
  double lr = 0.0;
  std::optional<std::size_t> checkpoint;  // index of the checkpoint written after this step
};

inline void to_json(nlohmann::json& j, const TuningStep& s) {
  j = nlohmann::json{{"step", s.step},
                     {"l_pt", s.l_pt},
                     {"l_rm", s.l_rm ? nlohmann::json(*s.l_rm) : nlohmann::json(nullptr)},
                     {"combined", s.combined},
                     {"mean_reward", s.mean_reward},
                     {"lr", s.lr},
                     {"checkpoint", s.checkpoint ? nlohmann::json(*s.checkpoint) : nlohmann::json(nullptr)}};
}

using TuningHistory = std::vector<TuningStep>;

inline std::function<bool(const std::string&)> scope_predicate(const std::vector<std::string>& scope) {
  return [scope](const std::string& name) {
    for (const auto& p : scope)
      if (name.rfind(p, 0) == 0) return true;
    return false;
  };
}

/// One optimizer step over a batch. Parameters outside the trainable scope and
/// all reward parameters are untouched.
inline TuningStep mvp_step(DiffusionModel& m, const RewardModel& rm, const std::vector<const DiffusionItem*>& batch,
                           const TuningConfig& cfg, Rng& rng, Adam& opt, std::size_t step) {
  check_compatible(m.config, rm.config);
  if (batch.empty()) throw ValidationError("mvp_step: empty batch");
  Bindings b(m.params, scope_predicate(cfg.trainable_scope));
  const double inv = 1.0 / static_cast<double>(batch.size());
  std::vector<ad::Var> pts, rms, combined;
  double reward_sum = 0.0;
  for (const auto* item : batch) {
    MvpTerms t = mvp_objective(b, m, rm, *item, draw_mvp_sample(m, cfg, rng), cfg);
    pts.push_back(t.l_pt);
    if (t.l_rm) rms.push_back(*t.l_rm);
    combined.push_back(t.combined);
    reward_sum += t.reward;
  }
  ad::Var loss = ad::scale(ad::sum(ad::concat_rows(combined)), inv);
  ad::backward(loss);
  TuningStep rec;
  rec.step = step;
  rec.lr = scheduled_lr(cfg.learning_rate, Schedule::constant, step, cfg.steps, cfg.warmup_steps);
  rec.l_pt = ad::sum(ad::concat_rows(pts)).scalar() * inv;
  if (!rms.empty()) rec.l_rm = ad::sum(ad::concat_rows(rms)).scalar() * inv;
  rec.combined = cfg.lambda * rec.l_pt + rec.l_rm.value_or(0.0);
  rec.mean_reward = reward_sum * inv;
  opt.step(m.params, b.gradients(), rec.lr);
  return rec;
}

/// Tuning loop. Checkpoints go to `checkpoint_dir` every `checkpoint_every`
/// steps when both are set.
inline TuningHistory tune(DiffusionModel& m, const RewardModel& rm, const std::vector<DiffusionItem>& data,
                          const TuningConfig& cfg, const std::filesystem::path& checkpoint_dir = {}) {
  cfg.validate();
  check_compatible(m.config, rm.config);
  if (data.empty()) throw ValidationError("tune: empty dataset");
  Rng rng(cfg.seed);
  Adam opt;
  TuningHistory history;
  std::size_t n_checkpoints = 0;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    std::vector<const DiffusionItem*> batch;
    for (std::size_t i = 0; i < cfg.batch_size; ++i) batch.push_back(&data[static_cast<std::size_t>(rng() % data.size())]);
    history.push_back(mvp_step(m, rm, batch, cfg, rng, opt, step));
    if (cfg.checkpoint_every > 0 && !checkpoint_dir.empty() && (step + 1) % cfg.checkpoint_every == 0) {
      std::filesystem::create_directories(checkpoint_dir);
      save_diffusion_model(checkpoint_dir / ("step_" + std::to_string(step + 1) + ".ckpt"), m);
      history.back().checkpoint = n_checkpoints++;
    }
  }
  return history;
}

/// Mean reward of decoded one-step estimates over `items`, with draws seeded
/// by `seed` so different models see identical noise and timesteps.
inline double mean_one_step_reward(const DiffusionModel& m, const RewardModel& rm,
                                   const std::vector<DiffusionItem>& items, const TuningConfig& cfg,
                                   std::uint64_t seed, std::size_t draws_per_item = 2) {
  check_compatible(m.config, rm.config);
  if (items.empty()) throw ValidationError("mean_one_step_reward: no items");
  Rng rng(seed);
  TuningConfig eval = cfg;
  eval.mode = TuneMode::pt_only;
  double acc = 0.0;
  std::size_t n = 0;
  for (const auto& item : items)
    for (std::size_t d = 0; d < draws_per_item; ++d) {
      Bindings b = Bindings::frozen(m.params);
      acc += mvp_objective(b, m, rm, item, draw_mvp_sample(m, cfg, rng), eval).reward;
      ++n;
    }
  return acc / static_cast<double>(n);
}

}  // namespace mvp
