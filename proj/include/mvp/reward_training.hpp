#pragma once
// Pairwise preference training of the reward model.

#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "mvp/dataset.hpp"
#include "mvp/nn.hpp"
#include "mvp/reward_model.hpp"

namespace mvp {

/// -log sigmoid(r_w - r_l).
inline double pairwise_loss(double r_w, double r_l) {
  if (!std::isfinite(r_w) || !std::isfinite(r_l)) throw std::domain_error("pairwise_loss: non-finite score");
  return ad::softplus_value(r_l - r_w);
}

inline ad::Var pairwise_loss(const ad::Var& r_w, const ad::Var& r_l) { return ad::softplus(ad::sub(r_l, r_w)); }

inline constexpr const char* kReversedSuffix = "~modality-reversed";

/// Swap the rgb and normal blocks. Slot labels stay canonical; only content
/// moves. Involutive, including the asset id.
inline MultiViewAsset make_modality_reversed_negative(const MultiViewAsset& asset) {
  std::map<Domain, std::vector<const ViewImage*>> blocks;
  for (const auto& v : asset.views) blocks[v.domain].push_back(&v);
  if (blocks.size() != 2 || !blocks.contains(Domain::rgb) || !blocks.contains(Domain::normal))
    throw ValidationError("modality reversal needs exactly the rgb and normal domains (asset " + asset.id + ")");
  if (blocks[Domain::rgb].size() != blocks[Domain::normal].size())
    throw ValidationError("modality reversal needs equal view counts per domain (asset " + asset.id + ")");
  MultiViewAsset out = asset;
  const std::string suffix = kReversedSuffix;
  if (out.id.size() >= suffix.size() && out.id.compare(out.id.size() - suffix.size(), suffix.size(), suffix) == 0)
    out.id.erase(out.id.size() - suffix.size());
  else
    out.id += suffix;
  for (auto& v : out.views) {
    const auto& src = blocks[v.domain == Domain::rgb ? Domain::normal : Domain::rgb];
    v.image = src.at(v.view_index)->image;
  }
  return out;
}

/// Prompt images and assets addressed by id.
struct PreferenceData {
  std::map<std::string, Image> prompts;
  std::map<std::string, MultiViewAsset> assets;

  [[nodiscard]] const MultiViewAsset& asset(const std::string& id) const {
    auto it = assets.find(id);
    if (it == assets.end()) throw ValidationError("unknown asset '" + id + "'");
    return it->second;
  }
  [[nodiscard]] const Image& prompt(const std::string& id) const {
    auto it = prompts.find(id);
    if (it == prompts.end()) throw ValidationError("unknown prompt '" + id + "'");
    return it->second;
  }
};

struct TrainConfig {
  std::size_t batch_size = 8;
  double learning_rate = 4e-5;
  Schedule schedule = Schedule::cosine;
  std::size_t epochs = 10;
  std::uint64_t seed = 0;
  bool negatives_enabled = true;
  double negative_weight = 1.0;
};

NLOHMANN_JSON_SERIALIZE_ENUM(Schedule, {{Schedule::cosine, "cosine"}, {Schedule::constant, "constant"}})

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"batch_size", c.batch_size},         {"learning_rate", c.learning_rate},
                     {"schedule", c.schedule},             {"epochs", c.epochs},
                     {"seed", c.seed},                     {"negatives_enabled", c.negatives_enabled},
                     {"negative_weight", c.negative_weight}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  c.batch_size = j.value("batch_size", d.batch_size);
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.schedule = j.value("schedule", d.schedule);
  c.epochs = j.value("epochs", d.epochs);
  c.seed = j.value("seed", d.seed);
  c.negatives_enabled = j.value("negatives_enabled", d.negatives_enabled);
  c.negative_weight = j.value("negative_weight", d.negative_weight);
  if (c.batch_size < 1) throw ValidationError("train config: batch_size must be >= 1");
  if (!(c.learning_rate > 0)) throw ValidationError("train config: learning_rate must be > 0");
}

struct TrainReport {
  std::vector<double> epoch_loss;
  std::vector<double> val_accuracy;
  double test_accuracy = 0.0;
  double wall_seconds = 0.0;
};

inline void to_json(nlohmann::json& j, const TrainReport& r) {
  j = nlohmann::json{{"epoch_loss", r.epoch_loss},
                     {"val_accuracy", r.val_accuracy},
                     {"test_accuracy", r.test_accuracy},
                     {"wall_seconds", r.wall_seconds}};
}

using Scorer = std::function<double(const Image& prompt, const MultiViewAsset& asset)>;

inline Scorer model_scorer(const RewardModel& m) {
  return [&m](const Image& p, const MultiViewAsset& a) { return score(m, p, a); };
}

/// Fraction of pairs scored strictly in the labelled order; score ties fail.
inline double eval_pair_accuracy(const Scorer& scorer, const std::vector<ComparisonPair>& pairs,
                                 const PreferenceData& data) {
  if (pairs.empty()) throw ValidationError("eval_pair_accuracy: no pairs");
  std::size_t correct = 0;
  for (const auto& p : pairs) {
    const Image& prompt = data.prompt(p.prompt_id);
    if (scorer(prompt, data.asset(p.winner_asset_id)) > scorer(prompt, data.asset(p.loser_asset_id))) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(pairs.size());
}

inline double eval_pair_accuracy(const RewardModel& m, const std::vector<ComparisonPair>& pairs,
                                 const PreferenceData& data) {
  return eval_pair_accuracy(model_scorer(m), pairs, data);
}

/// Fraction of assets scored strictly above their modality-reversed copy.
inline double modality_order_accuracy(const Scorer& scorer, const std::vector<std::string>& asset_ids,
                                      const PreferenceData& data) {
  if (asset_ids.empty()) throw ValidationError("modality_order_accuracy: no assets");
  std::size_t correct = 0;
  for (const auto& id : asset_ids) {
    const auto& a = data.asset(id);
    const Image& prompt = data.prompt(a.prompt_id);
    if (scorer(prompt, a) > scorer(prompt, make_modality_reversed_negative(a))) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(asset_ids.size());
}

/// Batch objective: mean over the batch of the pair losses plus, when
/// enabled, weighted (original > reversed) losses for both pair members.
/// Gradients land in `b` for every tracked parameter.
inline ad::Var batch_loss(Bindings& b, const RewardModel& m, const std::vector<ComparisonPair>& batch,
                          const PreferenceData& data, const TrainConfig& cfg) {
  const auto& c = m.config;
  std::map<std::string, ad::Var> prompt_px;
  auto score_of = [&](const Image& prompt_img, const std::string& prompt_id, const MultiViewAsset& a) {
    auto it = prompt_px.find(prompt_id);
    if (it == prompt_px.end()) it = prompt_px.emplace(prompt_id, ad::constant(image_row(prompt_img, c.image_size))).first;
    return reward::score_graph(b, c, it->second, ad::constant(asset_pixels(c, a)));
  };
  std::vector<ad::Var> terms;
  for (const auto& p : batch) {
    const Image& prompt = data.prompt(p.prompt_id);
    const auto& w = data.asset(p.winner_asset_id);
    const auto& l = data.asset(p.loser_asset_id);
    ad::Var rw = score_of(prompt, p.prompt_id, w);
    ad::Var rl = score_of(prompt, p.prompt_id, l);
    terms.push_back(pairwise_loss(rw, rl));
    if (cfg.negatives_enabled) {
      for (const auto& [asset, r] : {std::pair{&w, rw}, std::pair{&l, rl}}) {
        ad::Var rn = score_of(prompt, p.prompt_id, make_modality_reversed_negative(*asset));
        terms.push_back(ad::scale(pairwise_loss(r, rn), cfg.negative_weight));
      }
    }
  }
  ad::Var total = ad::sum(ad::concat_rows(terms));
  return ad::scale(total, 1.0 / static_cast<double>(batch.size()));
}

struct TrainResult {
  RewardModel model;
  TrainReport report;
};

/// Minibatch Adam over the train split with the configured schedule. Frozen
/// encoder parameters are constants in the graph and never updated.
inline TrainResult train_reward(RewardModel model, const DatasetSplit& split, const PreferenceData& data,
                                const TrainConfig& cfg) {
  if (split.train.empty()) throw ValidationError("train_reward: empty train split");
  if (cfg.batch_size < 1) throw ValidationError("train_reward: batch_size must be >= 1");
  const auto start = std::chrono::steady_clock::now();
  const auto frozen = frozen_parameter_names(model);
  auto trainable = [&frozen](const std::string& n) { return !frozen.contains(n); };
  Rng rng(cfg.seed);
  Adam opt;
  TrainReport report;
  std::vector<ComparisonPair> order = split.train;
  const std::size_t steps_per_epoch = (order.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total_steps = steps_per_epoch * cfg.epochs;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    seeded_shuffle(order, rng);
    double loss_sum = 0.0;
    for (std::size_t s = 0; s < order.size(); s += cfg.batch_size) {
      const std::vector<ComparisonPair> batch(order.begin() + static_cast<std::ptrdiff_t>(s),
                                              order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), s + cfg.batch_size)));
      Bindings b(model.params, trainable);
      ad::Var loss = batch_loss(b, model, batch, data, cfg);
      ad::backward(loss);
      loss_sum += loss.scalar() * static_cast<double>(batch.size());
      opt.step(model.params, b.gradients(), scheduled_lr(cfg.learning_rate, cfg.schedule, step++, total_steps));
    }
    report.epoch_loss.push_back(loss_sum / static_cast<double>(order.size()));
    if (!split.val.empty()) report.val_accuracy.push_back(eval_pair_accuracy(model, split.val, data));
  }
  if (!split.test.empty()) report.test_accuracy = eval_pair_accuracy(model, split.test, data);
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return {std::move(model), std::move(report)};
}

}  // namespace mvp
