#pragma once
// Desk-scale synthetic preference corpus: procedural prompts, asset lists of
// known quality, simulated annotator rankings, and the pairs they induce.

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "mvp/dataset.hpp"
#include "mvp/reward_training.hpp"

namespace mvp {

struct SyntheticCorpusConfig {
  std::size_t n_prompts = 200;
  std::size_t image_size = 8;
  SynthConfig synth{.n_views = 2};
  /// Quality band of each asset in a list; one asset per band.
  std::vector<std::pair<double, double>> quality_bands{{0.8, 1.0}, {0.55, 0.75}, {0.25, 0.45}, {0.0, 0.2}};
  /// Only pairs whose true qualities differ by at least this much are kept.
  double min_gap = 0.5;
  std::size_t annotators_per_list = 3;
  /// Std-dev of an annotator's perceived quality; perceived values closer
  /// than `tie_threshold` are ranked as ties.
  double annotator_noise = 0.05;
  double tie_threshold = 0.03;
  std::uint64_t seed = 1;
};

struct SyntheticCorpus {
  std::vector<ImagePrompt> prompts;
  PreferenceData data;
  std::map<std::string, double> quality;  // asset id -> generator quality
  std::vector<RankingRecord> rankings;
  std::vector<ComparisonPair> pairs;
};

/// Group ids into rank groups from perceived scores (higher first), merging
/// neighbours closer than `tie_threshold`.
inline RankGroups rank_by_perceived(std::vector<std::pair<std::string, double>> items, double tie_threshold) {
  std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  RankGroups out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i == 0 || items[i - 1].second - items[i].second >= tie_threshold) out.emplace_back();
    out.back().push_back(items[i].first);
  }
  return out;
}

inline SyntheticCorpus build_synthetic_corpus(const SyntheticCorpusConfig& cfg) {
  SyntheticCorpus c;
  c.prompts = synth_prompts(cfg.n_prompts, cfg.image_size, cfg.seed);
  Rng rng(cfg.seed * 7919 + 17);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> perceive(0.0, cfg.annotator_noise);
  for (const auto& p : c.prompts) {
    c.data.prompts.emplace(p.id, p.image);
    std::vector<std::string> list;
    for (std::size_t k = 0; k < cfg.quality_bands.size(); ++k) {
      const auto [lo, hi] = cfg.quality_bands[k];
      const double q = lo + (hi - lo) * unit(rng);
      auto asset = synth_asset_generator(p, q, cfg.seed + k, cfg.synth, "m" + std::to_string(k));
      c.quality[asset.id] = q;
      list.push_back(asset.id);
      c.data.assets.emplace(asset.id, std::move(asset));
    }
    std::vector<RankingRecord> records;
    for (std::size_t a = 0; a < cfg.annotators_per_list; ++a) {
      std::vector<std::pair<std::string, double>> seen;
      for (const auto& id : list) seen.emplace_back(id, c.quality[id] + perceive(rng));
      records.push_back({"sim" + std::to_string(a), p.id, rank_by_perceived(seen, cfg.tie_threshold)});
    }
    const auto agg = borda_aggregate(records);
    for (auto& pair : extract_comparison_pairs(agg, p.id))
      if (c.quality[pair.winner_asset_id] - c.quality[pair.loser_asset_id] >= cfg.min_gap)
        c.pairs.push_back(std::move(pair));
    c.rankings.insert(c.rankings.end(), records.begin(), records.end());
  }
  return c;
}

}  // namespace mvp
