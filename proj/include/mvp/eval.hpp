#pragma once
// Ranking statistics: Spearman correlation, metric-vs-metric win rates against
// human choices, per-metric method ranking, and reward-model ablation runs.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mvp/dataset.hpp"
#include "mvp/reward_training.hpp"

namespace mvp {

/// 1-based ranks with ties given the average of the positions they span.
/// Rank 1 goes to the smallest value.
inline std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
    i = j + 1;
  }
  return r;
}

/// Spearman's rho: Pearson correlation of average ranks. Equals
/// 1 - 6 sum d^2 / (n (n^2 - 1)) when neither side has ties.
inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size())
    throw std::invalid_argument("spearman: length mismatch (" + std::to_string(a.size()) + " vs " +
                                std::to_string(b.size()) + ")");
  if (a.size() < 2) throw std::invalid_argument("spearman: need at least 2 items");
  const auto ra = average_ranks(a), rb = average_ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0 || sbb == 0) throw std::domain_error("spearman: a ranking with every item tied has no correlation");
  return sab / std::sqrt(saa * sbb);
}

inline double spearman(const std::vector<int>& a, const std::vector<int>& b) {
  return spearman(std::vector<double>(a.begin(), a.end()), std::vector<double>(b.begin(), b.end()));
}

// ---------------------------------------------------------------------------
// Win rates

/// Which of the two candidates in a pairwise comparison was preferred.
enum class Choice : std::uint8_t { first, second };

struct WinRecord {
  std::size_t wins = 0, ties = 0, losses = 0;
  [[nodiscard]] std::size_t total() const { return wins + ties + losses; }
  bool operator==(const WinRecord&) const = default;
};

inline void to_json(nlohmann::json& j, const WinRecord& w) {
  j = nlohmann::json{{"wins", w.wins}, {"ties", w.ties}, {"losses", w.losses}};
}

/// Metric a against metric b: agreement is a tie; otherwise whichever one
/// matches the human choice wins.
inline WinRecord compute_win_rates(const std::vector<Choice>& a, const std::vector<Choice>& b,
                                   const std::vector<Choice>& human) {
  if (a.size() != b.size() || a.size() != human.size())
    throw std::invalid_argument("compute_win_rates: coverage mismatch (" + std::to_string(a.size()) + ", " +
                                std::to_string(b.size()) + ", " + std::to_string(human.size()) + " comparisons)");
  WinRecord w;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] == b[i])
      ++w.ties;
    else if (a[i] == human[i])
      ++w.wins;
    else
      ++w.losses;
  }
  return w;
}

// ---------------------------------------------------------------------------
// Method ranking

enum class Direction { higher_better, lower_better };
NLOHMANN_JSON_SERIALIZE_ENUM(Direction, {{Direction::higher_better, "higher"}, {Direction::lower_better, "lower"}})

inline Direction parse_direction(const std::string& s) {
  if (s == "higher" || s == "higher_better" || s == "up") return Direction::higher_better;
  if (s == "lower" || s == "lower_better" || s == "down") return Direction::lower_better;
  throw ValidationError("unknown score direction '" + s + "' (expected higher or lower)");
}

/// One line of a score file.
struct ScoreRecord {
  std::string metric_id, method_id, prompt_id;
  double score = 0.0;
  Direction direction = Direction::higher_better;
};

inline void to_json(nlohmann::json& j, const ScoreRecord& r) {
  j = nlohmann::json{{"metric_id", r.metric_id},
                     {"method_id", r.method_id},
                     {"prompt_id", r.prompt_id},
                     {"score", r.score},
                     {"direction", r.direction}};
}

inline void from_json(const nlohmann::json& j, ScoreRecord& r) {
  r.metric_id = j.at("metric_id").get<std::string>();
  r.method_id = j.at("method_id").get<std::string>();
  r.prompt_id = j.at("prompt_id").get<std::string>();
  r.score = j.at("score").get<double>();
  r.direction = parse_direction(j.value("direction", std::string("higher")));
}

struct MethodScoreTable {
  std::string metric_id;
  Direction direction = Direction::higher_better;
  std::map<std::string, std::map<std::string, double>> rows;  // method -> prompt -> score

  void validate() const {
    if (rows.empty()) throw ValidationError("metric " + metric_id + ": no methods");
    const auto& ref = rows.begin()->second;
    for (const auto& [method, scores] : rows) {
      std::set<std::string> missing, extra;
      for (const auto& [p, _] : ref)
        if (!scores.contains(p)) missing.insert(p);
      for (const auto& [p, _] : scores)
        if (!ref.contains(p)) extra.insert(p);
      if (!missing.empty() || !extra.empty()) {
        std::string msg = "metric " + metric_id + ": method " + method + " covers a different prompt set";
        for (const auto& p : missing) msg += " (missing " + p + ")";
        for (const auto& p : extra) msg += " (extra " + p + ")";
        throw ValidationError(msg);
      }
    }
  }

  [[nodiscard]] double mean(const std::string& method) const {
    const auto& s = rows.at(method);
    if (s.empty()) throw ValidationError("metric " + metric_id + ": method " + method + " has no scores");
    double acc = 0.0;
    for (const auto& [_, v] : s) acc += v;
    return acc / static_cast<double>(s.size());
  }
};

/// Group score records into one table per metric (sorted by metric id).
inline std::vector<MethodScoreTable> tables_from_scores(const std::vector<ScoreRecord>& records) {
  std::map<std::string, MethodScoreTable> by_metric;
  for (const auto& r : records) {
    auto [it, fresh] = by_metric.try_emplace(r.metric_id);
    auto& t = it->second;
    if (fresh) {
      t.metric_id = r.metric_id;
      t.direction = r.direction;
    } else if (t.direction != r.direction) {
      throw ValidationError("metric " + r.metric_id + ": inconsistent score direction");
    }
    if (!t.rows[r.method_id].emplace(r.prompt_id, r.score).second)
      throw ValidationError("metric " + r.metric_id + ": duplicate score for (" + r.method_id + ", " + r.prompt_id +
                            ")");
  }
  std::vector<MethodScoreTable> out;
  for (auto& [_, t] : by_metric) {
    t.validate();
    out.push_back(std::move(t));
  }
  return out;
}

struct MetricRanking {
  std::string metric_id;
  Direction direction = Direction::higher_better;
  std::map<std::string, double> mean;
  std::map<std::string, double> rank;  // 1 = best; average ranks on ties
  std::optional<double> spearman_to_human;
};

struct RankReport {
  std::vector<std::string> methods;  // every method seen, sorted; unranked ones show mean only
  std::map<std::string, double> human_favor;
  std::map<std::string, double> human_rank;
  std::vector<MetricRanking> metrics;
};

/// Rank methods by 1 = best for a value map where larger is better.
inline std::map<std::string, double> rank_best_first(const std::map<std::string, double>& goodness) {
  std::vector<std::string> names;
  std::vector<double> neg;
  for (const auto& [k, v] : goodness) names.push_back(k), neg.push_back(-v);
  const auto r = average_ranks(neg);
  std::map<std::string, double> out;
  for (std::size_t i = 0; i < names.size(); ++i) out[names[i]] = r[i];
  return out;
}

/// Per metric, rank methods by mean score (respecting direction). When human
/// favor is given, only methods with a favor value are ranked, and each metric
/// gets its Spearman correlation against the human ranking.
inline RankReport rank_methods(const std::vector<MethodScoreTable>& tables,
                               const std::map<std::string, double>& human_favor = {}) {
  RankReport rep;
  rep.human_favor = human_favor;
  if (!human_favor.empty()) rep.human_rank = rank_best_first(human_favor);
  std::set<std::string> methods;
  for (const auto& t : tables) {
    t.validate();
    for (const auto& [m, _] : t.rows) methods.insert(m);
  }
  for (const auto& [m, _] : human_favor) methods.insert(m);
  rep.methods.assign(methods.begin(), methods.end());

  for (const auto& t : tables) {
    MetricRanking mr{t.metric_id, t.direction, {}, {}, std::nullopt};
    std::map<std::string, double> goodness;
    for (const auto& [m, _] : t.rows) {
      mr.mean[m] = t.mean(m);
      if (human_favor.empty() || human_favor.contains(m))
        goodness[m] = t.direction == Direction::higher_better ? mr.mean[m] : -mr.mean[m];
    }
    mr.rank = rank_best_first(goodness);
    if (!human_favor.empty()) {
      std::vector<double> hr, mrk;
      for (const auto& [m, r] : rep.human_rank) {
        if (!mr.rank.contains(m))
          throw ValidationError("metric " + t.metric_id + " has no scores for human-ranked method " + m);
        hr.push_back(r);
        mrk.push_back(mr.rank.at(m));
      }
      if (hr.size() >= 2) mr.spearman_to_human = spearman(hr, mrk);
    }
    rep.metrics.push_back(std::move(mr));
  }
  return rep;
}

inline void to_json(nlohmann::json& j, const RankReport& r) {
  j = nlohmann::json{{"methods", r.methods}, {"human_favor", r.human_favor}, {"human_rank", r.human_rank}};
  auto& ms = j["metrics"] = nlohmann::json::array();
  for (const auto& m : r.metrics)
    ms.push_back({{"metric_id", m.metric_id},
                  {"direction", m.direction},
                  {"mean", m.mean},
                  {"rank", m.rank},
                  {"spearman_to_human", m.spearman_to_human ? nlohmann::json(*m.spearman_to_human) : nlohmann::json()}});
}

inline std::string format_number(double v, int prec = 3) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", prec, v);
  return buf;
}

/// Fixed-width text table: one row per method, rank/mean per metric, and a
/// final Spearman row.
inline std::string report_text(const RankReport& r) {
  std::ostringstream os;
  std::size_t w = 8;
  for (const auto& m : r.methods) w = std::max(w, m.size() + 2);
  auto pad = [](std::string s, std::size_t n) { return s.size() < n ? s + std::string(n - s.size(), ' ') : s; };
  os << pad("method", w);
  if (!r.human_rank.empty()) os << pad("human", 16);
  for (const auto& m : r.metrics) os << pad(m.metric_id + (m.direction == Direction::lower_better ? " (lower)" : ""), 20);
  os << "\n";
  for (const auto& method : r.methods) {
    os << pad(method, w);
    if (!r.human_rank.empty()) {
      auto it = r.human_rank.find(method);
      os << pad(it == r.human_rank.end() ? "-" : format_number(it->second, 1) + " / " + format_number(r.human_favor.at(method), 2), 16);
    }
    for (const auto& m : r.metrics) {
      auto rk = m.rank.find(method);
      auto mn = m.mean.find(method);
      std::string cell = rk == m.rank.end() ? "-" : format_number(rk->second, 1);
      cell += " / " + (mn == m.mean.end() ? std::string("-") : format_number(mn->second));
      os << pad(cell, 20);
    }
    os << "\n";
  }
  if (!r.human_rank.empty()) {
    os << pad("spearman", w) << pad("-", 16);
    for (const auto& m : r.metrics) os << pad(m.spearman_to_human ? format_number(*m.spearman_to_human, 2) : "-", 20);
    os << "\n";
  }
  return os.str();
}

/// Horizontal bar chart (SVG) of labelled values.
inline std::string bar_chart_svg(const std::string& title, const std::vector<std::pair<std::string, double>>& bars) {
  const int row = 24, left = 160, width = 300, top = 36;
  const int height = top + static_cast<int>(bars.size()) * row + 16;
  double lo = 0.0, hi = 0.0;
  for (const auto& [_, v] : bars) lo = std::min(lo, v), hi = std::max(hi, v);
  if (hi - lo < 1e-12) hi = lo + 1.0;
  auto x_of = [&](double v) { return left + static_cast<int>(std::lround((v - lo) / (hi - lo) * width)); };
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << left + width + 80 << "\" height=\"" << height
     << "\" font-family=\"monospace\" font-size=\"12\">\n";
  os << "<text x=\"8\" y=\"20\" font-size=\"14\">" << title << "</text>\n";
  const int zero = x_of(0.0);
  for (std::size_t i = 0; i < bars.size(); ++i) {
    const int y = top + static_cast<int>(i) * row;
    const int x1 = std::min(zero, x_of(bars[i].second)), x2 = std::max(zero, x_of(bars[i].second));
    os << "<text x=\"8\" y=\"" << y + 15 << "\">" << bars[i].first << "</text>\n";
    os << "<rect x=\"" << x1 << "\" y=\"" << y + 3 << "\" width=\"" << std::max(1, x2 - x1)
       << "\" height=\"16\" fill=\"#4a7ab5\"/>\n";
    os << "<text x=\"" << x2 + 4 << "\" y=\"" << y + 15 << "\">" << format_number(bars[i].second) << "</text>\n";
  }
  os << "<line x1=\"" << zero << "\" y1=\"" << top << "\" x2=\"" << zero << "\" y2=\"" << height - 12
     << "\" stroke=\"#333\"/>\n</svg>\n";
  return os.str();
}

inline std::string report_chart_svg(const RankReport& r) {
  std::vector<std::pair<std::string, double>> bars;
  for (const auto& m : r.metrics)
    if (m.spearman_to_human) bars.emplace_back(m.metric_id, *m.spearman_to_human);
  return bar_chart_svg("Spearman to human ranking", bars);
}

/// Line chart (SVG) of one or more named series over a shared x index.
inline std::string line_chart_svg(const std::string& title,
                                  const std::vector<std::pair<std::string, std::vector<double>>>& series) {
  const int left = 60, top = 36, width = 420, height = 220;
  static const char* colors[] = {"#4a7ab5", "#c0504d", "#9bbb59", "#8064a2", "#f79646"};
  double lo = 0.0, hi = 0.0;
  std::size_t n = 0;
  bool first = true;
  for (const auto& [_, ys] : series)
    for (double y : ys) {
      if (!std::isfinite(y)) continue;
      lo = first ? y : std::min(lo, y);
      hi = first ? y : std::max(hi, y);
      first = false;
    }
  for (const auto& [_, ys] : series) n = std::max(n, ys.size());
  if (hi - lo < 1e-12) hi = lo + 1.0;
  auto px = [&](std::size_t i) { return left + (n > 1 ? static_cast<double>(i) * width / static_cast<double>(n - 1) : 0.0); };
  auto py = [&](double y) { return top + height - (y - lo) / (hi - lo) * height; };
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << left + width + 160 << "\" height=\"" << top + height + 40
     << "\" font-family=\"monospace\" font-size=\"12\">\n";
  os << "<text x=\"8\" y=\"20\" font-size=\"14\">" << title << "</text>\n";
  os << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << width << "\" height=\"" << height
     << "\" fill=\"none\" stroke=\"#333\"/>\n";
  os << "<text x=\"4\" y=\"" << top + 10 << "\">" << format_number(hi) << "</text>\n";
  os << "<text x=\"4\" y=\"" << top + height << "\">" << format_number(lo) << "</text>\n";
  for (std::size_t s = 0; s < series.size(); ++s) {
    const char* c = colors[s % 5];
    os << "<polyline fill=\"none\" stroke=\"" << c << "\" points=\"";
    for (std::size_t i = 0; i < series[s].second.size(); ++i)
      if (std::isfinite(series[s].second[i])) os << format_number(px(i), 1) << "," << format_number(py(series[s].second[i]), 1) << " ";
    os << "\"/>\n";
    os << "<text x=\"" << left + width + 8 << "\" y=\"" << top + 14 + 16 * static_cast<int>(s) << "\" fill=\"" << c << "\">"
       << series[s].first << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

/// Human favor file: one {method_id, favor} (percent, higher better) or
/// {method_id, rank} (1 = best) per line.
inline std::map<std::string, double> read_human_favor(const std::filesystem::path& path) {
  std::map<std::string, double> out;
  for (const auto& j : read_ndjson(path)) {
    const auto id = j.at("method_id").get<std::string>();
    double v;
    if (j.contains("favor"))
      v = j.at("favor").get<double>();
    else if (j.contains("rank"))
      v = -j.at("rank").get<double>();
    else
      throw ValidationError(path.string() + ": record for " + id + " has neither favor nor rank");
    if (!out.emplace(id, v).second) throw ValidationError(path.string() + ": duplicate method " + id);
  }
  return out;
}

/// Per-comparison choices file: {comparison_id, human, metrics: {id: 0|1}}.
struct ComparisonChoices {
  std::vector<std::string> ids;
  std::vector<Choice> human;
  std::map<std::string, std::vector<Choice>> metrics;
};

inline ComparisonChoices read_comparison_choices(const std::filesystem::path& path) {
  auto choice = [&](const nlohmann::json& v) {
    const int c = v.get<int>();
    if (c != 0 && c != 1) throw ValidationError(path.string() + ": choice must be 0 or 1");
    return c == 0 ? Choice::first : Choice::second;
  };
  ComparisonChoices out;
  std::set<std::string> metric_ids;
  const auto lines = read_ndjson(path);
  for (const auto& j : lines)
    for (const auto& [k, _] : j.at("metrics").items()) metric_ids.insert(k);
  for (const auto& j : lines) {
    out.ids.push_back(j.at("comparison_id").get<std::string>());
    out.human.push_back(choice(j.at("human")));
    for (const auto& m : metric_ids) {
      if (!j.at("metrics").contains(m))
        throw ValidationError(path.string() + ": comparison " + out.ids.back() + " lacks metric " + m);
      out.metrics[m].push_back(choice(j.at("metrics").at(m)));
    }
  }
  return out;
}

/// Pairwise win records (row metric vs column metric).
inline std::map<std::string, std::map<std::string, WinRecord>> win_matrix(const ComparisonChoices& c) {
  std::map<std::string, std::map<std::string, WinRecord>> out;
  for (const auto& [a, ca] : c.metrics)
    for (const auto& [b, cb] : c.metrics)
      if (a != b) out[a][b] = compute_win_rates(ca, cb, c.human);
  return out;
}

// ---------------------------------------------------------------------------
// Ablations

enum class Ablation { no_backbone_init, no_mv_self_attention, no_negatives };
NLOHMANN_JSON_SERIALIZE_ENUM(Ablation, {{Ablation::no_backbone_init, "w/o backbone-init"},
                                        {Ablation::no_mv_self_attention, "w/o mv self-attention"},
                                        {Ablation::no_negatives, "w/o negatives"}})

inline std::string ablation_name(Ablation a) { return nlohmann::json(a).get<std::string>(); }

struct AblationBase {
  RewardModelConfig model;
  TrainConfig train;
  std::optional<ParamStore> backbone;  // pretrained encoder weights, when available
  std::vector<std::uint64_t> seeds{0};
};

struct AblationRow {
  std::string variant;
  std::vector<double> pair_accuracy;      // per seed, held-out test pairs
  std::vector<double> modality_accuracy;  // per seed, held-out assets
  double median_pair_accuracy = 0.0;
  double median_modality_accuracy = 0.0;
  std::string note;
};

inline void to_json(nlohmann::json& j, const AblationRow& r) {
  j = nlohmann::json{{"variant", r.variant},
                     {"pair_accuracy", r.pair_accuracy},
                     {"modality_accuracy", r.modality_accuracy},
                     {"median_pair_accuracy", r.median_pair_accuracy},
                     {"median_modality_accuracy", r.median_modality_accuracy},
                     {"note", r.note}};
}

inline double median(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("median of empty sequence");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Train the base configuration and each variant with identical seeds and
/// budget. The per-seed split comes from `split_for_seed`.
template <class SplitFn>
std::vector<AblationRow> run_ablations(const AblationBase& base, const std::vector<Ablation>& variants,
                                       const PreferenceData& data, SplitFn&& split_for_seed) {
  if (base.seeds.empty()) throw ValidationError("run_ablations: no seeds");
  auto run = [&](const std::string& name, RewardModelConfig mc, TrainConfig tc, bool use_backbone) {
    AblationRow row{name, {}, {}, 0, 0, {}};
    for (auto seed : base.seeds) {
      const DatasetSplit split = split_for_seed(seed);
      RewardModel m = init_reward_model(mc, seed);
      if (use_backbone && base.backbone) load_backbone(m, *base.backbone);
      tc.seed = seed;
      const auto res = train_reward(std::move(m), split, data, tc);
      row.pair_accuracy.push_back(eval_pair_accuracy(res.model, split.test, data));
      row.modality_accuracy.push_back(modality_order_accuracy(model_scorer(res.model), assets_in(split.test), data));
    }
    row.median_pair_accuracy = median(row.pair_accuracy);
    row.median_modality_accuracy = median(row.modality_accuracy);
    return row;
  };
  std::vector<AblationRow> rows{run("base", base.model, base.train, true)};
  if (!base.backbone) rows[0].note = "no backbone checkpoint supplied; encoder randomly initialized";
  for (auto v : variants) {
    RewardModelConfig mc = base.model;
    TrainConfig tc = base.train;
    bool backbone = true;
    switch (v) {
      case Ablation::no_backbone_init: backbone = false; break;
      case Ablation::no_mv_self_attention: mc.use_mv_self_attention = false; break;
      case Ablation::no_negatives: tc.negatives_enabled = false; break;
    }
    rows.push_back(run(ablation_name(v), mc, tc, backbone));
    if (v == Ablation::no_backbone_init && !base.backbone) rows.back().note = "identical to base: no backbone supplied";
  }
  return rows;
}

}  // namespace mvp
