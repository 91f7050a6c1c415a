#pragma once
// Prompt catalogs, multi-view assets, Borda aggregation of annotator
// rankings, comparison-pair extraction, list-level dataset splits and the
// synthetic asset generator.

#include <boost/rational.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "mvp/image.hpp"
#include "mvp/nn.hpp"

namespace mvp {

class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class LoadError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Rational = boost::rational<std::int64_t>;
using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Domain types

enum class PromptSource { generated, rendered };
enum class ComplexityTag { geometry_simple, geometry_complex, texture_simple, texture_complex, creative };
enum class Domain { rgb, normal };

NLOHMANN_JSON_SERIALIZE_ENUM(PromptSource, {{PromptSource::generated, "generated"},
                                            {PromptSource::rendered, "rendered"}})
NLOHMANN_JSON_SERIALIZE_ENUM(ComplexityTag, {{ComplexityTag::geometry_simple, "geometry_simple"},
                                             {ComplexityTag::geometry_complex, "geometry_complex"},
                                             {ComplexityTag::texture_simple, "texture_simple"},
                                             {ComplexityTag::texture_complex, "texture_complex"},
                                             {ComplexityTag::creative, "creative"}})
NLOHMANN_JSON_SERIALIZE_ENUM(Domain, {{Domain::rgb, "rgb"}, {Domain::normal, "normal"}})

inline std::string to_string(Domain d) { return d == Domain::rgb ? "rgb" : "normal"; }

struct ImagePrompt {
  std::string id;
  PromptSource source = PromptSource::generated;
  std::filesystem::path image_path;
  std::set<ComplexityTag> complexity_tags;
  Image image;
};

struct ViewImage {
  Domain domain = Domain::rgb;
  std::size_t view_index = 0;
  Image image;
  bool operator==(const ViewImage&) const = default;
};

struct MultiViewAsset {
  std::string id;
  std::string prompt_id;
  std::string method_id;
  int inference_steps = 0;
  std::vector<ViewImage> views;  // domain-major, then view_index
  bool operator==(const MultiViewAsset&) const = default;
};

/// Check view count and canonical (domain block, view index) ordering.
inline void validate_asset(const MultiViewAsset& asset, std::size_t n_views, const std::vector<Domain>& domains) {
  const std::size_t expected = n_views * domains.size();
  if (asset.views.size() != expected)
    throw ValidationError("asset " + asset.id + ": expected " + std::to_string(expected) + " views, got " +
                          std::to_string(asset.views.size()));
  for (std::size_t d = 0; d < domains.size(); ++d)
    for (std::size_t k = 0; k < n_views; ++k) {
      const auto& v = asset.views[d * n_views + k];
      if (v.domain != domains[d] || v.view_index != k)
        throw ValidationError("asset " + asset.id + ": view slot " + std::to_string(d * n_views + k) +
                              " is out of canonical order");
    }
}

/// Remapped normal vectors (2p-1) of foreground pixels must have unit norm
/// within `eps`. Neutral-grey pixels (remapped norm < 0.05) are background.
inline bool normals_are_unit(const Image& img, double eps = 0.15) {
  for (std::size_t i = 0; i < img.pixels.size(); i += 3) {
    double n2 = 0.0;
    for (std::size_t c = 0; c < 3; ++c) {
      const double v = 2.0 * img.pixels[i + c] - 1.0;
      n2 += v * v;
    }
    const double n = std::sqrt(n2);
    if (n < 0.05) continue;
    if (n < 1.0 - eps || n > 1.0 + eps) return false;
  }
  return true;
}

using RankGroups = std::vector<std::vector<std::string>>;

struct RankingRecord {
  std::string annotator_id;
  std::string asset_list_id;
  RankGroups ranking;  // best group first; a group with >1 member is a tie
  bool operator==(const RankingRecord&) const = default;
};

struct AggregatedRanking {
  std::string asset_list_id;
  RankGroups consensus;
  std::map<std::string, Rational> borda_points;
  bool operator==(const AggregatedRanking&) const = default;
};

struct ComparisonPair {
  std::string prompt_id;
  std::string winner_asset_id;
  std::string loser_asset_id;
  std::string asset_list_id;
  bool operator==(const ComparisonPair&) const = default;
  auto operator<=>(const ComparisonPair&) const = default;
};

/// Sorted set of every asset id in a ranking; throws on empty groups or
/// repeated ids.
inline std::set<std::string> ranking_assets(const RankGroups& ranking) {
  std::set<std::string> out;
  for (const auto& g : ranking) {
    if (g.empty()) throw ValidationError("ranking contains an empty rank group");
    for (const auto& id : g)
      if (!out.insert(id).second) throw ValidationError("asset '" + id + "' appears in more than one rank group");
  }
  return out;
}

/// Check that a record ranks exactly `expected` and has between `min_assets`
/// and `max_assets` entries. Missing ids are named in the error.
inline void validate_record(const RankingRecord& r, const std::set<std::string>& expected, std::size_t min_assets = 4,
                            std::size_t max_assets = 5) {
  const auto have = ranking_assets(r.ranking);
  std::vector<std::string> missing, extra;
  std::set_difference(expected.begin(), expected.end(), have.begin(), have.end(), std::back_inserter(missing));
  std::set_difference(have.begin(), have.end(), expected.begin(), expected.end(), std::back_inserter(extra));
  auto join = [](const std::vector<std::string>& v) {
    std::string s;
    for (const auto& x : v) s += (s.empty() ? "" : ", ") + x;
    return s;
  };
  if (!missing.empty()) throw ValidationError("ranking is missing assets: " + join(missing));
  if (!extra.empty()) throw ValidationError("ranking has assets outside the list: " + join(extra));
  if (have.size() < min_assets || have.size() > max_assets)
    throw ValidationError("ranking must cover " + std::to_string(min_assets) + "-" + std::to_string(max_assets) +
                          " assets, got " + std::to_string(have.size()));
}

// ---------------------------------------------------------------------------
// Borda aggregation

/// Points one record awards: an asset in a group spanning top-indexed
/// positions p..q of m earns the mean of {m-1-p, ..., m-1-q}.
inline std::map<std::string, Rational> borda_points(const RankGroups& ranking) {
  std::size_t m = 0;
  for (const auto& g : ranking) m += g.size();
  std::map<std::string, Rational> out;
  std::int64_t p = 0;
  for (const auto& g : ranking) {
    const std::int64_t q = p + static_cast<std::int64_t>(g.size()) - 1;
    const auto M = static_cast<std::int64_t>(m);
    const Rational pts(2 * (M - 1) - p - q, 2);
    for (const auto& id : g) out[id] = pts;
    p = q + 1;
  }
  return out;
}

/// Order assets by decreasing total points; exact ties share a group whose
/// members are listed in id order.
inline RankGroups consensus_from_points(const std::map<std::string, Rational>& points) {
  std::vector<std::pair<std::string, Rational>> items(points.begin(), points.end());
  std::stable_sort(items.begin(), items.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  RankGroups groups;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i == 0 || items[i].second != items[i - 1].second) groups.emplace_back();
    groups.back().push_back(items[i].first);
  }
  return groups;
}

inline AggregatedRanking borda_aggregate(const std::vector<RankingRecord>& records) {
  if (records.empty()) throw ValidationError("borda_aggregate: no records");
  const auto reference = ranking_assets(records.front().ranking);
  std::map<std::string, Rational> totals;
  for (const auto& id : reference) totals[id] = 0;
  for (const auto& r : records) {
    if (r.asset_list_id != records.front().asset_list_id)
      throw ValidationError("borda_aggregate: records mix asset lists '" + records.front().asset_list_id + "' and '" +
                            r.asset_list_id + "'");
    if (ranking_assets(r.ranking) != reference)
      throw ValidationError("borda_aggregate: records of list '" + r.asset_list_id + "' rank differing asset sets");
    for (const auto& [id, pts] : borda_points(r.ranking)) totals[id] += pts;
  }
  return {records.front().asset_list_id, consensus_from_points(totals), std::move(totals)};
}

/// Ids of every asset referenced by `pairs`, sorted and unique.
inline std::vector<std::string> assets_in(const std::vector<ComparisonPair>& pairs) {
  std::set<std::string> s;
  for (const auto& p : pairs) s.insert(p.winner_asset_id), s.insert(p.loser_asset_id);
  return {s.begin(), s.end()};
}

inline std::vector<ComparisonPair> extract_comparison_pairs(const AggregatedRanking& agg, const std::string& prompt_id) {
  std::vector<ComparisonPair> out;
  for (std::size_t i = 0; i < agg.consensus.size(); ++i)
    for (std::size_t j = i + 1; j < agg.consensus.size(); ++j)
      for (const auto& w : agg.consensus[i])
        for (const auto& l : agg.consensus[j]) out.push_back({prompt_id, w, l, agg.asset_list_id});
  return out;
}

// ---------------------------------------------------------------------------
// Splits

struct DatasetSplit {
  std::vector<ComparisonPair> train, val, test;
  std::vector<std::string> train_lists, val_lists, test_lists;
  std::vector<std::string> warnings;
};

/// Fisher-Yates driven directly by the engine output so the permutation
/// depends only on the seed, not on library distribution internals.
template <class T>
void seeded_shuffle(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(v[i - 1], v[j]);
  }
}

/// 8:1:1 split over asset lists. Lists are shuffled under `seed`; the
/// validation and test shares are floor(n/10) each, train takes the rest.
inline DatasetSplit split_dataset(const std::vector<ComparisonPair>& pairs, std::uint64_t seed) {
  if (pairs.empty()) throw ValidationError("split_dataset: no pairs");
  std::set<std::string> list_set;
  for (const auto& p : pairs) list_set.insert(p.asset_list_id);
  std::vector<std::string> lists(list_set.begin(), list_set.end());
  Rng rng(seed);
  seeded_shuffle(lists, rng);
  const std::size_t n = lists.size();
  const std::size_t n_val = n / 10, n_test = n / 10;
  const std::size_t n_train = n - n_val - n_test;
  DatasetSplit s;
  if (n < 10)
    s.warnings.push_back("only " + std::to_string(n) + " distinct asset lists; split is degenerate");
  s.train_lists.assign(lists.begin(), lists.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.val_lists.assign(lists.begin() + static_cast<std::ptrdiff_t>(n_train),
                     lists.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  s.test_lists.assign(lists.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), lists.end());
  // tiny-input fallback: keep a test list when possible so evaluation is not empty
  if (s.test_lists.empty() && s.train_lists.size() > 1) {
    s.test_lists.push_back(s.train_lists.back());
    s.train_lists.pop_back();
  }
  const std::set<std::string> tr(s.train_lists.begin(), s.train_lists.end());
  const std::set<std::string> va(s.val_lists.begin(), s.val_lists.end());
  for (const auto& p : pairs) {
    if (tr.contains(p.asset_list_id)) s.train.push_back(p);
    else if (va.contains(p.asset_list_id)) s.val.push_back(p);
    else s.test.push_back(p);
  }
  return s;
}

// ---------------------------------------------------------------------------
// Synthetic assets

struct SynthConfig {
  std::size_t n_views = 6;
  std::vector<Domain> domains{Domain::rgb, Domain::normal};
  double noise_max = 0.25;   // Gaussian sigma at quality 0
  double blur_max = 1.0;     // blend weight toward a 3x3 box blur at quality 0
  double hue_max = 0.25;     // hue rotation in turns at quality 0
  double normal_relief = 2.5;
};

/// Stable 64-bit FNV-1a, used to derive per-asset seeds from ids.
inline std::uint64_t fnv1a(const std::string& s, std::uint64_t h = 1469598103934665603ULL) {
  for (unsigned char c : s) h = (h ^ c) * 1099511628211ULL;
  return h;
}

namespace detail {

inline Image shift_columns(const Image& src, std::size_t shift) {
  Image out(src.height, src.width);
  for (std::size_t y = 0; y < src.height; ++y)
    for (std::size_t x = 0; x < src.width; ++x)
      for (std::size_t c = 0; c < 3; ++c) out.at(y, (x + shift) % src.width, c) = src.at(y, x, c);
  return out;
}

inline Image box_blur3(const Image& src) {
  Image out(src.height, src.width);
  const auto H = static_cast<std::ptrdiff_t>(src.height), W = static_cast<std::ptrdiff_t>(src.width);
  for (std::ptrdiff_t y = 0; y < H; ++y)
    for (std::ptrdiff_t x = 0; x < W; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        double acc = 0.0;
        int n = 0;
        for (std::ptrdiff_t dy = -1; dy <= 1; ++dy)
          for (std::ptrdiff_t dx = -1; dx <= 1; ++dx) {
            const auto yy = y + dy, xx = x + dx;
            if (yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
            acc += src.at(static_cast<std::size_t>(yy), static_cast<std::size_t>(xx), c);
            ++n;
          }
        out.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x), c) = acc / n;
      }
  return out;
}

// Rotate RGB about the grey axis by `turns` of a full revolution.
inline void rotate_hue(Image& img, double turns) {
  const double a = 2.0 * M_PI * turns;
  const double cs = std::cos(a), sn = std::sin(a);
  const double k = 1.0 / 3.0, s3 = std::sqrt(1.0 / 3.0);
  const double m[3][3] = {{cs + (1 - cs) * k, k * (1 - cs) - s3 * sn, k * (1 - cs) + s3 * sn},
                          {k * (1 - cs) + s3 * sn, cs + k * (1 - cs), k * (1 - cs) - s3 * sn},
                          {k * (1 - cs) - s3 * sn, k * (1 - cs) + s3 * sn, cs + k * (1 - cs)}};
  for (std::size_t i = 0; i < img.pixels.size(); i += 3) {
    const double r = img.pixels[i], g = img.pixels[i + 1], b = img.pixels[i + 2];
    for (std::size_t c = 0; c < 3; ++c) img.pixels[i + c] = m[c][0] * r + m[c][1] * g + m[c][2] * b;
  }
}

inline void renormalize_normals(Image& img) {
  for (std::size_t i = 0; i < img.pixels.size(); i += 3) {
    double v[3], n2 = 0.0;
    for (std::size_t c = 0; c < 3; ++c) v[c] = 2.0 * img.pixels[i + c] - 1.0, n2 += v[c] * v[c];
    const double n = std::sqrt(n2);
    if (n < 1e-9) continue;
    for (std::size_t c = 0; c < 3; ++c) img.pixels[i + c] = 0.5 * (v[c] / n + 1.0);
  }
}

}  // namespace detail

/// Normal map of the fixed height field h(u,v) = exp(-4(u^2+v^2)) +
/// 0.15 sin(3u) cos(2v) over [-1,1]^2, encoded as (n+1)/2.
inline Image analytic_normal_map(std::size_t height, std::size_t width, double relief) {
  Image out(height, width);
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x) {
      const double u = 2.0 * (static_cast<double>(x) + 0.5) / static_cast<double>(width) - 1.0;
      const double v = 2.0 * (static_cast<double>(y) + 0.5) / static_cast<double>(height) - 1.0;
      const double e = std::exp(-4.0 * (u * u + v * v));
      const double hu = -8.0 * u * e + 0.45 * std::cos(3 * u) * std::cos(2 * v);
      const double hv = -8.0 * v * e - 0.30 * std::sin(3 * u) * std::sin(2 * v);
      double n[3] = {-relief * hu, -relief * hv, 1.0};
      const double len = std::sqrt(n[0] * n[0] + n[1] * n[1] + n[2] * n[2]);
      for (std::size_t c = 0; c < 3; ++c) out.at(y, x, c) = 0.5 * (n[c] / len + 1.0);
    }
  return out;
}

/// Deterministic multi-view asset for `prompt`. View k is the prompt image
/// (rgb) or the analytic normal map (normal) circularly shifted by
/// k*W/n_views columns, then corrupted by hue rotation (rgb only), box-blur
/// blending and Gaussian noise, each with magnitude proportional to
/// (1 - quality). Normal views are re-normalized after corruption.
inline MultiViewAsset synth_asset_generator(const ImagePrompt& prompt, double quality, std::uint64_t seed,
                                            const SynthConfig& cfg = {}, std::string method_id = "synth") {
  if (!(quality >= 0.0 && quality <= 1.0)) throw ValidationError("synth_asset_generator: quality outside [0,1]");
  const Image& base = prompt.image;
  if (base.height == 0 || base.width == 0) throw ValidationError("synth_asset_generator: prompt image is empty");
  const double dirt = 1.0 - quality;
  Rng rng(seed ^ fnv1a(prompt.id) ^ fnv1a(method_id, 0x9e3779b97f4a7c15ULL));
  std::normal_distribution<double> noise(0.0, 1.0);
  const Image normal_base = analytic_normal_map(base.height, base.width, cfg.normal_relief);

  MultiViewAsset asset;
  asset.prompt_id = prompt.id;
  asset.method_id = method_id;
  asset.inference_steps = 50;
  char qbuf[32];
  std::snprintf(qbuf, sizeof qbuf, "%.4f", quality);
  asset.id = prompt.id + ":" + method_id + ":q" + qbuf + ":s" + std::to_string(seed);
  for (Domain d : cfg.domains) {
    for (std::size_t k = 0; k < cfg.n_views; ++k) {
      const std::size_t shift = k * base.width / cfg.n_views;
      Image img = detail::shift_columns(d == Domain::rgb ? base : normal_base, shift);
      if (dirt > 0.0) {
        if (d == Domain::rgb) detail::rotate_hue(img, cfg.hue_max * dirt);
        const Image blurred = detail::box_blur3(img);
        const double a = cfg.blur_max * dirt;
        for (std::size_t i = 0; i < img.pixels.size(); ++i)
          img.pixels[i] = (1.0 - a) * img.pixels[i] + a * blurred.pixels[i];
        const double sigma = cfg.noise_max * dirt;
        for (auto& p : img.pixels) p = std::clamp(p + sigma * noise(rng), 0.0, 1.0);
        if (d == Domain::normal) detail::renormalize_normals(img);
      }
      asset.views.push_back({d, k, std::move(img)});
    }
  }
  return asset;
}

/// Procedural prompt image: a few soft coloured blobs on a tinted background.
inline Image synth_prompt_image(std::size_t height, std::size_t width, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Image img(height, width);
  double bg[3] = {0.2 + 0.6 * u(rng), 0.2 + 0.6 * u(rng), 0.2 + 0.6 * u(rng)};
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x)
      for (std::size_t c = 0; c < 3; ++c) img.at(y, x, c) = bg[c];
  const int blobs = 2 + static_cast<int>(rng() % 2);
  for (int b = 0; b < blobs; ++b) {
    const double cx = u(rng), cy = u(rng), r = 0.15 + 0.25 * u(rng);
    const double col[3] = {u(rng), u(rng), u(rng)};
    for (std::size_t y = 0; y < height; ++y)
      for (std::size_t x = 0; x < width; ++x) {
        const double dx = (static_cast<double>(x) + 0.5) / static_cast<double>(width) - cx;
        const double dy = (static_cast<double>(y) + 0.5) / static_cast<double>(height) - cy;
        const double w = std::exp(-(dx * dx + dy * dy) / (2 * r * r));
        for (std::size_t c = 0; c < 3; ++c) img.at(y, x, c) = (1 - w) * img.at(y, x, c) + w * col[c];
      }
  }
  return img;
}

/// In-memory prompt catalog of procedural images, ids "p0000", "p0001", ...
inline std::vector<ImagePrompt> synth_prompts(std::size_t count, std::size_t size, std::uint64_t seed) {
  std::vector<ImagePrompt> out;
  for (std::size_t i = 0; i < count; ++i) {
    ImagePrompt p;
    char buf[32];
    std::snprintf(buf, sizeof buf, "p%04zu", i);
    p.id = buf;
    p.image = synth_prompt_image(size, size, seed * 1000003ULL + i);
    p.image_path = std::string(buf) + ".png";
    p.complexity_tags = {i % 2 ? ComplexityTag::geometry_complex : ComplexityTag::geometry_simple};
    out.push_back(std::move(p));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Line-delimited records

inline void to_json(json& j, const RankingRecord& r) {
  j = json{{"annotator_id", r.annotator_id}, {"asset_list_id", r.asset_list_id}, {"ranking", r.ranking}};
}
inline void from_json(const json& j, RankingRecord& r) {
  j.at("annotator_id").get_to(r.annotator_id);
  j.at("asset_list_id").get_to(r.asset_list_id);
  j.at("ranking").get_to(r.ranking);
}
inline void to_json(json& j, const ComparisonPair& p) {
  j = json{{"prompt_id", p.prompt_id},
           {"winner_asset_id", p.winner_asset_id},
           {"loser_asset_id", p.loser_asset_id},
           {"asset_list_id", p.asset_list_id}};
}
inline void from_json(const json& j, ComparisonPair& p) {
  j.at("prompt_id").get_to(p.prompt_id);
  j.at("winner_asset_id").get_to(p.winner_asset_id);
  j.at("loser_asset_id").get_to(p.loser_asset_id);
  p.asset_list_id = j.value("asset_list_id", p.prompt_id);
}
inline void to_json(json& j, const AggregatedRanking& a) {
  json pts = json::object();
  for (const auto& [id, r] : a.borda_points)
    pts[id] = r.denominator() == 1 ? std::to_string(r.numerator())
                                   : std::to_string(r.numerator()) + "/" + std::to_string(r.denominator());
  j = json{{"asset_list_id", a.asset_list_id}, {"consensus", a.consensus}, {"borda_points", pts}};
}

/// Parse one JSON value per non-blank line.
inline std::vector<json> read_ndjson(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open " + path.string());
  std::vector<json> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(json::parse(line));
    } catch (const json::parse_error& e) {
      throw LoadError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

template <class T>
std::vector<T> read_records(const std::filesystem::path& path) {
  std::vector<T> out;
  for (const auto& j : read_ndjson(path)) out.push_back(j.get<T>());
  return out;
}

template <class T>
void write_records(const std::filesystem::path& path, const std::vector<T>& records) {
  std::ofstream out(path);
  if (!out) throw LoadError("cannot write " + path.string());
  for (const auto& r : records) out << json(r).dump() << '\n';
}

// ---------------------------------------------------------------------------
// Prompt catalog

/// Load a prompt manifest (a file, or a directory holding manifest.ndjson).
/// Image paths resolve relative to the manifest's directory. The result is
/// sorted by id.
inline std::vector<ImagePrompt> load_prompt_catalog(const std::filesystem::path& path) {
  namespace fs = std::filesystem;
  fs::path manifest = path;
  if (fs::is_directory(path)) manifest = path / "manifest.ndjson";
  if (!fs::exists(manifest)) throw LoadError("prompt manifest not found: " + manifest.string());
  const fs::path root = manifest.parent_path();
  std::vector<ImagePrompt> out;
  std::map<std::string, int> seen;
  for (const auto& j : read_ndjson(manifest)) {
    ImagePrompt p;
    j.at("id").get_to(p.id);
    p.source = j.value("source", PromptSource::generated);
    p.image_path = j.at("image_path").get<std::string>();
    if (j.contains("complexity_tags")) p.complexity_tags = j.at("complexity_tags").get<std::set<ComplexityTag>>();
    ++seen[p.id];
    out.push_back(std::move(p));
  }
  std::vector<std::string> dups;
  for (const auto& [id, n] : seen)
    if (n > 1) dups.push_back(id);
  if (!dups.empty()) {
    std::string msg = "duplicate prompt ids:";
    for (const auto& d : dups) msg += " " + d;
    throw ValidationError(msg);
  }
  for (auto& p : out) {
    const fs::path img = p.image_path.is_absolute() ? p.image_path : root / p.image_path;
    if (!fs::exists(img)) throw LoadError("prompt image not found: " + img.string());
    p.image = read_png(img);
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  return out;
}

inline void write_prompt_catalog(const std::filesystem::path& dir, const std::vector<ImagePrompt>& prompts) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::ofstream out(dir / "manifest.ndjson");
  if (!out) throw LoadError("cannot write " + (dir / "manifest.ndjson").string());
  for (const auto& p : prompts) {
    const fs::path rel = p.image_path.empty() ? fs::path(p.id + ".png") : p.image_path;
    fs::create_directories((dir / rel).parent_path());
    write_png(dir / rel, p.image);
    out << json{{"id", p.id}, {"source", p.source}, {"image_path", rel.generic_string()},
                {"complexity_tags", p.complexity_tags}}
               .dump()
        << '\n';
  }
}

// Asset directories: <root>/<sanitized id>/{asset.json, rgb_0.png, ...}

inline std::string sanitize_id(const std::string& id) {
  std::string s = id;
  for (auto& c : s)
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.')) c = '_';
  return s;
}

inline void save_asset(const std::filesystem::path& root, const MultiViewAsset& a) {
  namespace fs = std::filesystem;
  const fs::path dir = root / sanitize_id(a.id);
  fs::create_directories(dir);
  json views = json::array();
  for (const auto& v : a.views) {
    const std::string file = to_string(v.domain) + "_" + std::to_string(v.view_index) + ".png";
    write_png(dir / file, v.image);
    views.push_back({{"domain", v.domain}, {"view_index", v.view_index}, {"file", file}});
  }
  std::ofstream(dir / "asset.json") << json{{"id", a.id},
                                            {"prompt_id", a.prompt_id},
                                            {"method_id", a.method_id},
                                            {"inference_steps", a.inference_steps},
                                            {"views", views}}
                                           .dump(2);
}

inline MultiViewAsset load_asset(const std::filesystem::path& dir) {
  std::ifstream in(dir / "asset.json");
  if (!in) throw LoadError("asset metadata not found: " + (dir / "asset.json").string());
  const json j = json::parse(in);
  MultiViewAsset a;
  j.at("id").get_to(a.id);
  j.at("prompt_id").get_to(a.prompt_id);
  j.at("method_id").get_to(a.method_id);
  a.inference_steps = j.value("inference_steps", 0);
  for (const auto& v : j.at("views"))
    a.views.push_back({v.at("domain").get<Domain>(), v.at("view_index").get<std::size_t>(),
                       read_png(dir / v.at("file").get<std::string>())});
  return a;
}

inline std::map<std::string, MultiViewAsset> load_asset_store(const std::filesystem::path& root) {
  std::map<std::string, MultiViewAsset> out;
  if (!std::filesystem::exists(root)) return out;
  for (const auto& e : std::filesystem::directory_iterator(root))
    if (e.is_directory() && std::filesystem::exists(e.path() / "asset.json")) {
      auto a = load_asset(e.path());
      out.emplace(a.id, std::move(a));
    }
  return out;
}

}  // namespace mvp
