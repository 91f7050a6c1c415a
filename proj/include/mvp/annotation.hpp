#pragma once
// Annotation store: hands out asset lists to annotators, accepts ranking
// submissions exactly once per (annotator, list), and persists them in an
// append-only journal that rebuilds the index on replay.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <nlohmann/json.hpp>
#include <optional>
#include <set>
#include <shared_mutex>
#include <string>
#include <vector>

#include "mvp/dataset.hpp"
#include "mvp/nn.hpp"

namespace mvp {

enum class Role { annotator, researcher };
NLOHMANN_JSON_SERIALIZE_ENUM(Role, {{Role::annotator, "annotator"}, {Role::researcher, "researcher"}})

inline Role parse_role(const std::string& s) {
  if (s == "annotator") return Role::annotator;
  if (s == "researcher") return Role::researcher;
  throw ValidationError("unknown role '" + s + "' (expected annotator or researcher)");
}

/// Failure with a stable machine-readable code.
class AnnotationError : public std::runtime_error {
 public:
  AnnotationError(std::string code, const std::string& message) : std::runtime_error(message), code_(std::move(code)) {}
  [[nodiscard]] const std::string& code() const { return code_; }

 private:
  std::string code_;
};

struct Annotator {
  std::string id;
  Role role = Role::annotator;
  std::size_t completed_lists = 0;
};

struct AssetList {
  std::string id;
  std::string prompt_id;
  std::vector<std::string> asset_ids;
};

inline void to_json(nlohmann::json& j, const AssetList& l) {
  j = nlohmann::json{{"asset_list_id", l.id}, {"prompt_id", l.prompt_id}, {"asset_ids", l.asset_ids}};
}
inline void from_json(const nlohmann::json& j, AssetList& l) {
  j.at("asset_list_id").get_to(l.id);
  l.prompt_id = j.value("prompt_id", std::string());
  j.at("asset_ids").get_to(l.asset_ids);
}

struct AnnotationTask {
  std::string asset_list_id;
  std::vector<std::string> asset_ids;
  std::vector<std::string> presentation_order;
};

inline void to_json(nlohmann::json& j, const AnnotationTask& t) {
  j = nlohmann::json{
      {"asset_list_id", t.asset_list_id}, {"asset_ids", t.asset_ids}, {"presentation_order", t.presentation_order}};
}

struct Acknowledgment {
  std::string annotator_id;
  std::string asset_list_id;
  std::size_t completed_lists = 0;
};

inline void to_json(nlohmann::json& j, const Acknowledgment& a) {
  j = nlohmann::json{
      {"annotator_id", a.annotator_id}, {"asset_list_id", a.asset_list_id}, {"completed_lists", a.completed_lists}};
}

struct Conflict {
  std::string researcher_id;
  std::string consensus_winner;  // preferred by the annotator consensus
  std::string consensus_loser;   // preferred by the researcher
};

struct ConflictReport {
  std::string asset_list_id;
  std::vector<Conflict> conflicts;
};

inline void to_json(nlohmann::json& j, const ConflictReport& r) {
  j = nlohmann::json{{"asset_list_id", r.asset_list_id}, {"conflicts", nlohmann::json::array()}};
  for (const auto& c : r.conflicts)
    j["conflicts"].push_back(
        {{"researcher_id", c.researcher_id}, {"consensus_winner", c.consensus_winner}, {"consensus_loser", c.consensus_loser}});
}

struct AnnotationConfig {
  std::size_t cap = 400;  // lists per annotator; researchers are uncapped
  std::uint64_t seed = 0;
  std::filesystem::path journal;  // empty: in-memory only
};

class AnnotationStore {
 public:
  AnnotationStore(std::vector<AssetList> lists, const std::vector<Annotator>& annotators, AnnotationConfig cfg = {})
      : cfg_(std::move(cfg)) {
    for (auto& l : lists) {
      if (l.asset_ids.size() < 4 || l.asset_ids.size() > 5)
        throw ValidationError("asset list " + l.id + " has " + std::to_string(l.asset_ids.size()) +
                              " assets; expected 4-5");
      const std::set<std::string> uniq(l.asset_ids.begin(), l.asset_ids.end());
      if (uniq.size() != l.asset_ids.size()) throw ValidationError("asset list " + l.id + " repeats an asset id");
      const std::string id = l.id;
      if (!lists_.emplace(id, std::move(l)).second) throw ValidationError("duplicate asset list id " + id);
    }
    for (const auto& a : annotators) annotators_[a.id] = Annotator{a.id, a.role, 0};
    if (!cfg_.journal.empty() && std::filesystem::exists(cfg_.journal)) replay();
  }

  void register_annotator(const std::string& id, Role role) {
    std::unique_lock lock(mu_);
    if (id.empty()) throw AnnotationError("validation_error", "annotator id must be nonempty");
    auto it = annotators_.find(id);
    if (it != annotators_.end()) {
      if (it->second.role != role) throw AnnotationError("conflict", "annotator " + id + " already registered with another role");
      return;
    }
    append({{"type", "register"}, {"annotator_id", id}, {"role", role}});
    annotators_[id] = Annotator{id, role, 0};
  }

  [[nodiscard]] Annotator annotator(const std::string& id) const {
    std::shared_lock lock(mu_);
    return find_annotator(id);
  }

  /// Next list this annotator has not ranked, with a per-(annotator, list)
  /// seeded presentation order; none when capped or exhausted.
  [[nodiscard]] std::optional<AnnotationTask> next_task(const std::string& annotator_id) const {
    std::shared_lock lock(mu_);
    const Annotator& a = find_annotator(annotator_id);
    if (a.role == Role::annotator && a.completed_lists >= cfg_.cap) return std::nullopt;
    for (const auto& [id, list] : lists_) {
      if (submissions_.contains({annotator_id, id})) continue;
      AnnotationTask t{id, list.asset_ids, list.asset_ids};
      Rng rng(fnv1a(std::to_string(cfg_.seed) + "/" + annotator_id + "/" + id));
      seeded_shuffle(t.presentation_order, rng);
      return t;
    }
    return std::nullopt;
  }

  /// Reason next_task returned none: "cap_reached" or "exhausted".
  [[nodiscard]] std::string idle_reason(const std::string& annotator_id) const {
    std::shared_lock lock(mu_);
    const Annotator& a = find_annotator(annotator_id);
    return a.role == Role::annotator && a.completed_lists >= cfg_.cap ? "cap_reached" : "exhausted";
  }

  Acknowledgment submit_ranking(const std::string& annotator_id, RankingRecord record) {
    if (record.annotator_id.empty()) record.annotator_id = annotator_id;
    if (record.annotator_id != annotator_id)
      throw AnnotationError("validation_error", "record annotator '" + record.annotator_id +
                                                    "' does not match submitter '" + annotator_id + "'");
    std::unique_lock lock(mu_);
    apply(record, true);
    return {annotator_id, record.asset_list_id, annotators_.at(annotator_id).completed_lists};
  }

  /// Records sorted by (list id, annotator id). Default: annotator role only.
  [[nodiscard]] std::vector<RankingRecord> export_rankings(std::optional<Role> role = Role::annotator) const {
    std::shared_lock lock(mu_);
    std::vector<RankingRecord> out;
    for (const auto& [key, rec] : submissions_)
      if (!role || annotators_.at(key.first).role == *role) out.push_back(rec);
    std::sort(out.begin(), out.end(), [](const RankingRecord& a, const RankingRecord& b) {
      return std::tie(a.asset_list_id, a.annotator_id) < std::tie(b.asset_list_id, b.annotator_id);
    });
    return out;
  }

  /// Asset couples the annotator consensus strictly orders opposite to a
  /// researcher's strict order.
  [[nodiscard]] ConflictReport flag_conflicts(const std::string& list_id) const {
    std::shared_lock lock(mu_);
    if (!lists_.contains(list_id)) throw AnnotationError("unknown_list", "unknown asset list " + list_id);
    std::vector<RankingRecord> crowd, researchers;
    for (const auto& [key, rec] : submissions_)
      if (key.second == list_id) (annotators_.at(key.first).role == Role::researcher ? researchers : crowd).push_back(rec);
    if (researchers.empty())
      throw AnnotationError("no_researcher_record", "asset list " + list_id + " has no researcher ranking");
    if (crowd.empty()) throw AnnotationError("no_annotator_record", "asset list " + list_id + " has no annotator ranking");
    const auto agg = borda_aggregate(crowd);
    ConflictReport rep{list_id, {}};
    for (const auto& r : researchers) {
      const auto pos = group_index(r.ranking);
      for (const auto& pair : extract_comparison_pairs(agg, lists_.at(list_id).prompt_id))
        if (pos.at(pair.loser_asset_id) < pos.at(pair.winner_asset_id))
          rep.conflicts.push_back({r.annotator_id, pair.winner_asset_id, pair.loser_asset_id});
    }
    return rep;
  }

  [[nodiscard]] const std::map<std::string, AssetList>& lists() const { return lists_; }
  [[nodiscard]] const AnnotationConfig& config() const { return cfg_; }

 private:
  static std::map<std::string, std::size_t> group_index(const RankGroups& g) {
    std::map<std::string, std::size_t> pos;
    for (std::size_t i = 0; i < g.size(); ++i)
      for (const auto& id : g[i]) pos[id] = i;
    return pos;
  }

  const Annotator& find_annotator(const std::string& id) const {
    auto it = annotators_.find(id);
    if (it == annotators_.end()) throw AnnotationError("unknown_annotator", "unknown annotator '" + id + "'");
    return it->second;
  }

  // Caller holds the unique lock.
  void apply(const RankingRecord& record, bool persist) {
    auto ait = annotators_.find(record.annotator_id);
    if (ait == annotators_.end())
      throw AnnotationError("unknown_annotator", "unknown annotator '" + record.annotator_id + "'");
    Annotator& a = ait->second;
    auto lit = lists_.find(record.asset_list_id);
    if (lit == lists_.end()) throw AnnotationError("unknown_list", "unknown asset list '" + record.asset_list_id + "'");
    const std::set<std::string> expected(lit->second.asset_ids.begin(), lit->second.asset_ids.end());
    try {
      validate_record(record, expected);
    } catch (const ValidationError& e) {
      throw AnnotationError("validation_error", e.what());
    }
    if (submissions_.contains({a.id, record.asset_list_id}))
      throw AnnotationError("duplicate_submission",
                            "annotator " + a.id + " already ranked asset list " + record.asset_list_id);
    if (a.role == Role::annotator && a.completed_lists >= cfg_.cap)
      throw AnnotationError("cap_exceeded", "annotator " + a.id + " reached the cap of " + std::to_string(cfg_.cap) +
                                                " asset lists");
    if (persist) append({{"type", "submission"}, {"record", record}});
    submissions_.emplace(std::pair{a.id, record.asset_list_id}, record);
    ++a.completed_lists;
  }

  void append(const nlohmann::json& entry) {
    if (cfg_.journal.empty()) return;
    std::ofstream out(cfg_.journal, std::ios::app);
    out << entry.dump() << '\n';
    out.flush();
    if (!out) throw LoadError("cannot append to journal " + cfg_.journal.string());
  }

  void replay() {
    std::ifstream in(cfg_.journal);
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
      ++n;
      if (line.empty()) continue;
      try {
        const auto j = nlohmann::json::parse(line);
        const auto type = j.at("type").get<std::string>();
        if (type == "register") {
          const auto id = j.at("annotator_id").get<std::string>();
          annotators_.try_emplace(id, Annotator{id, j.at("role").get<Role>(), 0});
        } else if (type == "submission") {
          apply(j.at("record").get<RankingRecord>(), false);
        } else {
          throw ValidationError("unknown entry type " + type);
        }
      } catch (const std::exception& e) {
        throw LoadError(cfg_.journal.string() + ":" + std::to_string(n) + ": " + e.what());
      }
    }
  }

  AnnotationConfig cfg_;
  std::map<std::string, AssetList> lists_;
  std::map<std::string, Annotator> annotators_;
  std::map<std::pair<std::string, std::string>, RankingRecord> submissions_;  // (annotator, list)
  mutable std::shared_mutex mu_;
};

}  // namespace mvp
