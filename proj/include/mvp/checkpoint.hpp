#pragma once
// Version-tagged checkpoint files: one JSON header line followed by one JSON
// line per named tensor.

#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <string>

#include "mvp/dataset.hpp"
#include "mvp/nn.hpp"

namespace mvp {

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  std::string kind;
  nlohmann::json config;
  ParamStore params;
};

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw LoadError("cannot write checkpoint " + path.string());
  out << nlohmann::json{{"format", "mvp-checkpoint"},
                        {"version", kCheckpointVersion},
                        {"kind", ckpt.kind},
                        {"config", ckpt.config}}
             .dump()
      << '\n';
  for (const auto& [name, m] : ckpt.params.tensors())
    out << nlohmann::json{{"name", name}, {"rows", m.rows}, {"cols", m.cols}, {"data", m.data}}.dump() << '\n';
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path, const std::string& expected_kind = "") {
  const auto lines = read_ndjson(path);
  if (lines.empty()) throw LoadError("empty checkpoint " + path.string());
  const auto& h = lines.front();
  if (h.value("format", "") != "mvp-checkpoint") throw LoadError(path.string() + " is not an mvp checkpoint");
  if (h.value("version", 0) != kCheckpointVersion)
    throw LoadError(path.string() + ": unsupported checkpoint version " + std::to_string(h.value("version", 0)));
  Checkpoint c;
  c.kind = h.value("kind", "");
  if (!expected_kind.empty() && c.kind != expected_kind)
    throw LoadError(path.string() + ": expected a " + expected_kind + " checkpoint, found " + c.kind);
  c.config = h.value("config", nlohmann::json::object());
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto& t = lines[i];
    c.params.add(t.at("name").get<std::string>(), Matrix(t.at("rows").get<std::size_t>(),
                                                         t.at("cols").get<std::size_t>(),
                                                         t.at("data").get<std::vector<double>>()));
  }
  return c;
}

}  // namespace mvp
