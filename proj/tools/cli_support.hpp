#pragma once
// Plumbing shared by the subcommands: option registry for resolved configs,
// JSON config-file expansion, data-root path resolution, manifests.

#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <nlohmann/json.hpp>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mvp/dataset.hpp"

namespace mvp::cli {

namespace fs = std::filesystem;
using nlohmann::json;

#ifndef MVP_GIT_HASH
#define MVP_GIT_HASH "unknown"
#endif

/// Records every declared option so the resolved config can be dumped.
struct Registry {
  std::vector<std::pair<std::string, std::function<json()>>> getters;

  template <class T>
  CLI::Option* option(CLI::App* app, const std::string& name, T& var, const std::string& desc) {
    getters.emplace_back(name, [&var] { return json(var); });
    return app->add_option("--" + name, var, desc)->capture_default_str();
  }

  CLI::Option* flag(CLI::App* app, const std::string& name, bool& var, const std::string& desc) {
    getters.emplace_back(name, [&var] { return json(var); });
    return app->add_flag("--" + name, var, desc);
  }

  [[nodiscard]] json resolved() const {
    json j = json::object();
    for (const auto& [k, g] : getters) j[k] = g();
    return j;
  }
};

/// Data root from --data-root or MVP_DATA_ROOT; relative paths resolve
/// against it.
struct Paths {
  std::string root;
  [[nodiscard]] fs::path operator()(const std::string& p) const {
    if (p.empty()) return {};
    const fs::path path(p);
    if (path.is_absolute() || root.empty()) return path;
    return fs::path(root) / path;
  }
};

inline std::string config_value(const std::string& key, const json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
  if (v.is_number()) return v.dump();
  if (v.is_array()) {
    std::string out;
    for (const auto& e : v) {
      if (e.is_structured()) throw ValidationError("config key '" + key + "': nested values are not supported");
      out += (out.empty() ? "" : ",") + config_value(key, e);
    }
    return out;
  }
  throw ValidationError("config key '" + key + "': unsupported value " + v.dump());
}

/// Replace `--config FILE` after the subcommand with `--key=value` tokens
/// placed ahead of the explicit flags, so explicit flags win. Returns the
/// config path (empty when absent) through `config_path`.
inline std::vector<std::string> expand_config(std::vector<std::string> args, const std::set<std::string>& subcommands,
                                              std::string& config_path) {
  auto sub = std::find_if(args.begin(), args.end(), [&](const std::string& a) { return subcommands.contains(a); });
  if (sub == args.end()) return args;
  const std::size_t at = static_cast<std::size_t>(sub - args.begin());
  for (std::size_t i = at + 1; i < args.size(); ++i) {
    std::size_t erase = 0;
    if (args[i] == "--config" && i + 1 < args.size()) {
      config_path = args[i + 1];
      erase = 2;
    } else if (args[i].rfind("--config=", 0) == 0) {
      config_path = args[i].substr(9);
      erase = 1;
    }
    if (erase) {
      args.erase(args.begin() + static_cast<std::ptrdiff_t>(i), args.begin() + static_cast<std::ptrdiff_t>(i + erase));
      break;
    }
  }
  if (config_path.empty()) return args;
  std::ifstream in(config_path);
  if (!in) throw LoadError("cannot read config file " + config_path);
  json cfg;
  try {
    cfg = json::parse(in);
  } catch (const json::exception& e) {
    throw ValidationError("config file " + config_path + ": " + e.what());
  }
  if (!cfg.is_object()) throw ValidationError("config file " + config_path + " must hold a JSON object");
  std::vector<std::string> injected;
  for (const auto& [k, v] : cfg.items()) injected.push_back("--" + k + "=" + config_value(k, v));
  args.insert(args.begin() + static_cast<std::ptrdiff_t>(at + 1), injected.begin(), injected.end());
  return args;
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

inline std::vector<std::uint64_t> parse_seeds(const std::string& s) {
  std::vector<std::uint64_t> out;
  for (const auto& t : split_list(s)) {
    try {
      out.push_back(std::stoull(t));
    } catch (const std::exception&) {
      throw ValidationError("bad seed '" + t + "'");
    }
  }
  if (out.empty()) throw ValidationError("no seeds given");
  return out;
}

inline std::pair<double, double> parse_range(const std::string& s) {
  const auto parts = split_list(s);
  if (parts.size() != 2) throw ValidationError("expected 'lo,hi', got '" + s + "'");
  try {
    return {std::stod(parts[0]), std::stod(parts[1])};
  } catch (const std::exception&) {
    throw ValidationError("expected numeric 'lo,hi', got '" + s + "'");
  }
}

inline void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw LoadError("cannot write " + path.string());
}

inline void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

inline void write_ndjson(const fs::path& path, const std::vector<json>& rows) {
  std::string s;
  for (const auto& r : rows) s += r.dump() + "\n";
  write_text(path, s);
}

/// manifest.json keeps one entry per subcommand that wrote into the directory.
inline void write_manifest(const fs::path& dir, const std::string& subcommand, const json& config,
                           std::uint64_t seed, const std::string& config_file) {
  const fs::path path = (dir.empty() ? fs::path(".") : dir) / "manifest.json";
  json m = json::object();
  if (fs::exists(path)) {
    std::ifstream in(path);
    m = json::parse(in, nullptr, false);
    if (m.is_discarded() || !m.is_object()) m = json::object();
  }
  m["git_hash"] = MVP_GIT_HASH;
  m["runs"][subcommand] = {{"config", config}, {"seed", seed}, {"config_file", config_file}};
  write_json(path, m);
}

inline fs::path parent_dir(const fs::path& file) { return file.has_parent_path() ? file.parent_path() : fs::path("."); }

}  // namespace mvp::cli
