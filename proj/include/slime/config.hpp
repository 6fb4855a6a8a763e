#pragma once

// Experiment configuration: one JSON file, ${VAR} interpolation from the
// environment, paths resolved against the file's directory.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "slime/alignment.hpp"
#include "slime/attacks.hpp"
#include "slime/client.hpp"
#include "slime/digest.hpp"
#include "slime/error.hpp"
#include "slime/metrics.hpp"
#include "slime/retriever.hpp"

namespace slime {

namespace fs = std::filesystem;

using EnvLookup = std::function<std::optional<std::string>(const std::string&)>;

inline std::optional<std::string> process_env(const std::string& name) {
  const char* v = std::getenv(name.c_str());
  if (!v) return std::nullopt;
  return std::string(v);
}

/// Replaces ${NAME} in every string value. An unset variable is a ConfigError.
inline nlohmann::json interpolate_env(const nlohmann::json& j, const EnvLookup& env = process_env) {
  if (j.is_string()) {
    const auto& s = j.get_ref<const std::string&>();
    std::string out;
    std::size_t pos = 0;
    while (true) {
      const auto open = s.find("${", pos);
      if (open == std::string::npos) break;
      const auto close = s.find('}', open + 2);
      if (close == std::string::npos) fail(Errc::kConfigError, "unterminated ${ in '" + s + "'");
      out.append(s, pos, open - pos);
      const std::string name = s.substr(open + 2, close - open - 2);
      const auto value = env(name);
      if (!value) fail(Errc::kConfigError, "environment variable " + name + " is not set");
      out += *value;
      pos = close + 1;
    }
    out.append(s, pos, std::string::npos);
    return out;
  }
  if (j.is_object()) {
    nlohmann::json out = nlohmann::json::object();
    for (auto it = j.begin(); it != j.end(); ++it) out[it.key()] = interpolate_env(it.value(), env);
    return out;
  }
  if (j.is_array()) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& x : j) out.push_back(interpolate_env(x, env));
    return out;
  }
  return j;
}

struct DataPaths {
  fs::path attack_embeddings;
  std::map<std::string, fs::path> victim_embeddings;
  fs::path tag_embeddings;
  fs::path tags;              // ground-truth tag records
  fs::path captions;          // human reference captions
  fs::path retrievals;        // retrieved tags per item (defaults to <output>/retrievals.jsonl)
  fs::path images;            // attacker-side images, <item_id>.png|jpg
  fs::path reference_images;  // original images for reference scenes
  fs::path reference_scenes;  // precomputed reference scenes (JSONL)
  fs::path domains;           // domain label per item (JSONL)
};

struct ClientSettings {
  ClientMode mode = ClientMode::kReplay;
  fs::path cache;
  ModelSpec text{"deepseek", "deepseek-chat", 1024};
  ModelSpec vision{"gemini", "gemini-2.5-flash", 1024};
  std::size_t max_concurrency = 4;
  std::size_t n_captions = 5;
};

using Setting = std::vector<std::string>;  // subset of {tags, captions, image}

inline std::string setting_name(const Setting& s) {
  std::string out;
  for (const auto& x : s) out += (out.empty() ? "" : "+") + x;
  return out;
}

struct ExperimentConfig {
  std::string name = "experiment";
  fs::path base_dir = ".";
  fs::path output_dir = "out";
  std::uint64_t seed = 0;
  DataPaths data;

  std::size_t test_size = 500;
  bool normalize = true;
  AlignmentOptions alignment;
  std::vector<std::size_t> b_sweep{1, 10, 100, 1000, 10000};
  std::optional<std::size_t> b;  // alignment size used for retrieval; defaults to the largest in the sweep

  std::size_t k = 10;
  std::vector<std::size_t> k_sweep{5, 10, 15, 20, 25};
  std::vector<std::size_t> m_sweep;  // defaults to 1..100
  RetrieverConfig retriever;
  fs::path retriever_checkpoint;

  ClientSettings client;
  std::vector<Setting> adaptive_settings{{"tags"}, {"captions"}, {"tags", "captions"}};
  Setting ablation_setting;  // defaults to the last adaptive setting
  std::vector<TextMetric> metrics{kTextMetrics.begin(), kTextMetrics.end()};

  nlohmann::json source = nlohmann::json::object();  // as written, before interpolation

  ExperimentConfig() {
    for (std::size_t m = 1; m <= 100; ++m) m_sweep.push_back(m);
  }

  /// Digest of the configuration as written (secrets stay out of it).
  std::string hash() const { return sha256_hex(source.dump()); }

  fs::path resolve(const fs::path& p) const {
    if (p.empty() || p.is_absolute()) return p;
    return base_dir / p;
  }

  fs::path output() const { return resolve(output_dir); }
  fs::path retrievals_path() const { return data.retrievals.empty() ? output() / "retrievals.jsonl" : resolve(data.retrievals); }
  std::size_t alignment_size() const { return b.value_or(b_sweep.back()); }
};

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) fail(Errc::kConfigError, where + " must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!allowed.count(it.key())) fail(Errc::kConfigError, "unknown key '" + it.key() + "' in " + where);
  }
}

template <typename T>
T config_get(const nlohmann::json& j, const char* key, T fallback, const std::string& where) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    fail(Errc::kConfigError, where + "." + key + " has the wrong type");
  }
}

inline std::vector<std::size_t> sweep(const nlohmann::json& j, const char* key, std::vector<std::size_t> fallback,
                                      const std::string& where) {
  auto xs = config_get(j, key, fallback, where);
  if (xs.empty()) fail(Errc::kConfigError, where + "." + key + " must not be empty");
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (xs[i] < 1) fail(Errc::kConfigError, where + "." + key + " values must be positive");
    if (i > 0 && xs[i] <= xs[i - 1]) fail(Errc::kConfigError, where + "." + key + " must be sorted ascending without repeats");
  }
  return xs;
}

inline Setting parse_setting(const nlohmann::json& j, const std::string& where) {
  Setting s;
  try {
    s = j.get<Setting>();
  } catch (const nlohmann::json::exception&) {
    fail(Errc::kConfigError, where + " must be a list of strings");
  }
  if (s.empty()) fail(Errc::kConfigError, where + " is an empty conditioning set");
  std::set<std::string> seen;
  Setting ordered;
  for (const char* part : {"tags", "captions", "image"}) {
    if (std::find(s.begin(), s.end(), part) != s.end()) ordered.push_back(part);
  }
  for (const auto& x : s) {
    if (x != "tags" && x != "captions" && x != "image") fail(Errc::kConfigError, where + ": unknown input '" + x + "'");
    if (!seen.insert(x).second) fail(Errc::kConfigError, where + ": '" + x + "' listed twice");
  }
  return ordered;
}

}  // namespace detail

inline ExperimentConfig parse_config(const nlohmann::json& raw, const fs::path& base_dir, const EnvLookup& env = process_env) {
  using detail::config_get;
  const auto j = interpolate_env(raw, env);
  detail::reject_unknown_keys(j, {"name", "seed", "output_dir", "data", "split", "alignment", "retrieval", "client",
                                  "adaptive", "metrics"},
                              "config");
  ExperimentConfig c;
  c.source = raw;
  c.base_dir = base_dir;
  c.name = config_get<std::string>(j, "name", c.name, "config");
  c.seed = config_get<std::uint64_t>(j, "seed", c.seed, "config");
  c.output_dir = config_get<std::string>(j, "output_dir", c.output_dir.string(), "config");

  const auto data = j.value("data", nlohmann::json::object());
  detail::reject_unknown_keys(data, {"attack_embeddings", "victim_embeddings", "tag_embeddings", "tags", "captions",
                                     "retrievals", "images", "reference_images", "reference_scenes", "domains"},
                              "data");
  auto path = [&](const char* key) { return fs::path(config_get<std::string>(data, key, "", "data")); };
  c.data.attack_embeddings = path("attack_embeddings");
  c.data.tag_embeddings = path("tag_embeddings");
  c.data.tags = path("tags");
  c.data.captions = path("captions");
  c.data.retrievals = path("retrievals");
  c.data.images = path("images");
  c.data.reference_images = path("reference_images");
  c.data.reference_scenes = path("reference_scenes");
  c.data.domains = path("domains");
  for (const auto& [name, p] : config_get<std::map<std::string, std::string>>(data, "victim_embeddings", {}, "data")) {
    c.data.victim_embeddings[name] = p;
  }

  const auto split = j.value("split", nlohmann::json::object());
  detail::reject_unknown_keys(split, {"test_size"}, "split");
  c.test_size = config_get<std::size_t>(split, "test_size", c.test_size, "split");

  const auto align = j.value("alignment", nlohmann::json::object());
  detail::reject_unknown_keys(align, {"solver", "ridge_lambda", "sv_cutoff", "normalize", "b_sweep", "b"}, "alignment");
  c.alignment.solver = parse_solver(config_get<std::string>(align, "solver", "svd_pinv", "alignment"));
  c.alignment.ridge_lambda = config_get<double>(align, "ridge_lambda", 0.0, "alignment");
  c.alignment.sv_cutoff = config_get<double>(align, "sv_cutoff", c.alignment.sv_cutoff, "alignment");
  if (c.alignment.ridge_lambda < 0) fail(Errc::kConfigError, "alignment.ridge_lambda must be non-negative");
  c.normalize = config_get<bool>(align, "normalize", true, "alignment");
  c.b_sweep = detail::sweep(align, "b_sweep", c.b_sweep, "alignment");
  if (align.contains("b")) c.b = config_get<std::size_t>(align, "b", 1, "alignment");
  if (c.b && *c.b < 1) fail(Errc::kConfigError, "alignment.b must be positive");

  const auto ret = j.value("retrieval", nlohmann::json::object());
  detail::reject_unknown_keys(ret, {"k", "k_sweep", "m_sweep", "checkpoint", "retriever"}, "retrieval");
  c.k = config_get<std::size_t>(ret, "k", c.k, "retrieval");
  if (c.k < 1) fail(Errc::kConfigError, "retrieval.k must be positive");
  c.k_sweep = detail::sweep(ret, "k_sweep", c.k_sweep, "retrieval");
  c.m_sweep = detail::sweep(ret, "m_sweep", c.m_sweep, "retrieval");
  c.retriever_checkpoint = config_get<std::string>(ret, "checkpoint", "", "retrieval");
  if (ret.contains("retriever")) c.retriever = RetrieverConfig::from_json(ret.at("retriever"));
  c.retriever.seed = ret.contains("retriever") && ret.at("retriever").contains("seed") ? c.retriever.seed : c.seed;

  const auto cl = j.value("client", nlohmann::json::object());
  detail::reject_unknown_keys(cl, {"mode", "cache", "provider", "model", "vision_provider", "vision_model", "max_tokens",
                                   "max_concurrency", "n_captions"},
                              "client");
  c.client.mode = parse_client_mode(config_get<std::string>(cl, "mode", "replay", "client"));
  c.client.cache = config_get<std::string>(cl, "cache", "", "client");
  c.client.text.provider = config_get<std::string>(cl, "provider", c.client.text.provider, "client");
  c.client.text.model = config_get<std::string>(cl, "model", c.client.text.model, "client");
  c.client.vision.provider = config_get<std::string>(cl, "vision_provider", c.client.vision.provider, "client");
  c.client.vision.model = config_get<std::string>(cl, "vision_model", c.client.vision.model, "client");
  c.client.text.max_tokens = c.client.vision.max_tokens = config_get<int>(cl, "max_tokens", 1024, "client");
  c.client.max_concurrency = config_get<std::size_t>(cl, "max_concurrency", 4, "client");
  c.client.n_captions = config_get<std::size_t>(cl, "n_captions", 5, "client");
  if (c.client.max_concurrency < 1 || c.client.n_captions < 1 || c.client.text.max_tokens < 1) {
    fail(Errc::kConfigError, "client.max_concurrency, n_captions and max_tokens must be positive");
  }

  const auto ad = j.value("adaptive", nlohmann::json::object());
  detail::reject_unknown_keys(ad, {"settings", "ablation_setting"}, "adaptive");
  if (ad.contains("settings")) {
    if (!ad.at("settings").is_array() || ad.at("settings").empty()) fail(Errc::kConfigError, "adaptive.settings must be a non-empty list");
    c.adaptive_settings.clear();
    for (std::size_t i = 0; i < ad.at("settings").size(); ++i) {
      auto s = detail::parse_setting(ad.at("settings")[i], "adaptive.settings[" + std::to_string(i) + "]");
      if (std::find(c.adaptive_settings.begin(), c.adaptive_settings.end(), s) != c.adaptive_settings.end()) {
        fail(Errc::kConfigError, "adaptive setting '" + setting_name(s) + "' listed twice");
      }
      c.adaptive_settings.push_back(std::move(s));
    }
  }
  c.ablation_setting = ad.contains("ablation_setting") ? detail::parse_setting(ad.at("ablation_setting"), "adaptive.ablation_setting")
                                                       : c.adaptive_settings.back();
  if (std::find(c.adaptive_settings.begin(), c.adaptive_settings.end(), c.ablation_setting) == c.adaptive_settings.end()) {
    fail(Errc::kConfigError, "adaptive.ablation_setting must be one of adaptive.settings");
  }

  if (j.contains("metrics")) {
    c.metrics.clear();
    for (const auto& m : config_get<std::vector<std::string>>(j, "metrics", {}, "config")) {
      try {
        c.metrics.push_back(parse_metric(m));
      } catch (const Error&) {
        fail(Errc::kConfigError, "unknown metric '" + m + "'");
      }
    }
    if (c.metrics.empty()) fail(Errc::kConfigError, "metrics must not be empty");
  }
  return c;
}

/// Checks that every referenced input exists.
inline void validate_paths(const ExperimentConfig& c) {
  auto check = [&](const fs::path& p, const std::string& what) {
    if (!p.empty() && !fs::exists(c.resolve(p))) fail(Errc::kConfigError, what + " not found: " + c.resolve(p).string());
  };
  check(c.data.attack_embeddings, "data.attack_embeddings");
  for (const auto& [name, p] : c.data.victim_embeddings) check(p, "data.victim_embeddings." + name);
  check(c.data.tag_embeddings, "data.tag_embeddings");
  check(c.data.tags, "data.tags");
  check(c.data.captions, "data.captions");
  check(c.data.retrievals, "data.retrievals");
  check(c.data.images, "data.images");
  check(c.data.reference_images, "data.reference_images");
  check(c.data.reference_scenes, "data.reference_scenes");
  check(c.data.domains, "data.domains");
  check(c.retriever_checkpoint, "retrieval.checkpoint");
  if (c.client.mode == ClientMode::kReplay) check(c.client.cache, "client.cache");
}

/// Parses a config file without checking that its inputs exist.
inline ExperimentConfig read_config(const fs::path& path, const EnvLookup& env = process_env) {
  std::ifstream in(path);
  if (!in) fail(Errc::kConfigError, "cannot open config " + path.string());
  const auto raw = nlohmann::json::parse(in, nullptr, false);
  if (raw.is_discarded()) fail(Errc::kConfigError, path.string() + " is not valid JSON");
  return parse_config(raw, path.has_parent_path() ? path.parent_path() : fs::path("."), env);
}

inline ExperimentConfig load_config(const fs::path& path, const EnvLookup& env = process_env) {
  auto c = read_config(path, env);
  validate_paths(c);
  return c;
}

}  // namespace slime
