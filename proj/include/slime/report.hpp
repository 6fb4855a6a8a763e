#pragma once

// Run manifests and report files. Every report is a JSON document carrying its
// manifest; the Markdown and CSV views are rendered from that JSON alone, so
// `report` can rebuild them later.

#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "slime/client.hpp"
#include "slime/digest.hpp"
#include "slime/embedding_store.hpp"
#include "slime/error.hpp"
#include "slime/prompts.hpp"
#include "slime/retriever.hpp"
#include "slime/text.hpp"

namespace slime {

inline constexpr std::string_view kSlimeVersion = "0.1.0";

inline std::map<std::string, std::string> module_versions() {
  return {{"slime", std::string(kSlimeVersion)},
          {"matrix_format", std::string(kMatrixMagic.begin(), kMatrixMagic.end())},
          {"tokenizer", std::string(text::kTokenizerVersion)},
          {"retriever_format", std::string(kRetrieverFormat)},
          {"text_metrics", "bleu4-eps1e-9/rougeF1/meteor-exact+porter"}};
}

struct RunManifest {
  std::string stage;
  std::string config_hash;
  std::uint64_t seed = 0;
  std::string client_mode;
  std::set<std::string> prompt_ids;
  std::string timestamp;
  std::map<std::string, std::string> artifacts;  // input path (as configured) -> sha256
  std::map<std::string, std::vector<std::string>> skipped;  // reason -> item ids
  std::vector<std::string> warnings;

  void skip(const std::string& reason, const std::string& item) { skipped[reason].push_back(item); }

  nlohmann::json to_json() const {
    nlohmann::json skips = nlohmann::json::object();
    for (const auto& [reason, items] : skipped) {
      auto sorted = items;
      std::sort(sorted.begin(), sorted.end());
      skips[reason] = sorted;
    }
    return {{"stage", stage},
            {"config_hash", config_hash},
            {"seed", seed},
            {"client_mode", client_mode},
            {"module_versions", module_versions()},
            {"prompt_ids", prompt_ids},
            {"timestamp", timestamp},
            {"artifacts", artifacts},
            {"skipped", skips},
            {"warnings", warnings}};
  }
};

/// SOURCE_DATE_EPOCH when set, else `fallback`, else the current time.
inline std::string manifest_timestamp(const std::string& fallback) {
  if (const char* epoch = std::getenv("SOURCE_DATE_EPOCH")) {
    const std::time_t t = static_cast<std::time_t>(std::strtoll(epoch, nullptr, 10));
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
  }
  return fallback.empty() ? utc_now() : fallback;
}

/// Digest of a file, or of every regular file below a directory (sorted by
/// relative path).
inline std::string artifact_digest(const std::filesystem::path& p) {
  if (!std::filesystem::is_directory(p)) return sha256_file(p);
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::recursive_directory_iterator(p)) {
    if (e.is_regular_file()) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::string acc;
  for (const auto& f : files) acc += std::filesystem::relative(f, p).generic_string() + " " + sha256_file(f) + "\n";
  return sha256_hex(acc);
}

// ---------------------------------------------------------------------------
// Formatting

inline std::string fixed(double x, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, x);
  return buf;
}

inline std::string json_cell(const nlohmann::json& v) {
  if (v.is_null()) return "-";
  if (v.is_string()) return v.get<std::string>();
  if (v.is_number_float()) return fixed(v.get<double>());
  if (v.is_boolean()) return v.get<bool>() ? "yes" : "no";
  return v.dump();
}

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::string markdown() const {
    auto line = [](const std::vector<std::string>& cells) {
      std::string s = "|";
      for (const auto& c : cells) s += " " + c + " |";
      return s + "\n";
    };
    std::string out = line(header);
    out += "|";
    for (std::size_t i = 0; i < header.size(); ++i) out += " --- |";
    out += "\n";
    for (const auto& r : rows) out += line(r);
    return out;
  }

  std::string csv() const {
    auto cell = [](const std::string& c) {
      if (c.find_first_of(",\"\n") == std::string::npos) return c;
      std::string q = "\"";
      for (char ch : c) q += ch == '"' ? std::string("\"\"") : std::string(1, ch);
      return q + "\"";
    };
    auto line = [&](const std::vector<std::string>& cells) {
      std::string s;
      for (std::size_t i = 0; i < cells.size(); ++i) s += (i ? "," : "") + cell(cells[i]);
      return s + "\n";
    };
    std::string out = line(header);
    for (const auto& r : rows) out += line(r);
    return out;
  }
};

/// Rows of `body[key]` projected onto `columns` (JSON field names).
inline Table json_table(const nlohmann::json& rows, const std::vector<std::string>& columns) {
  Table t{columns, {}};
  for (const auto& r : rows) {
    std::vector<std::string> cells;
    for (const auto& c : columns) cells.push_back(r.contains(c) ? json_cell(r.at(c)) : "-");
    t.rows.push_back(std::move(cells));
  }
  return t;
}

inline std::string manifest_markdown(const nlohmann::json& m) {
  auto field = [&](const char* key) { return m.contains(key) ? m.at(key) : nlohmann::json(); };
  std::string out = "## Run manifest\n\n";
  out += "- stage: " + json_cell(field("stage")) + "\n";
  out += "- config hash: `" + json_cell(field("config_hash")) + "`\n";
  out += "- seed: " + json_cell(field("seed")) + "\n";
  out += "- client mode: " + json_cell(field("client_mode")) + "\n";
  out += "- timestamp: " + json_cell(field("timestamp")) + "\n";
  std::string prompts;
  for (const auto& p : field("prompt_ids")) prompts += (prompts.empty() ? "" : ", ") + json_cell(p);
  out += "- prompt templates: " + (prompts.empty() ? std::string("none") : prompts) + "\n";
  if (m.contains("artifacts")) {
    for (const auto& [name, digest] : m.at("artifacts").items()) {
      out += "- input `" + name + "`: `" + json_cell(digest).substr(0, 16) + "`\n";
    }
  }
  if (m.contains("skipped")) {
    for (const auto& [reason, items] : m.at("skipped").items()) {
      out += "- skipped (" + reason + "): " + std::to_string(items.size()) + " item(s)\n";
    }
  }
  for (const auto& w : field("warnings")) out += "- warning: " + json_cell(w) + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// Per-report views

struct ReportViews {
  std::string markdown;
  std::map<std::string, std::string> csv;  // file suffix -> contents
};

inline ReportViews render_report(const nlohmann::json& body) {
  const std::string kind = body.value("kind", std::string());
  ReportViews v;
  std::string md = "# " + body.value("title", kind) + "\n\n";
  if (kind == "alignment_sweep") {
    const auto t = json_table(body.at("rows"), {"victim", "b", "b_used", "mean_cosine", "residual"});
    md += t.markdown() + "\n";
    for (const auto& [victim, mono] : body.at("monotone").items()) {
      md += "- " + victim + ": cosine " + (mono.get<bool>() ? "strictly increases" : "does not strictly increase") + " with b\n";
    }
    v.csv[""] = t.csv();
  } else if (kind == "retriever_training") {
    md += json_table(body.at("stages"), {"stage", "initial_loss", "final_loss", "epochs"}).markdown() + "\n";
    md += json_table(body.at("recall"), {"split", "k", "recall"}).markdown();
    v.csv[""] = json_table(body.at("recall"), {"split", "k", "recall"}).csv();
  } else if (kind == "leakage") {
    const std::vector<std::string> cols = {"victim", "b", "reference", "m", "recall", "precision", "f1"};
    md += "Exact-match baseline:\n\n" + json_table(body.at("exact"), {"victim", "b", "reference", "recall", "precision", "f1"}).markdown();
    md += "\nNeighborhood sweep:\n\n" + json_table(body.at("rows"), cols).markdown();
    v.csv[""] = json_table(body.at("rows"), cols).csv();
  } else if (kind == "attack_captions" || kind == "cross_domain") {
    std::vector<std::string> cols = {"victim", "b", "k", "reference", "metric", "value", "items"};
    if (kind == "cross_domain") cols.insert(cols.begin(), "domain");
    md += "Best-match scores of captions written from retrieved tags:\n\n" + json_table(body.at("rows"), cols).markdown();
    if (body.contains("baseline")) {
      std::vector<std::string> bcols = {"reference", "metric", "value", "items"};
      if (kind == "cross_domain") bcols.insert(bcols.begin(), "domain");
      md += "\nCaptions written from ground-truth tags, against human captions:\n\n" + json_table(body.at("baseline"), bcols).markdown();
    }
    v.csv["_ksweep"] = json_table(body.at("rows"), cols).csv();
  } else if (kind == "attack_adaptive") {
    const std::vector<std::string> cols = {"victim",   "b",          "setting",   "items",    "objects_f1", "triple_f1",
                                           "pair_f1",  "predicate_f1", "scene_f1", "scene_precision", "scene_recall",
                                           "dropped_predicates"};
    md += "Structured F1 against the reference scene:\n\n" + json_table(body.at("rows"), cols).markdown();
    const std::vector<std::string> acols = {"victim", "b", "parts", "metric", "value", "items"};
    md += "\nCaptions regenerated from scene parts (setting " + body.value("ablation_setting", std::string()) +
          "), against human captions:\n\n" + json_table(body.at("ablation"), acols).markdown();
    v.csv[""] = json_table(body.at("rows"), cols).csv();
    v.csv["_ablation"] = json_table(body.at("ablation"), acols).csv();
  } else {
    md += "```json\n" + body.dump(2) + "\n```\n";
  }
  if (body.contains("manifest")) md += "\n" + manifest_markdown(body.at("manifest"));
  v.markdown = md;
  return v;
}

inline void write_text(const std::filesystem::path& path, const std::string& s) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(Errc::kIoError, "cannot write " + path.string());
  out << s;
}

/// Writes <stem>.json, <stem>.md and <stem><suffix>.csv into `dir`.
inline std::vector<std::filesystem::path> write_report(const std::filesystem::path& dir, const std::string& stem,
                                                       const nlohmann::json& body) {
  std::vector<std::filesystem::path> written;
  auto put = [&](const std::string& name, const std::string& content) {
    write_text(dir / name, content);
    written.push_back(dir / name);
  };
  put(stem + ".json", body.dump(2) + "\n");
  const auto views = render_report(body);
  put(stem + ".md", views.markdown);
  for (const auto& [suffix, csv] : views.csv) put(stem + suffix + ".csv", csv);
  return written;
}

}  // namespace slime
