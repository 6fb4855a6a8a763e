#pragma once

// Experiment stages. Each stage reads the configured inputs, fans item-level
// work out to a bounded pool, aggregates in sorted item order and writes a
// JSON report (with manifest) plus its Markdown and CSV views.

#include <algorithm>
#include <atomic>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "slime/alignment.hpp"
#include "slime/attacks.hpp"
#include "slime/client.hpp"
#include "slime/config.hpp"
#include "slime/digest.hpp"
#include "slime/embedding_store.hpp"
#include "slime/error.hpp"
#include "slime/metrics.hpp"
#include "slime/report.hpp"
#include "slime/retriever.hpp"
#include "slime/scene.hpp"
#include "slime/synthetic.hpp"

namespace slime {

// ---------------------------------------------------------------------------
// Plumbing

/// Runs fn(0..n-1) on up to `threads` workers. If any call throws, the
/// exception from the lowest index is rethrown after all workers finish.
inline void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  if (n == 0) return;
  threads = std::clamp<std::size_t>(threads, 1, n);
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

inline unsigned hardware_threads() { return std::max(1u, std::thread::hardware_concurrency()); }

inline std::shared_ptr<ReplayCache> open_cache(const ExperimentConfig& cfg) {
  if (cfg.client.cache.empty()) {
    if (cfg.client.mode == ClientMode::kLive) return nullptr;
    fail(Errc::kConfigError, "client.cache is required in record and replay modes");
  }
  return std::make_shared<ReplayCache>(cfg.resolve(cfg.client.cache));
}

/// Client for a configuration. A null transport fails on use.
inline std::unique_ptr<ChatClient> make_client(const ExperimentConfig& cfg, std::shared_ptr<Transport> transport) {
  ClientOptions opts;
  opts.mode = cfg.client.mode;
  opts.max_concurrency = cfg.client.max_concurrency;
  opts.jitter_seed = cfg.seed;
  return std::make_unique<ChatClient>(std::move(opts), std::move(transport), open_cache(cfg));
}

/// Manifest with config identity and digests of the stage's inputs, keyed by
/// the paths as written in the config.
inline RunManifest start_manifest(const ExperimentConfig& cfg, const std::string& stage,
                                  std::initializer_list<std::pair<std::string, fs::path>> inputs,
                                  const ChatClient* client = nullptr) {
  RunManifest m;
  m.stage = stage;
  m.config_hash = cfg.hash();
  m.seed = cfg.seed;
  m.client_mode = client ? std::string(client_mode_name(client->mode())) : "none";
  for (const auto& [name, p] : inputs) {
    if (p.empty()) continue;
    const auto full = cfg.resolve(p);
    if (fs::exists(full)) m.artifacts[name] = artifact_digest(full);
  }
  if (client && client->mode() == ClientMode::kReplay && !cfg.client.cache.empty()) {
    m.artifacts[cfg.client.cache.generic_string()] = artifact_digest(cfg.resolve(cfg.client.cache));
  }
  return m;
}

inline void finish_manifest(RunManifest& m, const ChatClient* client) {
  std::string fallback;
  if (client) {
    m.prompt_ids = client->prompt_ids_used();
    if (client->mode() == ClientMode::kReplay) fallback = client->latest_timestamp();
  }
  m.timestamp = manifest_timestamp(fallback);
}

inline std::string path_key(const fs::path& p) { return p.generic_string(); }

struct StageOutput {
  nlohmann::json report;
  std::vector<fs::path> files;
};

// ---------------------------------------------------------------------------
// Inputs

inline EmbeddingMatrix load_space(const ExperimentConfig& cfg, const fs::path& p, const std::string& what) {
  if (p.empty()) fail(Errc::kConfigError, what + " is not configured");
  auto m = load_embedding_matrix(cfg.resolve(p));
  return cfg.normalize ? l2_normalize(m) : m;
}

struct Spaces {
  EmbeddingMatrix attack;
  std::map<std::string, EmbeddingMatrix> victims;
  DatasetSplit split;
};

/// Attack and victim image spaces restricted to ids present in all of them
/// (attack file order), split into train and test.
inline Spaces load_spaces(const ExperimentConfig& cfg) {
  Spaces s;
  s.attack = load_space(cfg, cfg.data.attack_embeddings, "data.attack_embeddings");
  if (cfg.data.victim_embeddings.empty()) fail(Errc::kConfigError, "data.victim_embeddings is empty");
  for (const auto& [name, p] : cfg.data.victim_embeddings) {
    s.victims.emplace(name, load_space(cfg, p, "data.victim_embeddings." + name));
  }
  std::vector<std::string> shared;
  for (const auto& id : s.attack.ids()) {
    bool everywhere = true;
    for (const auto& [name, v] : s.victims) everywhere = everywhere && v.find(id).has_value();
    if (everywhere) shared.push_back(id);
  }
  s.split = make_split(shared, cfg.seed, 0, cfg.test_size);
  return s;
}

inline std::map<std::string, std::vector<std::string>> tags_by_item(const ExperimentConfig& cfg) {
  std::map<std::string, std::vector<std::string>> out;
  if (cfg.data.tags.empty()) return out;
  for (auto& r : load_tags(cfg.resolve(cfg.data.tags))) out[r.image_id] = std::move(r.tags);
  return out;
}

inline TextsByItem human_captions(const ExperimentConfig& cfg) {
  if (cfg.data.captions.empty()) fail(Errc::kConfigError, "data.captions is not configured");
  TextsByItem out;
  for (auto& s : load_captions(cfg.resolve(cfg.data.captions))) {
    if (s.source == CaptionSource::kHuman) out[s.image_id] = std::move(s.captions);
  }
  return out;
}

/// Tag vocabulary: the tag embedding file, restricted to phrases that occur in
/// the ground-truth tags when those are configured.
inline TagVocabulary load_vocabulary(const ExperimentConfig& cfg) {
  const auto tags = load_space(cfg, cfg.data.tag_embeddings, "data.tag_embeddings");
  if (cfg.data.tags.empty()) return TagVocabulary(tags);
  return build_vocabulary(tags, load_tags(cfg.resolve(cfg.data.tags)));
}

// ---------------------------------------------------------------------------
// Retrieval rows (JSONL)

struct RetrievalRow {
  std::string image_id;
  std::string source = "victim";  // "victim" (aligned victim embedding) or "attack"
  std::string victim;
  std::optional<std::size_t> b;
  std::vector<std::string> tags;
  std::vector<double> scores;

  nlohmann::json to_json() const {
    nlohmann::json j = {{"image_id", image_id}, {"source", source}, {"tags", tags}, {"scores", scores}};
    if (source == "victim") j["victim"] = victim;
    if (b) j["b"] = *b;
    return j;
  }
};

inline std::vector<RetrievalRow> load_retrievals(const fs::path& path) {
  std::vector<RetrievalRow> rows;
  detail::for_each_jsonl(path, [&](const nlohmann::json& j, std::size_t lineno) {
    const std::string where = path.string() + ":" + std::to_string(lineno);
    RetrievalRow r;
    r.image_id = detail::string_field(j, "image_id", where);
    r.source = j.value("source", std::string("victim"));
    if (r.source != "victim" && r.source != "attack") fail(Errc::kMalformedLine, where + ": unknown source");
    if (r.source == "victim") r.victim = detail::string_field(j, "victim", where);
    if (j.contains("b") && !j.at("b").is_null()) {
      if (!j.at("b").is_number_unsigned()) fail(Errc::kMalformedLine, where + ": 'b' is not a count");
      r.b = j.at("b").get<std::size_t>();
    }
    for (const auto& t : detail::string_list_field(j, "tags", where)) r.tags.push_back(normalize_tag(t));
    if (j.contains("scores")) {
      try {
        r.scores = j.at("scores").get<std::vector<double>>();
      } catch (const nlohmann::json::exception&) {
        fail(Errc::kMalformedLine, where + ": 'scores' is not a list of numbers");
      }
    }
    rows.push_back(std::move(r));
  });
  return rows;
}

inline void write_retrievals(const fs::path& path, std::span<const RetrievalRow> rows) {
  std::string out;
  for (const auto& r : rows) out += r.to_json().dump() + "\n";
  write_text(path, out);
}

/// Victim-side retrievals are grouped by (victim space, alignment size).
struct GroupKey {
  std::string victim;
  std::optional<std::size_t> b;

  auto operator<=>(const GroupKey&) const = default;

  nlohmann::json b_json() const { return b ? nlohmann::json(*b) : nlohmann::json(); }
  std::string label() const { return victim + (b ? "/b=" + std::to_string(*b) : ""); }
};

struct RetrievalTable {
  std::map<GroupKey, std::map<std::string, std::vector<std::string>>> victim;  // group -> item -> tags
  std::map<std::string, std::vector<std::string>> attack;                      // item -> tags
};

inline RetrievalTable index_retrievals(std::span<const RetrievalRow> rows) {
  RetrievalTable t;
  for (const auto& r : rows) {
    if (r.source == "attack") {
      if (!t.attack.emplace(r.image_id, r.tags).second) fail(Errc::kDuplicateId, "two attack retrievals for " + r.image_id);
    } else {
      auto& group = t.victim[GroupKey{r.victim, r.b}];
      if (!group.emplace(r.image_id, r.tags).second) {
        fail(Errc::kDuplicateId, "two retrievals for " + r.image_id + " in " + GroupKey{r.victim, r.b}.label());
      }
    }
  }
  return t;
}

inline std::vector<std::string> prefix(const std::vector<std::string>& xs, std::size_t n) {
  return {xs.begin(), xs.begin() + static_cast<std::ptrdiff_t>(std::min(n, xs.size()))};
}

// ---------------------------------------------------------------------------
// Alignment sweep

struct AlignmentSweepRow {
  std::string victim;
  std::size_t b = 0;
  std::size_t b_used = 0;
  double mean_cosine = 0.0;
  double residual = 0.0;
};

/// Fits on the first b training ids for every b and scores the test split.
/// Sizes beyond the training set are clipped and reported in `warnings`.
inline std::vector<AlignmentSweepRow> alignment_sweep(const Spaces& s, std::span<const std::size_t> b_values,
                                                      const AlignmentOptions& opts, std::vector<std::string>* warnings) {
  const auto attack_test = s.attack.select(s.split.test);
  std::vector<AlignmentSweepRow> rows;
  for (const auto& [name, victim] : s.victims) {
    const auto victim_test = victim.select(s.split.test);
    for (std::size_t b : b_values) {
      const std::size_t used = std::min(b, s.split.train.size());
      if (used < b && warnings) {
        warnings->push_back("b=" + std::to_string(b) + " clipped to " + std::to_string(used) + " training pairs for " + name);
      }
      if (used == 0) fail(Errc::kNotEnoughIds, "no training pairs left for alignment");
      const std::span<const std::string> ids(s.split.train.data(), used);
      const auto map = fit_alignment(victim.select(ids), s.attack.select(ids), opts);
      const auto aligned = apply_alignment(victim_test, map, false);
      rows.push_back({name, b, used, alignment_cosine(attack_test, aligned).mean,
                      alignment_residual(victim_test, attack_test, map)});
    }
  }
  return rows;
}

inline AlignmentMap fit_for_retrieval(const ExperimentConfig& cfg, const Spaces& s, const std::string& victim,
                                      std::size_t* used) {
  *used = std::min(cfg.alignment_size(), s.split.train.size());
  if (*used == 0) fail(Errc::kNotEnoughIds, "no training pairs left for alignment");
  const std::span<const std::string> ids(s.split.train.data(), *used);
  return fit_alignment(s.victims.at(victim).select(ids), s.attack.select(ids), cfg.alignment);
}

inline StageOutput run_alignment_sweep(const ExperimentConfig& cfg) {
  auto m = start_manifest(cfg, "align", {});
  for (const auto& [name, p] : cfg.data.victim_embeddings) m.artifacts[path_key(p)] = artifact_digest(cfg.resolve(p));
  m.artifacts[path_key(cfg.data.attack_embeddings)] = artifact_digest(cfg.resolve(cfg.data.attack_embeddings));
  const auto spaces = load_spaces(cfg);
  const auto rows = alignment_sweep(spaces, cfg.b_sweep, cfg.alignment, &m.warnings);

  StageOutput out;
  nlohmann::json jrows = nlohmann::json::array();
  nlohmann::json monotone = nlohmann::json::object();
  for (const auto& r : rows) {
    jrows.push_back({{"victim", r.victim}, {"b", r.b}, {"b_used", r.b_used}, {"mean_cosine", r.mean_cosine},
                     {"residual", r.residual}, {"test_size", spaces.split.test.size()}});
    if (!monotone.contains(r.victim)) monotone[r.victim] = true;
  }
  for (std::size_t i = 1; i < rows.size(); ++i) {
    if (rows[i].victim == rows[i - 1].victim && !(rows[i].mean_cosine > rows[i - 1].mean_cosine)) {
      monotone[rows[i].victim] = false;
    }
  }
  for (const auto& [name, v] : spaces.victims) {
    std::size_t used = 0;
    const auto map = fit_for_retrieval(cfg, spaces, name, &used);
    const auto path = cfg.output() / "alignment" / (name + ".emb");
    fs::create_directories(path.parent_path());
    save_alignment(path, map);
    out.files.push_back(path);
  }
  finish_manifest(m, nullptr);
  out.report = {{"kind", "alignment_sweep"}, {"title", "Alignment sweep"}, {"rows", jrows},
                {"monotone", monotone}, {"manifest", m.to_json()}};
  auto files = write_report(cfg.output(), "alignment_sweep", out.report);
  out.files.insert(out.files.end(), files.begin(), files.end());
  return out;
}

// ---------------------------------------------------------------------------
// Retriever training and retrieval

inline fs::path retriever_dir(const ExperimentConfig& cfg) {
  return cfg.retriever_checkpoint.empty() ? cfg.output() / "retriever" : cfg.resolve(cfg.retriever_checkpoint);
}

inline StageOutput run_retriever_training(const ExperimentConfig& cfg) {
  auto m = start_manifest(cfg, "retriever-train",
                          {{path_key(cfg.data.attack_embeddings), cfg.data.attack_embeddings},
                           {path_key(cfg.data.tag_embeddings), cfg.data.tag_embeddings},
                           {path_key(cfg.data.tags), cfg.data.tags}});
  if (cfg.data.tags.empty()) fail(Errc::kConfigError, "data.tags is required to train the retriever");
  const auto spaces = load_spaces(cfg);
  const auto vocab = load_vocabulary(cfg);
  const auto records = load_tags(cfg.resolve(cfg.data.tags));
  const auto train = make_retrieval_dataset(spaces.attack, records, vocab, spaces.split.train);
  const auto test = make_retrieval_dataset(spaces.attack, records, vocab, spaces.split.test);
  if (train.dropped_images) m.warnings.push_back(std::to_string(train.dropped_images) + " training images have no known tag");

  std::vector<TrainingLog> logs(2);
  auto model = train_projections(train, vocab, cfg.retriever, &logs[0]);
  model = train_ranker(std::move(model), train, vocab, &logs[1]);
  const auto dir = retriever_dir(cfg);
  save_retriever(dir, model, logs);

  nlohmann::json stages = nlohmann::json::array();
  for (const auto& l : logs) {
    stages.push_back({{"stage", l.stage}, {"initial_loss", l.initial_loss}, {"final_loss", l.final_loss},
                      {"epochs", l.epoch_loss.size()}, {"epoch_loss", l.epoch_loss}});
  }
  const std::size_t k = std::min(cfg.k, vocab.size());
  nlohmann::json recall = nlohmann::json::array();
  recall.push_back({{"split", "train"}, {"k", k}, {"recall", recall_at_k(model, vocab, train, k)}});
  if (!test.positives.empty()) recall.push_back({{"split", "test"}, {"k", k}, {"recall", recall_at_k(model, vocab, test, k)}});
  finish_manifest(m, nullptr);
  StageOutput out;
  out.report = {{"kind", "retriever_training"}, {"title", "Retriever training"}, {"config", cfg.retriever.to_json()},
                {"vocabulary_size", vocab.size()}, {"stages", stages}, {"recall", recall}, {"manifest", m.to_json()}};
  out.files = write_report(cfg.output(), "retriever_training", out.report);
  out.files.push_back(dir);
  return out;
}

/// Top-K tags for aligned victim test embeddings (one group per victim space)
/// and for the attack-space test embeddings.
inline StageOutput run_retrieve(const ExperimentConfig& cfg) {
  auto m = start_manifest(cfg, "retrieve",
                          {{path_key(cfg.data.attack_embeddings), cfg.data.attack_embeddings},
                           {path_key(cfg.data.tag_embeddings), cfg.data.tag_embeddings},
                           {path_key(cfg.data.tags), cfg.data.tags}});
  for (const auto& [name, p] : cfg.data.victim_embeddings) m.artifacts[path_key(p)] = artifact_digest(cfg.resolve(p));
  const auto spaces = load_spaces(cfg);
  const auto vocab = load_vocabulary(cfg);
  const auto model = load_retriever(retriever_dir(cfg));
  m.artifacts["retriever"] = artifact_digest(retriever_dir(cfg));

  std::size_t k = std::max(cfg.k, cfg.k_sweep.back());
  if (k > vocab.size()) {
    m.warnings.push_back("K=" + std::to_string(k) + " clipped to vocabulary size " + std::to_string(vocab.size()));
    k = vocab.size();
  }
  std::vector<RetrievalRow> rows;
  auto add = [&](const std::vector<RetrievalResult>& results, const std::string& source, const std::string& victim,
                 std::optional<std::size_t> b) {
    for (const auto& r : results) {
      RetrievalRow row{r.item_id, source, victim, b, r.tags(), {}};
      for (const auto& st : r.topk) row.scores.push_back(st.score);
      rows.push_back(std::move(row));
    }
  };
  const auto attack_test = spaces.attack.select(spaces.split.test);
  add(retrieve_topk_batch(model, vocab, attack_test, k, hardware_threads()), "attack", "", std::nullopt);
  nlohmann::json groups = nlohmann::json::array();
  for (const auto& [name, victim] : spaces.victims) {
    std::size_t used = 0;
    const auto map = fit_for_retrieval(cfg, spaces, name, &used);
    if (used < cfg.alignment_size()) m.warnings.push_back("alignment size clipped to " + std::to_string(used) + " for " + name);
    const auto aligned = apply_alignment(victim.select(spaces.split.test), map, true);
    add(retrieve_topk_batch(model, vocab, aligned, k, hardware_threads()), "victim", name, used);
    groups.push_back({{"victim", name}, {"b", used}, {"items", aligned.rows()}, {"k", k}});
  }
  const auto path = cfg.retrievals_path();
  write_retrievals(path, rows);
  finish_manifest(m, nullptr);
  StageOutput out;
  out.report = {{"kind", "retrieval"}, {"title", "Retrieval"}, {"groups", groups}, {"manifest", m.to_json()}};
  out.files = write_report(cfg.output(), "retrieve", out.report);
  out.files.push_back(path);
  return out;
}

// ---------------------------------------------------------------------------
// Leakage

struct LeakageItem {
  std::string item_id;
  std::vector<std::string> predicted;  // retrieved through the aligned victim embedding
  std::vector<std::string> attack;     // retrieved from the attack-space embedding
  std::vector<std::string> truth;      // ground-truth tags (may be empty)
};

struct LeakageResult {
  NeighborhoodReport vs_attack;
  std::optional<NeighborhoodReport> vs_truth;  // absent when no item has ground truth
};

/// Neighborhood sweeps of the predicted tags against the attack-space top-K
/// and against ground truth. m values above the vocabulary size are clipped.
inline LeakageResult leakage_eval(std::span<const LeakageItem> items, const NeighborhoodIndex& index,
                                  std::span<const std::size_t> m_values, std::size_t k) {
  std::vector<std::size_t> ms;
  for (std::size_t mv : m_values) ms.push_back(std::min(mv, index.size()));
  std::vector<NeighborhoodItem> against_attack, against_truth;
  for (const auto& it : items) {
    const auto predicted = prefix(it.predicted, k);
    against_attack.push_back({it.item_id, prefix(it.attack, k), predicted});
    if (!it.truth.empty()) against_truth.push_back({it.item_id, it.truth, predicted});
  }
  LeakageResult r;
  r.vs_attack = neighborhood_report(against_attack, index, ms, k);
  if (!against_truth.empty()) r.vs_truth = neighborhood_report(against_truth, index, ms, k);
  return r;
}

inline StageOutput run_leakage_eval(const ExperimentConfig& cfg) {
  const auto rpath = cfg.retrievals_path();
  auto m = start_manifest(cfg, "eval-neighborhood",
                          {{path_key(cfg.data.tag_embeddings), cfg.data.tag_embeddings},
                           {path_key(cfg.data.tags), cfg.data.tags}});
  m.artifacts[path_key(cfg.data.retrievals.empty() ? fs::path("retrievals.jsonl") : cfg.data.retrievals)] = artifact_digest(rpath);
  const auto table = index_retrievals(load_retrievals(rpath));
  const NeighborhoodIndex index(load_vocabulary(cfg).embeddings());
  const auto truth = tags_by_item(cfg);
  std::size_t unknown_truth = 0;

  nlohmann::json rows = nlohmann::json::array(), exact = nlohmann::json::array();
  for (const auto& [group, items] : table.victim) {
    std::vector<LeakageItem> batch;
    for (const auto& [id, tags] : items) {
      auto a = table.attack.find(id);
      if (tags.empty()) {
        m.skip("empty_retrieval", group.label() + ":" + id);
        continue;
      }
      if (a == table.attack.end() || a->second.empty()) {
        m.skip("no_attack_retrieval", group.label() + ":" + id);
        continue;
      }
      LeakageItem li{id, tags, a->second, {}};
      if (auto t = truth.find(id); t != truth.end()) {
        for (const auto& tag : t->second) {
          if (index.contains(tag)) {
            li.truth.push_back(tag);
          } else {
            ++unknown_truth;
          }
        }
      }
      for (const auto& tag : li.predicted) index.index_of(tag);
      batch.push_back(std::move(li));
    }
    if (batch.empty()) continue;
    const auto result = leakage_eval(batch, index, cfg.m_sweep, cfg.k);
    auto emit = [&](const NeighborhoodReport& rep, const char* reference) {
      for (std::size_t j = 0; j < cfg.m_sweep.size(); ++j) {
        rows.push_back({{"victim", group.victim}, {"b", group.b_json()}, {"reference", reference}, {"m", cfg.m_sweep[j]},
                        {"m_used", rep.m_values[j]}, {"recall", rep.mean[j].recall}, {"precision", rep.mean[j].precision},
                        {"f1", rep.mean[j].f1}, {"items", rep.item_ids.size()}});
      }
      exact.push_back({{"victim", group.victim}, {"b", group.b_json()}, {"reference", reference},
                       {"recall", rep.exact_mean.recall}, {"precision", rep.exact_mean.precision},
                       {"f1", rep.exact_mean.f1}, {"items", rep.item_ids.size()}});
    };
    emit(result.vs_attack, "attack_topk");
    if (result.vs_truth) emit(*result.vs_truth, "ground_truth");
  }
  if (unknown_truth) m.warnings.push_back(std::to_string(unknown_truth) + " ground-truth tags are outside the tag vocabulary");
  if (std::any_of(cfg.m_sweep.begin(), cfg.m_sweep.end(), [&](std::size_t mv) { return mv > index.size(); })) {
    m.warnings.push_back("m values above the vocabulary size " + std::to_string(index.size()) + " are clipped");
  }
  finish_manifest(m, nullptr);
  StageOutput out;
  out.report = {{"kind", "leakage"}, {"title", "Neighborhood leakage"}, {"k", cfg.k}, {"vocabulary_size", index.size()},
                {"rows", rows}, {"exact", exact}, {"manifest", m.to_json()}};
  out.files = write_report(cfg.output(), "leakage", out.report);
  return out;
}

// ---------------------------------------------------------------------------
// Caption attack

struct CaptionRun {
  TextsByItem human;
  TextsByItem from_truth;                                            // item -> captions from ground-truth tags
  std::map<GroupKey, std::map<std::size_t, TextsByItem>> generated;  // group -> K -> item -> captions
  std::map<GroupKey, std::set<std::string>> excluded;                // items dropped from a group
};

namespace detail {

inline bool is_generation_failure(const Error& e) {
  return e.code() == Errc::kParseError || e.code() == Errc::kProviderError;
}

inline std::string failure_reason(const Error& e) {
  return e.code() == Errc::kParseError ? "unparseable_response" : "provider_error";
}

}  // namespace detail

/// Captions from ground-truth tags and from every K-prefix of each group's
/// retrieved tags. Items whose retrieval is empty or whose generation fails
/// are excluded and recorded; a replay cache miss is fatal.
inline CaptionRun generate_caption_attack(const ExperimentConfig& cfg, const RetrievalTable& table,
                                          const std::map<std::string, std::vector<std::string>>& truth, ChatClient& client,
                                          RunManifest& m) {
  CaptionRun run;
  run.human = human_captions(cfg);
  const std::size_t n = cfg.client.n_captions;

  std::set<std::string> items;
  for (const auto& [group, rows] : table.victim) {
    for (const auto& [id, tags] : rows) {
      if (!tags.empty()) items.insert(id);
    }
  }
  std::vector<std::string> truth_ids;
  std::set<std::string> truth_failed;
  for (const auto& id : items) {
    auto t = truth.find(id);
    if (!run.human.count(id)) {
      m.skip("no_human_captions", id);
      truth_failed.insert(id);
    } else if (t == truth.end() || t->second.empty()) {
      m.skip("no_ground_truth_tags", id);
      truth_failed.insert(id);
    } else {
      truth_ids.push_back(id);
    }
  }
  std::vector<std::optional<std::vector<std::string>>> truth_captions(truth_ids.size());
  std::vector<std::string> truth_errors(truth_ids.size());
  parallel_for(truth_ids.size(), cfg.client.max_concurrency, [&](std::size_t i) {
    try {
      truth_captions[i] = generate_captions_from_tags(truth.at(truth_ids[i]), n, client, cfg.client.text);
    } catch (const Error& e) {
      if (!detail::is_generation_failure(e)) throw;
      truth_errors[i] = detail::failure_reason(e);
    }
  });
  for (std::size_t i = 0; i < truth_ids.size(); ++i) {
    if (truth_captions[i]) {
      run.from_truth[truth_ids[i]] = *truth_captions[i];
    } else {
      m.skip(truth_errors[i], truth_ids[i]);
      truth_failed.insert(truth_ids[i]);
    }
  }

  struct Unit {
    GroupKey group;
    std::string item;
    std::size_t k;
    std::vector<std::string> tags;
  };
  std::vector<Unit> units;
  std::set<std::string> short_lists;
  for (const auto& [group, rows] : table.victim) {
    auto& excluded = run.excluded[group];
    for (const auto& [id, tags] : rows) {
      if (truth_failed.count(id)) {
        excluded.insert(id);
        continue;
      }
      if (tags.empty()) {
        m.skip("empty_retrieval", group.label() + ":" + id);
        excluded.insert(id);
        continue;
      }
      for (std::size_t k : cfg.k_sweep) {
        if (tags.size() < k) short_lists.insert(group.label() + ":" + id);
        units.push_back({group, id, k, prefix(tags, k)});
      }
    }
  }
  if (!short_lists.empty()) {
    m.warnings.push_back(std::to_string(short_lists.size()) + " retrievals hold fewer tags than the largest K; all of their tags were used");
  }
  std::vector<std::optional<std::vector<std::string>>> captions(units.size());
  std::vector<std::string> errors(units.size());
  parallel_for(units.size(), cfg.client.max_concurrency, [&](std::size_t i) {
    try {
      captions[i] = generate_captions_from_tags(units[i].tags, n, client, cfg.client.text);
    } catch (const Error& e) {
      if (!detail::is_generation_failure(e)) throw;
      errors[i] = detail::failure_reason(e);
    }
  });
  std::map<GroupKey, std::map<std::string, std::string>> failed;
  for (std::size_t i = 0; i < units.size(); ++i) {
    if (!captions[i]) failed[units[i].group].emplace(units[i].item, errors[i]);
  }
  for (const auto& [group, items_failed] : failed) {
    for (const auto& [id, reason] : items_failed) {
      m.skip(reason, group.label() + ":" + id);
      run.excluded[group].insert(id);
    }
  }
  for (std::size_t i = 0; i < units.size(); ++i) {
    const auto& u = units[i];
    if (run.excluded[u.group].count(u.item)) continue;
    run.generated[u.group][u.k][u.item] = *captions[i];
  }
  for (const auto& [group, rows] : table.victim) {
    for (std::size_t k : cfg.k_sweep) run.generated[group][k];  // every (group, K) appears, even when empty
  }
  return run;
}

inline TextsByItem restrict_items(const TextsByItem& texts, const std::function<bool(const std::string&)>& keep) {
  TextsByItem out;
  for (const auto& [id, t] : texts) {
    if (keep(id)) out.emplace(id, t);
  }
  return out;
}

/// Score rows for one partition of the items (all items when `keep` is empty).
inline void caption_score_rows(const ExperimentConfig& cfg, const CaptionRun& run,
                               const std::function<bool(const std::string&)>& keep, const nlohmann::json& extra,
                               nlohmann::json& rows, nlohmann::json& baseline) {
  auto score = [&](const TextsByItem& hyps, const TextsByItem& refs, TextMetric metric) -> nlohmann::json {
    if (hyps.empty()) return nullptr;
    return best_match_score(hyps, refs, metric).value;
  };
  for (const auto& [group, by_k] : run.generated) {
    for (const auto& [k, texts] : by_k) {
      const auto hyps = restrict_items(texts, keep);
      for (const auto& [reference, refs] : {std::pair<const char*, const TextsByItem*>{"ground_truth_captions", &run.from_truth},
                                             std::pair<const char*, const TextsByItem*>{"human", &run.human}}) {
        for (TextMetric metric : cfg.metrics) {
          nlohmann::json row = extra;
          row.update({{"victim", group.victim}, {"b", group.b_json()}, {"k", k}, {"reference", reference},
                      {"metric", std::string(metric_name(metric))}, {"value", score(hyps, *refs, metric)},
                      {"items", hyps.size()}});
          rows.push_back(std::move(row));
        }
      }
    }
  }
  const auto truth = restrict_items(run.from_truth, keep);
  for (TextMetric metric : cfg.metrics) {
    nlohmann::json row = extra;
    row.update({{"reference", "human"}, {"metric", std::string(metric_name(metric))},
                {"value", score(truth, run.human, metric)}, {"items", truth.size()}});
    baseline.push_back(std::move(row));
  }
}

inline void write_caption_file(const fs::path& path, const CaptionRun& run) {
  std::string out;
  for (const auto& [id, caps] : run.from_truth) {
    out += nlohmann::json{{"image_id", id}, {"source", "ground_truth_tags"}, {"captions", caps}}.dump() + "\n";
  }
  for (const auto& [group, by_k] : run.generated) {
    for (const auto& [k, texts] : by_k) {
      for (const auto& [id, caps] : texts) {
        out += nlohmann::json{{"image_id", id}, {"source", "retrieved_tags"}, {"victim", group.victim},
                              {"b", group.b_json()}, {"k", k}, {"captions", caps}}
                   .dump() +
               "\n";
      }
    }
  }
  write_text(path, out);
}

inline RunManifest text_stage_manifest(const ExperimentConfig& cfg, const std::string& stage, const ChatClient& client) {
  auto m = start_manifest(cfg, stage,
                          {{path_key(cfg.data.tags), cfg.data.tags},
                           {path_key(cfg.data.captions), cfg.data.captions},
                           {path_key(cfg.data.domains), cfg.data.domains}},
                          &client);
  m.artifacts[path_key(cfg.data.retrievals.empty() ? fs::path("retrievals.jsonl") : cfg.data.retrievals)] =
      artifact_digest(cfg.retrievals_path());
  return m;
}

inline StageOutput run_caption_attack(const ExperimentConfig& cfg, ChatClient& client) {
  auto m = text_stage_manifest(cfg, "attack-captions", client);
  const auto table = index_retrievals(load_retrievals(cfg.retrievals_path()));
  const auto run = generate_caption_attack(cfg, table, tags_by_item(cfg), client, m);

  nlohmann::json rows = nlohmann::json::array(), baseline = nlohmann::json::array();
  caption_score_rows(cfg, run, [](const std::string&) { return true; }, nlohmann::json::object(), rows, baseline);
  finish_manifest(m, &client);
  StageOutput out;
  out.report = {{"kind", "attack_captions"}, {"title", "Caption reconstruction"}, {"aggregation", "best_match"},
                {"n_captions", cfg.client.n_captions}, {"k_sweep", cfg.k_sweep}, {"rows", rows},
                {"baseline", baseline}, {"manifest", m.to_json()}};
  const auto cap_path = cfg.output() / "captions.jsonl";
  write_caption_file(cap_path, run);
  out.files = write_report(cfg.output(), "attack_captions", out.report);
  out.files.push_back(cap_path);
  return out;
}

// ---------------------------------------------------------------------------
// Cross-domain

inline std::map<std::string, std::string> load_domains(const ExperimentConfig& cfg) {
  if (cfg.data.domains.empty()) fail(Errc::kConfigError, "data.domains is required for cross-domain evaluation");
  std::map<std::string, std::string> out;
  const auto path = cfg.resolve(cfg.data.domains);
  detail::for_each_jsonl(path, [&](const nlohmann::json& j, std::size_t lineno) {
    const std::string where = path.string() + ":" + std::to_string(lineno);
    out[detail::string_field(j, "image_id", where)] = detail::string_field(j, "domain", where);
  });
  return out;
}

inline StageOutput run_cross_domain(const ExperimentConfig& cfg, ChatClient& client) {
  auto m = text_stage_manifest(cfg, "eval-cross-domain", client);
  const auto domains = load_domains(cfg);
  const auto table = index_retrievals(load_retrievals(cfg.retrievals_path()));
  for (const auto& [group, rows] : table.victim) {
    for (const auto& [id, tags] : rows) {
      if (!domains.count(id)) fail(Errc::kConfigError, "item " + id + " has no domain label");
    }
  }
  const auto run = generate_caption_attack(cfg, table, tags_by_item(cfg), client, m);
  std::set<std::string> labels;
  for (const auto& [id, d] : domains) labels.insert(d);

  nlohmann::json rows = nlohmann::json::array(), baseline = nlohmann::json::array();
  for (const auto& label : labels) {
    caption_score_rows(cfg, run, [&](const std::string& id) { return domains.at(id) == label; },
                       {{"domain", label}}, rows, baseline);
  }
  finish_manifest(m, &client);
  StageOutput out;
  out.report = {{"kind", "cross_domain"}, {"title", "Cross-domain caption reconstruction"},
                {"aggregation", "best_match"}, {"domains", labels}, {"rows", rows}, {"baseline", baseline},
                {"manifest", m.to_json()}};
  out.files = write_report(cfg.output(), "cross_domain", out.report);
  return out;
}

// ---------------------------------------------------------------------------
// Adaptive attack

/// `<dir>/<item>.png|.jpg|.jpeg` as a base64 payload, if present.
inline std::optional<ImagePayload> load_image(const fs::path& dir, const std::string& item) {
  if (dir.empty()) return std::nullopt;
  for (const auto& [ext, media] : {std::pair<const char*, const char*>{".png", "image/png"},
                                   std::pair<const char*, const char*>{".jpg", "image/jpeg"},
                                   std::pair<const char*, const char*>{".jpeg", "image/jpeg"}}) {
    const auto p = dir / (item + ext);
    if (fs::exists(p)) return ImagePayload{media, base64_encode(detail::read_file_bytes(p))};
  }
  return std::nullopt;
}

inline std::map<std::string, StructuredScene> load_reference_scenes(const fs::path& path) {
  std::map<std::string, StructuredScene> out;
  detail::for_each_jsonl(path, [&](const nlohmann::json& j, std::size_t lineno) {
    const std::string where = path.string() + ":" + std::to_string(lineno);
    const auto id = detail::string_field(j, "image_id", where);
    try {
      out[id] = parse_scene_json(j.at("scene").dump()).scene;
    } catch (const std::exception& e) {
      fail(Errc::kMalformedLine, where + ": bad scene: " + e.what());
    }
  });
  return out;
}

/// Evidence for one conditioning setting. Captions are the ones written from
/// the top-K retrieved tags.
inline SceneInputs setting_inputs(const Setting& setting, const std::vector<std::string>& tags,
                                  const std::vector<std::string>& captions, const std::optional<ImagePayload>& image) {
  SceneInputs in;
  for (const auto& part : setting) {
    if (part == "tags") in.tags = tags;
    if (part == "captions") in.captions = captions;
    if (part == "image") in.image = image;
  }
  return in;
}

inline const ModelSpec& spec_for(const ExperimentConfig& cfg, const SceneInputs& in) {
  return in.image ? cfg.client.vision : cfg.client.text;
}

inline StageOutput run_adaptive_attack(const ExperimentConfig& cfg, ChatClient& client) {
  auto m = text_stage_manifest(cfg, "attack-adaptive", client);
  for (const auto& p : {cfg.data.images, cfg.data.reference_images, cfg.data.reference_scenes}) {
    if (!p.empty() && fs::exists(cfg.resolve(p))) m.artifacts[path_key(p)] = artifact_digest(cfg.resolve(p));
  }
  const auto table = index_retrievals(load_retrievals(cfg.retrievals_path()));
  const auto human = human_captions(cfg);
  const std::size_t n = cfg.client.n_captions;
  const bool needs_image = std::any_of(cfg.adaptive_settings.begin(), cfg.adaptive_settings.end(), [](const Setting& s) {
    return std::find(s.begin(), s.end(), "image") != s.end();
  });

  // Reference scenes: precomputed, or extracted from the human captions plus
  // the original image.
  std::set<std::string> items;
  for (const auto& [group, rows] : table.victim) {
    for (const auto& [id, tags] : rows) {
      if (!tags.empty()) items.insert(id);
    }
  }
  std::map<std::string, StructuredScene> reference;
  if (!cfg.data.reference_scenes.empty()) reference = load_reference_scenes(cfg.resolve(cfg.data.reference_scenes));
  std::set<std::string> unusable;
  std::vector<std::string> to_extract;
  for (const auto& id : items) {
    if (!human.count(id)) {
      m.skip("no_human_captions", id);
      unusable.insert(id);
    } else if (!reference.count(id)) {
      to_extract.push_back(id);
    }
  }
  std::vector<std::optional<StructuredScene>> extracted(to_extract.size());
  std::vector<std::string> extract_errors(to_extract.size());
  parallel_for(to_extract.size(), cfg.client.max_concurrency, [&](std::size_t i) {
    SceneInputs in;
    in.captions = human.at(to_extract[i]);
    in.image = load_image(cfg.resolve(cfg.data.reference_images), to_extract[i]);
    try {
      extracted[i] = extract_scene(in, client, spec_for(cfg, in)).scene;
    } catch (const Error& e) {
      if (!detail::is_generation_failure(e)) throw;
      extract_errors[i] = detail::failure_reason(e);
    }
  });
  for (std::size_t i = 0; i < to_extract.size(); ++i) {
    if (extracted[i]) {
      reference[to_extract[i]] = *extracted[i];
    } else {
      m.skip(extract_errors[i], "reference:" + to_extract[i]);
      unusable.insert(to_extract[i]);
    }
  }

  // One unit per (group, item): captions at K, one scene per setting, and the
  // ablation captions.
  struct Unit {
    GroupKey group;
    std::string item;
    std::vector<std::string> tags;
  };
  struct UnitResult {
    std::vector<SceneParse> scenes;                      // per setting
    std::vector<std::vector<std::string>> ablation;      // per scene-part subset
    std::string failure;
  };
  std::vector<Unit> units;
  for (const auto& [group, rows] : table.victim) {
    for (const auto& [id, tags] : rows) {
      if (unusable.count(id)) continue;
      if (tags.empty()) {
        m.skip("empty_retrieval", group.label() + ":" + id);
        continue;
      }
      units.push_back({group, id, prefix(tags, cfg.k)});
    }
  }
  const auto subsets = all_scene_part_subsets();
  const auto ablation_index = static_cast<std::size_t>(
      std::find(cfg.adaptive_settings.begin(), cfg.adaptive_settings.end(), cfg.ablation_setting) - cfg.adaptive_settings.begin());
  std::vector<UnitResult> results(units.size());
  parallel_for(units.size(), cfg.client.max_concurrency, [&](std::size_t i) {
    const auto& u = units[i];
    auto& r = results[i];
    const auto image = needs_image ? load_image(cfg.resolve(cfg.data.images), u.item) : std::nullopt;
    if (needs_image && !image) {
      r.failure = "missing_image";
      return;
    }
    try {
      const auto captions = generate_captions_from_tags(u.tags, n, client, cfg.client.text);
      for (const auto& setting : cfg.adaptive_settings) {
        const auto in = setting_inputs(setting, u.tags, captions, image);
        r.scenes.push_back(extract_scene(in, client, spec_for(cfg, in)));
      }
      for (const auto& parts : subsets) {
        r.ablation.push_back(generate_captions_from_scene(r.scenes[ablation_index].scene, parts, n, client, cfg.client.text));
      }
    } catch (const Error& e) {
      if (!detail::is_generation_failure(e)) throw;
      r.failure = detail::failure_reason(e);
    }
  });

  // Aggregate in sorted (group, item) order.
  std::map<GroupKey, std::map<std::string, const UnitResult*>> by_group;
  for (const auto& [group, rows] : table.victim) by_group[group];
  for (std::size_t i = 0; i < units.size(); ++i) {
    if (!results[i].failure.empty()) {
      m.skip(results[i].failure, units[i].group.label() + ":" + units[i].item);
      continue;
    }
    by_group[units[i].group][units[i].item] = &results[i];
  }
  nlohmann::json rows = nlohmann::json::array(), ablation = nlohmann::json::array();
  std::string scene_lines;
  for (const auto& [id, scene] : reference) {
    if (items.count(id)) {
      scene_lines += nlohmann::json{{"image_id", id}, {"source", "reference"}, {"scene", scene_to_json(scene)}}.dump() + "\n";
    }
  }
  for (const auto& [group, done] : by_group) {
    for (std::size_t s = 0; s < cfg.adaptive_settings.size(); ++s) {
      double objects = 0, triples = 0, pairs = 0, predicates = 0, scenes = 0, scene_p = 0, scene_r = 0;
      std::size_t dropped = 0;
      for (const auto& [id, res] : done) {
        const auto& parse = res->scenes[s];
        const auto f = structured_f1(parse.scene, reference.at(id));
        objects += f.objects.f1;
        triples += f.triples.f1;
        pairs += f.pairs.f1;
        predicates += f.predicates.f1;
        scenes += f.scenes.f1;
        scene_p += f.scenes.precision;
        scene_r += f.scenes.recall;
        dropped += parse.dropped_predicates;
        scene_lines += nlohmann::json{{"image_id", id}, {"source", "attack"}, {"victim", group.victim},
                                      {"b", group.b_json()}, {"setting", setting_name(cfg.adaptive_settings[s])},
                                      {"scene", scene_to_json(parse.scene)}, {"structured_f1", f.to_json()}}
                           .dump() +
                       "\n";
      }
      const double count = static_cast<double>(done.size());
      auto mean = [&](double total) -> nlohmann::json { return done.empty() ? nlohmann::json() : nlohmann::json(total / count); };
      rows.push_back({{"victim", group.victim}, {"b", group.b_json()}, {"setting", setting_name(cfg.adaptive_settings[s])},
                      {"items", done.size()}, {"objects_f1", mean(objects)}, {"triple_f1", mean(triples)},
                      {"pair_f1", mean(pairs)}, {"predicate_f1", mean(predicates)}, {"scene_f1", mean(scenes)},
                      {"scene_precision", mean(scene_p)}, {"scene_recall", mean(scene_r)},
                      {"dropped_predicates", dropped}});
    }
    for (std::size_t p = 0; p < subsets.size(); ++p) {
      TextsByItem hyps;
      for (const auto& [id, res] : done) hyps[id] = res->ablation[p];
      for (TextMetric metric : cfg.metrics) {
        ablation.push_back({{"victim", group.victim}, {"b", group.b_json()}, {"parts", subsets[p].name()},
                            {"metric", std::string(metric_name(metric))},
                            {"value", hyps.empty() ? nlohmann::json() : nlohmann::json(best_match_score(hyps, human, metric).value)},
                            {"items", hyps.size()}});
      }
    }
  }
  finish_manifest(m, &client);
  StageOutput out;
  out.report = {{"kind", "attack_adaptive"}, {"title", "Adaptive attack"}, {"k", cfg.k},
                {"ablation_setting", setting_name(cfg.ablation_setting)}, {"rows", rows}, {"ablation", ablation},
                {"manifest", m.to_json()}};
  const auto scene_path = cfg.output() / "scenes.jsonl";
  write_text(scene_path, scene_lines);
  out.files = write_report(cfg.output(), "attack_adaptive", out.report);
  out.files.push_back(scene_path);
  return out;
}

// ---------------------------------------------------------------------------
// Re-rendering

/// Rewrites the Markdown and CSV views of every report JSON in `dir` and a
/// summary.md linking them.
inline std::vector<fs::path> rerender_reports(const fs::path& dir) {
  std::vector<fs::path> jsons;
  if (fs::is_directory(dir)) {
    for (const auto& e : fs::directory_iterator(dir)) {
      if (e.is_regular_file() && e.path().extension() == ".json") jsons.push_back(e.path());
    }
  }
  std::sort(jsons.begin(), jsons.end());
  std::vector<fs::path> written;
  std::string summary = "# Reports\n\n";
  for (const auto& p : jsons) {
    std::ifstream in(p);
    const auto body = nlohmann::json::parse(in, nullptr, false);
    if (body.is_discarded() || !body.is_object() || !body.contains("kind")) continue;
    const auto stem = p.stem().string();
    const auto views = render_report(body);
    write_text(dir / (stem + ".md"), views.markdown);
    written.push_back(dir / (stem + ".md"));
    for (const auto& [suffix, csv] : views.csv) {
      write_text(dir / (stem + suffix + ".csv"), csv);
      written.push_back(dir / (stem + suffix + ".csv"));
    }
    summary += "- [" + body.value("title", stem) + "](" + stem + ".md)";
    if (body.contains("manifest")) summary += ", config `" + body["manifest"].value("config_hash", std::string()).substr(0, 12) + "`";
    summary += "\n";
  }
  write_text(dir / "summary.md", summary);
  written.push_back(dir / "summary.md");
  return written;
}

}  // namespace slime

namespace slime {

// ---------------------------------------------------------------------------
// Response tables: hand-written replies turned into replay-cache entries.
//
// {"timestamp": "...", "entries": [{"name": "...", "kind": "captions_from_tags" |
//  "scene" | "captions_from_scene", "tags": [...], "captions": [...],
//  "image": "<path>", "scene_ref": "<name of a scene entry>", "parts":
//  "relations+scenes", "response": "..."}]}
// Requests are built exactly as the pipeline builds them for `cfg`.

inline SceneParts parse_scene_parts(std::string_view name) {
  SceneParts p;
  std::size_t pos = 0;
  while (pos <= name.size()) {
    auto end = name.find('+', pos);
    if (end == std::string_view::npos) end = name.size();
    const auto part = name.substr(pos, end - pos);
    if (part == "objects") {
      p.objects = true;
    } else if (part == "relations") {
      p.relations = true;
    } else if (part == "scenes") {
      p.scenes = true;
    } else {
      fail(Errc::kInvalidArgument, "unknown scene part '" + std::string(part) + "'");
    }
    pos = end + 1;
  }
  return p;
}

inline std::vector<CacheEntry> response_table_entries(const nlohmann::json& table, const fs::path& base_dir,
                                                      const ExperimentConfig& cfg) {
  if (!table.is_object() || !table.contains("entries") || !table.at("entries").is_array()) {
    fail(Errc::kMalformedLine, "response table needs an 'entries' array");
  }
  const std::string timestamp = table.value("timestamp", std::string("1970-01-01T00:00:00Z"));
  std::map<std::string, StructuredScene> scenes;
  std::vector<CacheEntry> out;
  for (const auto& e : table.at("entries")) {
    const std::string kind = e.value("kind", std::string());
    const std::string name = e.value("name", kind);
    const std::size_t n = e.value("n", cfg.client.n_captions);
    const auto response = e.at("response").get<std::string>();
    ChatRequest request;
    if (kind == "captions_from_tags") {
      request = captions_from_tags_request(e.at("tags").get<std::vector<std::string>>(), n, cfg.client.text);
    } else if (kind == "scene") {
      SceneInputs in;
      in.tags = e.value("tags", std::vector<std::string>{});
      in.captions = e.value("captions", std::vector<std::string>{});
      if (e.contains("image")) {
        const fs::path img = base_dir / e.at("image").get<std::string>();
        const auto ext = img.extension().string();
        in.image = ImagePayload{ext == ".png" ? "image/png" : "image/jpeg", base64_encode(detail::read_file_bytes(img))};
      }
      request = scene_request(in, spec_for(cfg, in));
      scenes[name] = parse_scene_json(response).scene;
    } else if (kind == "captions_from_scene") {
      auto it = scenes.find(e.at("scene_ref").get<std::string>());
      if (it == scenes.end()) fail(Errc::kMalformedLine, name + ": scene_ref must name an earlier scene entry");
      request = captions_from_scene_request(it->second, parse_scene_parts(e.at("parts").get<std::string>()), n,
                                            cfg.client.text);
    } else {
      fail(Errc::kMalformedLine, name + ": unknown kind '" + kind + "'");
    }
    out.push_back({request.hash(), request.canonical_json(), response, timestamp, request.provider});
  }
  return out;
}

}  // namespace slime

namespace slime {

// ---------------------------------------------------------------------------
// Synthetic experiment

/// Writes a self-contained dual-encoder experiment into `dir`: embeddings,
/// tags, template captions, domain labels (first half "near", rest "out") and
/// a config.json using them.
inline fs::path write_synthetic_experiment(const fs::path& dir, const synth::DualEncoderOptions& o,
                                           std::size_t test_size = 200) {
  fs::create_directories(dir);
  const auto corpus = synth::make_dual_encoder(o);
  save_embedding_matrix(dir / "attack.emb", corpus.attack.images);
  save_embedding_matrix(dir / "victim.emb", corpus.victim);
  save_embedding_matrix(dir / "tags.emb", corpus.attack.tags);
  write_tags(dir / "tags.jsonl", corpus.attack.records);

  std::vector<CaptionSet> captions;
  std::string domains;
  for (std::size_t i = 0; i < corpus.attack.records.size(); ++i) {
    const auto& r = corpus.attack.records[i];
    CaptionSet c{r.image_id, {}, CaptionSource::kHuman};
    for (std::size_t j = 0; j < r.tags.size(); ++j) {
      c.captions.push_back("a photo showing " + r.tags[j] + " next to " + r.tags[(j + 1) % r.tags.size()]);
    }
    captions.push_back(std::move(c));
    domains += nlohmann::json{{"image_id", r.image_id}, {"domain", i < corpus.attack.records.size() / 2 ? "near" : "out"}}.dump() + "\n";
  }
  write_captions(dir / "captions.jsonl", captions);
  write_text(dir / "domains.jsonl", domains);

  std::vector<std::size_t> b_sweep;
  for (std::size_t b : {1, 10, 100, 1000, 10000}) {
    if (b <= o.items - test_size) b_sweep.push_back(b);
  }
  const nlohmann::json config = {
      {"name", "synthetic"},
      {"seed", o.seed},
      {"output_dir", "out"},
      {"data",
       {{"attack_embeddings", "attack.emb"},
        {"victim_embeddings", {{"synthetic", "victim.emb"}}},
        {"tag_embeddings", "tags.emb"},
        {"tags", "tags.jsonl"},
        {"captions", "captions.jsonl"},
        {"domains", "domains.jsonl"}}},
      {"split", {{"test_size", test_size}}},
      {"alignment", {{"b_sweep", b_sweep}}},
      {"retrieval",
       {{"k", 10},
        {"k_sweep", {5, 10, 15, 20, 25}},
        {"m_sweep", {1, 2, 5, 10, 20, 50, 100}},
        {"retriever", {{"hidden", {64, 32}}, {"candidate_cap", 32}, {"ranker_epochs", 10}}}}},
      {"client", {{"mode", "record"}, {"cache", "cache.jsonl"}}}};
  write_text(dir / "config.json", config.dump(2) + "\n");
  return dir / "config.json";
}

}  // namespace slime
