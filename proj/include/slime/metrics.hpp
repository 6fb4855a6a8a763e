#pragma once

// Evaluation: exact and neighborhood-relaxed tag retrieval scores, text
// overlap metrics with best-match aggregation, and structured scene F1.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <json.hpp>

#include "slime/embedding_store.hpp"
#include "slime/error.hpp"
#include "slime/porter_stemmer.hpp"
#include "slime/scene.hpp"
#include "slime/text.hpp"

namespace slime {

struct Prf {
  double recall = 0.0;
  double precision = 0.0;
  double f1 = 0.0;
};

inline double harmonic_mean(double a, double b) { return a + b > 0.0 ? 2.0 * a * b / (a + b) : 0.0; }

inline Prf make_prf(std::size_t recall_hits, std::size_t reference_size, std::size_t precision_hits,
                    std::size_t prediction_size) {
  Prf p;
  p.recall = static_cast<double>(recall_hits) / static_cast<double>(reference_size);
  p.precision = static_cast<double>(precision_hits) / static_cast<double>(prediction_size);
  p.f1 = harmonic_mean(p.recall, p.precision);
  return p;
}

namespace detail {

inline std::vector<std::string> unique_in_order(std::span<const std::string> xs) {
  std::vector<std::string> out;
  std::unordered_set<std::string> seen;
  for (const auto& x : xs)
    if (seen.insert(x).second) out.push_back(x);
  return out;
}

}  // namespace detail

/// Set overlap of retrieved tags `predicted` against `reference`.
inline Prf exact_retrieval_prf(std::span<const std::string> reference, std::span<const std::string> predicted) {
  const auto g = detail::unique_in_order(reference);
  const auto p = detail::unique_in_order(predicted);
  if (g.empty() || p.empty()) fail(Errc::kEmptySet, "exact retrieval scoring needs non-empty tag sets");
  const std::unordered_set<std::string> gs(g.begin(), g.end());
  std::size_t overlap = 0;
  for (const auto& t : p) overlap += gs.count(t);
  return make_prf(overlap, g.size(), overlap, p.size());
}

// ---------------------------------------------------------------------------
// Semantic neighborhoods

/// Cosine neighborhoods over a tag vocabulary. Every tag ranks itself first;
/// the rest follow by descending cosine, ties broken by tag phrase.
class NeighborhoodIndex {
 public:
  explicit NeighborhoodIndex(const EmbeddingMatrix& tags)
      : tags_(tags.normalized() ? tags : l2_normalize(tags)) {
    for (std::size_t i = 0; i < tags_.ids().size(); ++i) index_.emplace(tags_.ids()[i], i);
  }

  std::size_t size() const noexcept { return tags_.ids().size(); }
  const std::vector<std::string>& tags() const noexcept { return tags_.ids(); }

  std::size_t index_of(std::string_view tag) const {
    auto it = index_.find(std::string(tag));
    if (it == index_.end()) fail(Errc::kUnknownTag, "tag not in vocabulary: " + std::string(tag));
    return it->second;
  }

  bool contains(std::string_view tag) const { return index_.count(std::string(tag)) > 0; }

  /// Vocabulary indices ordered by closeness to `tag` (length N).
  std::vector<std::size_t> order_from(std::string_view tag) const {
    const std::size_t t = index_of(tag);
    const Vector cos = tags_.values() * tags_.row(static_cast<Eigen::Index>(t)).transpose();
    std::vector<std::size_t> order(size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    const auto& ids = tags_.ids();
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      if ((a == t) != (b == t)) return a == t;
      const double ca = cos(static_cast<Eigen::Index>(a)), cb = cos(static_cast<Eigen::Index>(b));
      if (ca != cb) return ca > cb;
      return ids[a] < ids[b];
    });
    return order;
  }

  /// rank[u] = 0-based position of vocabulary tag u in the ordering from `tag`;
  /// u lies in the size-m neighborhood iff rank[u] < m.
  std::vector<std::uint32_t> ranks_from(std::string_view tag) const {
    const auto order = order_from(tag);
    std::vector<std::uint32_t> rank(order.size());
    for (std::size_t pos = 0; pos < order.size(); ++pos) rank[order[pos]] = static_cast<std::uint32_t>(pos);
    return rank;
  }

 private:
  EmbeddingMatrix tags_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// The m tags closest to `tag`, starting with `tag` itself.
inline std::vector<std::string> semantic_neighborhood(std::string_view tag, const NeighborhoodIndex& index,
                                                      std::size_t m) {
  if (m < 1 || m > index.size()) {
    fail(Errc::kMOutOfRange, "m=" + std::to_string(m) + " outside [1, " + std::to_string(index.size()) + "]");
  }
  const auto order = index.order_from(tag);
  std::vector<std::string> out;
  for (std::size_t i = 0; i < m; ++i) out.push_back(index.tags()[order[i]]);
  return out;
}

/// Neighborhood ranks of every predicted tag as seen from every reference tag.
/// Evaluating many m values from one table is cheap.
class NeighborhoodTable {
 public:
  NeighborhoodTable(std::span<const std::string> reference, std::span<const std::string> predicted,
                    const NeighborhoodIndex& index)
      : vocab_size_(index.size()) {
    const auto g = detail::unique_in_order(reference);
    const auto p = detail::unique_in_order(predicted);
    if (g.empty() || p.empty()) fail(Errc::kEmptySet, "neighborhood scoring needs non-empty tag sets");
    std::vector<std::size_t> p_idx;
    for (const auto& u : p) p_idx.push_back(index.index_of(u));
    rank_.resize(g.size(), std::vector<std::uint32_t>(p.size()));
    for (std::size_t i = 0; i < g.size(); ++i) {
      const auto ranks = index.ranks_from(g[i]);
      for (std::size_t k = 0; k < p.size(); ++k) rank_[i][k] = ranks[p_idx[k]];
    }
  }

  Prf at(std::size_t m) const {
    if (m < 1 || m > vocab_size_) {
      fail(Errc::kMOutOfRange, "m=" + std::to_string(m) + " outside [1, " + std::to_string(vocab_size_) + "]");
    }
    const std::size_t gs = rank_.size(), ps = rank_.front().size();
    std::size_t hits = 0, explained = 0;
    std::vector<bool> covered(ps, false);
    for (std::size_t i = 0; i < gs; ++i) {
      bool hit = false;
      for (std::size_t k = 0; k < ps; ++k) {
        if (rank_[i][k] < m) {
          hit = true;
          covered[k] = true;
        }
      }
      hits += hit ? 1 : 0;
    }
    for (bool c : covered) explained += c ? 1 : 0;
    return make_prf(hits, gs, explained, ps);
  }

 private:
  std::size_t vocab_size_;
  std::vector<std::vector<std::uint32_t>> rank_;
};

/// Recall: share of reference tags whose size-m neighborhood holds a predicted
/// tag. Precision: share of predicted tags inside some reference neighborhood.
inline Prf neighborhood_prf(std::span<const std::string> reference, std::span<const std::string> predicted,
                            const NeighborhoodIndex& index, std::size_t m) {
  return NeighborhoodTable(reference, predicted, index).at(m);
}

struct NeighborhoodItem {
  std::string item_id;
  std::vector<std::string> reference;
  std::vector<std::string> predicted;
};

struct NeighborhoodReport {
  std::size_t k = 0;
  std::vector<std::size_t> m_values;
  std::vector<std::string> item_ids;
  std::vector<std::vector<Prf>> per_item;  // [item][m index]
  std::vector<Prf> exact;                   // per item
  std::vector<Prf> mean;                    // per m
  Prf exact_mean;

  nlohmann::json to_json() const {
    auto prf = [](const Prf& p) { return nlohmann::json{{"recall", p.recall}, {"precision", p.precision}, {"f1", p.f1}}; };
    nlohmann::json sweep = nlohmann::json::array();
    for (std::size_t j = 0; j < m_values.size(); ++j) {
      auto row = prf(mean[j]);
      row["m"] = m_values[j];
      sweep.push_back(row);
    }
    nlohmann::json items = nlohmann::json::array();
    for (std::size_t i = 0; i < item_ids.size(); ++i) {
      nlohmann::json f1s = nlohmann::json::array();
      for (const auto& p : per_item[i]) f1s.push_back(p.f1);
      items.push_back({{"item_id", item_ids[i]}, {"exact", prf(exact[i])}, {"f1_by_m", f1s}});
    }
    return {{"k", k}, {"m_sweep", sweep}, {"exact", prf(exact_mean)}, {"items", items}};
  }
};

inline Prf mean_prf(std::span<const Prf> xs) {
  Prf out;
  if (xs.empty()) return out;
  for (const auto& p : xs) {
    out.recall += p.recall;
    out.precision += p.precision;
    out.f1 += p.f1;
  }
  const double n = static_cast<double>(xs.size());
  out.recall /= n;
  out.precision /= n;
  out.f1 /= n;
  return out;
}

inline NeighborhoodReport neighborhood_report(std::span<const NeighborhoodItem> items, const NeighborhoodIndex& index,
                                              std::span<const std::size_t> m_values, std::size_t k) {
  NeighborhoodReport r;
  r.k = k;
  r.m_values.assign(m_values.begin(), m_values.end());
  std::vector<std::vector<Prf>> by_m(m_values.size());
  for (const auto& item : items) {
    const NeighborhoodTable table(item.reference, item.predicted, index);
    std::vector<Prf> row;
    for (std::size_t j = 0; j < m_values.size(); ++j) {
      row.push_back(table.at(m_values[j]));
      by_m[j].push_back(row.back());
    }
    r.item_ids.push_back(item.item_id);
    r.per_item.push_back(std::move(row));
    r.exact.push_back(exact_retrieval_prf(item.reference, item.predicted));
  }
  for (const auto& col : by_m) r.mean.push_back(mean_prf(col));
  r.exact_mean = mean_prf(r.exact);
  return r;
}

// ---------------------------------------------------------------------------
// Text metrics (scores in [0, 100])

enum class TextMetric { kBleu4, kRouge1, kRouge2, kRougeL, kMeteor };

inline constexpr std::array<TextMetric, 5> kTextMetrics = {TextMetric::kBleu4, TextMetric::kRouge1, TextMetric::kRouge2,
                                                           TextMetric::kRougeL, TextMetric::kMeteor};

inline std::string_view metric_name(TextMetric m) {
  switch (m) {
    case TextMetric::kBleu4: return "bleu4";
    case TextMetric::kRouge1: return "rouge1";
    case TextMetric::kRouge2: return "rouge2";
    case TextMetric::kRougeL: return "rougeL";
    case TextMetric::kMeteor: return "meteor";
  }
  return "?";
}

inline TextMetric parse_metric(std::string_view name) {
  for (auto m : kTextMetrics)
    if (metric_name(m) == name) return m;
  fail(Errc::kInvalidArgument, "unknown text metric: " + std::string(name));
}

inline constexpr double kBleuEpsilon = 1e-9;
inline constexpr double kMeteorAlpha = 0.9;  // recall weight: Fmean = PR / (alpha P + (1 - alpha) R)
inline constexpr double kMeteorGamma = 0.5;
inline constexpr double kMeteorBeta = 3.0;

namespace detail {

using Tokens = std::vector<std::string>;

inline Tokens tokens_or_throw(std::string_view s, const char* what) {
  auto t = text::tokenize(s);
  if (t.empty()) fail(Errc::kEmptyText, std::string(what) + " has no word tokens");
  return t;
}

inline std::vector<Tokens> references_or_throw(std::span<const std::string> refs) {
  if (refs.empty()) fail(Errc::kEmptyText, "at least one reference is required");
  std::vector<Tokens> out;
  for (const auto& r : refs) out.push_back(tokens_or_throw(r, "reference"));
  return out;
}

inline std::map<std::vector<std::string>, std::size_t> ngram_counts(const Tokens& t, std::size_t n) {
  std::map<std::vector<std::string>, std::size_t> out;
  for (std::size_t i = 0; i + n <= t.size(); ++i) ++out[Tokens(t.begin() + static_cast<std::ptrdiff_t>(i), t.begin() + static_cast<std::ptrdiff_t>(i + n))];
  return out;
}

inline double rouge_n_single(const Tokens& h, const Tokens& r, std::size_t n) {
  const auto hc = ngram_counts(h, n), rc = ngram_counts(r, n);
  std::size_t overlap = 0, ht = 0, rt = 0;
  for (const auto& [g, c] : hc) {
    ht += c;
    if (auto it = rc.find(g); it != rc.end()) overlap += std::min(c, it->second);
  }
  for (const auto& [g, c] : rc) rt += c;
  if (overlap == 0) return 0.0;
  return harmonic_mean(static_cast<double>(overlap) / static_cast<double>(ht),
                       static_cast<double>(overlap) / static_cast<double>(rt));
}

inline std::size_t lcs_length(const Tokens& a, const Tokens& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

inline double rouge_l_single(const Tokens& h, const Tokens& r) {
  const auto l = static_cast<double>(lcs_length(h, r));
  if (l == 0.0) return 0.0;
  return harmonic_mean(l / static_cast<double>(h.size()), l / static_cast<double>(r.size()));
}

// ---- METEOR alignment -----------------------------------------------------

inline std::size_t count_chunks(const std::vector<int>& hyp_to_ref) {
  std::size_t chunks = 0;
  int prev_h = -2, prev_r = -2;
  for (int h = 0; h < static_cast<int>(hyp_to_ref.size()); ++h) {
    const int r = hyp_to_ref[static_cast<std::size_t>(h)];
    if (r < 0) continue;
    if (!(h == prev_h + 1 && r == prev_r + 1)) ++chunks;
    prev_h = h;
    prev_r = r;
  }
  return chunks;
}

// One matching stage: over the still-unaligned words, picks a maximum set of
// pairs accepted by `match`, and among those one minimizing chunks of the full
// alignment. Exhaustive branch and bound.
template <typename Match>
void meteor_stage(const Tokens& h, const Tokens& r, std::vector<int>& hyp_to_ref, Match match) {
  const std::size_t nh = h.size(), nr = r.size();
  std::vector<bool> ref_used(nr, false);
  for (int x : hyp_to_ref)
    if (x >= 0) ref_used[static_cast<std::size_t>(x)] = true;

  std::vector<std::vector<int>> options(nh);
  for (std::size_t i = 0; i < nh; ++i) {
    if (hyp_to_ref[i] >= 0) continue;
    for (std::size_t j = 0; j < nr; ++j)
      if (!ref_used[j] && match(h[i], r[j])) options[i].push_back(static_cast<int>(j));
  }
  std::vector<std::size_t> open;
  for (std::size_t i = 0; i < nh; ++i)
    if (!options[i].empty()) open.push_back(i);
  if (open.empty()) return;

  // Upper bound on further matches from position k onward.
  std::vector<std::size_t> suffix(open.size() + 1, 0);
  for (std::size_t k = open.size(); k-- > 0;) suffix[k] = suffix[k + 1] + 1;

  std::vector<int> cur = hyp_to_ref, best = hyp_to_ref;
  std::size_t best_matches = 0, best_chunks = std::numeric_limits<std::size_t>::max();
  std::vector<bool> used = ref_used;

  auto rec = [&](auto&& self, std::size_t k, std::size_t matches) -> void {
    if (matches + suffix[k] < best_matches) return;
    if (k == open.size()) {
      const std::size_t chunks = count_chunks(cur);
      if (matches > best_matches || (matches == best_matches && chunks < best_chunks)) {
        best_matches = matches;
        best_chunks = chunks;
        best = cur;
      }
      return;
    }
    const std::size_t i = open[k];
    for (int j : options[i]) {
      if (used[static_cast<std::size_t>(j)]) continue;
      used[static_cast<std::size_t>(j)] = true;
      cur[i] = j;
      self(self, k + 1, matches + 1);
      cur[i] = -1;
      used[static_cast<std::size_t>(j)] = false;
    }
    self(self, k + 1, matches);
  };
  rec(rec, 0, 0);
  hyp_to_ref = best;
}

struct MeteorStats {
  std::size_t matches = 0;
  std::size_t chunks = 0;
  std::size_t hyp_len = 0;
  std::size_t ref_len = 0;
};

inline MeteorStats meteor_align(const Tokens& h, const Tokens& r) {
  std::vector<int> hyp_to_ref(h.size(), -1);
  meteor_stage(h, r, hyp_to_ref, [](const std::string& a, const std::string& b) { return a == b; });
  std::vector<std::string> hs, rs;
  for (const auto& w : h) hs.push_back(porter_stem(w));
  for (const auto& w : r) rs.push_back(porter_stem(w));
  meteor_stage(hs, rs, hyp_to_ref, [](const std::string& a, const std::string& b) { return a == b; });
  MeteorStats s;
  for (int x : hyp_to_ref) s.matches += x >= 0 ? 1 : 0;
  s.chunks = count_chunks(hyp_to_ref);
  s.hyp_len = h.size();
  s.ref_len = r.size();
  return s;
}

inline double meteor_from_stats(const MeteorStats& s) {
  if (s.matches == 0) return 0.0;
  const double p = static_cast<double>(s.matches) / static_cast<double>(s.hyp_len);
  const double rc = static_cast<double>(s.matches) / static_cast<double>(s.ref_len);
  const double fmean = p * rc / (kMeteorAlpha * p + (1.0 - kMeteorAlpha) * rc);
  // A complete match in a single chunk carries no fragmentation penalty.
  const bool perfect = s.chunks == 1 && s.matches == s.hyp_len && s.matches == s.ref_len;
  const double frag = perfect ? 0.0 : static_cast<double>(s.chunks) / static_cast<double>(s.matches);
  const double penalty = kMeteorGamma * std::pow(frag, kMeteorBeta);
  return fmean * (1.0 - penalty);
}

inline double bleu4_tokens(const Tokens& h, const std::vector<Tokens>& refs) {
  double log_sum = 0.0;
  for (std::size_t n = 1; n <= 4; ++n) {
    const auto hc = ngram_counts(h, n);
    std::map<std::vector<std::string>, std::size_t> max_ref;
    for (const auto& r : refs)
      for (const auto& [g, c] : ngram_counts(r, n)) max_ref[g] = std::max(max_ref[g], c);
    std::size_t matched = 0, total = 0;
    for (const auto& [g, c] : hc) {
      total += c;
      if (auto it = max_ref.find(g); it != max_ref.end()) matched += std::min(c, it->second);
    }
    const double num = matched > 0 ? static_cast<double>(matched) : kBleuEpsilon;
    const double den = static_cast<double>(std::max<std::size_t>(total, 1));
    log_sum += std::log(num / den);
  }
  // Closest reference length, shorter on ties.
  const auto c = static_cast<double>(h.size());
  std::size_t best_len = refs.front().size();
  for (const auto& r : refs) {
    const auto d = std::abs(static_cast<double>(r.size()) - c), bd = std::abs(static_cast<double>(best_len) - c);
    if (d < bd || (d == bd && r.size() < best_len)) best_len = r.size();
  }
  const double bp = c > static_cast<double>(best_len) ? 1.0 : std::exp(1.0 - static_cast<double>(best_len) / c);
  return bp * std::exp(log_sum / 4.0);
}

}  // namespace detail

/// Sentence BLEU-4 with multi-reference clipping, closest-length brevity
/// penalty and epsilon smoothing of zero match counts.
inline double bleu4(std::string_view hypothesis, std::span<const std::string> references) {
  const auto h = detail::tokens_or_throw(hypothesis, "hypothesis");
  return 100.0 * detail::bleu4_tokens(h, detail::references_or_throw(references));
}

/// ROUGE-N F1, best over references.
inline double rouge_n(std::string_view hypothesis, std::span<const std::string> references, std::size_t n) {
  const auto h = detail::tokens_or_throw(hypothesis, "hypothesis");
  double best = 0.0;
  for (const auto& r : detail::references_or_throw(references)) best = std::max(best, detail::rouge_n_single(h, r, n));
  return 100.0 * best;
}

inline double rouge1(std::string_view h, std::span<const std::string> refs) { return rouge_n(h, refs, 1); }
inline double rouge2(std::string_view h, std::span<const std::string> refs) { return rouge_n(h, refs, 2); }

/// ROUGE-L F1 (longest common subsequence), best over references.
inline double rouge_l(std::string_view hypothesis, std::span<const std::string> references) {
  const auto h = detail::tokens_or_throw(hypothesis, "hypothesis");
  double best = 0.0;
  for (const auto& r : detail::references_or_throw(references)) best = std::max(best, detail::rouge_l_single(h, r));
  return 100.0 * best;
}

/// METEOR with exact then Porter-stem matching (no synonym stage), best over
/// references.
inline double meteor(std::string_view hypothesis, std::span<const std::string> references) {
  const auto h = detail::tokens_or_throw(hypothesis, "hypothesis");
  double best = 0.0;
  for (const auto& r : detail::references_or_throw(references)) {
    best = std::max(best, detail::meteor_from_stats(detail::meteor_align(h, r)));
  }
  return 100.0 * best;
}

inline double text_score(TextMetric metric, std::string_view hypothesis, std::span<const std::string> references) {
  switch (metric) {
    case TextMetric::kBleu4: return bleu4(hypothesis, references);
    case TextMetric::kRouge1: return rouge1(hypothesis, references);
    case TextMetric::kRouge2: return rouge2(hypothesis, references);
    case TextMetric::kRougeL: return rouge_l(hypothesis, references);
    case TextMetric::kMeteor: return meteor(hypothesis, references);
  }
  return 0.0;
}

// ---------------------------------------------------------------------------
// Corpus aggregation

enum class Aggregation { kBestMatch, kMean };

inline std::string_view aggregation_name(Aggregation a) { return a == Aggregation::kBestMatch ? "best_match" : "mean"; }

using TextsByItem = std::map<std::string, std::vector<std::string>>;

struct TextScore {
  TextMetric metric = TextMetric::kBleu4;
  Aggregation aggregation = Aggregation::kBestMatch;
  double value = 0.0;
  std::map<std::string, double> per_item;
};

namespace detail {

inline TextScore aggregate_text(const TextsByItem& hypotheses, const TextsByItem& references, TextMetric metric,
                                Aggregation agg) {
  if (hypotheses.empty()) fail(Errc::kEmptySet, "no hypotheses to score");
  TextScore out{metric, agg, 0.0, {}};
  for (const auto& [id, hyps] : hypotheses) {
    auto it = references.find(id);
    if (it == references.end() || it->second.empty()) fail(Errc::kMissingItem, "no references for item " + id);
    if (hyps.empty()) fail(Errc::kEmptyText, "no hypotheses for item " + id);
    double item = 0.0;
    for (const auto& h : hyps) {
      double acc = 0.0;
      for (const auto& r : it->second) {
        const double s = text_score(metric, h, std::span<const std::string>(&r, 1));
        acc = agg == Aggregation::kBestMatch ? std::max(acc, s) : acc + s;
      }
      if (agg == Aggregation::kMean) acc /= static_cast<double>(it->second.size());
      item += acc;
    }
    item /= static_cast<double>(hyps.size());
    out.per_item.emplace(id, item);
    out.value += item;
  }
  out.value /= static_cast<double>(hypotheses.size());
  return out;
}

}  // namespace detail

/// Per item: mean over hypotheses of the best score against any single
/// reference. Corpus: mean over items.
inline TextScore best_match_score(const TextsByItem& hypotheses, const TextsByItem& references, TextMetric metric) {
  return detail::aggregate_text(hypotheses, references, metric, Aggregation::kBestMatch);
}

/// Per item: mean over all (hypothesis, reference) pairs.
inline TextScore mean_match_score(const TextsByItem& hypotheses, const TextsByItem& references, TextMetric metric) {
  return detail::aggregate_text(hypotheses, references, metric, Aggregation::kMean);
}

// ---------------------------------------------------------------------------
// Structured scenes

/// Set F1 with the convention that two empty sets agree perfectly and an empty
/// set against a non-empty one scores 0.
template <typename T>
Prf set_prf(const std::set<T>& predicted, const std::set<T>& reference) {
  if (predicted.empty() && reference.empty()) return {1.0, 1.0, 1.0};
  if (predicted.empty() || reference.empty()) return {0.0, 0.0, 0.0};
  std::size_t overlap = 0;
  for (const auto& x : predicted) overlap += reference.count(x);
  return make_prf(overlap, reference.size(), overlap, predicted.size());
}

struct StructuredF1 {
  Prf objects;
  Prf triples;
  Prf pairs;
  Prf predicates;
  Prf scenes;

  nlohmann::json to_json() const {
    auto prf = [](const Prf& p) { return nlohmann::json{{"recall", p.recall}, {"precision", p.precision}, {"f1", p.f1}}; };
    return {{"objects", prf(objects)}, {"triples", prf(triples)}, {"pairs", prf(pairs)},
            {"predicates", prf(predicates)}, {"scenes", prf(scenes)}};
  }
};

inline StructuredF1 structured_f1(const StructuredScene& predicted, const StructuredScene& reference) {
  validate_scene(predicted);
  validate_scene(reference);
  auto lemmas = [](const std::set<std::string>& xs) {
    std::set<std::string> out;
    for (const auto& x : xs) out.insert(text::normalize_noun_phrase(x));
    return out;
  };
  auto triples = [](const StructuredScene& s) {
    std::set<Relation> out;
    for (const auto& r : s.relations) {
      out.insert({text::normalize_noun_phrase(r.subject), r.predicate, text::normalize_noun_phrase(r.object)});
    }
    return out;
  };
  auto pairs = [](const std::set<Relation>& rs) {
    std::set<std::pair<std::string, std::string>> out;
    for (const auto& r : rs) out.emplace(r.subject, r.object);
    return out;
  };
  auto predicates = [](const std::set<Relation>& rs) {
    std::set<std::string> out;
    for (const auto& r : rs) out.insert(r.predicate);
    return out;
  };
  const auto pt = triples(predicted), rt = triples(reference);
  StructuredF1 out;
  out.objects = set_prf(lemmas(predicted.objects), lemmas(reference.objects));
  out.triples = set_prf(pt, rt);
  out.pairs = set_prf(pairs(pt), pairs(rt));
  out.predicates = set_prf(predicates(pt), predicates(rt));
  out.scenes = set_prf(lemmas(predicted.scene_labels()), lemmas(reference.scene_labels()));
  return out;
}

}  // namespace slime
