#include <gtest/gtest.h>

#include <fstream>
#include <random>
#include <set>

#include "slime/metrics.hpp"
#include "support/test_util.hpp"
#include "support/text_oracle.hpp"

namespace slime {
namespace {

using Strings = std::vector<std::string>;

// Five tags on the unit circle at hand-picked angles (degrees).
EmbeddingMatrix toy_vocab() {
  const std::vector<std::pair<std::string, double>> at = {
      {"apple", 0}, {"pear", 10}, {"plum", 25}, {"car", 120}, {"truck", 130}};
  RowMatrix v(5, 2);
  Strings ids;
  for (std::size_t i = 0; i < at.size(); ++i) {
    const double rad = at[i].second * M_PI / 180.0;
    v(static_cast<Eigen::Index>(i), 0) = std::cos(rad);
    v(static_cast<Eigen::Index>(i), 1) = std::sin(rad);
    ids.push_back(at[i].first);
  }
  return EmbeddingMatrix(ids, v);
}

// Neighborhood by scanning every tag: sort by (not self, -cosine, phrase).
Strings brute_neighborhood(const EmbeddingMatrix& vocab, const std::string& tag, std::size_t m) {
  std::size_t t = 0;
  while (vocab.ids()[t] != tag) ++t;
  std::vector<std::tuple<int, double, std::string>> keyed;
  for (std::size_t u = 0; u < vocab.ids().size(); ++u) {
    double dot = 0, nt = 0, nu = 0;
    for (Eigen::Index d = 0; d < vocab.dim(); ++d) {
      const double a = vocab.values()(static_cast<Eigen::Index>(t), d), b = vocab.values()(static_cast<Eigen::Index>(u), d);
      dot += a * b;
      nt += a * a;
      nu += b * b;
    }
    keyed.emplace_back(u == t ? 0 : 1, -dot / std::sqrt(nt * nu), vocab.ids()[u]);
  }
  std::sort(keyed.begin(), keyed.end());
  Strings out;
  for (std::size_t i = 0; i < m; ++i) out.push_back(std::get<2>(keyed[i]));
  return out;
}

Prf brute_neighborhood_prf(const EmbeddingMatrix& vocab, const Strings& ref, const Strings& pred, std::size_t m) {
  std::set<std::string> g(ref.begin(), ref.end()), p(pred.begin(), pred.end());
  std::size_t hits = 0, explained = 0;
  for (const auto& t : g) {
    const auto nb = brute_neighborhood(vocab, t, m);
    bool hit = false;
    for (const auto& u : p) hit = hit || std::find(nb.begin(), nb.end(), u) != nb.end();
    hits += hit;
  }
  for (const auto& u : p) {
    bool in = false;
    for (const auto& t : g) {
      const auto nb = brute_neighborhood(vocab, t, m);
      in = in || std::find(nb.begin(), nb.end(), u) != nb.end();
    }
    explained += in;
  }
  Prf out;
  out.recall = static_cast<double>(hits) / static_cast<double>(g.size());
  out.precision = static_cast<double>(explained) / static_cast<double>(p.size());
  out.f1 = testing::f1(out.recall, out.precision);
  return out;
}

TEST(Neighborhood, ToyVocabularyMatchesBruteSort) {
  const auto vocab = toy_vocab();
  const NeighborhoodIndex index(vocab);
  for (const auto& t : vocab.ids()) {
    for (std::size_t m = 1; m <= 5; ++m) EXPECT_EQ(semantic_neighborhood(t, index, m), brute_neighborhood(vocab, t, m));
  }
  EXPECT_EQ(semantic_neighborhood("apple", index, 2), (Strings{"apple", "pear"}));
  EXPECT_EQ(semantic_neighborhood("car", index, 1), Strings{"car"});
  EXPECT_EQ(semantic_neighborhood("car", index, 5).size(), 5u);
}

TEST(Neighborhood, ErrorsOnUnknownTagAndBadM) {
  const NeighborhoodIndex index(toy_vocab());
  try {
    semantic_neighborhood("boat", index, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::kUnknownTag);
  }
  for (std::size_t m : {0u, 6u}) {
    try {
      semantic_neighborhood("car", index, m);
      FAIL();
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), Errc::kMOutOfRange);
    }
  }
  EXPECT_THROW(neighborhood_prf(Strings{}, Strings{"car"}, index, 1), Error);
}

TEST(Neighborhood, EqualEmbeddingsStillRankSelfFirst) {
  RowMatrix v(3, 2);
  v << 1, 0, 1, 0, 0, 1;
  const NeighborhoodIndex index(EmbeddingMatrix({"b", "a", "c"}, v));
  EXPECT_EQ(semantic_neighborhood("b", index, 1), Strings{"b"});
  EXPECT_EQ(semantic_neighborhood("b", index, 2), (Strings{"b", "a"}));
  EXPECT_EQ(semantic_neighborhood("c", index, 2), (Strings{"c", "a"}));  // a and b tie at cos 0
}

TEST(Neighborhood, OneOfThreePredictedInCohort) {
  const auto vocab = toy_vocab();
  const NeighborhoodIndex index(vocab);
  const Strings ref = {"apple"}, pred = {"pear", "car", "truck"};
  const auto prf = neighborhood_prf(ref, pred, index, 2);
  EXPECT_DOUBLE_EQ(prf.precision, 1.0 / 3.0);
  const auto oracle = brute_neighborhood_prf(vocab, ref, pred, 2);
  EXPECT_DOUBLE_EQ(prf.recall, oracle.recall);
  EXPECT_DOUBLE_EQ(prf.recall, 1.0);
  EXPECT_DOUBLE_EQ(prf.f1, 0.5);
}

TEST(Neighborhood, PropertiesOnRandomInstances) {
  std::mt19937_64 rng(31);
  const auto vocab = testing::random_embeddings(rng, 40, 6, true, "tag");
  const NeighborhoodIndex index(vocab);
  std::uniform_int_distribution<std::size_t> pick(0, 39), size(1, 6);
  for (int trial = 0; trial < 60; ++trial) {
    Strings ref, pred;
    for (std::size_t i = size(rng); i > 0; --i) ref.push_back(vocab.ids()[pick(rng)]);
    for (std::size_t i = size(rng); i > 0; --i) pred.push_back(vocab.ids()[pick(rng)]);
    const NeighborhoodTable table(ref, pred, index);
    const auto exact = exact_retrieval_prf(ref, pred);
    Prf prev{0, 0, 0};
    for (std::size_t m = 1; m <= 40; ++m) {
      const auto p = table.at(m);
      EXPECT_GE(p.recall, prev.recall);
      EXPECT_GE(p.precision, prev.precision);
      EXPECT_GE(p.f1, prev.f1);
      EXPECT_GE(p.f1, exact.f1);
      for (double x : {p.recall, p.precision, p.f1}) {
        EXPECT_GE(x, 0.0);
        EXPECT_LE(x, 1.0);
      }
      prev = p;
    }
    const auto m1 = table.at(1);
    EXPECT_NEAR(m1.recall, exact.recall, 1e-12);
    EXPECT_NEAR(m1.precision, exact.precision, 1e-12);
    EXPECT_NEAR(m1.f1, exact.f1, 1e-12);
    EXPECT_EQ(table.at(40).f1, 1.0);
    if (trial < 10) {
      for (std::size_t m : {1u, 3u, 7u}) {
        const auto o = brute_neighborhood_prf(vocab, ref, pred, m);
        const auto p = table.at(m);
        EXPECT_DOUBLE_EQ(p.recall, o.recall);
        EXPECT_DOUBLE_EQ(p.precision, o.precision);
      }
    }
    const auto same = neighborhood_prf(ref, ref, index, 1 + trial % 5);
    EXPECT_EQ(same.f1, 1.0);
  }
}

TEST(Neighborhood, ReportAggregatesItems) {
  const NeighborhoodIndex index(toy_vocab());
  const std::vector<NeighborhoodItem> items = {{"i1", {"apple"}, {"pear"}}, {"i2", {"car"}, {"car"}}};
  const std::vector<std::size_t> ms = {1, 2, 5};
  const auto r = neighborhood_report(items, index, ms, 1);
  EXPECT_DOUBLE_EQ(r.mean[0].f1, 0.5);
  EXPECT_DOUBLE_EQ(r.mean[1].f1, 1.0);
  EXPECT_DOUBLE_EQ(r.exact_mean.f1, 0.5);
  const auto j = r.to_json();
  EXPECT_EQ(j.at("m_sweep").size(), 3u);
  EXPECT_EQ(j.at("items")[1].at("item_id"), "i2");
}

TEST(ExactRetrieval, SetArithmetic) {
  const auto p = exact_retrieval_prf(Strings{"a", "b", "c", "d"}, Strings{"a", "b", "c", "x", "y", "z"});
  EXPECT_DOUBLE_EQ(p.recall, 0.75);
  EXPECT_DOUBLE_EQ(p.precision, 0.5);
  EXPECT_NEAR(p.f1, 0.6, 1e-15);
  const auto same = exact_retrieval_prf(Strings{"a", "b"}, Strings{"b", "a"});
  EXPECT_EQ(same.f1, 1.0);
  const auto none = exact_retrieval_prf(Strings{"a"}, Strings{"b"});
  EXPECT_EQ(none.recall + none.precision + none.f1, 0.0);
  try {
    exact_retrieval_prf(Strings{}, Strings{"a"});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::kEmptySet);
  }
}

// ---------------------------------------------------------------------------

struct TextPair {
  std::string hypothesis;
  Strings references;
};

std::vector<TextPair> load_pairs() {
  std::ifstream in(std::string(SLIME_FIXTURE_DIR) + "/text_pairs.json");
  const auto j = nlohmann::json::parse(in);
  std::vector<TextPair> out;
  for (const auto& p : j.at("pairs")) out.push_back({p.at("hypothesis"), p.at("references")});
  return out;
}

std::vector<testing::Words> ref_words(const Strings& refs) {
  std::vector<testing::Words> out;
  for (const auto& r : refs) out.push_back(testing::words(r));
  return out;
}

TEST(TextMetrics, FixedPairMatchesOracle) {
  const std::string h = "the cat sat on the mat";
  const Strings refs = {"the cat is on the mat"};
  const auto hw = testing::words(h), rw = testing::words(refs[0]);
  EXPECT_EQ(testing::oracle_lcs(hw, rw), 5u);
  EXPECT_NEAR(rouge_l(h, refs), 100.0 * 5.0 / 6.0, 1e-9);
  EXPECT_NEAR(rouge1(h, refs), 100.0 * 5.0 / 6.0, 1e-9);
  EXPECT_NEAR(rouge2(h, refs), 60.0, 1e-9);
  EXPECT_NEAR(bleu4(h, refs), testing::oracle_bleu4(hw, {rw}), 1e-6);
  EXPECT_NEAR(meteor(h, refs), testing::oracle_meteor(hw, rw), 1e-6);
}

TEST(TextMetrics, CorpusAgreesWithOracles) {
  const auto pairs = load_pairs();
  ASSERT_EQ(pairs.size(), 30u);
  for (const auto& p : pairs) {
    const auto h = testing::words(p.hypothesis);
    const auto refs = ref_words(p.references);
    SCOPED_TRACE(p.hypothesis);
    EXPECT_NEAR(bleu4(p.hypothesis, p.references), testing::oracle_bleu4(h, refs), 1e-6);
    EXPECT_NEAR(rouge1(p.hypothesis, p.references),
                testing::best_over(h, refs, [](auto& a, auto& b) { return testing::oracle_rouge_n(a, b, 1); }), 1e-6);
    EXPECT_NEAR(rouge2(p.hypothesis, p.references),
                testing::best_over(h, refs, [](auto& a, auto& b) { return testing::oracle_rouge_n(a, b, 2); }), 1e-6);
    EXPECT_NEAR(rouge_l(p.hypothesis, p.references),
                testing::best_over(h, refs, [](auto& a, auto& b) { return testing::oracle_rouge_l(a, b); }), 1e-6);
    EXPECT_NEAR(meteor(p.hypothesis, p.references),
                testing::best_over(h, refs, [](auto& a, auto& b) { return testing::oracle_meteor(a, b); }), 1e-6);
  }
}

TEST(TextMetrics, IdentityScoresHundred) {
  for (const auto& p : load_pairs()) {
    const Strings self = {p.hypothesis};
    for (auto m : kTextMetrics) {
      // BLEU-4 has no 4-grams to match below four tokens.
      if (m == TextMetric::kBleu4 && testing::words(p.hypothesis).size() < 4) continue;
      EXPECT_NEAR(text_score(m, p.hypothesis, self), 100.0, 1e-9) << metric_name(m) << ": " << p.hypothesis;
    }
  }
  EXPECT_LT(bleu4("shelves hold items", Strings{"shelves hold items"}), 1.0);
}

TEST(TextMetrics, DisjointVocabulariesScoreNearZero) {
  const Strings refs = {"the cat is on the mat", "a dog sleeps here"};
  for (auto m : kTextMetrics) EXPECT_LT(text_score(m, "purple rivers whistle loudly tonight", refs), 0.01) << metric_name(m);
}

TEST(TextMetrics, StemStageMatchesInflections) {
  const Strings refs = {"the dog runs"};
  EXPECT_GT(meteor("the dogs running", refs), meteor("the cats walking", refs));
  EXPECT_EQ(rouge1("dogs", Strings{"dog"}), 0.0);
  EXPECT_GT(meteor("dogs", Strings{"dog"}), 0.0);
}

TEST(TextMetrics, EmptyTextAndMetricNames) {
  try {
    bleu4("  ...  ", Strings{"a b c d"});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::kEmptyText);
  }
  EXPECT_THROW(rouge_l("a", Strings{}), Error);
  EXPECT_THROW(meteor("a", Strings{""}), Error);
  for (auto m : kTextMetrics) EXPECT_EQ(parse_metric(metric_name(m)), m);
  EXPECT_THROW(parse_metric("cider"), Error);
}

TEST(PorterStemmer, ClassicExamples) {
  const std::vector<std::pair<std::string, std::string>> cases = {
      {"caresses", "caress"}, {"ponies", "poni"},     {"cats", "cat"},          {"agreed", "agre"},
      {"plastered", "plaster"}, {"motoring", "motor"}, {"hopping", "hop"},       {"filing", "file"},
      {"happy", "happi"},     {"relational", "relat"}, {"conditional", "condit"}, {"generalizations", "gener"},
      {"electrical", "electr"}, {"adjustable", "adjust"}, {"controlling", "control"}, {"running", "run"}};
  for (const auto& [w, s] : cases) EXPECT_EQ(porter_stem(w), s) << w;
  EXPECT_EQ(porter_stem("is"), "is");
}

// ---------------------------------------------------------------------------

TEST(Aggregation, ExactHypothesisAmongReferences) {
  const TextsByItem hyps = {{"x", {"a kitchen with a wooden table"}}};
  const TextsByItem refs = {{"x", {"the kitchen area is clean", "a kitchen with a wooden table", "an open space",
                                   "track lighting on the ceiling", "black chairs around"}}};
  for (auto m : kTextMetrics) EXPECT_NEAR(best_match_score(hyps, refs, m).value, 100.0, 1e-9);
  try {
    best_match_score(hyps, {{"y", {"z"}}}, TextMetric::kRouge1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::kMissingItem);
  }
}

TEST(Aggregation, TwoByThreeEnumeration) {
  const Strings h = {"a table in the kitchen", "chairs by the window"};
  const Strings r = {"the kitchen table", "a window with chairs", "open shelves hold items"};
  for (auto m : kTextMetrics) {
    double best = 0, mean = 0;
    for (const auto& x : h) {
      double mx = 0, sum = 0;
      for (const auto& y : r) {
        const double s = text_score(m, x, Strings{y});
        mx = std::max(mx, s);
        sum += s;
      }
      best += mx / 2;
      mean += sum / 6;
    }
    EXPECT_NEAR(best_match_score({{"i", h}}, {{"i", r}}, m).value, best, 1e-12);
    EXPECT_NEAR(mean_match_score({{"i", h}}, {{"i", r}}, m).value, mean, 1e-12);
  }
}

TEST(Aggregation, BestMatchAtLeastMeanAndEqualForSingleReference) {
  std::mt19937_64 rng(32);
  const Strings vocab = {"kitchen", "table", "chair", "the", "a", "on", "open", "space", "shelf", "light"};
  std::uniform_int_distribution<std::size_t> word(0, vocab.size() - 1), len(1, 7), count(1, 3);
  auto sentence = [&] {
    std::string s;
    for (std::size_t i = len(rng); i > 0; --i) s += vocab[word(rng)] + " ";
    return s;
  };
  for (int trial = 0; trial < 100; ++trial) {
    TextsByItem hyps, refs, single;
    for (int item = 0; item < 3; ++item) {
      const auto id = "item" + std::to_string(item);
      for (std::size_t i = count(rng); i > 0; --i) hyps[id].push_back(sentence());
      for (std::size_t i = count(rng) + 1; i > 0; --i) refs[id].push_back(sentence());
      single[id] = {refs[id].front()};
    }
    for (auto m : kTextMetrics) {
      EXPECT_GE(best_match_score(hyps, refs, m).value + 1e-12, mean_match_score(hyps, refs, m).value);
      EXPECT_DOUBLE_EQ(best_match_score(hyps, single, m).value, mean_match_score(hyps, single, m).value);
    }
  }
}

// ---------------------------------------------------------------------------

StructuredScene reference_scene() {
  SceneBuilder b;
  for (const char* o : {"table", "chair", "shelf", "cabinet", "refrigerator", "microwave", "sink", "toaster oven",
                        "lighting", "sofa", "window", "blind"})
    b.object(o);
  b.relation("chair", "next_to", "table")
      .relation("microwave", "on", "shelf")
      .relation("toaster oven", "on", "shelf")
      .relation("shelf", "next_to", "refrigerator")
      .relation("sink", "next_to", "cabinet")
      .relation("cabinet", "over", "sink")
      .relation("sofa", "next_to", "table")
      .relation("blind", "covering", "window")
      .relation("lighting", "hanging_over", "table")
      .relation("shelf", "next_to", "blind");
  b.scene("kitchen", 0.95).scene("living room", 0.40);
  return b.build();
}

StructuredScene victim_scene() {
  SceneBuilder b;
  for (const char* o : {"table", "chair", "cabinet", "countertop", "window", "potted plant", "stove", "kitchen sink",
                        "light fixture"})
    b.object(o);
  b.relation("chair", "next_to", "table")
      .relation("potted plant", "on", "table")
      .relation("cabinet", "over", "countertop")
      .relation("stove", "part_of", "countertop")
      .relation("kitchen sink", "part_of", "countertop")
      .relation("light fixture", "hanging_over", "table")
      .relation("cabinet", "next_to", "window");
  b.scene("kitchen", 1.0);
  return b.build();
}

TEST(StructuredF1, IdenticalScenesScoreOne) {
  const auto s = reference_scene();
  const auto f = structured_f1(s, s);
  for (const auto& p : {f.objects, f.triples, f.pairs, f.predicates, f.scenes}) EXPECT_EQ(p.f1, 1.0);
}

TEST(StructuredF1, OneOfTwoRelations) {
  const auto pred = SceneBuilder().relation("chair", "next_to", "table").build();
  const auto ref = SceneBuilder().relation("chair", "next_to", "table").relation("blind", "covering", "window").build();
  const auto f = structured_f1(pred, ref);
  EXPECT_DOUBLE_EQ(f.triples.recall, 0.5);
  EXPECT_DOUBLE_EQ(f.triples.precision, 1.0);
  EXPECT_NEAR(f.triples.f1, 2.0 / 3.0, 1e-15);
  EXPECT_EQ(f.objects.f1, 1.0);  // both empty
}

TEST(StructuredF1, KitchenSampleSetArithmetic) {
  const auto ref = reference_scene(), pred = victim_scene();
  // Oracle: plain intersection of the listed triples.
  std::size_t shared = 0;
  for (const auto& r : pred.relations) shared += ref.relations.count(r);
  ASSERT_EQ(shared, 1u);
  ASSERT_EQ(pred.relations.size(), 7u);
  ASSERT_EQ(ref.relations.size(), 10u);
  const auto f = structured_f1(pred, ref);
  EXPECT_DOUBLE_EQ(f.scenes.precision, 1.0);
  EXPECT_DOUBLE_EQ(f.scenes.recall, 0.5);
  EXPECT_NEAR(f.triples.f1, 2.0 / 17.0, 1e-15);
  EXPECT_NEAR(f.objects.precision, 4.0 / 9.0, 1e-15);  // table, chair, cabinet, window
  EXPECT_NEAR(f.objects.recall, 4.0 / 12.0, 1e-15);
  EXPECT_NEAR(f.predicates.precision, 4.0 / 5.0, 1e-15);  // part_of is unmatched
}

TEST(StructuredF1, PluralNounsAndInvalidPredicates) {
  const auto pred = SceneBuilder().object("Chairs").relation("chairs", "next to", "Tables").build();
  const auto ref = SceneBuilder().object("chair").relation("chair", "next_to", "table").build();
  EXPECT_EQ(structured_f1(pred, ref).triples.f1, 1.0);
  EXPECT_EQ(structured_f1(pred, ref).objects.f1, 1.0);
  try {
    SceneBuilder().relation("cup", "beside", "plate");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::kInvalidPredicate);
  }
  StructuredScene bad;
  bad.relations.insert({"cup", "beside", "plate"});
  EXPECT_THROW(structured_f1(bad, ref), Error);
}

TEST(SceneJson, ParsesShapesAndDropsUnknownPredicates) {
  const std::string raw = "```json\n{\"objects\": [\"Tables\", \"chair\"],"
                          " \"relations\": [{\"subject\": \"chair\", \"predicate\": \"next to\", \"object\": \"table\"},"
                          " [\"cup\", \"beside\", \"plate\"], [\"lamp\", \"hanging-over\", \"table\"]],"
                          " \"scenes\": [{\"label\": \"Kitchen\", \"confidence\": 1.7}, \"living rooms\"]}\n```";
  const auto parsed = parse_scene_json(raw);
  EXPECT_EQ(parsed.dropped_predicates, 1u);
  EXPECT_EQ(parsed.scene.objects, (std::set<std::string>{"chair", "table"}));
  EXPECT_EQ(parsed.scene.relations.size(), 2u);
  EXPECT_TRUE(parsed.scene.relations.count({"lamp", "hanging_over", "table"}));
  ASSERT_EQ(parsed.scene.scenes.size(), 2u);
  EXPECT_EQ(parsed.scene.scenes[0].label, "kitchen");
  EXPECT_EQ(parsed.scene.scenes[0].confidence, 1.0);
  EXPECT_EQ(parsed.scene.scenes[1].label, "living room");
  const auto back = parse_scene_json(scene_to_json(parsed.scene).dump());
  EXPECT_EQ(back.scene.relations, parsed.scene.relations);
}

TEST(SceneJson, MalformedKeepsRawText) {
  for (const std::string raw : {"no json here", "{\"objects\": 3}", "{\"relations\": [[1, 2]]}", "{\"other\": 1}"}) {
    try {
      parse_scene_json(raw);
      FAIL() << raw;
    } catch (const ParseError& e) {
      EXPECT_EQ(e.raw(), raw);
    }
  }
}

}  // namespace
}  // namespace slime
