// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include <chrono>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>

#include "slime/alignment.hpp"
#include "slime/metrics.hpp"
#include "slime/pipeline.hpp"
#include "slime/retriever.hpp"
#include "slime/synthetic.hpp"
#include "support/linalg_oracle.hpp"
#include "support/retriever_oracle.hpp"
#include "support/test_util.hpp"
#include "support/text_oracle.hpp"

namespace fs = std::filesystem;
using namespace slime;
using Strings = std::vector<std::string>;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail += (detail.empty() ? "" : "; ") + what;
    }
  }
};

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::string num(double x, int digits = 4) { return fixed(x, digits); }

std::string sci(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2e", x);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------
// 1. alignment against a Jacobi pseudo-inverse

Outcome alignment_oracle() {
  Outcome o;
  std::mt19937_64 rng(101);
  std::uniform_int_distribution<int> width(4, 16);
  const std::size_t sizes[] = {1, 5, 50};
  double worst = 0.0;
  Stopwatch clock;
  for (int p = 0; p < 50; ++p) {
    const auto b = static_cast<Eigen::Index>(sizes[p % 3]);
    const auto victim = testing::random_embeddings(rng, b, width(rng));
    const auto attack = testing::random_embeddings(rng, b, width(rng));
    const auto map = fit_alignment(victim, attack);
    const auto oracle = testing::matmul(testing::jacobi_pinv(testing::to_dense(victim.values())),
                                        testing::to_dense(attack.values()));
    worst = std::max(worst, testing::rel_frobenius(testing::to_dense(map.weights), oracle));
  }
  const double t = clock.seconds();
  o.require(worst < 1e-6, "relative error " + sci(worst));
  o.require(t < 2.0, "took " + num(t, 2) + " s");
  if (o.pass) o.detail = "50 problems, worst relative error " + sci(worst) + ", " + num(t, 3) + " s";
  return o;
}

// ---------------------------------------------------------------------------
// 2. self-alignment

Outcome self_alignment() {
  Outcome o;
  std::mt19937_64 rng(102);
  const auto e = testing::random_embeddings(rng, 300, 32);
  const auto map = fit_alignment(e, e);
  const RowMatrix diff = map.weights - RowMatrix::Identity(32, 32);
  const double inf_norm = diff.cwiseAbs().rowwise().sum().maxCoeff();
  const double cosine = alignment_cosine(e, apply_alignment(e, map, false)).mean;
  o.require(inf_norm < 1e-5, "||W-I||inf = " + sci(inf_norm));
  o.require(cosine >= 0.999, "cosine " + num(cosine, 6));
  if (o.pass) o.detail = "||W-I||inf = " + sci(inf_norm) + ", mean cosine " + num(cosine, 6);
  return o;
}

// ---------------------------------------------------------------------------
// Synthetic dual-encoder leakage fixture shared by 3 and 4

struct LeakageFixture {
  std::vector<std::size_t> b_values = {1, 10, 100, 1000};
  std::vector<double> cosines;
  std::vector<std::vector<NeighborhoodItem>> items;  // per b: reference = attack top-K
  std::unique_ptr<NeighborhoodIndex> index;
  double seconds = 0.0;
};

const LeakageFixture& leakage_fixture() {
  static const LeakageFixture fx = [] {
    LeakageFixture f;
    Stopwatch clock;
    const auto corpus = synth::make_dual_encoder({});
    const auto split = make_split(corpus.attack.images.ids(), 3, 0, 500);
    const auto attack_test = corpus.attack.images.select(split.test);
    const auto victim_test = corpus.victim.select(split.test);

    const auto vocab = build_vocabulary(corpus.attack.tags, corpus.attack.records);
    RetrieverConfig rc;
    rc.dcn.hidden = {64, 32};
    rc.candidate_cap = 32;
    rc.ranker_epochs = 10;
    const std::span<const std::string> retriever_ids(split.train.data(), 800);
    const auto data = make_retrieval_dataset(corpus.attack.images, corpus.attack.records, vocab, retriever_ids);
    const auto model = train_ranker(train_projections(data, vocab, rc), data, vocab);
    const auto threads = hardware_threads();
    const auto reference = retrieve_topk_batch(model, vocab, attack_test, 10, threads);

    f.index = std::make_unique<NeighborhoodIndex>(vocab.embeddings());
    for (std::size_t b : f.b_values) {
      const std::span<const std::string> ids(split.train.data(), b);
      const auto map = fit_alignment(corpus.victim.select(ids), corpus.attack.images.select(ids));
      f.cosines.push_back(alignment_cosine(attack_test, apply_alignment(victim_test, map, false)).mean);
      const auto predicted = retrieve_topk_batch(model, vocab, apply_alignment(victim_test, map, true), 10, threads);
      std::vector<NeighborhoodItem> batch;
      for (std::size_t i = 0; i < predicted.size(); ++i) {
        batch.push_back({predicted[i].item_id, reference[i].tags(), predicted[i].tags()});
      }
      f.items.push_back(std::move(batch));
    }
    f.seconds = clock.seconds();
    return f;
  }();
  return fx;
}

// 3. leakage trend
Outcome leakage_trend() {
  Outcome o;
  const auto& f = leakage_fixture();
  std::string cos, gaps;
  for (std::size_t i = 0; i < f.b_values.size(); ++i) {
    cos += (i ? " < " : "") + num(f.cosines[i]);
    if (i) o.require(f.cosines[i] > f.cosines[i - 1], "cosine not increasing at b=" + std::to_string(f.b_values[i]));
    const std::vector<std::size_t> m = {50};
    const auto rep = neighborhood_report(f.items[i], *f.index, m, 10);
    const double gap = rep.mean[0].f1 - rep.exact_mean.f1;
    gaps += (i ? ", " : "") + std::string("b=") + std::to_string(f.b_values[i]) + ": " + num(rep.mean[0].f1) + " vs " +
            num(rep.exact_mean.f1);
    o.require(gap >= 0.2, "F1 gap " + num(gap) + " at b=" + std::to_string(f.b_values[i]));
  }
  o.require(f.seconds < 60.0, "took " + num(f.seconds, 1) + " s");
  o.detail = (o.pass ? "" : o.detail + " | ") + "cosine " + cos + "; F1@50 vs exact " + gaps + "; " + num(f.seconds, 1) + " s";
  return o;
}

// 4. monotone m-sweep
Outcome monotone_sweep() {
  Outcome o;
  std::size_t checked = 0;
  auto check = [&](const Strings& ref, const Strings& pred, const NeighborhoodIndex& index) {
    const NeighborhoodTable table(ref, pred, index);
    const auto exact = exact_retrieval_prf(ref, pred);
    double prev = -1.0;
    for (std::size_t m = 1; m <= index.size(); ++m) {
      const double f1 = table.at(m).f1;
      if (f1 < prev) o.require(false, "F1 decreased at m=" + std::to_string(m));
      prev = f1;
    }
    if (table.at(index.size()).f1 != 1.0) o.require(false, "F1(m=N) != 1");
    if (std::abs(table.at(1).f1 - exact.f1) > 1e-12) o.require(false, "F1(m=1) differs from exact");
    ++checked;
  };
  std::mt19937_64 rng(104);
  const auto vocab = testing::random_embeddings(rng, 40, 6, true, "tag");
  const NeighborhoodIndex random_index(vocab);
  std::uniform_int_distribution<std::size_t> pick(0, 39), size(1, 8);
  for (int trial = 0; trial < 300; ++trial) {
    Strings ref, pred;
    for (std::size_t i = size(rng); i > 0; --i) ref.push_back(vocab.ids()[pick(rng)]);
    for (std::size_t i = size(rng); i > 0; --i) pred.push_back(vocab.ids()[pick(rng)]);
    check(ref, pred, random_index);
  }
  const auto& f = leakage_fixture();
  for (const auto& batch : f.items) {
    for (const auto& it : batch) check(it.reference, it.predicted, *f.index);
  }
  if (o.pass) o.detail = std::to_string(checked) + " items over full m ranges";
  return o;
}

// ---------------------------------------------------------------------------
// 5. gradients

Outcome gradients() {
  Outcome o;
  std::mt19937_64 rng(105);
  double worst = 0.0;
  auto record = [&](double analytic, double numeric) {
    worst = std::max(worst, testing::relative_error(analytic, numeric));
  };

  {  // contrastive loss with respect to scores
    RowMatrix s = testing::random_matrix(rng, 5, 8) * 3.0;
    BoolMatrix pos = BoolMatrix::Constant(5, 8, false);
    for (int i = 0; i < 5; ++i) pos(i, i) = pos(i, (i + 3) % 8) = true;
    const BoolMatrix mask = hard_negative_mask(s, pos, 3);
    const auto loss = contrastive_loss(s, pos, &mask);
    std::uniform_int_distribution<int> row(0, 4), col(0, 7);
    for (int k = 0; k < 20;) {
      const int i = row(rng), j = col(rng);
      if (!mask(i, j)) continue;
      record(loss.grad(i, j), testing::central_difference([&] { return contrastive_loss(s, pos, &mask).total; }, s(i, j)));
      ++k;
    }
  }
  {  // contrastive loss with respect to projection parameters
    const Eigen::Index dim = 5;
    RetrieverConfig cfg;
    cfg.seed = 3;
    auto model = init_retriever(dim, cfg);
    auto& p = model.projections;
    p.image.bias = testing::random_matrix(rng, 1, dim) * 0.3;
    p.tag.bias = testing::random_matrix(rng, 1, dim) * 0.3;
    const RowMatrix images = testing::random_embeddings(rng, 4, dim).values();
    const RowMatrix tags = testing::random_embeddings(rng, 6, dim, true, "t").values();
    BoolMatrix pos = BoolMatrix::Constant(4, 6, false);
    pos(0, 0) = pos(0, 1) = pos(1, 2) = pos(2, 3) = pos(3, 4) = pos(3, 5) = true;
    ProjectionStage grad = zeros_like(p);
    contrastive_batch_loss(p, images, tags, pos, 512, &grad);
    auto params = parameter_spans(p);
    auto grads = parameter_spans(grad);
    auto f = [&] { return contrastive_batch_loss(p, images, tags, pos, 512, nullptr).total; };
    std::uniform_int_distribution<std::size_t> block(0, params.size() - 1);
    for (int k = 0; k < 20; ++k) {
      const std::size_t b = block(rng);
      const std::size_t i = std::uniform_int_distribution<std::size_t>(0, params[b].size() - 1)(rng);
      record(grads[b][i], testing::central_difference(f, params[b][i]));
    }
  }
  {  // ranker loss with respect to scores
    std::normal_distribution<double> score(0.0, 1.0);
    std::vector<RankGroup> groups(4);
    for (auto& g : groups) {
      for (int i = 0; i < 3; ++i) g.positives.push_back(score(rng));
      for (int i = 0; i < 8; ++i) g.negatives.push_back(score(rng));
    }
    const double margin = 5.0, ratio = 0.25;
    const auto loss = ranker_loss(groups, margin, ratio);
    std::uniform_int_distribution<std::size_t> which(0, groups.size() - 1), side(0, 1);
    for (int k = 0; k < 20; ++k) {
      auto& g = groups[which(rng)];
      const std::size_t gi = static_cast<std::size_t>(&g - groups.data());
      const bool positive = side(rng) == 0;
      auto& xs = positive ? g.positives : g.negatives;
      const std::size_t i = std::uniform_int_distribution<std::size_t>(0, xs.size() - 1)(rng);
      const double analytic = positive ? loss.d_positives[gi][i] : loss.d_negatives[gi][i];
      record(analytic, testing::central_difference([&] { return ranker_loss(groups, margin, ratio).loss; }, xs[i]));
    }
  }
  {  // ranker loss with respect to DCN parameters
    const Eigen::Index dim = 3;
    RetrieverConfig cfg;
    cfg.dcn.hidden = {8, 4};
    cfg.seed = 4;
    auto model = init_retriever(dim, cfg);
    model.ranker.head.weight = testing::random_matrix(rng, 1, 4);
    const auto imgs = testing::random_embeddings(rng, 3, dim);
    const auto tags = testing::random_embeddings(rng, 5, dim, true, "t");
    RankBatch batch;
    batch.features.resize(15, interaction_width(dim));
    for (Eigen::Index i = 0; i < 3; ++i) {
      batch.features.middleRows(5 * i, 5) = interaction_features_rows(imgs.row(i).transpose(), tags.values());
      batch.groups.push_back({5 * i, 2, 3, {"c", "d", "e"}});
    }
    DcnRanker grad = zeros_like(model.ranker);
    ranker_batch_loss(model.ranker, batch, 5.0, 1.0, &grad);
    auto params = parameter_spans(model.ranker);
    auto grads = parameter_spans(grad);
    auto f = [&] { return ranker_batch_loss(model.ranker, batch, 5.0, 1.0, nullptr); };
    std::uniform_int_distribution<std::size_t> block(0, params.size() - 1);
    for (int k = 0; k < 20; ++k) {
      const std::size_t b = block(rng);
      const std::size_t i = std::uniform_int_distribution<std::size_t>(0, params[b].size() - 1)(rng);
      record(grads[b][i], testing::central_difference(f, params[b][i]));
    }
  }
  o.require(worst < 1e-4, "worst relative error " + sci(worst));
  if (o.pass) o.detail = "80 coordinates, worst relative error " + sci(worst);
  return o;
}

// ---------------------------------------------------------------------------
// 6. learnability on the separable fixture

Outcome learnability() {
  Outcome o;
  const auto corpus = synth::make_separable({});
  const auto vocab = build_vocabulary(corpus.tags, corpus.records);
  const auto data = make_retrieval_dataset(corpus.images, corpus.records, vocab);
  RetrieverConfig cfg;
  cfg.dcn.hidden = {64, 32};
  cfg.candidate_cap = 32;

  const double untrained = recall_at_k(init_retriever(data.images.dim(), cfg), vocab, data, 10);
  auto run = [&](TrainingLog* proj, TrainingLog* rank) {
    return train_ranker(train_projections(data, vocab, cfg, proj), data, vocab, rank);
  };
  TrainingLog proj, rank;
  auto model = run(&proj, &rank);
  const double trained = recall_at_k(model, vocab, data, 10);
  const double proj_drop = 1.0 - proj.final_loss / proj.initial_loss;
  const double rank_drop = 1.0 - rank.final_loss / rank.initial_loss;

  auto again = run(nullptr, nullptr);
  bool identical = true;
  auto same = [&](auto a, auto b) {
    for (std::size_t k = 0; k < a.size(); ++k) identical = identical && std::equal(a[k].begin(), a[k].end(), b[k].begin());
  };
  same(parameter_spans(model.projections), parameter_spans(again.projections));
  same(parameter_spans(model.ranker), parameter_spans(again.ranker));

  o.require(proj.epoch_loss.size() == 20 && proj_drop >= 0.5, "contrastive drop " + num(proj_drop));
  o.require(rank.epoch_loss.size() == 50 && rank_drop >= 0.9, "ranker drop " + num(rank_drop));
  o.require(trained >= 0.9, "trained recall@10 " + num(trained));
  o.require(untrained <= 0.3, "untrained recall@10 " + num(untrained));
  o.require(identical, "reruns differ");
  o.detail = (o.pass ? "" : o.detail + " | ") + "contrastive -" + num(100 * proj_drop, 1) + "% in 20, ranker -" +
             num(100 * rank_drop, 1) + "% in 50, recall@10 " + num(trained) + " vs " + num(untrained) + " untrained" +
             (identical ? ", reruns bit-identical" : "");
  return o;
}

// ---------------------------------------------------------------------------
// 7. full-ratio ranker loss against all-pairs hinge

Outcome full_ratio_hinge() {
  Outcome o;
  std::mt19937_64 rng(107);
  std::uniform_int_distribution<int> groups(1, 6), size(1, 8);
  std::normal_distribution<double> score(0.0, 1.0);
  double worst = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<RankGroup> gs(static_cast<std::size_t>(groups(rng)));
    std::vector<std::vector<double>> pos, neg;
    for (auto& g : gs) {
      for (int i = size(rng); i > 0; --i) g.positives.push_back(score(rng));
      for (int i = size(rng); i > 0; --i) g.negatives.push_back(score(rng));
      pos.push_back(g.positives);
      neg.push_back(g.negatives);
    }
    const double margin = std::abs(score(rng));
    worst = std::max(worst, std::abs(ranker_loss(gs, margin, 1.0).loss - testing::all_pairs_hinge(pos, neg, margin)));
  }
  o.require(worst <= 1e-9, "max difference " + sci(worst));
  if (o.pass) o.detail = "200 instances, max difference " + sci(worst);
  return o;
}

// ---------------------------------------------------------------------------
// 8. text metrics

Outcome text_metrics() {
  Outcome o;
  std::ifstream in(fs::path(SLIME_FIXTURE_DIR) / "text_pairs.json");
  const auto pairs = nlohmann::json::parse(in).at("pairs");
  double worst = 0.0;
  std::size_t identity_checks = 0;
  for (const auto& p : pairs) {
    const std::string hyp = p.at("hypothesis");
    const Strings refs = p.at("references");
    const auto h = testing::words(hyp);
    std::vector<testing::Words> rw;
    for (const auto& r : refs) rw.push_back(testing::words(r));
    auto diff = [&](double a, double b) { worst = std::max(worst, std::abs(a - b)); };
    diff(bleu4(hyp, refs), testing::oracle_bleu4(h, rw));
    diff(rouge1(hyp, refs), testing::best_over(h, rw, [](auto& a, auto& b) { return testing::oracle_rouge_n(a, b, 1); }));
    diff(rouge2(hyp, refs), testing::best_over(h, rw, [](auto& a, auto& b) { return testing::oracle_rouge_n(a, b, 2); }));
    diff(rouge_l(hyp, refs), testing::best_over(h, rw, [](auto& a, auto& b) { return testing::oracle_rouge_l(a, b); }));
    diff(meteor(hyp, refs), testing::best_over(h, rw, [](auto& a, auto& b) { return testing::oracle_meteor(a, b); }));
    for (auto m : kTextMetrics) {
      // BLEU-4 needs at least one 4-gram.
      if (m == TextMetric::kBleu4 && h.size() < 4) continue;
      const double self = text_score(m, hyp, Strings{hyp});
      if (std::abs(self - 100.0) > 1e-9) o.require(false, std::string(metric_name(m)) + " identity " + num(self));
      ++identity_checks;
    }
  }
  const std::vector<std::pair<std::string, Strings>> disjoint = {
      {"purple rivers whistle loudly tonight", {"the cat is on the mat", "a dog sleeps here"}},
      {"seven frozen violins", {"kitchen table with two chairs"}},
      {"quantum marmalade orbits saturn quietly", {"a red car parked outside", "children playing football"}}};
  double disjoint_max = 0.0;
  for (const auto& [hyp, refs] : disjoint) {
    for (auto m : kTextMetrics) disjoint_max = std::max(disjoint_max, text_score(m, hyp, refs));
  }
  o.require(pairs.size() == 30, "corpus has " + std::to_string(pairs.size()) + " pairs");
  o.require(worst <= 1e-6, "oracle difference " + sci(worst));
  o.require(disjoint_max < 0.01, "disjoint score " + sci(disjoint_max));
  if (o.pass) {
    o.detail = "30 pairs, max oracle difference " + sci(worst) + ", " + std::to_string(identity_checks) +
               " identity checks, disjoint max " + sci(disjoint_max);
  }
  return o;
}

// ---------------------------------------------------------------------------
// 9. best-match dominance

Outcome best_match_dominance() {
  Outcome o;
  std::mt19937_64 rng(109);
  const Strings vocab = {"kitchen", "table", "chair", "the", "a", "on", "open", "space", "shelf", "light", "window", "sink"};
  std::uniform_int_distribution<std::size_t> word(0, vocab.size() - 1), len(1, 9), count(1, 4);
  auto sentence = [&] {
    std::string s;
    for (std::size_t i = len(rng); i > 0; --i) s += vocab[word(rng)] + " ";
    return s;
  };
  std::size_t violations = 0;
  for (int trial = 0; trial < 500; ++trial) {
    TextsByItem hyps, refs;
    for (int item = 0; item < 3; ++item) {
      const auto id = "item" + std::to_string(item);
      for (std::size_t i = count(rng); i > 0; --i) hyps[id].push_back(sentence());
      for (std::size_t i = count(rng) + 1; i > 0; --i) refs[id].push_back(sentence());
    }
    for (auto m : kTextMetrics) {
      if (best_match_score(hyps, refs, m).value < mean_match_score(hyps, refs, m).value) ++violations;
    }
  }
  o.require(violations == 0, std::to_string(violations) + " violations");
  if (o.pass) o.detail = "500 instances x 5 metrics";
  return o;
}

// ---------------------------------------------------------------------------
// 10 and 11: offline replay of the kitchen fixture

const fs::path kKitchen = fs::path(SLIME_FIXTURE_DIR) / "kitchen_sample";

struct ReplayRun {
  nlohmann::json adaptive;
  std::size_t mismatches = 0;
  std::string mismatch_list;
  std::size_t compared = 0;
  std::size_t network = 0;
  double seconds = 0.0;
};

const ReplayRun& replay_run() {
  static const ReplayRun run = [] {
    ReplayRun r;
    testing::TempDir out("slime-acceptance");
    Stopwatch clock;
    auto cfg = load_config(kKitchen / "config.json");
    cfg.output_dir = out.path();
    auto transport = std::make_shared<FailOnUseTransport>();
    auto client = make_client(cfg, transport);
    run_caption_attack(cfg, *client);
    r.adaptive = run_adaptive_attack(cfg, *client).report;
    r.seconds = clock.seconds();
    r.network = transport->attempts() + client->network_calls();
    for (const auto& e : fs::directory_iterator(kKitchen / "expected")) {
      ++r.compared;
      const auto produced = out.path() / e.path().filename();
      if (!fs::exists(produced) || slurp(produced) != slurp(e.path())) {
        ++r.mismatches;
        r.mismatch_list += " " + e.path().filename().string();
      }
    }
    return r;
  }();
  return run;
}

Outcome offline_replay() {
  Outcome o;
  const auto& r = replay_run();
  o.require(r.compared > 0, "no committed reports found");
  o.require(r.mismatches == 0, "differs:" + r.mismatch_list);
  o.require(r.network == 0, std::to_string(r.network) + " network attempts");
  o.require(r.seconds < 10.0, "took " + num(r.seconds, 2) + " s");
  if (o.pass) {
    o.detail = std::to_string(r.compared) + " files byte-identical, 0 network calls, " + num(r.seconds, 3) + " s";
  }
  return o;
}

// Relation lists of the kitchen sample, as printed for the reference scene and
// the scene recovered through the victim embedding.
using Triple = std::tuple<std::string, std::string, std::string>;
const std::set<Triple> kReferenceRelations = {
    {"chair", "next_to", "table"},     {"microwave", "on", "shelf"},     {"toaster oven", "on", "shelf"},
    {"shelf", "next_to", "refrigerator"}, {"sink", "next_to", "cabinet"}, {"cabinet", "over", "sink"},
    {"sofa", "next_to", "table"},      {"blind", "covering", "window"}, {"lighting", "hanging_over", "table"},
    {"shelf", "next_to", "blind"}};
const std::set<Triple> kVictimRelations = {
    {"chair", "next_to", "table"},          {"potted plant", "on", "table"},
    {"cabinet", "over", "countertop"},      {"stove", "part_of", "countertop"},
    {"kitchen sink", "part_of", "countertop"}, {"light fixture", "hanging_over", "table"},
    {"cabinet", "next_to", "window"}};

Outcome structured_fixture() {
  Outcome o;
  std::size_t shared = 0;
  for (const auto& t : kVictimRelations) shared += kReferenceRelations.count(t);
  const double p = static_cast<double>(shared) / static_cast<double>(kVictimRelations.size());
  const double r = static_cast<double>(shared) / static_cast<double>(kReferenceRelations.size());
  const double expected_f1 = p + r > 0 ? 2 * p * r / (p + r) : 0.0;

  // Library scoring of the same lists.
  SceneBuilder ref, pred;
  for (const auto& [s, rel, t] : kReferenceRelations) ref.relation(s, rel, t);
  for (const auto& [s, rel, t] : kVictimRelations) pred.relation(s, rel, t);
  ref.scene("kitchen", 0.95).scene("living room", 0.40);
  pred.scene("kitchen", 1.0);
  const auto f = structured_f1(pred.build(), ref.build());
  o.require(std::abs(f.triples.f1 - expected_f1) < 1e-12, "triple F1 " + num(f.triples.f1, 6));
  o.require(f.scenes.precision == 1.0 && f.scenes.recall == 0.5, "scene P/R " + num(f.scenes.precision) + "/" + num(f.scenes.recall));

  // The same numbers from the replayed pipeline.
  const auto& run = replay_run();
  const nlohmann::json* row = nullptr;
  for (const auto& x : run.adaptive.at("rows")) {
    if (x.at("setting") == "captions+image") row = &x;
  }
  o.require(row != nullptr, "no captions+image row in the adaptive report");
  if (row) {
    o.require(row->at("scene_precision").get<double>() == 1.0, "pipeline scene precision");
    o.require(row->at("scene_recall").get<double>() == 0.5, "pipeline scene recall");
    o.require(std::abs(row->at("triple_f1").get<double>() - expected_f1) < 1e-12, "pipeline triple F1");
  }
  if (o.pass) {
    o.detail = "scene precision 1, recall 0.5, triple F1 " + std::to_string(shared) + " shared of " +
               std::to_string(kVictimRelations.size()) + "/" + std::to_string(kReferenceRelations.size()) + " = " +
               num(expected_f1, 6) + " (library and replayed pipeline)";
  }
  return o;
}

}  // namespace

int main() {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"alignment oracle", alignment_oracle},
      {"self-alignment", self_alignment},
      {"leakage trend", leakage_trend},
      {"monotone m-sweep", monotone_sweep},
      {"gradient check", gradients},
      {"retriever learnability", learnability},
      {"full-ratio ranker loss", full_ratio_hinge},
      {"text metrics", text_metrics},
      {"best-match dominance", best_match_dominance},
      {"offline replay", offline_replay},
      {"kitchen structured F1", structured_fixture},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("exception: ") + e.what();
    }
    failed += !o.pass;
    std::printf("%s %2zu %s: %s\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first, o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%zu/%zu criteria passed\n", criteria.size() - static_cast<std::size_t>(failed), criteria.size());
  return failed ? 1 : 0;
}
