#pragma once

// Local retriever: residual projections trained with a symmetric multi-positive
// contrastive loss, followed by a deep-cross ranker trained with a grouped
// margin loss over hard negatives. Serves exact top-K tag retrieval.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <thread>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <json.hpp>

#include "slime/dcn.hpp"
#include "slime/digest.hpp"
#include "slime/embedding_store.hpp"
#include "slime/error.hpp"
#include "slime/optim.hpp"
#include "slime/top_k.hpp"

namespace slime {

// ---------------------------------------------------------------------------
// Vocabulary and training data

class TagVocabulary {
 public:
  TagVocabulary() = default;

  /// `embeddings` ids are the tag phrases. Rows are l2-normalized if needed.
  explicit TagVocabulary(const EmbeddingMatrix& embeddings)
      : embeddings_(embeddings.normalized() ? embeddings : l2_normalize(embeddings)) {
    for (std::size_t i = 0; i < embeddings_.ids().size(); ++i) index_.emplace(embeddings_.ids()[i], i);
  }

  std::size_t size() const noexcept { return embeddings_.ids().size(); }
  Eigen::Index dim() const noexcept { return embeddings_.dim(); }
  const std::vector<std::string>& tags() const noexcept { return embeddings_.ids(); }
  const EmbeddingMatrix& embeddings() const noexcept { return embeddings_; }

  std::optional<std::size_t> find(std::string_view tag) const {
    auto it = index_.find(std::string(tag));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

 private:
  EmbeddingMatrix embeddings_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Restricts `tag_embeddings` to phrases referenced by at least one record,
/// keeping the embedding file's order.
inline TagVocabulary build_vocabulary(const EmbeddingMatrix& tag_embeddings, std::span<const TagRecord> records) {
  std::unordered_set<std::string> used;
  for (const auto& r : records) used.insert(r.tags.begin(), r.tags.end());
  std::vector<std::string> keep;
  for (const auto& t : tag_embeddings.ids()) {
    if (used.count(t)) keep.push_back(t);
  }
  if (keep.empty()) fail(Errc::kEmptySet, "no tag in the records has an embedding");
  return TagVocabulary(tag_embeddings.select(keep));
}

struct RetrievalDataset {
  EmbeddingMatrix images;                         // attack-space image embeddings
  std::vector<std::vector<std::size_t>> positives;  // vocabulary indices per image
  std::size_t dropped_images = 0;                 // images without any known tag
};

/// Pairs image embeddings with their in-vocabulary tags. When `ids` is empty,
/// every record with an embedding is used.
inline RetrievalDataset make_retrieval_dataset(const EmbeddingMatrix& images, std::span<const TagRecord> records,
                                               const TagVocabulary& vocab, std::span<const std::string> ids = {}) {
  std::unordered_map<std::string, const TagRecord*> by_id;
  for (const auto& r : records) by_id[r.image_id] = &r;
  std::vector<std::string> wanted;
  if (ids.empty()) {
    for (const auto& r : records) wanted.push_back(r.image_id);
  } else {
    wanted.assign(ids.begin(), ids.end());
  }
  RetrievalDataset ds;
  std::vector<std::string> kept;
  for (const auto& id : wanted) {
    auto it = by_id.find(id);
    if (it == by_id.end() || !images.find(id)) {
      ++ds.dropped_images;
      continue;
    }
    std::vector<std::size_t> pos;
    for (const auto& t : it->second->tags) {
      if (auto k = vocab.find(t)) pos.push_back(*k);
    }
    std::sort(pos.begin(), pos.end());
    pos.erase(std::unique(pos.begin(), pos.end()), pos.end());
    if (pos.empty()) {
      ++ds.dropped_images;
      continue;
    }
    kept.push_back(id);
    ds.positives.push_back(std::move(pos));
  }
  const auto selected = images.select(kept);
  ds.images = selected.normalized() ? selected : l2_normalize(selected);
  return ds;
}

// ---------------------------------------------------------------------------
// Model

struct RetrieverConfig {
  // contrastive stage
  int projection_epochs = 20;
  double projection_lr = 0.05;
  double residual_gamma = 0.1;
  double init_log_temperature = std::log(14.3);
  // ranker stage
  int ranker_epochs = 50;
  double ranker_lr = 0.1;
  double margin = 0.5;
  double hard_negative_ratio = 0.25;
  DcnConfig dcn;
  bool ranker_uses_projected = true;
  // shared
  int batch_size = 32;
  double momentum = 0.9;
  double grad_clip = 5.0;
  std::size_t candidate_cap = 512;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const {
    return {{"projection_epochs", projection_epochs},
            {"projection_lr", projection_lr},
            {"residual_gamma", residual_gamma},
            {"init_log_temperature", init_log_temperature},
            {"ranker_epochs", ranker_epochs},
            {"ranker_lr", ranker_lr},
            {"margin", margin},
            {"hard_negative_ratio", hard_negative_ratio},
            {"cross_layers", dcn.cross_layers},
            {"hidden", dcn.hidden},
            {"ranker_uses_projected", ranker_uses_projected},
            {"batch_size", batch_size},
            {"momentum", momentum},
            {"grad_clip", grad_clip},
            {"candidate_cap", candidate_cap},
            {"seed", seed}};
  }

  /// Missing keys keep their defaults.
  static RetrieverConfig from_json(const nlohmann::json& j) {
    RetrieverConfig c;
    try {
      c.projection_epochs = j.value("projection_epochs", c.projection_epochs);
      c.projection_lr = j.value("projection_lr", c.projection_lr);
      c.residual_gamma = j.value("residual_gamma", c.residual_gamma);
      c.init_log_temperature = j.value("init_log_temperature", c.init_log_temperature);
      c.ranker_epochs = j.value("ranker_epochs", c.ranker_epochs);
      c.ranker_lr = j.value("ranker_lr", c.ranker_lr);
      c.margin = j.value("margin", c.margin);
      c.hard_negative_ratio = j.value("hard_negative_ratio", c.hard_negative_ratio);
      c.dcn.cross_layers = j.value("cross_layers", c.dcn.cross_layers);
      c.dcn.hidden = j.value("hidden", c.dcn.hidden);
      c.ranker_uses_projected = j.value("ranker_uses_projected", c.ranker_uses_projected);
      c.batch_size = j.value("batch_size", c.batch_size);
      c.momentum = j.value("momentum", c.momentum);
      c.grad_clip = j.value("grad_clip", c.grad_clip);
      c.candidate_cap = j.value("candidate_cap", c.candidate_cap);
      c.seed = j.value("seed", c.seed);
    } catch (const nlohmann::json::exception& e) {
      fail(Errc::kConfigError, std::string("retriever config: ") + e.what());
    }
    if (c.batch_size < 2) fail(Errc::kConfigError, "batch_size must be at least 2");
    if (c.hard_negative_ratio < 0.0 || c.hard_negative_ratio > 1.0) {
      fail(Errc::kConfigError, "hard_negative_ratio must lie in [0, 1]");
    }
    if (c.candidate_cap < 1) fail(Errc::kConfigError, "candidate_cap must be positive");
    return c;
  }

  std::string hash() const { return sha256_hex(to_json().dump()); }
};

// output = normalize(e + gamma * (W e + b))
struct ResidualProjection {
  RowMatrix weight;  // n x n
  RowMatrix bias;    // 1 x n
  double gamma = 0.1;
};

struct ProjectionStage {
  ResidualProjection image;
  ResidualProjection tag;
  double log_temperature = 0.0;

  double temperature() const { return std::exp(log_temperature); }
};

inline ProjectionStage zeros_like(const ProjectionStage& p) {
  ProjectionStage z;
  z.image = {RowMatrix::Zero(p.image.weight.rows(), p.image.weight.cols()), RowMatrix::Zero(1, p.image.bias.cols()), 0.0};
  z.tag = {RowMatrix::Zero(p.tag.weight.rows(), p.tag.weight.cols()), RowMatrix::Zero(1, p.tag.bias.cols()), 0.0};
  z.log_temperature = 0.0;
  return z;
}

inline std::vector<std::span<double>> parameter_spans(ProjectionStage& p) {
  std::vector<std::span<double>> out;
  auto add = [&](RowMatrix& x) { out.emplace_back(x.data(), static_cast<std::size_t>(x.size())); };
  add(p.image.weight);
  add(p.image.bias);
  out.emplace_back(&p.image.gamma, 1);
  add(p.tag.weight);
  add(p.tag.bias);
  out.emplace_back(&p.tag.gamma, 1);
  out.emplace_back(&p.log_temperature, 1);
  return out;
}

struct RetrieverModel {
  ProjectionStage projections;
  DcnRanker ranker;
  RetrieverConfig config;

  Eigen::Index dim() const { return projections.image.weight.rows(); }
  double temperature() const { return projections.temperature(); }
};

/// Near-identity projections (small random residual weights, zero bias) and a
/// zero-head ranker over 4n+1 interaction features.
inline RetrieverModel init_retriever(Eigen::Index dim, const RetrieverConfig& config) {
  if (dim < 1) fail(Errc::kInvalidArgument, "embedding dimension must be positive");
  std::mt19937_64 rng(config.seed);
  auto residual = [&]() {
    const double scale = 0.1 / std::sqrt(static_cast<double>(dim));
    std::normal_distribution<double> normal(0.0, scale);
    ResidualProjection p;
    p.weight.resize(dim, dim);
    for (Eigen::Index i = 0; i < p.weight.size(); ++i) p.weight.data()[i] = normal(rng);
    p.bias = RowMatrix::Zero(1, dim);
    p.gamma = config.residual_gamma;
    return p;
  };
  RetrieverModel m;
  m.config = config;
  m.projections.image = residual();
  m.projections.tag = residual();
  m.projections.log_temperature = config.init_log_temperature;
  m.ranker = init_dcn(4 * dim + 1, config.dcn, rng);
  return m;
}

enum class Modality { kImage, kTag };

namespace detail {

struct ProjectedRows {
  RowMatrix inner;   // W e + b
  RowMatrix pre;     // e + gamma * inner
  Vector norms;      // |pre| per row
  RowMatrix out;     // pre / |pre|
};

inline ProjectedRows project_rows_cached(const ResidualProjection& p, const RowMatrix& e) {
  if (e.cols() != p.weight.cols()) {
    fail(Errc::kDimMismatch, "projection expects dim " + std::to_string(p.weight.cols()) + ", got " +
                                 std::to_string(e.cols()));
  }
  ProjectedRows r;
  r.inner = e * p.weight.transpose();
  r.inner.rowwise() += p.bias.row(0);
  r.pre = e + p.gamma * r.inner;
  r.norms = r.pre.rowwise().norm();
  if ((r.norms.array() < kZeroRowNorm).any()) fail(Errc::kZeroRow, "projection collapsed a row to zero");
  r.out = r.norms.cwiseInverse().asDiagonal() * r.pre;
  return r;
}

// Backward through normalize + residual affine; accumulates into grad.
inline void project_rows_backward(const ResidualProjection& p, const RowMatrix& e, const ProjectedRows& r,
                                  const RowMatrix& dout, ResidualProjection& grad) {
  const Vector radial = (r.out.cwiseProduct(dout)).rowwise().sum();
  RowMatrix dpre = dout - radial.asDiagonal() * r.out;
  dpre = r.norms.cwiseInverse().asDiagonal() * dpre;
  grad.gamma += dpre.cwiseProduct(r.inner).sum();
  const RowMatrix dinner = p.gamma * dpre;
  grad.weight.noalias() += dinner.transpose() * e;
  grad.bias.row(0) += dinner.colwise().sum();
}

}  // namespace detail

inline RowMatrix project_rows(const RetrieverModel& model, const RowMatrix& e, Modality modality) {
  const auto& p = modality == Modality::kImage ? model.projections.image : model.projections.tag;
  return detail::project_rows_cached(p, e).out;
}

inline Vector project(const RetrieverModel& model, const Vector& e, Modality modality) {
  RowMatrix row = e.transpose();
  return project_rows(model, row, modality).row(0).transpose();
}

/// S = alpha * (projected images)(projected tags)^T.
inline RowMatrix similarities(const RetrieverModel& model, const RowMatrix& images, const RowMatrix& tags) {
  return model.temperature() * project_rows(model, images, Modality::kImage) *
         project_rows(model, tags, Modality::kTag).transpose();
}

// ---------------------------------------------------------------------------
// Contrastive loss

using BoolMatrix = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ContrastiveLoss {
  double image_to_tag = 0.0;
  double tag_to_image = 0.0;
  double total = 0.0;
  RowMatrix grad;  // d total / d S
};

/// Symmetric multi-positive InfoNCE over a B x N similarity matrix. Every row
/// needs a positive; columns without one are left out of the tag-to-image
/// term. `mask`, when given, restricts every softmax denominator to the marked
/// entries (positives are always included).
inline ContrastiveLoss contrastive_loss(const RowMatrix& s, const BoolMatrix& membership,
                                        const BoolMatrix* mask = nullptr) {
  const Eigen::Index b = s.rows(), n = s.cols();
  if (membership.rows() != b || membership.cols() != n || (mask && (mask->rows() != b || mask->cols() != n))) {
    fail(Errc::kDimMismatch, "similarity, membership and mask shapes differ");
  }
  if (b == 0 || n == 0) fail(Errc::kEmptySet, "contrastive loss needs a non-empty similarity matrix");
  auto in_mask = [&](Eigen::Index i, Eigen::Index j) { return !mask || (*mask)(i, j) || membership(i, j); };

  ContrastiveLoss out;
  RowMatrix grad_rows = RowMatrix::Zero(b, n);
  RowMatrix grad_cols = RowMatrix::Zero(b, n);

  for (Eigen::Index i = 0; i < b; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    Eigen::Index npos = 0;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (in_mask(i, j)) mx = std::max(mx, s(i, j));
      npos += membership(i, j) ? 1 : 0;
    }
    if (npos == 0) fail(Errc::kEmptyPositives, "image row " + std::to_string(i) + " has no positive tag");
    double z = 0.0;
    for (Eigen::Index j = 0; j < n; ++j)
      if (in_mask(i, j)) z += std::exp(s(i, j) - mx);
    const double lse = mx + std::log(z);
    double li = 0.0;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (membership(i, j)) li -= (s(i, j) - lse);
      if (in_mask(i, j)) {
        grad_rows(i, j) = std::exp(s(i, j) - lse) - (membership(i, j) ? 1.0 / static_cast<double>(npos) : 0.0);
      }
    }
    out.image_to_tag += li / static_cast<double>(npos);
  }
  out.image_to_tag /= static_cast<double>(b);
  grad_rows /= static_cast<double>(b);

  Eigen::Index used_cols = 0;
  for (Eigen::Index j = 0; j < n; ++j) {
    double mx = -std::numeric_limits<double>::infinity();
    Eigen::Index npos = 0;
    for (Eigen::Index i = 0; i < b; ++i) {
      if (in_mask(i, j)) mx = std::max(mx, s(i, j));
      npos += membership(i, j) ? 1 : 0;
    }
    if (npos == 0) continue;  // column does not take part in the tag-to-image term
    ++used_cols;
    double z = 0.0;
    for (Eigen::Index i = 0; i < b; ++i)
      if (in_mask(i, j)) z += std::exp(s(i, j) - mx);
    const double lse = mx + std::log(z);
    double lj = 0.0;
    for (Eigen::Index i = 0; i < b; ++i) {
      if (membership(i, j)) lj -= (s(i, j) - lse);
      if (in_mask(i, j)) {
        grad_cols(i, j) = std::exp(s(i, j) - lse) - (membership(i, j) ? 1.0 / static_cast<double>(npos) : 0.0);
      }
    }
    out.tag_to_image += lj / static_cast<double>(npos);
  }
  out.tag_to_image /= static_cast<double>(used_cols);
  grad_cols /= static_cast<double>(used_cols);

  out.total = 0.5 * (out.image_to_tag + out.tag_to_image);
  out.grad = 0.5 * (grad_rows + grad_cols);
  return out;
}

/// Positives plus the `cap` highest-similarity negatives of every row.
inline BoolMatrix hard_negative_mask(const RowMatrix& s, const BoolMatrix& membership, std::size_t cap) {
  BoolMatrix mask = membership;
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    std::vector<double> neg_scores;
    std::vector<Eigen::Index> neg_cols;
    for (Eigen::Index j = 0; j < s.cols(); ++j) {
      if (!membership(i, j)) {
        neg_scores.push_back(s(i, j));
        neg_cols.push_back(j);
      }
    }
    for (std::size_t k : top_k_indices<double, int>(neg_scores, cap)) mask(i, neg_cols[k]) = true;
  }
  return mask;
}

/// Contrastive loss of one batch under the model, with gradients for every
/// projection parameter and the log-temperature when `grad` is non-null.
inline ContrastiveLoss contrastive_batch_loss(const ProjectionStage& p, const RowMatrix& images,
                                              const RowMatrix& tags, const BoolMatrix& membership,
                                              std::size_t candidate_cap, ProjectionStage* grad) {
  const auto img = detail::project_rows_cached(p.image, images);
  const auto tag = detail::project_rows_cached(p.tag, tags);
  const double alpha = p.temperature();
  const RowMatrix s = alpha * img.out * tag.out.transpose();
  const BoolMatrix mask = hard_negative_mask(s, membership, candidate_cap);
  ContrastiveLoss loss = contrastive_loss(s, membership, &mask);
  if (grad) {
    grad->log_temperature += loss.grad.cwiseProduct(s).sum();
    const RowMatrix d_img = alpha * loss.grad * tag.out;
    const RowMatrix d_tag = alpha * loss.grad.transpose() * img.out;
    detail::project_rows_backward(p.image, images, img, d_img, grad->image);
    detail::project_rows_backward(p.tag, tags, tag, d_tag, grad->tag);
  }
  return loss;
}

// ---------------------------------------------------------------------------
// Interaction features and ranker

inline Eigen::Index interaction_width(Eigen::Index dim) { return 4 * dim + 1; }

/// [e_i; e_t; cos; e_i * e_t; e_i - e_t]
inline Vector interaction_features(const Vector& image, const Vector& tag) {
  if (image.size() != tag.size()) fail(Errc::kDimMismatch, "image and tag embeddings differ in dimension");
  const Eigen::Index n = image.size();
  const double denom = image.norm() * tag.norm();
  Vector phi(interaction_width(n));
  phi.segment(0, n) = image;
  phi.segment(n, n) = tag;
  phi(2 * n) = denom > 0.0 ? image.dot(tag) / denom : 0.0;
  phi.segment(2 * n + 1, n) = image.cwiseProduct(tag);
  phi.segment(3 * n + 1, n) = image - tag;
  return phi;
}

/// Row-wise features of one image against many tags.
inline RowMatrix interaction_features_rows(const Vector& image, const RowMatrix& tags) {
  const Eigen::Index n = image.size();
  if (tags.cols() != n) fail(Errc::kDimMismatch, "image and tag embeddings differ in dimension");
  RowMatrix phi(tags.rows(), interaction_width(n));
  const double image_norm = image.norm();
  for (Eigen::Index r = 0; r < tags.rows(); ++r) {
    const auto t = tags.row(r);
    const double denom = image_norm * t.norm();
    phi.block(r, 0, 1, n) = image.transpose();
    phi.block(r, n, 1, n) = t;
    phi(r, 2 * n) = denom > 0.0 ? t.dot(image) / denom : 0.0;
    phi.block(r, 2 * n + 1, 1, n) = image.transpose().cwiseProduct(t);
    phi.block(r, 3 * n + 1, 1, n) = image.transpose() - t;
  }
  return phi;
}

inline double ranker_score(const RetrieverModel& model, const Vector& phi) {
  RowMatrix row = phi.transpose();
  return dcn_forward(model.ranker, row)(0);
}

struct RankGroup {
  std::vector<double> positives;
  std::vector<double> negatives;
  std::vector<std::string> negative_tags;  // optional tie-break keys, parallel to negatives
};

struct RankLoss {
  double loss = 0.0;
  std::vector<std::vector<double>> d_positives;  // per group
  std::vector<std::vector<double>> d_negatives;
};

/// |H_u| = max(1, floor(ratio * |N_u|)).
inline std::size_t hard_negative_count(std::size_t negatives, double ratio) {
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(ratio * static_cast<double>(negatives))));
}

/// Grouped pairwise hinge: mean over groups of the mean over (positive, hard
/// negative) pairs of max(0, margin - (s_p - s_h)). Hard negatives are the
/// top-scoring negatives of the group.
inline RankLoss ranker_loss(std::span<const RankGroup> groups, double margin, double ratio) {
  if (groups.empty()) fail(Errc::kEmptySet, "ranker loss needs at least one group");
  RankLoss out;
  const double inv_groups = 1.0 / static_cast<double>(groups.size());
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const auto& grp = groups[g];
    if (grp.positives.empty() || grp.negatives.empty()) {
      fail(Errc::kEmptyGroupSide, "group " + std::to_string(g) + " lacks positives or negatives");
    }
    const std::size_t h = std::min(hard_negative_count(grp.negatives.size(), ratio), grp.negatives.size());
    const auto hard = top_k_indices<double, std::string>(grp.negatives, h, grp.negative_tags);
    std::vector<double> dpos(grp.positives.size(), 0.0), dneg(grp.negatives.size(), 0.0);
    const double w = inv_groups / static_cast<double>(grp.positives.size() * hard.size());
    double sum = 0.0;
    for (std::size_t p = 0; p < grp.positives.size(); ++p) {
      for (std::size_t k : hard) {
        const double violation = margin - (grp.positives[p] - grp.negatives[k]);
        if (violation > 0.0) {
          sum += violation;
          dpos[p] -= w;
          dneg[k] += w;
        }
      }
    }
    out.loss += sum * w;
    out.d_positives.push_back(std::move(dpos));
    out.d_negatives.push_back(std::move(dneg));
  }
  return out;
}

/// Stacked ranker inputs for several images: rows [start, start+n_pos) are
/// positives, the next n_neg rows negatives.
struct RankBatch {
  struct Group {
    Eigen::Index start = 0;
    Eigen::Index n_pos = 0;
    Eigen::Index n_neg = 0;
    std::vector<std::string> negative_tags;
  };
  RowMatrix features;
  std::vector<Group> groups;
};

inline double ranker_batch_loss(const DcnRanker& ranker, const RankBatch& batch, double margin, double ratio,
                                DcnRanker* grad) {
  DcnCache cache;
  const Vector scores = dcn_forward(ranker, batch.features, grad ? &cache : nullptr);
  std::vector<RankGroup> groups;
  groups.reserve(batch.groups.size());
  for (const auto& g : batch.groups) {
    RankGroup rg;
    rg.positives.assign(scores.data() + g.start, scores.data() + g.start + g.n_pos);
    rg.negatives.assign(scores.data() + g.start + g.n_pos, scores.data() + g.start + g.n_pos + g.n_neg);
    rg.negative_tags = g.negative_tags;
    groups.push_back(std::move(rg));
  }
  const RankLoss loss = ranker_loss(groups, margin, ratio);
  if (grad) {
    Vector dscores = Vector::Zero(scores.size());
    for (std::size_t k = 0; k < batch.groups.size(); ++k) {
      const auto& g = batch.groups[k];
      for (Eigen::Index p = 0; p < g.n_pos; ++p) dscores(g.start + p) = loss.d_positives[k][p];
      for (Eigen::Index q = 0; q < g.n_neg; ++q) dscores(g.start + g.n_pos + q) = loss.d_negatives[k][q];
    }
    dcn_backward(ranker, cache, dscores, *grad);
  }
  return loss.loss;
}

// ---------------------------------------------------------------------------
// Training

struct TrainingLog {
  std::string stage;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  std::vector<double> epoch_loss;  // running mean over each epoch's batches
  std::size_t skipped_groups = 0;

  nlohmann::json to_json() const {
    return {{"stage", stage},
            {"initial_loss", initial_loss},
            {"final_loss", final_loss},
            {"epoch_loss", epoch_loss},
            {"skipped_groups", skipped_groups}};
  }
};

namespace detail {

inline std::vector<std::vector<std::size_t>> make_batches(std::size_t n, std::size_t batch_size, std::mt19937_64* rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (rng) {
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[slime::detail::bounded(*rng, i)]);
  }
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t s = 0; s < n; s += batch_size) {
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(s),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(n, s + batch_size)));
  }
  // A trailing singleton batch has no in-batch negatives; fold it back.
  if (batches.size() > 1 && batches.back().size() < 2) {
    batches[batches.size() - 2].push_back(batches.back().front());
    batches.pop_back();
  }
  return batches;
}

struct ContrastiveBatch {
  RowMatrix images;
  RowMatrix tags;
  BoolMatrix membership;
};

inline ContrastiveBatch gather_contrastive(const RetrievalDataset& ds, const TagVocabulary& vocab,
                                           const std::vector<std::size_t>& batch) {
  std::vector<std::size_t> tag_ids;
  for (std::size_t i : batch) tag_ids.insert(tag_ids.end(), ds.positives[i].begin(), ds.positives[i].end());
  std::sort(tag_ids.begin(), tag_ids.end());
  tag_ids.erase(std::unique(tag_ids.begin(), tag_ids.end()), tag_ids.end());
  std::unordered_map<std::size_t, Eigen::Index> col;
  for (std::size_t k = 0; k < tag_ids.size(); ++k) col[tag_ids[k]] = static_cast<Eigen::Index>(k);

  ContrastiveBatch out;
  const auto b = static_cast<Eigen::Index>(batch.size());
  const auto t = static_cast<Eigen::Index>(tag_ids.size());
  out.images.resize(b, ds.images.dim());
  out.tags.resize(t, vocab.dim());
  out.membership = BoolMatrix::Constant(b, t, false);
  for (Eigen::Index r = 0; r < b; ++r) {
    out.images.row(r) = ds.images.row(static_cast<Eigen::Index>(batch[r]));
    for (std::size_t k : ds.positives[batch[r]]) out.membership(r, col[k]) = true;
  }
  for (Eigen::Index c = 0; c < t; ++c) out.tags.row(c) = vocab.embeddings().row(static_cast<Eigen::Index>(tag_ids[c]));
  return out;
}

inline void check_finite(double loss, const std::string& stage, int epoch, std::size_t batch) {
  if (!std::isfinite(loss)) {
    fail(Errc::kDivergence, stage + " loss became non-finite at epoch " + std::to_string(epoch) + ", batch " +
                                std::to_string(batch));
  }
}

}  // namespace detail

/// Mean contrastive loss over deterministic, unshuffled batches.
inline double evaluate_contrastive(const ProjectionStage& p, const RetrievalDataset& ds, const TagVocabulary& vocab,
                                   const RetrieverConfig& cfg) {
  const auto batches = detail::make_batches(ds.positives.size(), static_cast<std::size_t>(cfg.batch_size), nullptr);
  double sum = 0.0;
  for (const auto& batch : batches) {
    const auto data = detail::gather_contrastive(ds, vocab, batch);
    sum += contrastive_batch_loss(p, data.images, data.tags, data.membership, cfg.candidate_cap, nullptr).total;
  }
  return batches.empty() ? 0.0 : sum / static_cast<double>(batches.size());
}

/// Trains a fresh model's projections and temperature. The ranker is left at
/// its initialization.
inline RetrieverModel train_projections(const RetrievalDataset& ds, const TagVocabulary& vocab,
                                        const RetrieverConfig& cfg, TrainingLog* log = nullptr) {
  if (ds.positives.empty()) fail(Errc::kEmptySet, "training split is empty");
  if (cfg.batch_size < 2) fail(Errc::kConfigError, "batch_size must be at least 2");
  if (ds.images.dim() != vocab.dim()) fail(Errc::kDimMismatch, "image and tag embeddings differ in dimension");

  RetrieverModel model = init_retriever(ds.images.dim(), cfg);
  TrainingLog local;
  local.stage = "projections";
  local.initial_loss = evaluate_contrastive(model.projections, ds, vocab, cfg);

  std::mt19937_64 rng(cfg.seed ^ 0x70726f6aULL);
  MomentumSgd sgd(cfg.momentum);
  const std::size_t steps_per_epoch =
      detail::make_batches(ds.positives.size(), static_cast<std::size_t>(cfg.batch_size), nullptr).size();
  const std::size_t total_steps = steps_per_epoch * static_cast<std::size_t>(std::max(cfg.projection_epochs, 0));
  std::size_t step = 0;
  for (int epoch = 0; epoch < cfg.projection_epochs; ++epoch) {
    const auto batches = detail::make_batches(ds.positives.size(), static_cast<std::size_t>(cfg.batch_size), &rng);
    double epoch_sum = 0.0;
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      const auto data = detail::gather_contrastive(ds, vocab, batches[bi]);
      ProjectionStage grad = zeros_like(model.projections);
      const auto loss = contrastive_batch_loss(model.projections, data.images, data.tags, data.membership,
                                               cfg.candidate_cap, &grad);
      detail::check_finite(loss.total, "contrastive", epoch, bi);
      epoch_sum += loss.total;
      auto grads = parameter_spans(grad);
      clip_global_norm(grads, cfg.grad_clip);
      auto params = parameter_spans(model.projections);
      sgd.step(params, grads, cosine_lr(cfg.projection_lr, step++, total_steps));
    }
    local.epoch_loss.push_back(epoch_sum / static_cast<double>(batches.size()));
  }
  local.final_loss = evaluate_contrastive(model.projections, ds, vocab, cfg);
  detail::check_finite(local.final_loss, "contrastive", cfg.projection_epochs, 0);
  if (log) *log = std::move(local);
  return model;
}

namespace detail {

// Embeddings fed to the ranker: projected or raw, per config.
inline RowMatrix ranker_space(const RetrieverModel& model, const RowMatrix& e, Modality modality) {
  return model.config.ranker_uses_projected ? project_rows(model, e, modality) : e;
}

inline RankBatch gather_rank_batch(const RetrieverModel& model, const RowMatrix& images, const RowMatrix& tags,
                                   const RetrievalDataset& ds, const TagVocabulary& vocab,
                                   const std::vector<std::size_t>& batch, std::size_t* skipped) {
  std::vector<std::size_t> batch_tags;
  for (std::size_t i : batch) batch_tags.insert(batch_tags.end(), ds.positives[i].begin(), ds.positives[i].end());
  std::sort(batch_tags.begin(), batch_tags.end());
  batch_tags.erase(std::unique(batch_tags.begin(), batch_tags.end()), batch_tags.end());

  RankBatch out;
  std::vector<RowMatrix> blocks;
  Eigen::Index rows = 0;
  for (std::size_t i : batch) {
    const auto& pos = ds.positives[i];
    std::vector<std::size_t> neg;
    std::set_difference(batch_tags.begin(), batch_tags.end(), pos.begin(), pos.end(), std::back_inserter(neg));
    if (neg.empty()) {
      if (skipped) ++*skipped;
      continue;
    }
    const Vector e = images.row(static_cast<Eigen::Index>(i)).transpose();
    if (neg.size() > model.config.candidate_cap) {
      std::vector<double> sim;
      std::vector<std::string> keys;
      for (std::size_t k : neg) {
        sim.push_back(tags.row(static_cast<Eigen::Index>(k)).dot(e));
        keys.push_back(vocab.tags()[k]);
      }
      std::vector<std::size_t> keep;
      for (std::size_t idx : top_k_indices<double, std::string>(sim, model.config.candidate_cap, keys)) {
        keep.push_back(neg[idx]);
      }
      std::sort(keep.begin(), keep.end());
      neg = std::move(keep);
    }
    RowMatrix cand(static_cast<Eigen::Index>(pos.size() + neg.size()), tags.cols());
    Eigen::Index r = 0;
    for (std::size_t k : pos) cand.row(r++) = tags.row(static_cast<Eigen::Index>(k));
    for (std::size_t k : neg) cand.row(r++) = tags.row(static_cast<Eigen::Index>(k));
    RankBatch::Group g;
    g.start = rows;
    g.n_pos = static_cast<Eigen::Index>(pos.size());
    g.n_neg = static_cast<Eigen::Index>(neg.size());
    for (std::size_t k : neg) g.negative_tags.push_back(vocab.tags()[k]);
    out.groups.push_back(std::move(g));
    blocks.push_back(interaction_features_rows(e, cand));
    rows += blocks.back().rows();
  }
  out.features.resize(rows, interaction_width(images.cols()));
  Eigen::Index at = 0;
  for (auto& b : blocks) {
    out.features.middleRows(at, b.rows()) = b;
    at += b.rows();
  }
  return out;
}

}  // namespace detail

inline double evaluate_ranker(const RetrieverModel& model, const RetrievalDataset& ds, const TagVocabulary& vocab) {
  const RowMatrix images = detail::ranker_space(model, ds.images.values(), Modality::kImage);
  const RowMatrix tags = detail::ranker_space(model, vocab.embeddings().values(), Modality::kTag);
  const auto batches =
      detail::make_batches(ds.positives.size(), static_cast<std::size_t>(model.config.batch_size), nullptr);
  double sum = 0.0;
  std::size_t counted = 0;
  for (const auto& batch : batches) {
    const auto rb = detail::gather_rank_batch(model, images, tags, ds, vocab, batch, nullptr);
    if (rb.groups.empty()) continue;
    sum += ranker_batch_loss(model.ranker, rb, model.config.margin, model.config.hard_negative_ratio, nullptr);
    ++counted;
  }
  return counted ? sum / static_cast<double>(counted) : 0.0;
}

/// Trains the ranker with the projections frozen.
inline RetrieverModel train_ranker(RetrieverModel model, const RetrievalDataset& ds, const TagVocabulary& vocab,
                                   TrainingLog* log = nullptr) {
  const auto& cfg = model.config;
  if (ds.positives.empty()) fail(Errc::kEmptySet, "training split is empty");
  if (ds.images.dim() != model.dim() || vocab.dim() != model.dim()) {
    fail(Errc::kDimMismatch, "dataset dimension does not match the model");
  }
  const RowMatrix images = detail::ranker_space(model, ds.images.values(), Modality::kImage);
  const RowMatrix tags = detail::ranker_space(model, vocab.embeddings().values(), Modality::kTag);

  TrainingLog local;
  local.stage = "ranker";
  local.initial_loss = evaluate_ranker(model, ds, vocab);

  std::mt19937_64 rng(cfg.seed ^ 0x72616e6bULL);
  MomentumSgd sgd(cfg.momentum);
  const std::size_t steps_per_epoch =
      detail::make_batches(ds.positives.size(), static_cast<std::size_t>(cfg.batch_size), nullptr).size();
  const std::size_t total_steps = steps_per_epoch * static_cast<std::size_t>(std::max(cfg.ranker_epochs, 0));
  std::size_t step = 0;
  for (int epoch = 0; epoch < cfg.ranker_epochs; ++epoch) {
    const auto batches = detail::make_batches(ds.positives.size(), static_cast<std::size_t>(cfg.batch_size), &rng);
    double epoch_sum = 0.0;
    std::size_t counted = 0;
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      const auto rb = detail::gather_rank_batch(model, images, tags, ds, vocab, batches[bi], &local.skipped_groups);
      const double lr = cosine_lr(cfg.ranker_lr, step++, total_steps);
      if (rb.groups.empty()) continue;
      DcnRanker grad = zeros_like(model.ranker);
      const double loss = ranker_batch_loss(model.ranker, rb, cfg.margin, cfg.hard_negative_ratio, &grad);
      detail::check_finite(loss, "ranker", epoch, bi);
      epoch_sum += loss;
      ++counted;
      auto grads = parameter_spans(grad);
      clip_global_norm(grads, cfg.grad_clip);
      auto params = parameter_spans(model.ranker);
      sgd.step(params, grads, lr);
    }
    local.epoch_loss.push_back(counted ? epoch_sum / static_cast<double>(counted) : 0.0);
  }
  local.final_loss = evaluate_ranker(model, ds, vocab);
  detail::check_finite(local.final_loss, "ranker", cfg.ranker_epochs, 0);
  if (log) *log = std::move(local);
  return model;
}

// ---------------------------------------------------------------------------
// Retrieval

struct ScoredTag {
  std::string tag;
  double score = 0.0;
};

struct RetrievalResult {
  std::string item_id;
  std::vector<ScoredTag> topk;
  std::size_t k = 0;

  std::vector<std::string> tags() const {
    std::vector<std::string> out;
    for (const auto& t : topk) out.push_back(t.tag);
    return out;
  }
};

/// Vocabulary projected once for repeated queries.
class RetrievalIndex {
 public:
  RetrievalIndex(const RetrieverModel& model, const TagVocabulary& vocab)
      : model_(&model), vocab_(&vocab) {
    if (vocab.dim() != model.dim()) fail(Errc::kDimMismatch, "vocabulary dimension does not match the model");
    tags_ = detail::ranker_space(model, vocab.embeddings().values(), Modality::kTag);
  }

  Vector scores(const Vector& query) const {
    if (query.size() != model_->dim()) fail(Errc::kDimMismatch, "query dimension does not match the model");
    RowMatrix row = query.transpose();
    const Vector q = detail::ranker_space(*model_, row, Modality::kImage).row(0).transpose();
    return dcn_forward(model_->ranker, interaction_features_rows(q, tags_));
  }

  RetrievalResult retrieve(const Vector& query, std::size_t k, std::string item_id = {}) const {
    if (k < 1 || k > vocab_->size()) {
      fail(Errc::kKOutOfRange, "K=" + std::to_string(k) + " outside [1, " + std::to_string(vocab_->size()) + "]");
    }
    const Vector s = scores(query);
    RetrievalResult out;
    out.item_id = std::move(item_id);
    out.k = k;
    for (std::size_t idx : top_k_indices<double, std::string>(std::span<const double>(s.data(), s.size()), k,
                                                              vocab_->tags())) {
      out.topk.push_back({vocab_->tags()[idx], s(static_cast<Eigen::Index>(idx))});
    }
    return out;
  }

 private:
  const RetrieverModel* model_;
  const TagVocabulary* vocab_;
  RowMatrix tags_;
};

/// Top-K tags by ranker score; ties broken by tag phrase.
inline RetrievalResult retrieve_topk(const RetrieverModel& model, const TagVocabulary& vocab, const Vector& query,
                                     std::size_t k) {
  return RetrievalIndex(model, vocab).retrieve(query, k);
}

/// One result per row of `queries`, in row order. Rows are split across
/// `threads` workers.
inline std::vector<RetrievalResult> retrieve_topk_batch(const RetrieverModel& model, const TagVocabulary& vocab,
                                                        const EmbeddingMatrix& queries, std::size_t k,
                                                        unsigned threads = 1) {
  const RetrievalIndex index(model, vocab);
  std::vector<RetrievalResult> out(static_cast<std::size_t>(queries.rows()));
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(out.size())));
  auto work = [&](std::size_t begin, std::size_t end) {
    for (std::size_t r = begin; r < end; ++r) {
      out[r] = index.retrieve(queries.row(static_cast<Eigen::Index>(r)).transpose(), k, queries.ids()[r]);
    }
  };
  if (threads <= 1) {
    work(0, out.size());
    return out;
  }
  // Validate K before spawning so workers never throw.
  if (k < 1 || k > vocab.size()) fail(Errc::kKOutOfRange, "K=" + std::to_string(k) + " out of range");
  std::vector<std::jthread> pool;
  const std::size_t chunk = (out.size() + threads - 1) / threads;
  for (unsigned t = 0; t < threads; ++t) {
    const std::size_t begin = t * chunk, end = std::min(out.size(), begin + chunk);
    if (begin < end) pool.emplace_back(work, begin, end);
  }
  return out;
}

/// Mean fraction of each image's true tags found in its top-K.
inline double recall_at_k(const RetrieverModel& model, const TagVocabulary& vocab, const RetrievalDataset& ds,
                          std::size_t k) {
  const RetrievalIndex index(model, vocab);
  double sum = 0.0;
  for (std::size_t i = 0; i < ds.positives.size(); ++i) {
    const auto res = index.retrieve(ds.images.row(static_cast<Eigen::Index>(i)).transpose(), std::min(k, vocab.size()));
    std::size_t hits = 0;
    for (const auto& t : res.topk) {
      const auto idx = *vocab.find(t.tag);
      hits += std::binary_search(ds.positives[i].begin(), ds.positives[i].end(), idx) ? 1 : 0;
    }
    sum += static_cast<double>(hits) / static_cast<double>(ds.positives[i].size());
  }
  return ds.positives.empty() ? 0.0 : sum / static_cast<double>(ds.positives.size());
}

// ---------------------------------------------------------------------------
// Checkpoints: a directory of EMBMAT01 blocks plus manifest.json.

inline constexpr std::string_view kRetrieverFormat = "slime-retriever/1";

inline void save_retriever(const std::filesystem::path& dir, const RetrieverModel& model,
                           std::span<const TrainingLog> logs = {}) {
  std::filesystem::create_directories(dir);
  nlohmann::json blocks = nlohmann::json::array();
  auto put = [&](const std::string& name, const RowMatrix& m) {
    const std::string file = name + ".bin";
    write_matrix_block(dir / file, m);
    blocks.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}, {"file", file}});
  };
  put("image_projection.weight", model.projections.image.weight);
  put("image_projection.bias", model.projections.image.bias);
  put("tag_projection.weight", model.projections.tag.weight);
  put("tag_projection.bias", model.projections.tag.bias);
  for (std::size_t l = 0; l < model.ranker.cross.size(); ++l) {
    put("cross." + std::to_string(l) + ".weight", model.ranker.cross[l].weight);
    put("cross." + std::to_string(l) + ".bias", model.ranker.cross[l].bias);
  }
  for (std::size_t l = 0; l < model.ranker.hidden.size(); ++l) {
    put("hidden." + std::to_string(l) + ".weight", model.ranker.hidden[l].weight);
    put("hidden." + std::to_string(l) + ".bias", model.ranker.hidden[l].bias);
  }
  put("head.weight", model.ranker.head.weight);
  put("head.bias", model.ranker.head.bias);

  nlohmann::json manifest = {
      {"format", std::string(kRetrieverFormat)},
      {"dim", model.dim()},
      {"feature_width", interaction_width(model.dim())},
      {"image_gamma", model.projections.image.gamma},
      {"tag_gamma", model.projections.tag.gamma},
      {"log_temperature", model.projections.log_temperature},
      {"temperature", model.temperature()},
      {"seed", model.config.seed},
      {"config", model.config.to_json()},
      {"config_hash", model.config.hash()},
      {"blocks", blocks},
  };
  if (!logs.empty()) {
    nlohmann::json jl = nlohmann::json::array();
    for (const auto& l : logs) jl.push_back(l.to_json());
    manifest["training_log"] = jl;
  }
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  if (!out) fail(Errc::kIoError, "cannot write " + (dir / "manifest.json").string());
  out << manifest.dump(2) << '\n';
}

inline RetrieverModel load_retriever(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) fail(Errc::kIoError, "missing " + (dir / "manifest.json").string());
  const auto manifest = nlohmann::json::parse(in, nullptr, false);
  if (manifest.is_discarded() || manifest.value("format", "") != kRetrieverFormat) {
    fail(Errc::kMalformedLine, "not a retriever checkpoint: " + dir.string());
  }
  RetrieverModel model;
  model.config = RetrieverConfig::from_json(manifest.at("config"));
  std::unordered_map<std::string, RowMatrix> blocks;
  for (const auto& b : manifest.at("blocks")) {
    RowMatrix m = read_matrix_block(dir / b.at("file").get<std::string>());
    if (m.rows() != b.at("rows").get<Eigen::Index>() || m.cols() != b.at("cols").get<Eigen::Index>()) {
      fail(Errc::kDimMismatch, "block " + b.at("name").get<std::string>() + " has unexpected shape");
    }
    blocks.emplace(b.at("name").get<std::string>(), std::move(m));
  }
  auto take = [&](const std::string& name) {
    auto it = blocks.find(name);
    if (it == blocks.end()) fail(Errc::kMissingField, "checkpoint lacks block " + name);
    return it->second;
  };
  model.projections.image = {take("image_projection.weight"), take("image_projection.bias"),
                             manifest.at("image_gamma").get<double>()};
  model.projections.tag = {take("tag_projection.weight"), take("tag_projection.bias"),
                           manifest.at("tag_gamma").get<double>()};
  model.projections.log_temperature = manifest.at("log_temperature").get<double>();
  for (int l = 0; blocks.count("cross." + std::to_string(l) + ".weight"); ++l) {
    model.ranker.cross.push_back({take("cross." + std::to_string(l) + ".weight"), take("cross." + std::to_string(l) + ".bias")});
  }
  for (int l = 0; blocks.count("hidden." + std::to_string(l) + ".weight"); ++l) {
    model.ranker.hidden.push_back({take("hidden." + std::to_string(l) + ".weight"), take("hidden." + std::to_string(l) + ".bias")});
  }
  model.ranker.head = {take("head.weight"), take("head.bias")};
  if (model.ranker.input_dim() != interaction_width(model.dim())) {
    fail(Errc::kDimMismatch, "ranker width does not match 4n+1");
  }
  return model;
}

}  // namespace slime
