#pragma once

// Seeded synthetic corpora for tests, acceptance runs and the CLI `synth` verb.

#include <Eigen/Dense>

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <random>
#include <string>
#include <vector>

#include "slime/embedding_store.hpp"

namespace slime::synth {

inline std::string indexed_id(std::string_view prefix, std::size_t i, int width = 4) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%0*zu", width, i);
  return std::string(prefix) + buf;
}

inline RowMatrix gaussian(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols, double sigma = 1.0) {
  std::normal_distribution<double> normal(0.0, sigma);
  RowMatrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng);
  return m;
}

/// `rows` x `cols` with orthonormal columns (rows >= cols).
inline RowMatrix random_orthonormal(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols) {
  const RowMatrix g = gaussian(rng, rows, cols);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(rows, cols);
  // Fix column signs so the result does not depend on the QR convention.
  const Eigen::MatrixXd r = qr.matrixQR().topRows(cols).triangularView<Eigen::Upper>();
  for (Eigen::Index c = 0; c < cols; ++c)
    if (r(c, c) < 0.0) q.col(c) *= -1.0;
  return q;
}

inline void normalize_rows(RowMatrix& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) m.row(r) /= m.row(r).norm();
}

// Draws `count` distinct indices below `n`, returned sorted.
inline std::vector<std::size_t> sample_distinct(std::mt19937_64& rng, std::size_t n, std::size_t count) {
  std::vector<std::size_t> pool(n);
  for (std::size_t i = 0; i < n; ++i) pool[i] = i;
  count = std::min(count, n);
  for (std::size_t i = 0; i < count; ++i) std::swap(pool[i], pool[i + detail::bounded(rng, n - i)]);
  pool.resize(count);
  std::sort(pool.begin(), pool.end());
  return pool;
}

struct TaggedCorpus {
  EmbeddingMatrix tags;    // ids are tag phrases
  EmbeddingMatrix images;  // ids are image ids
  std::vector<TagRecord> records;
};

struct SeparableOptions {
  std::size_t images = 300;
  std::size_t tags = 150;
  Eigen::Index dim = 16;
  Eigen::Index signal_dims = 12;  // tags live here; the rest carries image-only nuisance
  std::size_t min_tags = 1;
  std::size_t max_tags = 2;
  double nuisance = 5.0;
  std::uint64_t seed = 7;
};

/// Tags are random directions in the signal subspace; each image is the mean
/// of its own tags plus a nuisance component orthogonal to every tag.
inline TaggedCorpus make_separable(const SeparableOptions& o) {
  std::mt19937_64 rng(o.seed);
  RowMatrix tags = RowMatrix::Zero(static_cast<Eigen::Index>(o.tags), o.dim);
  tags.leftCols(o.signal_dims) = gaussian(rng, tags.rows(), o.signal_dims);
  normalize_rows(tags);
  std::vector<std::string> tag_ids;
  for (std::size_t t = 0; t < o.tags; ++t) tag_ids.push_back(indexed_id("tag_", t, 3));

  RowMatrix images(static_cast<Eigen::Index>(o.images), o.dim);
  std::vector<std::string> image_ids;
  std::vector<TagRecord> records;
  for (std::size_t i = 0; i < o.images; ++i) {
    const std::size_t count = o.min_tags + detail::bounded(rng, o.max_tags - o.min_tags + 1);
    const auto own = sample_distinct(rng, o.tags, count);
    Eigen::RowVectorXd v = Eigen::RowVectorXd::Zero(o.dim);
    TagRecord rec;
    rec.image_id = indexed_id("img_", i);
    for (std::size_t t : own) {
      v += tags.row(static_cast<Eigen::Index>(t));
      rec.tags.push_back(tag_ids[t]);
    }
    v /= v.norm();
    if (o.dim > o.signal_dims) {
      Eigen::RowVectorXd noise = gaussian(rng, 1, o.dim - o.signal_dims);
      v.tail(o.dim - o.signal_dims) = o.nuisance * noise / noise.norm();
    }
    images.row(static_cast<Eigen::Index>(i)) = v / v.norm();
    image_ids.push_back(rec.image_id);
    records.push_back(std::move(rec));
  }
  return {EmbeddingMatrix(tag_ids, tags, true), EmbeddingMatrix(image_ids, images, true), std::move(records)};
}

struct DualEncoderOptions {
  std::size_t items = 2000;
  std::size_t tags = 100;
  Eigen::Index latent_dim = 32;
  Eigen::Index victim_dim = 48;
  Eigen::Index attack_dim = 32;
  std::size_t tags_per_item = 5;
  double noise = 0.05;
  std::uint64_t seed = 11;
};

/// Two encoders observing one latent space through different orthonormal maps.
struct DualEncoderCorpus {
  EmbeddingMatrix victim;       // victim-space image embeddings
  TaggedCorpus attack;          // attack-space images, tags and records
};

inline DualEncoderCorpus make_dual_encoder(const DualEncoderOptions& o) {
  std::mt19937_64 rng(o.seed);
  const RowMatrix to_victim = random_orthonormal(rng, o.victim_dim, o.latent_dim);
  const RowMatrix to_attack = random_orthonormal(rng, o.attack_dim, o.latent_dim);

  RowMatrix tag_latent = gaussian(rng, static_cast<Eigen::Index>(o.tags), o.latent_dim);
  normalize_rows(tag_latent);
  std::vector<std::string> tag_ids;
  for (std::size_t t = 0; t < o.tags; ++t) tag_ids.push_back(indexed_id("tag_", t, 3));
  RowMatrix attack_tags = tag_latent * to_attack.transpose();
  normalize_rows(attack_tags);

  const auto n = static_cast<Eigen::Index>(o.items);
  RowMatrix latent(n, o.latent_dim);
  std::vector<std::string> ids;
  std::vector<TagRecord> records;
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto own = sample_distinct(rng, o.tags, o.tags_per_item);
    Eigen::RowVectorXd z = Eigen::RowVectorXd::Zero(o.latent_dim);
    TagRecord rec;
    rec.image_id = indexed_id("item_", static_cast<std::size_t>(i));
    for (std::size_t t : own) {
      z += tag_latent.row(static_cast<Eigen::Index>(t));
      rec.tags.push_back(tag_ids[t]);
    }
    latent.row(i) = z / z.norm();
    ids.push_back(rec.image_id);
    records.push_back(std::move(rec));
  }
  RowMatrix victim = latent * to_victim.transpose() + gaussian(rng, n, o.victim_dim, o.noise);
  RowMatrix attack = latent * to_attack.transpose() + gaussian(rng, n, o.attack_dim, o.noise);
  normalize_rows(victim);
  normalize_rows(attack);
  return {EmbeddingMatrix(ids, victim, true),
          {EmbeddingMatrix(tag_ids, attack_tags, true), EmbeddingMatrix(ids, attack, true), std::move(records)}};
}

}  // namespace slime::synth
