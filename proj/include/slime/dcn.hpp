#pragma once

// Deep-cross ranker: a stack of full-rank cross layers
//   x_{l+1} = x_0 * (W_l x_l + b_l) + x_l      (elementwise product)
// followed by a ReLU MLP and a scalar linear head. Rows of the input matrix
// are independent examples.

#include <Eigen/Dense>

#include <cmath>
#include <random>
#include <span>
#include <vector>

#include "slime/embedding_store.hpp"
#include "slime/error.hpp"

namespace slime {

struct DenseLayer {
  RowMatrix weight;  // out x in
  RowMatrix bias;    // 1 x out
};

struct DcnConfig {
  int cross_layers = 2;
  std::vector<int> hidden = {256, 64};
};

struct DcnRanker {
  std::vector<DenseLayer> cross;
  std::vector<DenseLayer> hidden;
  DenseLayer head;  // 1 x last, bias 1 x 1

  Eigen::Index input_dim() const {
    if (!cross.empty()) return cross.front().weight.cols();
    if (!hidden.empty()) return hidden.front().weight.cols();
    return head.weight.cols();
  }
};

inline DenseLayer zeros_like(const DenseLayer& l) {
  return {RowMatrix::Zero(l.weight.rows(), l.weight.cols()), RowMatrix::Zero(1, l.bias.cols())};
}

inline DcnRanker zeros_like(const DcnRanker& m) {
  DcnRanker z;
  for (const auto& l : m.cross) z.cross.push_back(zeros_like(l));
  for (const auto& l : m.hidden) z.hidden.push_back(zeros_like(l));
  z.head = zeros_like(m.head);
  return z;
}

/// Flat views over every parameter, in a fixed order.
inline std::vector<std::span<double>> parameter_spans(DcnRanker& m) {
  std::vector<std::span<double>> out;
  auto add = [&](RowMatrix& x) { out.emplace_back(x.data(), static_cast<std::size_t>(x.size())); };
  for (auto& l : m.cross) {
    add(l.weight);
    add(l.bias);
  }
  for (auto& l : m.hidden) {
    add(l.weight);
    add(l.bias);
  }
  add(m.head.weight);
  add(m.head.bias);
  return out;
}

/// Glorot-uniform cross layers, He-uniform hidden layers, zero head. A fresh
/// ranker therefore scores every input 0.
inline DcnRanker init_dcn(Eigen::Index input_dim, const DcnConfig& cfg, std::mt19937_64& rng) {
  if (input_dim < 1 || cfg.cross_layers < 0) fail(Errc::kInvalidArgument, "bad DCN shape");
  auto uniform = [&](Eigen::Index rows, Eigen::Index cols, double limit) {
    std::uniform_real_distribution<double> dist(-limit, limit);
    RowMatrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
    return m;
  };
  DcnRanker m;
  for (int l = 0; l < cfg.cross_layers; ++l) {
    const double limit = std::sqrt(6.0 / static_cast<double>(2 * input_dim));
    m.cross.push_back({uniform(input_dim, input_dim, limit), RowMatrix::Zero(1, input_dim)});
  }
  Eigen::Index width = input_dim;
  for (int h : cfg.hidden) {
    if (h < 1) fail(Errc::kInvalidArgument, "hidden widths must be positive");
    m.hidden.push_back({uniform(h, width, std::sqrt(6.0 / static_cast<double>(width))), RowMatrix::Zero(1, h)});
    width = h;
  }
  m.head = {RowMatrix::Zero(1, width), RowMatrix::Zero(1, 1)};
  return m;
}

struct DcnCache {
  RowMatrix x0;
  std::vector<RowMatrix> cross_in;   // x_l
  std::vector<RowMatrix> cross_lin;  // W_l x_l + b_l
  std::vector<RowMatrix> hidden_in;
  std::vector<RowMatrix> hidden_pre;
  RowMatrix head_in;
};

inline Vector dcn_forward(const DcnRanker& m, const RowMatrix& features, DcnCache* cache = nullptr) {
  if (features.cols() != m.input_dim()) {
    fail(Errc::kDimMismatch, "ranker expects width " + std::to_string(m.input_dim()) + ", got " +
                                 std::to_string(features.cols()));
  }
  RowMatrix x = features;
  if (cache) {
    *cache = DcnCache{};
    cache->x0 = features;
  }
  for (const auto& layer : m.cross) {
    RowMatrix lin = x * layer.weight.transpose();
    lin.rowwise() += layer.bias.row(0);
    RowMatrix next = features.cwiseProduct(lin) + x;
    if (cache) {
      cache->cross_in.push_back(std::move(x));
      cache->cross_lin.push_back(std::move(lin));
    }
    x = std::move(next);
  }
  for (const auto& layer : m.hidden) {
    RowMatrix pre = x * layer.weight.transpose();
    pre.rowwise() += layer.bias.row(0);
    RowMatrix act = pre.cwiseMax(0.0);
    if (cache) {
      cache->hidden_in.push_back(std::move(x));
      cache->hidden_pre.push_back(std::move(pre));
    }
    x = std::move(act);
  }
  Vector scores = x * m.head.weight.row(0).transpose();
  scores.array() += m.head.bias(0, 0);
  if (cache) cache->head_in = std::move(x);
  return scores;
}

/// Accumulates d(loss)/d(params) into `grad` given d(loss)/d(scores).
inline void dcn_backward(const DcnRanker& m, const DcnCache& cache, const Vector& dscores, DcnRanker& grad) {
  grad.head.weight.row(0) += dscores.transpose() * cache.head_in;
  grad.head.bias(0, 0) += dscores.sum();
  RowMatrix dx = dscores * m.head.weight.row(0);
  for (std::size_t k = m.hidden.size(); k-- > 0;) {
    const RowMatrix dpre = dx.cwiseProduct((cache.hidden_pre[k].array() > 0.0).cast<double>().matrix());
    grad.hidden[k].weight.noalias() += dpre.transpose() * cache.hidden_in[k];
    grad.hidden[k].bias.row(0) += dpre.colwise().sum();
    dx = dpre * m.hidden[k].weight;
  }
  for (std::size_t k = m.cross.size(); k-- > 0;) {
    const RowMatrix dlin = dx.cwiseProduct(cache.x0);
    grad.cross[k].weight.noalias() += dlin.transpose() * cache.cross_in[k];
    grad.cross[k].bias.row(0) += dlin.colwise().sum();
    dx += dlin * m.cross[k].weight;
  }
}

}  // namespace slime
