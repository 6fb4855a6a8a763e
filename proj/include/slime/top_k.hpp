#pragma once

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <vector>

namespace slime {

/// Indices of the k largest scores. Ties are broken by ascending key, then by
/// ascending index, so the result is fully deterministic. Pass an empty key
/// span to break ties by index alone.
template <typename Score, typename Key = std::string>
std::vector<std::size_t> top_k_indices(std::span<const Score> scores, std::size_t k,
                                       std::span<const Key> keys = {}) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  k = std::min(k, order.size());
  auto better = [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    if (!keys.empty() && keys[a] != keys[b]) return keys[a] < keys[b];
    return a < b;
  };
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(), better);
  order.resize(k);
  return order;
}

}  // namespace slime
