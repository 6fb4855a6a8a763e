#pragma once

#include <cmath>
#include <numbers>
#include <span>
#include <vector>

namespace slime {

inline double cosine_lr(double base_lr, std::size_t step, std::size_t total_steps) {
  if (total_steps == 0) return base_lr;
  const double t = static_cast<double>(step) / static_cast<double>(total_steps);
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

inline double global_norm(std::span<const std::span<double>> grads) {
  double sq = 0.0;
  for (auto g : grads)
    for (double v : g) sq += v * v;
  return std::sqrt(sq);
}

/// Rescales gradients in place so their global L2 norm is at most max_norm.
/// Returns the norm before clipping.
inline double clip_global_norm(std::span<const std::span<double>> grads, double max_norm) {
  const double norm = global_norm(grads);
  if (max_norm > 0.0 && norm > max_norm) {
    const double scale = max_norm / norm;
    for (auto g : grads)
      for (double& v : g) v *= scale;
  }
  return norm;
}

// Heavy-ball SGD: v <- mu v + g; p <- p - lr v.
class MomentumSgd {
 public:
  explicit MomentumSgd(double momentum) : momentum_(momentum) {}

  void step(std::span<const std::span<double>> params, std::span<const std::span<double>> grads, double lr) {
    if (velocity_.empty()) {
      for (auto p : params) velocity_.emplace_back(p.size(), 0.0);
    }
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto& v = velocity_[k];
      for (std::size_t i = 0; i < params[k].size(); ++i) {
        v[i] = momentum_ * v[i] + grads[k][i];
        params[k][i] -= lr * v[i];
      }
    }
  }

 private:
  double momentum_;
  std::vector<std::vector<double>> velocity_;
};

}  // namespace slime
