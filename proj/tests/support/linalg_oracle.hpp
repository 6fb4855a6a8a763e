#pragma once

// Independent least-squares oracle: one-sided (Hestenes) Jacobi SVD on plain
// nested vectors. Shares no code with the library's Eigen-based solver.

#include <algorithm>
#include <cmath>
#include <vector>

namespace slime::testing {

using Dense = std::vector<std::vector<double>>;

inline Dense zeros(std::size_t r, std::size_t c) { return Dense(r, std::vector<double>(c, 0.0)); }

inline Dense matmul(const Dense& a, const Dense& b) {
  Dense out = zeros(a.size(), b.empty() ? 0 : b[0].size());
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t k = 0; k < b.size(); ++k)
      for (std::size_t j = 0; j < b[0].size(); ++j) out[i][j] += a[i][k] * b[k][j];
  return out;
}

inline Dense transpose(const Dense& a) {
  if (a.empty()) return {};
  Dense t = zeros(a[0].size(), a.size());
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[0].size(); ++j) t[j][i] = a[i][j];
  return t;
}

/// Moore-Penrose pseudo-inverse (m x b) of a (b x m) with relative cutoff.
inline Dense jacobi_pinv(const Dense& a, double rel_cutoff = 1e-10) {
  const std::size_t rows = a.size();
  const std::size_t cols = a[0].size();
  Dense u = a;  // columns rotated toward orthogonality: U * Sigma
  Dense v = zeros(cols, cols);
  for (std::size_t i = 0; i < cols; ++i) v[i][i] = 1.0;

  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p + 1 < cols; ++p) {
      for (std::size_t q = p + 1; q < cols; ++q) {
        double alpha = 0, beta = 0, gamma = 0;
        for (std::size_t i = 0; i < rows; ++i) {
          alpha += u[i][p] * u[i][p];
          beta += u[i][q] * u[i][q];
          gamma += u[i][p] * u[i][q];
        }
        if (std::abs(gamma) <= 1e-300) continue;
        off = std::max(off, std::abs(gamma) / std::sqrt(alpha * beta + 1e-300));
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = (zeta >= 0 ? 1.0 : -1.0) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < rows; ++i) {
          const double up = u[i][p], uq = u[i][q];
          u[i][p] = c * up - s * uq;
          u[i][q] = s * up + c * uq;
        }
        for (std::size_t i = 0; i < cols; ++i) {
          const double vp = v[i][p], vq = v[i][q];
          v[i][p] = c * vp - s * vq;
          v[i][q] = s * vp + c * vq;
        }
      }
    }
    if (off < 1e-15) break;
  }

  std::vector<double> sigma(cols, 0.0);
  double sigma_max = 0.0;
  for (std::size_t j = 0; j < cols; ++j) {
    double n = 0;
    for (std::size_t i = 0; i < rows; ++i) n += u[i][j] * u[i][j];
    sigma[j] = std::sqrt(n);
    sigma_max = std::max(sigma_max, sigma[j]);
  }
  // pinv = V diag(1/sigma^2) (U Sigma)^T
  Dense pinv = zeros(cols, rows);
  for (std::size_t j = 0; j < cols; ++j) {
    if (sigma[j] <= rel_cutoff * sigma_max || sigma[j] == 0.0) continue;
    const double w = 1.0 / (sigma[j] * sigma[j]);
    for (std::size_t r = 0; r < cols; ++r)
      for (std::size_t i = 0; i < rows; ++i) pinv[r][i] += v[r][j] * w * u[i][j];
  }
  return pinv;
}

inline double rel_frobenius(const Dense& a, const Dense& b) {
  double num = 0, den = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j) {
      num += (a[i][j] - b[i][j]) * (a[i][j] - b[i][j]);
      den += b[i][j] * b[i][j];
    }
  return std::sqrt(num) / std::max(std::sqrt(den), 1e-300);
}

template <typename M>
Dense to_dense(const M& m) {
  Dense d = zeros(static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols()));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) d[i][j] = m(i, j);
  return d;
}

}  // namespace slime::testing
