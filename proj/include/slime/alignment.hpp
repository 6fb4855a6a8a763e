#pragma once

// One-step linear map from a victim embedding space into the attack space:
// W = argmin ||E_A - E_V W||^2 (+ lambda ||W||^2), rows are samples.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "slime/embedding_store.hpp"
#include "slime/error.hpp"

namespace slime {

enum class Solver { kNormalEquation, kSvdPinv, kRidge };

inline std::string_view solver_name(Solver s) {
  switch (s) {
    case Solver::kNormalEquation: return "normal_equation";
    case Solver::kSvdPinv: return "svd_pinv";
    case Solver::kRidge: return "ridge";
  }
  return "svd_pinv";
}

inline Solver parse_solver(std::string_view name) {
  if (name == "normal_equation") return Solver::kNormalEquation;
  if (name == "svd_pinv") return Solver::kSvdPinv;
  if (name == "ridge") return Solver::kRidge;
  fail(Errc::kConfigError, "unknown solver '" + std::string(name) + "'");
}

struct AlignmentOptions {
  Solver solver = Solver::kSvdPinv;
  double ridge_lambda = 0.0;
  // Singular values below sv_cutoff * sigma_max are treated as zero.
  double sv_cutoff = 1e-10;
};

struct AlignmentMap {
  RowMatrix weights;  // source_dim x target_dim
  Eigen::Index source_dim = 0;
  Eigen::Index target_dim = 0;
  Eigen::Index samples_used = 0;
  Solver solver = Solver::kSvdPinv;
  double ridge_lambda = 0.0;
  double sv_cutoff = 1e-10;
  bool rows_normalized = false;  // whether the fitted rows were unit norm
};

namespace detail {

inline RowMatrix pinv_solve(const RowMatrix& victim, const RowMatrix& attack, double cutoff) {
  Eigen::BDCSVD<Eigen::MatrixXd> svd(victim, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Eigen::VectorXd& sigma = svd.singularValues();
  const double sigma_max = sigma.size() > 0 ? sigma(0) : 0.0;
  Eigen::VectorXd inv = Eigen::VectorXd::Zero(sigma.size());
  for (Eigen::Index i = 0; i < sigma.size(); ++i) {
    if (sigma(i) > cutoff * sigma_max && sigma(i) > 0.0) inv(i) = 1.0 / sigma(i);
  }
  // W = V diag(1/sigma) U^T E_A
  Eigen::MatrixXd ut_attack = svd.matrixU().transpose() * attack;
  return svd.matrixV() * (inv.asDiagonal() * ut_attack);
}

inline RowMatrix gram_solve(const RowMatrix& victim, const RowMatrix& attack, double lambda) {
  Eigen::MatrixXd gram = victim.transpose() * victim;
  gram.diagonal().array() += lambda;
  const Eigen::MatrixXd rhs = victim.transpose() * attack;
  Eigen::LDLT<Eigen::MatrixXd> ldlt(gram);
  const Eigen::VectorXd pivots = ldlt.vectorD();
  const double max_pivot = pivots.cwiseAbs().maxCoeff();
  const double tolerance = Eigen::NumTraits<double>::epsilon() * static_cast<double>(gram.rows()) * max_pivot;
  if (ldlt.info() != Eigen::Success || !ldlt.isPositive() || pivots.minCoeff() <= tolerance) {
    fail(Errc::kSolverFailure, "E_V^T E_V is singular or ill-conditioned; use svd_pinv or ridge");
  }
  return ldlt.solve(rhs);
}

}  // namespace detail

/// Fits W on paired rows. Row ids of both matrices must agree in order.
inline AlignmentMap fit_alignment(const EmbeddingMatrix& victim, const EmbeddingMatrix& attack,
                                  const AlignmentOptions& opts = {}) {
  if (victim.rows() < 1) fail(Errc::kInvalidArgument, "alignment needs at least one sample");
  if (victim.ids() != attack.ids()) {
    fail(Errc::kIdOrderMismatch, "victim and attack rows must carry identical ids in identical order");
  }
  if (opts.ridge_lambda < 0.0) fail(Errc::kInvalidArgument, "ridge_lambda must be non-negative");
  if (!victim.values().allFinite() || !attack.values().allFinite()) {
    fail(Errc::kNonFiniteInput, "alignment inputs contain NaN or Inf");
  }

  AlignmentMap map;
  map.source_dim = victim.dim();
  map.target_dim = attack.dim();
  map.samples_used = victim.rows();
  map.solver = opts.solver;
  map.ridge_lambda = opts.ridge_lambda;
  map.sv_cutoff = opts.sv_cutoff;
  map.rows_normalized = victim.normalized() && attack.normalized();

  switch (opts.solver) {
    case Solver::kSvdPinv:
      map.weights = detail::pinv_solve(victim.values(), attack.values(), opts.sv_cutoff);
      break;
    case Solver::kNormalEquation:
      map.weights = detail::gram_solve(victim.values(), attack.values(), 0.0);
      break;
    case Solver::kRidge:
      map.weights = opts.ridge_lambda > 0.0
                        ? detail::gram_solve(victim.values(), attack.values(), opts.ridge_lambda)
                        : detail::pinv_solve(victim.values(), attack.values(), opts.sv_cutoff);
      break;
  }
  if (!map.weights.allFinite()) fail(Errc::kSolverFailure, "solver produced non-finite weights");
  return map;
}

/// E_V W. With `renormalize`, rows are rescaled to unit norm (ZeroRow if a row
/// maps to zero).
inline EmbeddingMatrix apply_alignment(const EmbeddingMatrix& victim, const AlignmentMap& map,
                                       bool renormalize = true) {
  if (victim.dim() != map.source_dim) {
    fail(Errc::kDimMismatch, "victim dim " + std::to_string(victim.dim()) + " but map expects " +
                                 std::to_string(map.source_dim));
  }
  EmbeddingMatrix aligned(victim.ids(), victim.values() * map.weights, false);
  return renormalize ? l2_normalize(aligned) : aligned;
}

struct CosineReport {
  std::vector<double> cosines;
  double mean = 0.0;
};

inline CosineReport alignment_cosine(const EmbeddingMatrix& attack, const EmbeddingMatrix& aligned) {
  if (attack.rows() != aligned.rows() || attack.dim() != aligned.dim()) {
    fail(Errc::kDimMismatch, "attack and aligned matrices differ in shape");
  }
  if (attack.ids() != aligned.ids()) fail(Errc::kIdOrderMismatch, "attack and aligned ids differ");
  CosineReport report;
  report.cosines.reserve(static_cast<std::size_t>(attack.rows()));
  for (Eigen::Index r = 0; r < attack.rows(); ++r) {
    const double na = attack.row(r).norm();
    const double nb = aligned.row(r).norm();
    if (na < kZeroRowNorm || nb < kZeroRowNorm) fail(Errc::kZeroRow, "row '" + attack.ids()[r] + "' has zero norm");
    const double c = std::clamp(attack.row(r).dot(aligned.row(r)) / (na * nb), -1.0, 1.0);
    report.cosines.push_back(c);
    report.mean += c;
  }
  if (!report.cosines.empty()) report.mean /= static_cast<double>(report.cosines.size());
  return report;
}

/// Frobenius norm of E_A - E_V W, divided by sqrt(rows).
inline double alignment_residual(const EmbeddingMatrix& victim, const EmbeddingMatrix& attack,
                                 const AlignmentMap& map) {
  if (victim.rows() == 0) return 0.0;
  const RowMatrix diff = attack.values() - victim.values() * map.weights;
  return diff.norm() / std::sqrt(static_cast<double>(victim.rows()));
}

// ---------------------------------------------------------------------------
// Serialization: EMBMAT01 block for W plus "<path>.json" metadata.

inline nlohmann::json alignment_metadata(const AlignmentMap& map) {
  return {{"source_dim", map.source_dim},
          {"target_dim", map.target_dim},
          {"samples_used", map.samples_used},
          {"solver", std::string(solver_name(map.solver))},
          {"ridge_lambda", map.ridge_lambda},
          {"sv_cutoff", map.sv_cutoff},
          {"rows_normalized", map.rows_normalized}};
}

inline void save_alignment(const std::filesystem::path& path, const AlignmentMap& map) {
  write_matrix_block(path, map.weights);
  std::ofstream meta(path.string() + ".json", std::ios::trunc);
  if (!meta) fail(Errc::kIoError, "cannot write alignment metadata for " + path.string());
  meta << alignment_metadata(map).dump(2) << '\n';
}

inline AlignmentMap load_alignment(const std::filesystem::path& path) {
  AlignmentMap map;
  map.weights = read_matrix_block(path);
  std::ifstream meta(path.string() + ".json");
  if (!meta) fail(Errc::kIoError, "missing alignment metadata " + path.string() + ".json");
  const auto j = nlohmann::json::parse(meta, nullptr, false);
  if (j.is_discarded()) fail(Errc::kMalformedLine, "alignment metadata is not valid JSON");
  try {
    map.source_dim = j.at("source_dim").get<Eigen::Index>();
    map.target_dim = j.at("target_dim").get<Eigen::Index>();
    map.samples_used = j.at("samples_used").get<Eigen::Index>();
    map.solver = parse_solver(j.at("solver").get<std::string>());
    map.ridge_lambda = j.at("ridge_lambda").get<double>();
    map.sv_cutoff = j.at("sv_cutoff").get<double>();
    map.rows_normalized = j.value("rows_normalized", false);
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::kMissingField, std::string("alignment metadata: ") + e.what());
  }
  if (map.weights.rows() != map.source_dim || map.weights.cols() != map.target_dim) {
    fail(Errc::kDimMismatch, "alignment weights do not match metadata dims");
  }
  return map;
}

}  // namespace slime
