#pragma once

// On-disk formats and the in-memory embedding matrix.
//
// Binary matrix container ("EMBMAT01"):
//   bytes 0..7   ASCII magic "EMBMAT01"
//   bytes 8..11  u32 rows, little-endian
//   bytes 12..15 u32 dim, little-endian
//   then rows*dim IEEE-754 binary32 values, row-major, little-endian.
// Item ids live in a sibling UTF-8 text file, one id per line.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <json.hpp>

#include "slime/error.hpp"
#include "slime/text.hpp"

namespace slime {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

inline constexpr std::array<char, 8> kMatrixMagic = {'E', 'M', 'B', 'M', 'A', 'T', '0', '1'};
inline constexpr double kUnitNormTolerance = 1e-4;
inline constexpr double kZeroRowNorm = 1e-12;

// ---------------------------------------------------------------------------
// Raw matrix blocks

namespace detail {

inline void put_u32(std::ostream& out, std::uint32_t v) {
  const char bytes[4] = {static_cast<char>(v & 0xFF), static_cast<char>((v >> 8) & 0xFF),
                         static_cast<char>((v >> 16) & 0xFF), static_cast<char>((v >> 24) & 0xFF)};
  out.write(bytes, 4);
}

inline std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(Errc::kIoError, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return std::move(ss).str();
}

}  // namespace detail

/// Writes a matrix as an EMBMAT01 block. Values are narrowed to float.
inline void write_matrix_block(const std::filesystem::path& path, const RowMatrix& values) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(Errc::kIoError, "cannot write " + path.string());
  out.write(kMatrixMagic.data(), kMatrixMagic.size());
  detail::put_u32(out, static_cast<std::uint32_t>(values.rows()));
  detail::put_u32(out, static_cast<std::uint32_t>(values.cols()));
  std::string payload;
  payload.resize(static_cast<std::size_t>(values.size()) * 4);
  std::size_t k = 0;
  for (Eigen::Index r = 0; r < values.rows(); ++r) {
    for (Eigen::Index c = 0; c < values.cols(); ++c) {
      const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(values(r, c)));
      payload[k++] = static_cast<char>(bits & 0xFF);
      payload[k++] = static_cast<char>((bits >> 8) & 0xFF);
      payload[k++] = static_cast<char>((bits >> 16) & 0xFF);
      payload[k++] = static_cast<char>((bits >> 24) & 0xFF);
    }
  }
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!out) fail(Errc::kIoError, "short write to " + path.string());
}

inline RowMatrix read_matrix_block(const std::filesystem::path& path) {
  const std::string bytes = detail::read_file_bytes(path);
  if (bytes.size() < 16 || !std::equal(kMatrixMagic.begin(), kMatrixMagic.end(), bytes.begin())) {
    fail(Errc::kBadMagic, path.string() + " does not start with EMBMAT01");
  }
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::uint64_t rows = detail::get_u32(p + 8);
  const std::uint64_t dim = detail::get_u32(p + 12);
  const std::uint64_t payload = bytes.size() - 16;
  if (payload != rows * dim * 4) {
    fail(Errc::kDimMismatch, path.string() + ": header declares " + std::to_string(rows) + "x" +
                                 std::to_string(dim) + " but payload has " +
                                 std::to_string(payload) + " bytes");
  }
  RowMatrix values(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(dim));
  const unsigned char* q = p + 16;
  for (Eigen::Index r = 0; r < values.rows(); ++r) {
    for (Eigen::Index c = 0; c < values.cols(); ++c, q += 4) {
      values(r, c) = std::bit_cast<float>(detail::get_u32(q));
    }
  }
  return values;
}

// ---------------------------------------------------------------------------
// EmbeddingMatrix

class EmbeddingMatrix {
 public:
  EmbeddingMatrix() = default;

  /// Validates ids/rows agreement, id uniqueness, finiteness and, when
  /// `normalized` is set, unit row norms.
  EmbeddingMatrix(std::vector<std::string> ids, RowMatrix values, bool normalized = false)
      : ids_(std::move(ids)), values_(std::move(values)), normalized_(normalized) {
    if (static_cast<Eigen::Index>(ids_.size()) != values_.rows()) {
      fail(Errc::kDimMismatch, std::to_string(ids_.size()) + " ids for " +
                                   std::to_string(values_.rows()) + " rows");
    }
    index_.reserve(ids_.size());
    for (std::size_t i = 0; i < ids_.size(); ++i) {
      if (!index_.emplace(ids_[i], i).second) fail(Errc::kDuplicateId, "duplicate id '" + ids_[i] + "'");
    }
    if (!values_.allFinite()) fail(Errc::kNonFiniteInput, "embedding matrix contains NaN or Inf");
    if (normalized_) {
      for (Eigen::Index r = 0; r < values_.rows(); ++r) {
        if (std::abs(values_.row(r).norm() - 1.0) > kUnitNormTolerance) {
          fail(Errc::kInvalidArgument, "row '" + ids_[r] + "' is flagged normalized but is not unit norm");
        }
      }
    }
  }

  const std::vector<std::string>& ids() const noexcept { return ids_; }
  const RowMatrix& values() const noexcept { return values_; }
  Eigen::Index rows() const noexcept { return values_.rows(); }
  Eigen::Index dim() const noexcept { return values_.cols(); }
  bool normalized() const noexcept { return normalized_; }

  auto row(Eigen::Index r) const { return values_.row(r); }

  std::optional<std::size_t> find(std::string_view id) const {
    auto it = index_.find(std::string(id));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  /// Rows for `ids`, in that order. Unknown ids raise MissingItem.
  EmbeddingMatrix select(std::span<const std::string> ids) const {
    RowMatrix out(static_cast<Eigen::Index>(ids.size()), dim());
    for (std::size_t i = 0; i < ids.size(); ++i) {
      auto idx = find(ids[i]);
      if (!idx) fail(Errc::kMissingItem, "id '" + ids[i] + "' not in embedding matrix");
      out.row(static_cast<Eigen::Index>(i)) = values_.row(static_cast<Eigen::Index>(*idx));
    }
    return EmbeddingMatrix({ids.begin(), ids.end()}, std::move(out), normalized_);
  }

  EmbeddingMatrix head(Eigen::Index n) const {
    n = std::min(n, rows());
    return EmbeddingMatrix({ids_.begin(), ids_.begin() + n}, values_.topRows(n), normalized_);
  }

 private:
  std::vector<std::string> ids_;
  RowMatrix values_;
  bool normalized_ = false;
  std::unordered_map<std::string, std::size_t> index_;
};

inline std::filesystem::path default_ids_path(const std::filesystem::path& matrix_path) {
  return std::filesystem::path(matrix_path.string() + ".ids");
}

inline std::vector<std::string> read_id_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(Errc::kIoError, "cannot open id file " + path.string());
  std::vector<std::string> ids;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    ids.push_back(line);
  }
  while (!ids.empty() && ids.back().empty()) ids.pop_back();
  return ids;
}

inline void write_id_file(const std::filesystem::path& path, std::span<const std::string> ids) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(Errc::kIoError, "cannot write " + path.string());
  for (const auto& id : ids) out << id << '\n';
}

/// Loads values and ids as stored; no normalization is applied.
inline EmbeddingMatrix load_embedding_matrix(const std::filesystem::path& path,
                                             std::optional<std::filesystem::path> ids_path = {}) {
  RowMatrix values = read_matrix_block(path);
  auto ids = read_id_file(ids_path.value_or(default_ids_path(path)));
  if (static_cast<Eigen::Index>(ids.size()) != values.rows()) {
    fail(Errc::kDimMismatch, path.string() + ": " + std::to_string(values.rows()) + " rows but " +
                                 std::to_string(ids.size()) + " ids");
  }
  return EmbeddingMatrix(std::move(ids), std::move(values), false);
}

inline void save_embedding_matrix(const std::filesystem::path& path, const EmbeddingMatrix& m,
                                  std::optional<std::filesystem::path> ids_path = {}) {
  write_matrix_block(path, m.values());
  write_id_file(ids_path.value_or(default_ids_path(path)), m.ids());
}

inline EmbeddingMatrix l2_normalize(const EmbeddingMatrix& m) {
  RowMatrix out = m.values();
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    const double norm = out.row(r).norm();
    if (norm < kZeroRowNorm) fail(Errc::kZeroRow, "row '" + m.ids()[r] + "' has zero norm");
    out.row(r) /= norm;
  }
  return EmbeddingMatrix(m.ids(), std::move(out), true);
}

// ---------------------------------------------------------------------------
// Tag and caption files (JSONL)

struct TagRecord {
  std::string image_id;
  std::vector<std::string> tags;
};

enum class CaptionSource { kHuman, kGenerated };

struct CaptionSet {
  std::string image_id;
  std::vector<std::string> captions;
  CaptionSource source = CaptionSource::kHuman;
};

inline std::string_view caption_source_name(CaptionSource s) {
  return s == CaptionSource::kHuman ? "human" : "generated";
}

/// Lowercase, whitespace-squashed tag phrase.
inline std::string normalize_tag(std::string_view tag) {
  return text::squash_whitespace(text::to_lower(tag));
}

namespace detail {

// Calls `fn(json, lineno)` for each record line. Blank lines and '#' header
// comments are skipped.
template <typename Fn>
void for_each_jsonl(const std::filesystem::path& path, Fn&& fn) {
  std::ifstream in(path);
  if (!in) fail(Errc::kIoError, "cannot open " + path.string());
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string trimmed = text::squash_whitespace(line);
    if (trimmed.empty() || trimmed.front() == '#') continue;
    nlohmann::json j = nlohmann::json::parse(trimmed, nullptr, false);
    if (j.is_discarded() || !j.is_object()) {
      fail(Errc::kMalformedLine, path.string() + ":" + std::to_string(lineno) + ": not a JSON object");
    }
    fn(j, lineno);
  }
}

inline std::vector<std::string> string_list_field(const nlohmann::json& j, const char* field,
                                                  const std::string& where) {
  auto it = j.find(field);
  if (it == j.end() || !it->is_array()) fail(Errc::kMissingField, where + ": missing array field '" + field + "'");
  std::vector<std::string> out;
  for (const auto& v : *it) {
    if (!v.is_string()) fail(Errc::kMissingField, where + ": '" + field + "' must hold strings");
    out.push_back(v.get<std::string>());
  }
  return out;
}

inline std::string string_field(const nlohmann::json& j, const char* field, const std::string& where) {
  auto it = j.find(field);
  if (it == j.end() || !it->is_string()) fail(Errc::kMissingField, where + ": missing string field '" + field + "'");
  return it->get<std::string>();
}

}  // namespace detail

/// Parses a tag JSONL file; phrases are normalized and deduplicated per image
/// keeping first-occurrence order.
inline std::vector<TagRecord> load_tags(const std::filesystem::path& path) {
  std::vector<TagRecord> records;
  detail::for_each_jsonl(path, [&](const nlohmann::json& j, std::size_t lineno) {
    const std::string where = path.string() + ":" + std::to_string(lineno);
    TagRecord rec;
    rec.image_id = detail::string_field(j, "image_id", where);
    std::unordered_set<std::string> seen;
    for (const auto& raw : detail::string_list_field(j, "tags", where)) {
      std::string tag = normalize_tag(raw);
      if (!tag.empty() && seen.insert(tag).second) rec.tags.push_back(std::move(tag));
    }
    records.push_back(std::move(rec));
  });
  return records;
}

inline std::vector<CaptionSet> load_captions(const std::filesystem::path& path) {
  std::vector<CaptionSet> sets;
  detail::for_each_jsonl(path, [&](const nlohmann::json& j, std::size_t lineno) {
    const std::string where = path.string() + ":" + std::to_string(lineno);
    CaptionSet set;
    set.image_id = detail::string_field(j, "image_id", where);
    for (auto& c : detail::string_list_field(j, "captions", where)) {
      std::string squashed = text::squash_whitespace(c);
      if (!squashed.empty()) set.captions.push_back(std::move(squashed));
    }
    if (set.captions.empty()) fail(Errc::kMissingField, where + ": 'captions' is empty");
    if (auto it = j.find("source"); it != j.end()) {
      if (*it == "generated") {
        set.source = CaptionSource::kGenerated;
      } else if (*it != "human") {
        fail(Errc::kMalformedLine, where + ": unknown caption source");
      }
    }
    sets.push_back(std::move(set));
  });
  return sets;
}

inline void write_tags(const std::filesystem::path& path, std::span<const TagRecord> records) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(Errc::kIoError, "cannot write " + path.string());
  for (const auto& r : records) {
    out << nlohmann::json{{"image_id", r.image_id}, {"tags", r.tags}}.dump() << '\n';
  }
}

inline void write_captions(const std::filesystem::path& path, std::span<const CaptionSet> sets) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(Errc::kIoError, "cannot write " + path.string());
  for (const auto& s : sets) {
    out << nlohmann::json{{"image_id", s.image_id},
                          {"captions", s.captions},
                          {"source", std::string(caption_source_name(s.source))}}
               .dump()
        << '\n';
  }
}

// ---------------------------------------------------------------------------
// Dataset splits

struct DatasetSplit {
  std::vector<std::string> train;
  std::vector<std::string> val;
  std::vector<std::string> test;
  std::uint64_t seed = 0;
};

namespace detail {

// Portable bounded draw; std::uniform_int_distribution is not specified
// bit-for-bit across standard libraries.
inline std::uint64_t bounded(std::mt19937_64& rng, std::uint64_t bound) {
  const std::uint64_t limit = UINT64_MAX - (UINT64_MAX % bound);
  std::uint64_t x;
  do {
    x = rng();
  } while (x >= limit);
  return x % bound;
}

}  // namespace detail

/// Seeded Fisher-Yates shuffle, then val = first val_n, test = next test_n,
/// train = the remainder.
inline DatasetSplit make_split(std::span<const std::string> ids, std::uint64_t seed, std::size_t val_n,
                               std::size_t test_n) {
  if (val_n + test_n > ids.size()) {
    fail(Errc::kNotEnoughIds, "requested " + std::to_string(val_n + test_n) + " held-out ids from " +
                                  std::to_string(ids.size()));
  }
  std::unordered_set<std::string_view> seen;
  for (const auto& id : ids) {
    if (!seen.insert(id).second) fail(Errc::kDuplicateId, "duplicate id '" + id + "'");
  }
  std::vector<std::string> order(ids.begin(), ids.end());
  std::mt19937_64 rng(seed);
  for (std::size_t i = order.size(); i > 1; --i) {
    std::swap(order[i - 1], order[detail::bounded(rng, i)]);
  }
  DatasetSplit split;
  split.seed = seed;
  split.val.assign(order.begin(), order.begin() + val_n);
  split.test.assign(order.begin() + val_n, order.begin() + val_n + test_n);
  split.train.assign(order.begin() + val_n + test_n, order.end());
  return split;
}

}  // namespace slime
