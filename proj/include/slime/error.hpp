#pragma once

#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>

namespace slime {

enum class Errc {
  // embedding-store
  kBadMagic,
  kDimMismatch,
  kDuplicateId,
  kZeroRow,
  kMalformedLine,
  kMissingField,
  kNotEnoughIds,
  kNonFiniteInput,
  kIoError,
  // alignment
  kIdOrderMismatch,
  kSolverFailure,
  // retriever
  kEmptyPositives,
  kDivergence,
  kKOutOfRange,
  kEmptyGroupSide,
  // metrics
  kUnknownTag,
  kMOutOfRange,
  kEmptySet,
  kEmptyText,
  kMissingItem,
  kInvalidPredicate,
  // model-clients
  kProviderError,
  kParseError,
  kCacheMiss,
  kNoInputs,
  // pipeline
  kConfigError,
  kInvalidArgument,
};

inline std::string_view errc_name(Errc code) {
  switch (code) {
    case Errc::kBadMagic: return "BadMagic";
    case Errc::kDimMismatch: return "DimMismatch";
    case Errc::kDuplicateId: return "DuplicateId";
    case Errc::kZeroRow: return "ZeroRow";
    case Errc::kMalformedLine: return "MalformedLine";
    case Errc::kMissingField: return "MissingField";
    case Errc::kNotEnoughIds: return "NotEnoughIds";
    case Errc::kNonFiniteInput: return "NonFiniteInput";
    case Errc::kIoError: return "IoError";
    case Errc::kIdOrderMismatch: return "IdOrderMismatch";
    case Errc::kSolverFailure: return "SolverFailure";
    case Errc::kEmptyPositives: return "EmptyPositives";
    case Errc::kDivergence: return "Divergence";
    case Errc::kKOutOfRange: return "KOutOfRange";
    case Errc::kEmptyGroupSide: return "EmptyGroupSide";
    case Errc::kUnknownTag: return "UnknownTag";
    case Errc::kMOutOfRange: return "MOutOfRange";
    case Errc::kEmptySet: return "EmptySet";
    case Errc::kEmptyText: return "EmptyText";
    case Errc::kMissingItem: return "MissingItem";
    case Errc::kInvalidPredicate: return "InvalidPredicate";
    case Errc::kProviderError: return "ProviderError";
    case Errc::kParseError: return "ParseError";
    case Errc::kCacheMiss: return "CacheMiss";
    case Errc::kNoInputs: return "NoInputs";
    case Errc::kConfigError: return "ConfigError";
    case Errc::kInvalidArgument: return "InvalidArgument";
  }
  return "Unknown";
}

/// Process exit code for an error: 2 config, 3 data, 4 provider.
inline int exit_code_for(Errc code) {
  switch (code) {
    case Errc::kConfigError:
    case Errc::kInvalidArgument:
      return 2;
    case Errc::kProviderError:
    case Errc::kParseError:
    case Errc::kCacheMiss:
      return 4;
    default:
      return 3;
  }
}

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

class ProviderError : public Error {
 public:
  ProviderError(int status, const std::string& what)
      : Error(Errc::kProviderError, "status " + std::to_string(status) + ": " + what),
        status_(status) {}

  int status() const noexcept { return status_; }

 private:
  int status_;
};

// Keeps the raw model output so it can be audited after a failed parse.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::string raw)
      : Error(Errc::kParseError, what), raw_(std::move(raw)) {}

  const std::string& raw() const noexcept { return raw_; }

 private:
  std::string raw_;
};

[[noreturn]] inline void fail(Errc code, const std::string& what) { throw Error(code, what); }

}  // namespace slime
