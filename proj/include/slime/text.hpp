#pragma once

// Text normalization shared by the tag loaders, the text metrics and the
// structured-scene parser. The tokenizer is versioned because every text
// score depends on it.

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace slime::text {

inline constexpr std::string_view kTokenizerVersion = "slime-tok-v1";

namespace detail {

struct Decoded {
  char32_t cp;
  std::size_t len;
};

inline Decoded decode_utf8(std::string_view s, std::size_t i) {
  const auto b0 = static_cast<unsigned char>(s[i]);
  auto cont = [&](std::size_t k) -> int {
    if (i + k >= s.size()) return -1;
    const auto b = static_cast<unsigned char>(s[i + k]);
    return (b & 0xC0) == 0x80 ? (b & 0x3F) : -1;
  };
  if (b0 < 0x80) return {b0, 1};
  if ((b0 & 0xE0) == 0xC0) {
    const int c1 = cont(1);
    if (c1 < 0 || b0 < 0xC2) return {0xFFFD, 1};
    return {static_cast<char32_t>(((b0 & 0x1F) << 6) | c1), 2};
  }
  if ((b0 & 0xF0) == 0xE0) {
    const int c1 = cont(1), c2 = cont(2);
    if (c1 < 0 || c2 < 0) return {0xFFFD, 1};
    const char32_t cp = ((b0 & 0x0F) << 12) | (c1 << 6) | c2;
    if (cp < 0x800 || (cp >= 0xD800 && cp <= 0xDFFF)) return {0xFFFD, 1};
    return {cp, 3};
  }
  if ((b0 & 0xF8) == 0xF0) {
    const int c1 = cont(1), c2 = cont(2), c3 = cont(3);
    if (c1 < 0 || c2 < 0 || c3 < 0) return {0xFFFD, 1};
    const char32_t cp = ((b0 & 0x07) << 18) | (c1 << 12) | (c2 << 6) | c3;
    if (cp < 0x10000 || cp > 0x10FFFF) return {0xFFFD, 1};
    return {cp, 4};
  }
  return {0xFFFD, 1};
}

inline void append_utf8(std::string& out, char32_t cp) {
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else if (cp < 0x10000) {
    out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
}

// Covers ASCII, Latin-1, Latin Extended-A, Greek and Cyrillic capitals.
inline char32_t to_lower_cp(char32_t cp) {
  if (cp >= 'A' && cp <= 'Z') return cp + 32;
  if (cp < 0x80) return cp;
  if (cp >= 0xC0 && cp <= 0xDE && cp != 0xD7) return cp + 32;
  if (cp >= 0x100 && cp <= 0x137) return (cp % 2 == 0) ? cp + 1 : cp;
  if (cp >= 0x139 && cp <= 0x148) return (cp % 2 == 1) ? cp + 1 : cp;
  if (cp >= 0x14A && cp <= 0x177) return (cp % 2 == 0) ? cp + 1 : cp;
  if (cp == 0x178) return 0xFF;
  if (cp >= 0x179 && cp <= 0x17E) return (cp % 2 == 1) ? cp + 1 : cp;
  if (cp >= 0x391 && cp <= 0x3A9 && cp != 0x3A2) return cp + 32;
  if (cp >= 0x410 && cp <= 0x42F) return cp + 32;
  if (cp >= 0x400 && cp <= 0x40F) return cp + 80;
  return cp;
}

inline bool is_word_cp(char32_t cp) {
  if (cp < 0x80) {
    return (cp >= 'a' && cp <= 'z') || (cp >= 'A' && cp <= 'Z') || (cp >= '0' && cp <= '9');
  }
  if (cp == 0xFFFD) return false;
  if (cp <= 0xBF) return false;  // C1 controls, Latin-1 punctuation and symbols
  if (cp == 0xD7 || cp == 0xF7) return false;
  if (cp >= 0x2000 && cp <= 0x206F) return false;  // general punctuation
  if (cp >= 0x20A0 && cp <= 0x20CF) return false;  // currency
  if (cp >= 0x2190 && cp <= 0x2BFF) return false;  // arrows, math, box drawing
  if (cp >= 0x3000 && cp <= 0x303F) return false;  // CJK punctuation
  if (cp >= 0xFE30 && cp <= 0xFE4F) return false;
  if (cp >= 0xFF00 && cp <= 0xFF0F) return false;
  if (cp >= 0xFF1A && cp <= 0xFF20) return false;
  if (cp >= 0xFF3B && cp <= 0xFF40) return false;
  if (cp >= 0xFF5B && cp <= 0xFF65) return false;
  if (cp >= 0x1F000 && cp <= 0x1FAFF) return false;  // emoji and pictographs
  return true;
}

inline bool is_space_cp(char32_t cp) {
  return cp == ' ' || cp == '\t' || cp == '\n' || cp == '\r' || cp == '\v' || cp == '\f' ||
         cp == 0xA0 || cp == 0x3000 || (cp >= 0x2000 && cp <= 0x200A);
}

}  // namespace detail

inline std::string to_lower(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  for (std::size_t i = 0; i < s.size();) {
    const auto d = detail::decode_utf8(s, i);
    if (d.cp == 0xFFFD && d.len == 1 && static_cast<unsigned char>(s[i]) >= 0x80) {
      out.push_back(s[i]);  // keep undecodable bytes verbatim
    } else {
      detail::append_utf8(out, detail::to_lower_cp(d.cp));
    }
    i += d.len;
  }
  return out;
}

/// Trims and collapses internal whitespace runs to one ASCII space.
inline std::string squash_whitespace(std::string_view s) {
  std::string out;
  bool pending_space = false;
  for (std::size_t i = 0; i < s.size();) {
    const auto d = detail::decode_utf8(s, i);
    if (detail::is_space_cp(d.cp)) {
      pending_space = !out.empty();
    } else {
      if (pending_space) out.push_back(' ');
      pending_space = false;
      out.append(s.substr(i, d.len));
    }
    i += d.len;
  }
  return out;
}

/// Lowercased word tokens; every run of non letter/digit code points separates.
inline std::vector<std::string> tokenize(std::string_view s) {
  std::vector<std::string> tokens;
  std::string current;
  for (std::size_t i = 0; i < s.size();) {
    const auto d = detail::decode_utf8(s, i);
    if (detail::is_word_cp(d.cp)) {
      detail::append_utf8(current, detail::to_lower_cp(d.cp));
    } else if (!current.empty()) {
      tokens.push_back(std::move(current));
      current.clear();
    }
    i += d.len;
  }
  if (!current.empty()) tokens.push_back(std::move(current));
  return tokens;
}

/// Singular form of an English noun; rule based with a short irregular table.
inline std::string lemmatize_noun(std::string_view word) {
  static const std::unordered_map<std::string_view, std::string_view> kIrregular = {
      {"men", "man"},         {"women", "woman"},     {"children", "child"},
      {"people", "person"},   {"feet", "foot"},       {"teeth", "tooth"},
      {"mice", "mouse"},      {"geese", "goose"},     {"knives", "knife"},
      {"leaves", "leaf"},     {"shelves", "shelf"},   {"wolves", "wolf"},
      {"loaves", "loaf"},     {"halves", "half"},     {"calves", "calf"},
      {"lives", "life"},      {"wives", "wife"},      {"scarves", "scarf"},
      {"thieves", "thief"},   {"tomatoes", "tomato"}, {"potatoes", "potato"},
      {"heroes", "hero"},     {"shoes", "shoe"},      {"toes", "toe"},
      {"oxen", "ox"},         {"dice", "die"},        {"sheep", "sheep"},
      {"fish", "fish"},       {"deer", "deer"},       {"series", "series"},
      {"species", "species"}, {"news", "news"},       {"pants", "pants"},
      {"scissors", "scissors"}, {"glasses", "glasses"}, {"ties", "tie"},
      {"pies", "pie"},        {"movies", "movie"},    {"cookies", "cookie"},
  };
  const std::string w(word);
  if (auto it = kIrregular.find(word); it != kIrregular.end()) return std::string(it->second);
  auto ends_with = [&](std::string_view suffix) {
    return w.size() >= suffix.size() && w.compare(w.size() - suffix.size(), suffix.size(), suffix) == 0;
  };
  if (w.size() <= 3) return w;
  if (ends_with("ss") || ends_with("us") || ends_with("is")) return w;
  if (ends_with("ies") && w.size() > 4) return w.substr(0, w.size() - 3) + "y";
  if (ends_with("sses") || ends_with("xes") || ends_with("ches") || ends_with("shes") ||
      ends_with("zzes")) {
    return w.substr(0, w.size() - 2);
  }
  if (ends_with("s")) return w.substr(0, w.size() - 1);
  return w;
}

/// Lowercases, squashes whitespace and lemmatizes the head (last) word.
inline std::string normalize_noun_phrase(std::string_view phrase) {
  std::string p = squash_whitespace(to_lower(phrase));
  const auto pos = p.rfind(' ');
  const std::size_t head = pos == std::string::npos ? 0 : pos + 1;
  return p.substr(0, head) + lemmatize_noun(std::string_view(p).substr(head));
}

}  // namespace slime::text
