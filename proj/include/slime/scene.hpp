#pragma once

// Structured scene descriptions: objects, (subject, predicate, object)
// relations over a closed predicate vocabulary, and scored scene labels.

#include <algorithm>
#include <array>
#include <cmath>
#include <compare>
#include <cstdio>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "slime/error.hpp"
#include "slime/text.hpp"

namespace slime {

inline constexpr std::array<std::string_view, 9> kPredicates = {
    "on", "over", "under", "inside", "covering", "hanging_over", "enclosing", "next_to", "part_of"};

/// Lowercase, trimmed, with spaces and hyphens mapped to underscores.
inline std::string normalize_predicate(std::string_view raw) {
  std::string p = text::squash_whitespace(text::to_lower(raw));
  std::replace(p.begin(), p.end(), ' ', '_');
  std::replace(p.begin(), p.end(), '-', '_');
  return p;
}

inline bool is_valid_predicate(std::string_view p) {
  return std::find(kPredicates.begin(), kPredicates.end(), p) != kPredicates.end();
}

struct Relation {
  std::string subject;
  std::string predicate;
  std::string object;

  auto operator<=>(const Relation&) const = default;
};

struct SceneLabel {
  std::string label;
  double confidence = 1.0;
};

struct StructuredScene {
  std::set<std::string> objects;
  std::set<Relation> relations;
  std::vector<SceneLabel> scenes;

  std::set<std::string> scene_labels() const {
    std::set<std::string> out;
    for (const auto& s : scenes) out.insert(s.label);
    return out;
  }
};

/// Throws InvalidPredicate when any relation uses a predicate outside the
/// vocabulary.
inline void validate_scene(const StructuredScene& scene) {
  for (const auto& r : scene.relations) {
    if (!is_valid_predicate(r.predicate)) {
      fail(Errc::kInvalidPredicate, "predicate '" + r.predicate + "' in (" + r.subject + ", " + r.object + ")");
    }
  }
}

/// Builds a scene from raw strings: nouns are lemmatized, predicates
/// normalized and validated, confidences clamped to [0, 1].
class SceneBuilder {
 public:
  SceneBuilder& object(std::string_view noun) {
    const auto n = text::normalize_noun_phrase(noun);
    if (!n.empty()) scene_.objects.insert(n);
    return *this;
  }

  SceneBuilder& relation(std::string_view subject, std::string_view predicate, std::string_view object) {
    Relation r{text::normalize_noun_phrase(subject), normalize_predicate(predicate), text::normalize_noun_phrase(object)};
    if (!is_valid_predicate(r.predicate)) fail(Errc::kInvalidPredicate, "predicate '" + r.predicate + "'");
    scene_.relations.insert(std::move(r));
    return *this;
  }

  SceneBuilder& scene(std::string_view label, double confidence) {
    const auto l = text::normalize_noun_phrase(label);
    if (l.empty()) return *this;
    confidence = std::isfinite(confidence) ? std::clamp(confidence, 0.0, 1.0) : 0.0;
    auto it = std::find_if(scene_.scenes.begin(), scene_.scenes.end(), [&](const SceneLabel& s) { return s.label == l; });
    if (it == scene_.scenes.end()) {
      scene_.scenes.push_back({l, confidence});
    } else {
      it->confidence = std::max(it->confidence, confidence);
    }
    return *this;
  }

  StructuredScene build() const { return scene_; }

 private:
  StructuredScene scene_;
};

inline nlohmann::json scene_to_json(const StructuredScene& s) {
  nlohmann::json rel = nlohmann::json::array();
  for (const auto& r : s.relations) rel.push_back({{"subject", r.subject}, {"predicate", r.predicate}, {"object", r.object}});
  nlohmann::json sc = nlohmann::json::array();
  for (const auto& l : s.scenes) sc.push_back({{"label", l.label}, {"confidence", l.confidence}});
  return {{"objects", s.objects}, {"relations", rel}, {"scenes", sc}};
}

struct SceneParse {
  StructuredScene scene;
  std::size_t dropped_predicates = 0;
};

namespace detail {

// Drops a surrounding markdown fence and anything outside the outermost braces.
inline std::string extract_json_object(std::string_view raw) {
  const auto open = raw.find('{');
  const auto close = raw.rfind('}');
  if (open == std::string_view::npos || close == std::string_view::npos || close < open) return {};
  return std::string(raw.substr(open, close - open + 1));
}

}  // namespace detail

/// Parses a model's JSON scene description. Relations with predicates outside
/// the vocabulary are dropped and counted. Throws ParseError (keeping `raw`)
/// on malformed JSON or wrong field types.
inline SceneParse parse_scene_json(std::string_view raw) {
  const auto body = detail::extract_json_object(raw);
  const auto j = nlohmann::json::parse(body, nullptr, false);
  if (body.empty() || j.is_discarded() || !j.is_object()) throw ParseError("scene response is not a JSON object", std::string(raw));
  if (!j.contains("objects") && !j.contains("relations") && !j.contains("scenes")) {
    throw ParseError("scene response has none of objects/relations/scenes", std::string(raw));
  }
  auto array_field = [&](const char* key) {
    if (!j.contains(key) || j.at(key).is_null()) return nlohmann::json::array();
    if (!j.at(key).is_array()) throw ParseError(std::string("field '") + key + "' is not an array", std::string(raw));
    return j.at(key);
  };
  auto str = [&](const nlohmann::json& v, const char* what) {
    if (!v.is_string()) throw ParseError(std::string(what) + " is not a string", std::string(raw));
    return v.get<std::string>();
  };

  SceneBuilder b;
  SceneParse out;
  for (const auto& o : array_field("objects")) b.object(str(o, "object"));
  for (const auto& r : array_field("relations")) {
    std::string s, p, o;
    if (r.is_object()) {
      s = str(r.value("subject", nlohmann::json()), "relation subject");
      p = str(r.value("predicate", nlohmann::json()), "relation predicate");
      o = str(r.value("object", nlohmann::json()), "relation object");
    } else if (r.is_array() && r.size() == 3) {
      s = str(r[0], "relation subject");
      p = str(r[1], "relation predicate");
      o = str(r[2], "relation object");
    } else {
      throw ParseError("relation entry has an unexpected shape", std::string(raw));
    }
    if (!is_valid_predicate(normalize_predicate(p))) {
      ++out.dropped_predicates;
      continue;
    }
    b.relation(s, p, o);
  }
  for (const auto& sc : array_field("scenes")) {
    if (sc.is_string()) {
      b.scene(sc.get<std::string>(), 1.0);
    } else if (sc.is_object()) {
      const auto& c = sc.value("confidence", nlohmann::json(1.0));
      if (!c.is_number()) throw ParseError("scene confidence is not a number", std::string(raw));
      b.scene(str(sc.value("label", nlohmann::json()), "scene label"), c.get<double>());
    } else {
      throw ParseError("scene entry has an unexpected shape", std::string(raw));
    }
  }
  out.scene = b.build();
  return out;
}

/// Plain-text rendering used when conditioning later prompts on a scene.
inline std::string render_scene(const StructuredScene& s, bool objects, bool relations, bool scenes) {
  std::string out;
  if (objects) {
    out += "Objects:";
    for (const auto& o : s.objects) out += "\n- " + o;
    out += '\n';
  }
  if (relations) {
    out += "Relations:";
    for (const auto& r : s.relations) out += "\n- " + r.subject + " " + r.predicate + " " + r.object;
    out += '\n';
  }
  if (scenes) {
    out += "Scenes:";
    for (const auto& l : s.scenes) {
      char conf[16];
      std::snprintf(conf, sizeof conf, "%.2f", l.confidence);
      out += "\n- " + l.label + " (" + conf + ")";
    }
    out += '\n';
  }
  return out;
}

}  // namespace slime
