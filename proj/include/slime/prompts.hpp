#pragma once

// Versioned prompt templates. A template id ("name@vN") is part of every
// request hash and every report; editing a template means bumping its version.

#include <array>
#include <map>
#include <string>
#include <string_view>

#include "slime/error.hpp"
#include "slime/scene.hpp"

namespace slime {

struct PromptTemplate {
  std::string_view id;
  std::string_view system;
  std::string_view user;  // {{name}} placeholders
};

inline constexpr PromptTemplate kCaptionsFromTags{
    "captions_from_tags@v1",
    "You write concise, factual image captions.",
    R"(The following tags were extracted from a single photograph:
{{tags}}

Write {{n}} different one-sentence captions describing the photograph. Use only what the tags support.
Reply with a numbered list and nothing else, one caption per line:
1. <caption>
2. <caption>)"};

inline constexpr PromptTemplate kSceneExtraction{
    "scene_extraction@v1",
    "You describe the contents of a photograph as strict JSON.",
    R"(Describe the photograph using the evidence below.
{{evidence}}
Return one JSON object with exactly these fields:
  "objects": list of object nouns (singular),
  "relations": list of {"subject": noun, "predicate": p, "object": noun} where p is one of: {{predicates}},
  "scenes": list of {"label": scene type, "confidence": number between 0 and 1}.
Output the JSON object only.)"};

inline constexpr PromptTemplate kCaptionsFromScene{
    "captions_from_scene@v1",
    "You write concise, factual image captions.",
    R"(A photograph has this structured description:
{{scene}}
Write {{n}} different one-sentence captions describing the photograph. Use only what the description supports.
Reply with a numbered list and nothing else, one caption per line:
1. <caption>
2. <caption>)"};

inline constexpr std::array<const PromptTemplate*, 3> kPromptTemplates = {&kCaptionsFromTags, &kSceneExtraction,
                                                                         &kCaptionsFromScene};

/// Replaces every {{name}} with vars[name]; an unknown name is an error.
inline std::string render_template(std::string_view tmpl, const std::map<std::string, std::string>& vars) {
  std::string out;
  std::size_t pos = 0;
  while (true) {
    const auto open = tmpl.find("{{", pos);
    if (open == std::string_view::npos) break;
    const auto close = tmpl.find("}}", open + 2);
    if (close == std::string_view::npos) break;
    out.append(tmpl.substr(pos, open - pos));
    const std::string name(tmpl.substr(open + 2, close - open - 2));
    auto it = vars.find(name);
    if (it == vars.end()) fail(Errc::kInvalidArgument, "prompt variable '" + name + "' has no value");
    out += it->second;
    pos = close + 2;
  }
  out.append(tmpl.substr(pos));
  return out;
}

inline std::string predicate_list() {
  std::string out;
  for (std::size_t i = 0; i < kPredicates.size(); ++i) {
    if (i) out += ", ";
    out += kPredicates[i];
  }
  return out;
}

}  // namespace slime
