#pragma once

// Model-backed attack steps: captions from retrieved tags, structured scene
// extraction, and captions regenerated from parts of a scene.

#include <cctype>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "slime/client.hpp"
#include "slime/error.hpp"
#include "slime/prompts.hpp"
#include "slime/scene.hpp"
#include "slime/text.hpp"

namespace slime {

struct ModelSpec {
  std::string provider;
  std::string model;
  int max_tokens = 1024;
};

/// Items of a numbered list ("1. text", "2) text"), in order. Throws
/// ParseError when fewer than `n` are present; extra items are dropped.
inline std::vector<std::string> parse_numbered_list(std::string_view raw, std::size_t n) {
  std::vector<std::string> items;
  std::size_t pos = 0;
  while (pos <= raw.size()) {
    auto end = raw.find('\n', pos);
    if (end == std::string_view::npos) end = raw.size();
    std::string_view line = raw.substr(pos, end - pos);
    pos = end + 1;

    std::size_t i = 0;
    while (i < line.size() && (std::isspace(static_cast<unsigned char>(line[i])) || line[i] == '*' || line[i] == '#')) ++i;
    const std::size_t digits = i;
    while (i < line.size() && std::isdigit(static_cast<unsigned char>(line[i]))) ++i;
    if (i == digits || i >= line.size() || (line[i] != '.' && line[i] != ')' && line[i] != ':')) continue;
    ++i;
    while (i < line.size() && line[i] == '*') ++i;
    std::string item = text::squash_whitespace(line.substr(i));
    while (item.size() >= 2 && ((item.front() == '"' && item.back() == '"') || (item.front() == '*' && item.back() == '*'))) {
      item = text::squash_whitespace(std::string_view(item).substr(1, item.size() - 2));
    }
    if (!item.empty()) items.push_back(std::move(item));
  }
  if (items.size() < n) {
    throw ParseError("expected " + std::to_string(n) + " numbered items, found " + std::to_string(items.size()),
                     std::string(raw));
  }
  items.resize(n);
  return items;
}

namespace detail {

inline std::string bullet_lines(std::span<const std::string> xs) {
  std::string out;
  for (const auto& x : xs) out += "- " + x + "\n";
  if (!out.empty()) out.pop_back();
  return out;
}

inline ChatRequest templated_request(const PromptTemplate& t, const std::map<std::string, std::string>& vars,
                                     const ModelSpec& spec, std::optional<ImagePayload> image = std::nullopt) {
  ChatRequest r;
  r.provider = spec.provider;
  r.model = spec.model;
  r.max_tokens = spec.max_tokens;
  r.temperature = 0.0;
  r.prompt_id = std::string(t.id);
  r.messages.push_back({"system", std::string(t.system), std::nullopt});
  r.messages.push_back({"user", render_template(t.user, vars), std::move(image)});
  return r;
}

}  // namespace detail

inline ChatRequest captions_from_tags_request(std::span<const std::string> tags, std::size_t n, const ModelSpec& spec) {
  if (tags.empty()) fail(Errc::kNoInputs, "caption generation needs at least one tag");
  if (n < 1) fail(Errc::kInvalidArgument, "caption count must be at least 1");
  return detail::templated_request(kCaptionsFromTags, {{"tags", detail::bullet_lines(tags)}, {"n", std::to_string(n)}},
                                   spec);
}

/// Exactly `n` captions written from the tag list.
inline std::vector<std::string> generate_captions_from_tags(std::span<const std::string> tags, std::size_t n,
                                                            ChatClient& client, const ModelSpec& spec) {
  const auto request = captions_from_tags_request(tags, n, spec);
  return parse_numbered_list(client.chat(request), n);
}

struct SceneInputs {
  std::vector<std::string> tags;
  std::vector<std::string> captions;
  std::optional<ImagePayload> image;

  bool empty() const { return tags.empty() && captions.empty() && !image; }
};

inline ChatRequest scene_request(const SceneInputs& in, const ModelSpec& spec) {
  if (in.empty()) fail(Errc::kNoInputs, "scene extraction needs tags, captions or an image");
  std::string evidence;
  if (!in.tags.empty()) evidence += "Tags:\n" + detail::bullet_lines(in.tags) + "\n";
  if (!in.captions.empty()) evidence += "Captions:\n" + detail::bullet_lines(in.captions) + "\n";
  if (in.image) evidence += "The photograph itself is attached.\n";
  return detail::templated_request(kSceneExtraction, {{"evidence", evidence}, {"predicates", predicate_list()}}, spec,
                                   in.image);
}

/// Structured scene from the model's JSON reply; relations with predicates
/// outside the vocabulary are dropped and counted.
inline SceneParse extract_scene(const SceneInputs& in, ChatClient& client, const ModelSpec& spec) {
  return parse_scene_json(client.chat(scene_request(in, spec)));
}

/// Which parts of a scene condition caption regeneration.
struct SceneParts {
  bool objects = false;
  bool relations = false;
  bool scenes = false;

  bool empty() const { return !objects && !relations && !scenes; }

  std::string name() const {
    std::string out;
    auto add = [&](bool on, const char* n) {
      if (!on) return;
      if (!out.empty()) out += "+";
      out += n;
    };
    add(objects, "objects");
    add(relations, "relations");
    add(scenes, "scenes");
    return out;
  }
};

/// The seven non-empty subsets of {objects, relations, scenes}.
inline std::vector<SceneParts> all_scene_part_subsets() {
  std::vector<SceneParts> out;
  for (int mask = 1; mask < 8; ++mask) out.push_back({(mask & 1) != 0, (mask & 2) != 0, (mask & 4) != 0});
  return out;
}

inline ChatRequest captions_from_scene_request(const StructuredScene& scene, SceneParts parts, std::size_t n,
                                               const ModelSpec& spec) {
  if (parts.empty()) fail(Errc::kNoInputs, "caption regeneration needs at least one scene part");
  if (n < 1) fail(Errc::kInvalidArgument, "caption count must be at least 1");
  return detail::templated_request(
      kCaptionsFromScene,
      {{"scene", render_scene(scene, parts.objects, parts.relations, parts.scenes)}, {"n", std::to_string(n)}}, spec);
}

inline std::vector<std::string> generate_captions_from_scene(const StructuredScene& scene, SceneParts parts,
                                                             std::size_t n, ChatClient& client, const ModelSpec& spec) {
  return parse_numbered_list(client.chat(captions_from_scene_request(scene, parts, n, spec)), n);
}

}  // namespace slime
