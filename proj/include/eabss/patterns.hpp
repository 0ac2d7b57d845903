#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "eabss/core.hpp"
#include "eabss/script.hpp"

namespace eabss::patterns {

enum class PatternKind { General, CoCreation, Table, Diagram };

inline std::string_view to_string(PatternKind k) {
  switch (k) {
    case PatternKind::General: return "general";
    case PatternKind::CoCreation: return "cocreation";
    case PatternKind::Table: return "table";
    case PatternKind::Diagram: return "diagram";
  }
  return "general";
}

inline PatternKind pattern_kind_from_string(std::string_view s) {
  auto l = text::to_lower(s);
  l.erase(std::remove_if(l.begin(), l.end(), [](char c) { return c == '-' || c == '_' || c == ' '; }),
          l.end());
  if (l == "general") return PatternKind::General;
  if (l == "cocreation") return PatternKind::CoCreation;
  if (l == "table") return PatternKind::Table;
  if (l == "diagram") return PatternKind::Diagram;
  throw Error(ErrorCode::ConfigError, fmt::format("unknown pattern kind '{}'", s));
}

/// One configured use of a pattern. Scalar slots live in `slots`; list slots
/// (requirements, specifications, guidelines, terms, extra_features) in
/// `lists`. Optional and intervene commands are enabled by their pattern
/// command number.
struct PatternInstance {
  PatternKind kind = PatternKind::General;
  std::map<std::string, std::string> slots;
  std::map<std::string, std::vector<std::string>> lists;
  std::set<int> include_optional;
  std::set<int> intervene_points;
};

struct Expansion {
  script::PromptChain main;
  /// Paused chains that the user dispatches by hand, in command order.
  std::vector<script::PromptChain> intervene;
  /// Pattern command number of each emitted fragment of `main`, in order.
  std::vector<int> command_indices;
};

struct GenerationDefaults {
  double temperature = 1.8;
  double top_p = 0.9;
  std::string role = "Sociologist";
  std::string experience = "Agent-Based Social Simulation";
  std::string tone = "scientific tone";
};

enum class RefinementKind { Remove, Add, IncreaseComplexity, Reflect };

inline const std::string& default_table_rules() {
  static const std::string rules =
      "Use TABLE format WITH \"plaintext\" and WITHOUT any code formatting. DO NOT use \"\\n\". "
      "IGNORE ALL space limitations";
  return rules;
}

namespace detail {

enum class Presence { Always, Optional, IfListPresent, IfSlotPresent };

struct Fragment {
  int command;
  const char* joiner;
  const char* text;
  Presence presence = Presence::Always;
  const char* gate = nullptr;  // list or slot name for the If*Present variants
};

// clang-format off
inline const std::vector<Fragment>& general_fragments() {
  static const std::vector<Fragment> f = {
      {1, "", "Take on the role of a \"{role}\" with experience in \"{experience}\""},
      {2, "| ", "Provide definitions of relevant terms in the context of the role adopted: {terms}"},
      {3, "| ", "Define {element_count} {elements}"},
      {4, ". ", "The following requirements must be satisfied when choosing these elements: {requirements}", Presence::Optional},
      {5, ". ", "Provide further specifications ({specifications}) for these elements"},
      {6, "| ", "Use provided output format: {output_format}", Presence::Optional},
      {7, "| ", "Memorise these details as {key_braced}"},
  };
  return f;
}

inline const std::vector<Fragment>& cocreation_fragments() {
  static const std::vector<Fragment> f = {
      {1, "", "Play a co-creation role-play game in which all the memorised {participants} discuss with each other potential {topic} for the study considering the pros and cons"},
      {2, ". ", "Use a \"debating tone\""},
      {3, ". ", "The moderator focuses on 1 novel RANDOM question"},
      {4, ". ", "Provide the question and the details of the controversial discussion"},
      {5, "| ", "Agree on {agree_count} potential {topic} that satisfy the view of all participating memorised {participants}"},
      {5, "| ", "Memorise these potential {topic} as {key_braced}"},
      {6, "| ", "Propose {criteria_count} criteria for ranking the {agree_count} potential {topic} to support the decision which {decision_subject} to carry forward", Presence::Optional},
      {7, "| ", "Use provided output format: {output_format}", Presence::Optional},
      {8, "| ", "Use a \"scientific tone\""},
  };
  return f;
}

inline const std::vector<Fragment>& table_fragments() {
  static const std::vector<Fragment> f = {
      {1, "", "{table_rules}"},
      {2, "| ", "Define {element_count} {elements}"},
      {3, ". ", "You ALWAYS must satisfy the following {requirements_count} requirements for defining {requirements_subject}: {requirements}", Presence::Optional},
      {4, ". ", "{specifications}", Presence::IfListPresent, "specifications"},
      {5, "| ", "{guidelines}", Presence::IfListPresent, "guidelines"},
      {6, ". ", "Memorise this table as {key_braced}"},
  };
  return f;
}

inline const std::vector<Fragment>& diagram_fragments() {
  static const std::vector<Fragment> f = {
      {1, "", "Generate a script for a 'comprehensive {diagram_kind} diagram' in \"Mermaid.js\""},
      {2, ". ", "{info_source}"},
      {3, ". ", "You ALWAYS must satisfy the following {requirements_count} requirements for defining the {diagram_kind} diagram: {requirements}"},
      {3, "| ", "{specifications}", Presence::IfListPresent, "specifications"},
      {4, ". ", "Increase complexity and add additional features: {extra_features}", Presence::Optional},
      {5, ". ", "Critically reflect and improve the script based on your reflection", Presence::Optional},
      {6, ". ", "Memorise this mermaid.js script as {key_braced}"},
  };
  return f;
}
// clang-format on

struct Shape {
  const std::vector<Fragment>* fragments;
  std::set<int> optional;
  int intervene_change;
  int intervene_complexity;
};

inline Shape shape_of(PatternKind k) {
  switch (k) {
    case PatternKind::General: return {&general_fragments(), {4, 6}, 8, 9};
    case PatternKind::CoCreation: return {&cocreation_fragments(), {6, 7}, 7, 8};
    case PatternKind::Table: return {&table_fragments(), {3}, 7, 8};
    case PatternKind::Diagram: return {&diagram_fragments(), {4, 5}, 7, 8};
  }
  return {&general_fragments(), {4, 6}, 8, 9};
}

inline bool is_count_slot(std::string_view name) {
  return name == "element_count" || name == "agree_count" || name == "criteria_count" ||
         name == "requirements_count";
}

/// Resolves slot values, including derived ones, for a single instance.
class SlotTable {
 public:
  explicit SlotTable(const PatternInstance& inst) : inst_(inst) {}

  std::string get(const std::string& name) const {
    if (name == "key" || name == "key_braced") {
      auto key = script::normalize_key(require_scalar("key"));
      if (!key) throw Error(ErrorCode::UnboundSlot, "key: not a key-... name");
      return name == "key" ? key->name : "{" + key->name + "}";
    }
    if (name == "participants") return scalar_or("participants", "key-stakeholders");
    if (name == "decision_subject") return scalar_or("decision_subject", require_scalar("topic"));
    if (name == "table_rules") return scalar_or("table_rules", default_table_rules());
    if (name == "requirements") return numbered(require_list("requirements"));
    if (name == "requirements_count") {
      if (auto it = inst_.slots.find(name); it != inst_.slots.end()) return checked_count(name, it->second);
      return std::to_string(require_list("requirements").size());
    }
    if (name == "requirements_subject") return scalar_or("requirements_subject", "these elements");
    if (name == "specifications" || name == "guidelines") {
      // General uses a comma list of specification types; Table and Diagram
      // use whole sentences.
      if (inst_.kind == PatternKind::General) return text::join(require_list(name), ", ");
      return text::join(require_list(name), ". ");
    }
    if (name == "terms" || name == "extra_features") return text::join(require_list(name), ", ");
    if (is_count_slot(name)) return checked_count(name, require_scalar(name));
    return require_scalar(name);
  }

  bool has_list(const std::string& name) const {
    auto it = inst_.lists.find(name);
    return it != inst_.lists.end() && !it->second.empty();
  }
  bool has_slot(const std::string& name) const {
    auto it = inst_.slots.find(name);
    return it != inst_.slots.end() && !text::trim_view(it->second).empty();
  }

 private:
  std::string require_scalar(const std::string& name) const {
    auto it = inst_.slots.find(name);
    if (it == inst_.slots.end() || text::trim_view(it->second).empty())
      throw Error(ErrorCode::UnboundSlot, name);
    return it->second;
  }
  std::string scalar_or(const std::string& name, std::string fallback) const {
    auto it = inst_.slots.find(name);
    if (it == inst_.slots.end() || text::trim_view(it->second).empty()) return fallback;
    return it->second;
  }
  const std::vector<std::string>& require_list(const std::string& name) const {
    auto it = inst_.lists.find(name);
    if (it == inst_.lists.end() || it->second.empty()) throw Error(ErrorCode::UnboundSlot, name);
    return it->second;
  }
  static std::string checked_count(const std::string& name, const std::string& value) {
    std::string v = text::trim(value);
    bool digits = !v.empty() && std::all_of(v.begin(), v.end(), [](char c) { return c >= '0' && c <= '9'; });
    if (!digits || v.size() > 9 || std::stol(v) <= 0)
      throw Error(ErrorCode::InvalidCount, fmt::format("{} must be a positive integer, got '{}'", name, value));
    return v;
  }
  static std::string numbered(const std::vector<std::string>& items) {
    std::vector<std::string> parts;
    for (std::size_t i = 0; i < items.size(); ++i) parts.push_back(fmt::format("{}) {}", i + 1, items[i]));
    return text::join(parts, ". ");
  }

  const PatternInstance& inst_;
};

/// Replaces {slot} placeholders. Braced key references ({key-...}) are not
/// slots and are left untouched; substituted values are not rescanned.
inline std::string substitute(std::string_view tmpl, const SlotTable& slots) {
  std::string out;
  std::size_t i = 0;
  while (i < tmpl.size()) {
    if (tmpl[i] == '{') {
      auto close = tmpl.find('}', i);
      std::string name(tmpl.substr(i + 1, close - i - 1));
      if (close != std::string_view::npos && !text::starts_with_icase(name, "key-")) {
        out += slots.get(name);
        i = close + 1;
        continue;
      }
    }
    out.push_back(tmpl[i++]);
  }
  return out;
}

inline void check_counts(const PatternInstance& inst) {
  for (auto& [name, value] : inst.slots) {
    if (!is_count_slot(name)) continue;
    SlotTable(inst).get(name);
  }
}

}  // namespace detail

/// Expands an instance into its command chain plus separate paused chains for
/// the enabled INTERVENE commands. Throws UnboundSlot or InvalidCount.
inline Expansion expand(const PatternInstance& inst) {
  detail::check_counts(inst);
  detail::SlotTable slots(inst);
  auto shape = detail::shape_of(inst.kind);
  Expansion out;
  std::string body;
  for (const auto& f : *shape.fragments) {
    bool on = true;
    switch (f.presence) {
      case detail::Presence::Always: break;
      case detail::Presence::Optional: on = inst.include_optional.count(f.command) > 0; break;
      case detail::Presence::IfListPresent: on = slots.has_list(f.gate); break;
      case detail::Presence::IfSlotPresent: on = slots.has_slot(f.gate); break;
    }
    if (!on) continue;
    body += body.empty() ? "" : f.joiner;
    body += detail::substitute(f.text, slots);
    out.command_indices.push_back(f.command);
  }
  body += ".";
  unsigned flags = inst.kind == PatternKind::CoCreation ? script::kCoCreationOptional : script::kNormal;
  out.main = script::parse_chain(body, flags);

  for (int point : inst.intervene_points) {
    std::string line;
    if (point == shape.intervene_change)
      line = fmt::format("{} and update related memorised {}.", slots.get("intervene_action"), slots.get("key"));
    else if (point == shape.intervene_complexity)
      line = fmt::format("Increase complexity and update related memorised {}.", slots.get("key"));
    else
      throw Error(ErrorCode::InvalidCount, fmt::format("{} is not an INTERVENE command of this pattern", point));
    out.intervene.push_back(script::parse_chain(line, script::kIntervene));
  }
  return out;
}

inline script::Command refinement(RefinementKind kind, std::string_view target, const script::KeyRef& key) {
  std::string t = text::trim(target);
  std::string line;
  switch (kind) {
    case RefinementKind::Remove:
    case RefinementKind::Add:
      if (t.empty()) throw Error(ErrorCode::EmptyTarget, "refinement target must not be empty");
      line = fmt::format("{} {}. Update the memorised {}.", kind == RefinementKind::Remove ? "Remove" : "Add", t,
                         key.name);
      break;
    case RefinementKind::IncreaseComplexity:
      line = fmt::format("Increase complexity. Update the memorised {}.", key.name);
      break;
    case RefinementKind::Reflect:
      if (t.empty()) t = "the memorised " + key.name;
      line = fmt::format("Critically reflect and improve {} based on your reflection. Update the memorised {}.", t,
                         key.name);
      break;
  }
  return script::parse_chain(line).commands.front();
}

inline std::string_view to_string(RefinementKind k) {
  switch (k) {
    case RefinementKind::Remove: return "remove";
    case RefinementKind::Add: return "add";
    case RefinementKind::IncreaseComplexity: return "increase_complexity";
    case RefinementKind::Reflect: return "reflect";
  }
  return "reflect";
}

inline RefinementKind refinement_kind_from_string(std::string_view s) {
  auto l = text::to_lower(s);
  if (l == "remove") return RefinementKind::Remove;
  if (l == "add") return RefinementKind::Add;
  if (l == "increase_complexity" || l == "increasecomplexity" || l == "complexity")
    return RefinementKind::IncreaseComplexity;
  if (l == "reflect") return RefinementKind::Reflect;
  throw Error(ErrorCode::InvalidAction, fmt::format("unknown refinement '{}'", s));
}

/// The chat-preparation chain with the generation defaults written in.
inline script::PromptChain preparation_chain(const GenerationDefaults& d = {}) {
  std::string body = fmt::format(
      "You are ChatGPT, a language model developed by OpenAI. Consider the ENTIRE conversation history to "
      "provide 'accurate and coherent responses'. Use Temperature TEMP {} AND Top_p NUCLEUS SAMPLING {} during "
      "the entire conversation| Use clear, precise language during the entire conversation. Prioritise substance "
      "during the entire conversation| Step-by-step, work through the following task list in the given order "
      "during the entire conversation| Take on the \"role\" of a \"{}\" with experience in \"{}\" during the "
      "entire conversation, unless instructed otherwise| Use a \"{}\" during the entire conversation, unless "
      "instructed otherwise. Got it? Say \"yes\" or say \"no\".",
      text::format_param(d.temperature), text::format_param(d.top_p), d.role, d.experience, d.tone);
  return script::parse_chain(body);
}

}  // namespace eabss::patterns
