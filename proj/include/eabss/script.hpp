#pragma once

#include <map>
#include <optional>
#include <regex>
#include <set>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "eabss/core.hpp"

namespace eabss::script {

/// A memorised-key name in normalized form ("key-aim"). Braces and emphasis
/// markers are stripped; the "key-" prefix is lowercased; the identifier keeps
/// its case.
struct KeyRef {
  std::string name;
  auto operator<=>(const KeyRef&) const = default;
};

/// Normalizes "{key-aim}", "**{key-aim}**", "Key-aim" and friends. Returns
/// nullopt when the text is not a key reference.
inline std::optional<KeyRef> normalize_key(std::string_view raw) {
  std::string s;
  for (char c : raw) {
    if (c == '{' || c == '}' || c == '*' || c == '`') continue;
    s.push_back(c);
  }
  s = text::trim(s);
  if (s.size() < 5 || !text::starts_with_icase(s, "key-")) return std::nullopt;
  std::string ident = s.substr(4);
  while (!ident.empty() && ident.back() == '-') ident.pop_back();
  if (ident.empty() || !std::isalpha(static_cast<unsigned char>(ident.front()))) return std::nullopt;
  for (char c : ident) {
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_')) return std::nullopt;
  }
  return KeyRef{"key-" + ident};
}

// ---------------------------------------------------------------------------
// Directives

struct RoleChange {
  std::string role;
  std::string experience;
  bool operator==(const RoleChange&) const = default;
};
struct ToneChange {
  std::string tone;
  bool operator==(const ToneChange&) const = default;
};
struct Memorise {
  KeyRef key;
  std::string description;
  /// Set when the source memorises a quoted literal: Memorise "X" as {key-y}.
  std::optional<std::string> literal;
  bool operator==(const Memorise&) const = default;
};
struct ListKey {
  KeyRef key;
  bool operator==(const ListKey&) const = default;
};
struct DisplayHeading {
  std::string text;
  int level = 0;
  bool operator==(const DisplayHeading&) const = default;
};
struct WordLimit {
  int limit = 0;
  bool soft = false;
  bool operator==(const WordLimit&) const = default;
};
/// "Got it? Say yes or say no!" with or without a preceding
/// "Do not print anything!". Either form requires a Yes acknowledgement.
struct SilentModeTerminator {
  bool suppress_output = false;
  bool operator==(const SilentModeTerminator&) const = default;
};
struct RequirementsList {
  int declared_count = 0;
  std::vector<std::string> items;
  bool operator==(const RequirementsList&) const = default;
};
struct TableFormat {
  bool operator==(const TableFormat&) const = default;
};
struct DiagramRequest {
  DiagramKind kind = DiagramKind::UseCase;
  bool operator==(const DiagramRequest&) const = default;
};
struct FreeText {
  bool operator==(const FreeText&) const = default;
};

using DirectivePayload =
    std::variant<RoleChange, ToneChange, Memorise, ListKey, DisplayHeading, WordLimit,
                 SilentModeTerminator, RequirementsList, TableFormat, DiagramRequest, FreeText>;

struct Directive {
  DirectivePayload payload;
  /// Exact source span including trailing whitespace; the spans of a command
  /// concatenate back to the command text.
  std::string raw;
  /// Keys read by this directive (memorised-key mentions outside quotes).
  std::vector<KeyRef> reads;
  /// Key named by an "Update the memorised key-x" clause.
  std::optional<KeyRef> updates;

  template <typename T>
  bool is() const { return std::holds_alternative<T>(payload); }
  template <typename T>
  const T* as() const { return std::get_if<T>(&payload); }

  bool operator==(const Directive&) const = default;
};

inline std::string_view directive_name(const Directive& d) {
  constexpr std::string_view names[] = {"RoleChange",   "ToneChange",   "Memorise",
                                        "ListKey",      "DisplayHeading", "WordLimit",
                                        "SilentModeTerminator", "RequirementsList",
                                        "TableFormat",  "DiagramRequest", "FreeText"};
  return names[d.payload.index()];
}

struct Command {
  std::string raw;
  std::vector<Directive> directives;
  bool operator==(const Command&) const = default;
};

enum ChainFlag : unsigned {
  kNormal = 0,
  kCoCreationOptional = 1u << 0,
  kIntervene = 1u << 1,
};

struct PromptChain {
  std::vector<Command> commands;
  unsigned flags = kNormal;
  std::string raw_text;
  /// Source line index and the bullet prefix ("- [optional] ") it was read
  /// from; -1 for chains built in memory.
  int source_line = -1;
  std::string line_prefix = "- ";

  bool optional() const { return (flags & kCoCreationOptional) != 0; }
  bool intervene() const { return (flags & kIntervene) != 0; }

  std::vector<const Directive*> directives() const {
    std::vector<const Directive*> out;
    for (const auto& c : commands)
      for (const auto& d : c.directives) out.push_back(&d);
    return out;
  }
  std::vector<Memorise> memorised() const {
    std::vector<Memorise> out;
    for (const auto* d : directives())
      if (auto m = d->as<Memorise>()) out.push_back(*m);
    return out;
  }
  bool ends_with_ack() const {
    if (commands.empty() || commands.back().directives.empty()) return false;
    return commands.back().directives.back().is<SilentModeTerminator>();
  }
  bool operator==(const PromptChain&) const = default;
};

struct Subsection {
  std::string heading;
  std::vector<PromptChain> chains;
  bool operator==(const Subsection&) const = default;
};

struct Segment {
  std::string name;
  std::vector<Subsection> subsections;

  std::size_t chain_count() const {
    std::size_t n = 0;
    for (const auto& s : subsections) n += s.chains.size();
    return n;
  }
  /// Chains are addressed by a flat index across subsections.
  const PromptChain& chain(std::size_t flat) const {
    for (const auto& s : subsections) {
      if (flat < s.chains.size()) return s.chains[flat];
      flat -= s.chains.size();
    }
    throw std::out_of_range("chain index out of range");
  }
  const Subsection& subsection_of(std::size_t flat) const {
    for (const auto& s : subsections) {
      if (flat < s.chains.size()) return s;
      flat -= s.chains.size();
    }
    throw std::out_of_range("chain index out of range");
  }
  bool operator==(const Segment&) const = default;
};

struct ChainAddress {
  std::size_t segment = 0;
  std::size_t chain = 0;  // flat index within the segment
  auto operator<=>(const ChainAddress&) const = default;
};

struct SlotRef {
  std::string slot;  // topic | researchDesign | domain | specialisation
  ChainAddress address;
  std::size_t command = 0;
  std::string value;
  bool operator==(const SlotRef&) const = default;
};

struct ScriptDocument {
  std::vector<Segment> segments;
  std::vector<SlotRef> case_slots;
  std::string source_text;
  std::vector<KeyRef> external_keys;

  std::size_t chain_count() const {
    std::size_t n = 0;
    for (const auto& s : segments) n += s.chain_count();
    return n;
  }
  const PromptChain& chain(ChainAddress a) const { return segments.at(a.segment).chain(a.chain); }

  template <typename F>
  void for_each_chain(F&& f) const {
    for (std::size_t s = 0; s < segments.size(); ++s)
      for (std::size_t c = 0; c < segments[s].chain_count(); ++c)
        f(ChainAddress{s, c}, segments[s].chain(c));
  }
  bool operator==(const ScriptDocument&) const = default;
};

struct CaseBinding {
  std::string topic;
  std::string research_design;
  std::string domain;
  std::string specialisation;
};

// ---------------------------------------------------------------------------
// Lexing helpers

namespace detail {

/// Tracks quote/brace/paren nesting while scanning a bullet. Closing parens
/// without an opener (as in "1) ...") are ignored.
struct Nesting {
  bool in_quote = false;
  int braces = 0;
  int parens = 0;

  bool top_level() const { return !in_quote && braces == 0 && parens == 0; }
  void feed(char c) {
    if (c == '"') {
      in_quote = !in_quote;
      return;
    }
    if (in_quote) return;
    if (c == '{') ++braces;
    else if (c == '}' && braces > 0) --braces;
    else if (c == '(') ++parens;
    else if (c == ')' && parens > 0) --parens;
  }
};

inline std::vector<std::string> split_commands(std::string_view text) {
  std::vector<std::string> out;
  Nesting n;
  std::size_t start = 0;
  for (std::size_t i = 0; i < text.size(); ++i) {
    char c = text[i];
    if (c == '|' && n.top_level()) {
      out.emplace_back(text.substr(start, i - start));
      start = i + 1;
      continue;
    }
    n.feed(c);
  }
  out.emplace_back(text.substr(start));
  return out;
}

/// Splits a command into sentence spans ending at . ! ? followed by
/// whitespace, outside quotes, braces and parentheses. Spans keep their
/// trailing whitespace so they concatenate back to the input.
inline std::vector<std::string> split_sentences(std::string_view text) {
  std::vector<std::string> out;
  Nesting n;
  std::size_t start = 0;
  std::size_t i = 0;
  while (i < text.size()) {
    char c = text[i];
    bool top = n.top_level();
    n.feed(c);
    if (top && (c == '.' || c == '!' || c == '?') && i + 1 < text.size() &&
        text::is_space(text[i + 1])) {
      std::size_t j = i + 1;
      while (j < text.size() && text::is_space(text[j])) ++j;
      out.emplace_back(text.substr(start, j - start));
      start = j;
      i = j;
      continue;
    }
    ++i;
  }
  if (start < text.size()) out.emplace_back(text.substr(start));
  return out;
}

/// Key mentions outside double quotes, in order of appearance, with their
/// byte offsets.
inline std::vector<std::pair<std::size_t, KeyRef>> key_mentions(std::string_view s) {
  std::vector<std::pair<std::size_t, KeyRef>> out;
  bool in_quote = false;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '"') {
      in_quote = !in_quote;
      continue;
    }
    if (in_quote) continue;
    if (i + 4 < s.size() && text::starts_with_icase(s.substr(i), "key-") &&
        (i == 0 || !std::isalnum(static_cast<unsigned char>(s[i - 1])))) {
      std::size_t j = i + 4;
      while (j < s.size() &&
             (std::isalnum(static_cast<unsigned char>(s[j])) || s[j] == '-' || s[j] == '_'))
        ++j;
      if (auto k = normalize_key(s.substr(i, j - i))) out.emplace_back(i, *k);
      i = j - 1;
    }
  }
  return out;
}

inline const std::regex& re(const char* pattern, bool icase = true) {
  // Regexes are compiled once per pattern literal.
  static thread_local std::map<std::pair<const char*, bool>, std::regex> cache;
  auto key = std::make_pair(pattern, icase);
  auto it = cache.find(key);
  if (it == cache.end()) {
    auto flags = std::regex::ECMAScript | std::regex::optimize;
    if (icase) flags |= std::regex::icase;
    it = cache.emplace(key, std::regex(pattern, flags)).first;
  }
  return it->second;
}

inline std::optional<DiagramKind> diagram_kind_from_phrase(std::string_view phrase) {
  auto p = text::to_lower(phrase);
  if (p.find("use case") != std::string::npos || p.find("use-case") != std::string::npos)
    return DiagramKind::UseCase;
  if (p.find("state") != std::string::npos) return DiagramKind::StateMachine;
  if (p.find("sequence") != std::string::npos) return DiagramKind::Sequence;
  if (p.find("class") != std::string::npos) return DiagramKind::ClassModel;
  return std::nullopt;
}

inline bool is_ack_sentence(std::string_view s) {
  return std::regex_match(std::string(text::trim_view(s)),
                          re(R"re(got it\?\s*say\s+"?yes"?\s+or\s+say\s+"?no"?\s*[.!]?)re"));
}

inline bool is_no_print_sentence(std::string_view s) {
  return std::regex_match(std::string(text::trim_view(s)), re(R"re(do not print anything\s*!?)re"));
}

inline std::vector<std::string> requirement_items(std::string_view merged) {
  std::vector<std::string> items;
  auto colon = merged.find(':');
  std::string body(colon == std::string_view::npos ? merged : merged.substr(colon + 1));
  const auto& marker = re(R"re((^|\s)(\d+)\)\s)re", false);
  std::vector<std::pair<std::size_t, std::size_t>> marks;  // (marker start, text start)
  int expected = 1;
  for (auto it = std::sregex_iterator(body.begin(), body.end(), marker);
       it != std::sregex_iterator(); ++it) {
    if (std::stoi((*it)[2].str()) != expected) continue;
    marks.emplace_back(static_cast<std::size_t>(it->position(2)),
                       static_cast<std::size_t>(it->position(0) + it->length(0)));
    ++expected;
  }
  for (std::size_t i = 0; i < marks.size(); ++i) {
    std::size_t end = i + 1 < marks.size() ? marks[i + 1].first : body.size();
    std::string item = text::trim(std::string_view(body).substr(marks[i].second, end - marks[i].second));
    if (!item.empty() && item.back() == '.') item.pop_back();
    items.push_back(text::trim(item));
  }
  return items;
}

inline int leading_item_number(std::string_view s) {
  std::smatch m;
  std::string t = text::trim(s);
  if (std::regex_search(t, m, re(R"re(^(\d+)\)\s)re", false))) return std::stoi(m[1].str());
  return -1;
}

inline Directive classify(std::string raw) {
  Directive d;
  d.raw = std::move(raw);
  std::string s = text::trim(d.raw);
  auto mentions = key_mentions(s);
  std::smatch m;
  std::optional<std::size_t> target_pos;

  if (std::regex_search(s, m, re(R"re(update\s+(?:the\s+|related\s+)?memorised\s+(key-[A-Za-z0-9_-]+))re")))
    d.updates = normalize_key(m[1].str());

  if (text::starts_with_icase(s, "memorise ") &&
      std::regex_search(s, m, re(R"re(\bas\s+[*`]*\{\s*(key-[A-Za-z0-9_-]+)\s*\}[*`]*)re"))) {
    Memorise mem;
    mem.key = *normalize_key(m[1].str());
    mem.description = text::trim(std::string_view(s).substr(9, static_cast<std::size_t>(m.position(0)) - 9));
    if (mem.description.size() >= 2 && mem.description.front() == '"' &&
        mem.description.back() == '"' &&
        mem.description.find('"', 1) == mem.description.size() - 1)
      mem.literal = mem.description.substr(1, mem.description.size() - 2);
    target_pos = static_cast<std::size_t>(m.position(1));
    d.payload = std::move(mem);
  } else if (std::regex_match(s, m, re(R"re(list\s+(?:the\s+)?memorised\s+[`]*(key-[A-Za-z0-9_-]+)[`]*\s*[.!]?)re"))) {
    d.payload = ListKey{*normalize_key(m[1].str())};
  } else if (std::regex_search(s, m, re(R"re(^take on the\s+"?role"?\s+of\s+(?:a|an)\s+"([^"]+)"\s+with experience in\s+(?:the\s+)?"([^"]+)")re"))) {
    d.payload = RoleChange{m[1].str(), m[2].str()};
  } else if (std::regex_search(s, m, re(R"re(^use\s+(?:a|an)\s+"([^"]*tone)")re"))) {
    d.payload = ToneChange{m[1].str()};
  } else if (std::regex_search(s, m, re(R"re(^display md\s+"([^"]+)")re"))) {
    d.payload = DisplayHeading{m[1].str(), 0};
  } else if (text::starts_with_icase(s, "use table format")) {
    d.payload = TableFormat{};
  } else if (std::regex_search(s, m, re(R"re(generate a script for a 'comprehensive (.+?) diagram')re")) &&
             diagram_kind_from_phrase(m[1].str())) {
    d.payload = DiagramRequest{*diagram_kind_from_phrase(m[1].str())};
  } else if (std::regex_search(s, m, re(R"re(\bfollowing\s+(\d+)\s+requirements\b)re"))) {
    d.payload = RequirementsList{std::stoi(m[1].str()), requirement_items(s)};
  } else if (std::regex_search(s, m, re(R"re(\b(\d+)\s+WORDS?\b)re", false))) {
    d.payload = WordLimit{std::stoi(m[1].str()), s.find("(if possible)") != std::string::npos};
  } else {
    d.payload = FreeText{};
  }

  for (auto& [pos, key] : mentions) {
    if (target_pos && pos == *target_pos) continue;
    d.reads.push_back(key);
  }
  return d;
}

/// Groups sentence spans into directive spans: ack terminators absorb a
/// preceding "Do not print anything!", and a requirements header absorbs the
/// numbered items that follow it.
inline std::vector<Directive> directives_of(std::string_view command) {
  auto sentences = split_sentences(command);
  std::vector<Directive> out;
  for (std::size_t i = 0; i < sentences.size(); ++i) {
    const std::string& s = sentences[i];
    std::string t = text::trim(s);
    if (text::starts_with_icase(t, "got it?") && i + 1 < sentences.size() &&
        is_ack_sentence(t + " " + text::trim(sentences[i + 1]))) {
      bool suppress = !out.empty() && is_no_print_sentence(out.back().raw) &&
                      out.back().is<FreeText>();
      std::string raw = (suppress ? out.back().raw : std::string()) + s + sentences[i + 1];
      if (suppress) out.pop_back();
      Directive d;
      d.payload = SilentModeTerminator{suppress};
      d.raw = std::move(raw);
      out.push_back(std::move(d));
      ++i;
      continue;
    }
    if (std::regex_search(t, re(R"re(\bfollowing\s+\d+\s+requirements\b)re")) &&
        !text::starts_with_icase(t, "memorise ")) {
      std::string merged = s;
      int last = 0;
      for (auto n : requirement_items(merged)) (void)n, ++last;
      std::size_t j = i + 1;
      while (j < sentences.size()) {
        int lead = leading_item_number(sentences[j]);
        bool later_item = false;
        for (std::size_t k = j + 1; k < sentences.size(); ++k)
          if (leading_item_number(sentences[k]) == last + 1) later_item = true;
        if (lead > 0 || later_item) {
          if (lead > 0) last = std::max(last, lead);
          merged += sentences[j];
          ++j;
        } else {
          break;
        }
      }
      out.push_back(classify(merged));
      i = j - 1;
      continue;
    }
    out.push_back(classify(s));
  }
  return out;
}

inline void fix_heading_levels(PromptChain& chain) {
  DisplayHeading* pending = nullptr;
  for (auto& c : chain.commands) {
    for (auto& d : c.directives) {
      if (auto* h = std::get_if<DisplayHeading>(&d.payload)) {
        pending = h;
        continue;
      }
      std::smatch m;
      std::string t = text::trim(d.raw);
      if (pending && std::regex_search(t, m, re(R"re(^render as 'heading level (\d)')re")))
        pending->level = std::stoi(m[1].str());
    }
  }
}

inline bool is_all_caps_heading(std::string_view line) {
  bool has_alpha = false;
  for (char c : line) {
    if (std::islower(static_cast<unsigned char>(c))) return false;
    if (std::isalpha(static_cast<unsigned char>(c))) has_alpha = true;
  }
  return has_alpha;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Operations

/// Parses one bullet's text (without the "- " prefix) into a chain.
inline PromptChain parse_chain(std::string_view text, unsigned flags = kNormal) {
  PromptChain chain;
  chain.flags = flags;
  chain.raw_text = std::string(text);
  for (auto& piece : detail::split_commands(text)) {
    Command cmd;
    cmd.directives = detail::directives_of(piece);
    cmd.raw = std::move(piece);
    chain.commands.push_back(std::move(cmd));
  }
  detail::fix_heading_levels(chain);
  return chain;
}

/// Commands rejoined with the pipe separator; byte-identical for parsed chains.
inline std::string render_chain(const PromptChain& chain) {
  std::string out;
  for (std::size_t i = 0; i < chain.commands.size(); ++i) {
    if (i) out.push_back('|');
    out += chain.commands[i].raw;
  }
  return out;
}

namespace detail {

inline void detect_slots(ScriptDocument& doc) {
  doc.case_slots.clear();
  struct Probe {
    const char* slot;
    const char* pattern;
  };
  static const Probe probes[] = {
      {"topic", R"re(the "topic" of the memorised key-[A-Za-z0-9_-]+ as "(.*)"\.?\s*memorise this topic as)re"},
      {"researchDesign", R"re(memorise "([^"]*)" as [*`]*\{key-researchDesign\})re"},
      {"domain", R"re(memorise "([^"]*)" as [*`]*\{key-domain\})re"},
      {"specialisation", R"re(memorise "([^"]*)" as [*`]*\{key-specialisation\})re"},
  };
  doc.for_each_chain([&](ChainAddress a, const PromptChain& chain) {
    for (std::size_t ci = 0; ci < chain.commands.size(); ++ci) {
      const auto& raw = chain.commands[ci].raw;
      for (const auto& p : probes) {
        std::smatch m;
        if (std::regex_search(raw, m, re(p.pattern)))
          doc.case_slots.push_back(SlotRef{p.slot, a, ci, m[1].str()});
      }
    }
  });
}

}  // namespace detail

/// Parses the bullet/pipe script format. Throws EmptyScript,
/// UnterminatedBrace or InvalidBinding (duplicate segment names).
inline ScriptDocument parse_script(std::string_view source) {
  if (text::trim_view(source).empty()) throw Error(ErrorCode::EmptyScript, "script is empty");
  ScriptDocument doc;
  doc.source_text = std::string(source);
  auto lines = text::split_lines(source);

  auto open_segment = [&](std::string name, std::size_t line_no) {
    for (const auto& s : doc.segments)
      if (s.name == name)
        throw Error(ErrorCode::InvalidBinding,
                    fmt::format("line {}: duplicate segment '{}'", line_no + 1, name));
    doc.segments.push_back(Segment{std::move(name), {}});
  };
  auto current_subsection = [&]() -> Subsection& {
    if (doc.segments.empty()) doc.segments.push_back(Segment{"", {}});
    auto& seg = doc.segments.back();
    if (seg.subsections.empty()) seg.subsections.push_back(Subsection{});
    return seg.subsections.back();
  };

  for (std::size_t i = 0; i < lines.size(); ++i) {
    const std::string& line = lines[i];
    std::string t = text::trim(line);
    if (t.empty()) continue;
    if (t.rfind("@external", 0) == 0) {
      for (auto& [pos, key] : detail::key_mentions(t)) doc.external_keys.push_back(key);
      continue;
    }
    if (t.rfind("- ", 0) == 0 || t == "-") {
      std::size_t body = line.find('-') + 1;
      while (body < line.size() && line[body] == ' ') ++body;
      unsigned flags = kNormal;
      for (;;) {
        std::string_view rest(line.c_str() + body, line.size() - body);
        std::size_t len = 0;
        if (text::starts_with_icase(rest, "[optional]")) {
          flags |= kCoCreationOptional;
          len = 10;
        } else if (text::starts_with_icase(rest, "[intervene]")) {
          flags |= kIntervene;
          len = 11;
        } else {
          break;
        }
        body += len;
        while (body < line.size() && line[body] == ' ') ++body;
      }
      std::string chain_text = line.substr(body);
      if (text::trim_view(chain_text).empty()) continue;
      int depth = 0;
      for (char c : chain_text) {
        if (c == '{') ++depth;
        else if (c == '}' && depth > 0) --depth;
      }
      if (depth != 0)
        throw Error(ErrorCode::UnterminatedBrace, fmt::format("line {}: '{{' without matching '}}'", i + 1));
      PromptChain chain = parse_chain(chain_text, flags);
      chain.source_line = static_cast<int>(i);
      chain.line_prefix = line.substr(0, body);
      current_subsection().chains.push_back(std::move(chain));
      continue;
    }
    if (t[0] == '#') {
      std::size_t hashes = t.find_first_not_of('#');
      std::string name = text::trim(std::string_view(t).substr(hashes == std::string::npos ? t.size() : hashes));
      if (hashes == 1) open_segment(name, i);
      else {
        if (doc.segments.empty()) doc.segments.push_back(Segment{"", {}});
        doc.segments.back().subsections.push_back(Subsection{name, {}});
      }
      continue;
    }
    if (detail::is_all_caps_heading(t)) {
      open_segment(t, i);
      continue;
    }
    if (doc.segments.empty()) doc.segments.push_back(Segment{"", {}});
    doc.segments.back().subsections.push_back(Subsection{t, {}});
  }
  if (doc.chain_count() == 0) throw Error(ErrorCode::EmptyScript, "script contains no bullets");
  detail::detect_slots(doc);
  return doc;
}

/// Replaces the four case-study slot texts. Every other byte of the source is
/// preserved; rebinding identical values is a no-op.
inline ScriptDocument bind_case(const ScriptDocument& doc, const CaseBinding& binding) {
  if (text::trim_view(binding.topic).empty())
    throw Error(ErrorCode::InvalidBinding, "topic must not be empty");
  const std::pair<const char*, const std::string*> values[] = {
      {"topic", &binding.topic},
      {"researchDesign", &binding.research_design},
      {"domain", &binding.domain},
      {"specialisation", &binding.specialisation}};
  for (auto& [slot, value] : values) {
    if (value->find_first_of("\"|{}\n") != std::string::npos)
      throw Error(ErrorCode::InvalidBinding,
                  fmt::format("slot '{}' may not contain quotes, pipes, braces or newlines", slot));
  }

  auto lines = text::split_lines(doc.source_text);
  ScriptDocument out = doc;
  for (auto& [slot, value] : values) {
    auto it = std::find_if(out.case_slots.begin(), out.case_slots.end(),
                           [&](const SlotRef& r) { return r.slot == slot; });
    if (it == out.case_slots.end())
      throw Error(ErrorCode::MissingSlot, fmt::format("document has no '{}' slot", slot));
    const SlotRef& ref = *it;
    // Locate the chain in place so the edited copy can be re-parsed.
    std::size_t flat = ref.address.chain;
    PromptChain* chain = nullptr;
    for (auto& sub : out.segments[ref.address.segment].subsections) {
      if (flat < sub.chains.size()) {
        chain = &sub.chains[flat];
        break;
      }
      flat -= sub.chains.size();
    }
    auto& raw = chain->commands[ref.command].raw;
    // Values are quoted, so the first quoted occurrence after the slot anchor
    // is the one to replace.
    std::size_t pos = raw.find("\"" + ref.value + "\"");
    if (slot == std::string_view("topic")) pos = raw.find("as \"" + ref.value + "\"") + 3;
    raw.replace(pos + 1, ref.value.size(), *value);
    std::string text = render_chain(*chain);
    PromptChain rebuilt = parse_chain(text, chain->flags);
    rebuilt.source_line = chain->source_line;
    rebuilt.line_prefix = chain->line_prefix;
    *chain = std::move(rebuilt);
    if (chain->source_line >= 0)
      lines[static_cast<std::size_t>(chain->source_line)] = chain->line_prefix + text;
    detail::detect_slots(out);
  }
  out.source_text = text::join(lines, "\n");
  return out;
}

enum class DiagnosticKind {
  KeyReadBeforeMemorise,
  DuplicateMemoriseWithoutUpdate,
  SilentChainWithoutAck,
  /// A key read whose only memorising chains are skippable co-creation chains.
  OptionalKeyRead,
};

inline std::string_view to_string(DiagnosticKind k) {
  switch (k) {
    case DiagnosticKind::KeyReadBeforeMemorise: return "KeyReadBeforeMemorise";
    case DiagnosticKind::DuplicateMemoriseWithoutUpdate: return "DuplicateMemoriseWithoutUpdate";
    case DiagnosticKind::SilentChainWithoutAck: return "SilentChainWithoutAck";
    case DiagnosticKind::OptionalKeyRead: return "OptionalKeyRead";
  }
  return "";
}

struct Diagnostic {
  DiagnosticKind kind;
  Severity severity = Severity::Error;
  std::optional<KeyRef> key;
  ChainAddress address;
  std::size_t command = 0;
  std::string message;
};

inline std::vector<Diagnostic> static_check(const ScriptDocument& doc) {
  std::vector<Diagnostic> diags;
  struct KeyState {
    bool required_memorise = false;  // memorised by at least one non-optional chain
    bool updated_since = false;
  };
  std::map<KeyRef, KeyState> known;
  for (const auto& k : doc.external_keys) known[k] = KeyState{true, true};
  std::set<std::pair<KeyRef, ChainAddress>> optional_reported;

  doc.for_each_chain([&](ChainAddress a, const PromptChain& chain) {
    for (std::size_t ci = 0; ci < chain.commands.size(); ++ci) {
      const auto& dirs = chain.commands[ci].directives;
      for (std::size_t di = 0; di < dirs.size(); ++di) {
        const Directive& d = dirs[di];
        for (const auto& key : d.reads) {
          auto it = known.find(key);
          if (it == known.end()) {
            diags.push_back({DiagnosticKind::KeyReadBeforeMemorise, Severity::Error, key, a, ci,
                             fmt::format("{} is read before it is memorised", key.name)});
          } else if (!it->second.required_memorise && !chain.optional() &&
                     optional_reported.insert({key, a}).second) {
            diags.push_back({DiagnosticKind::OptionalKeyRead, Severity::Warning, key, a, ci,
                             fmt::format("{} is only memorised by optional co-creation chains", key.name)});
          }
        }
        if (d.updates) {
          if (auto it = known.find(*d.updates); it != known.end()) it->second.updated_since = true;
        }
        if (auto m = d.as<Memorise>()) {
          auto it = known.find(m->key);
          if (it != known.end() && !it->second.updated_since) {
            diags.push_back({DiagnosticKind::DuplicateMemoriseWithoutUpdate, Severity::Error, m->key, a,
                             ci, fmt::format("{} memorised again without an update", m->key.name)});
          }
          auto& st = known[m->key];
          st.required_memorise = st.required_memorise || !chain.optional();
          st.updated_since = false;
        }
        bool last = ci + 1 == chain.commands.size() && di + 1 == dirs.size();
        if ((d.is<SilentModeTerminator>() && !last) ||
            (d.is<FreeText>() && detail::is_no_print_sentence(d.raw))) {
          diags.push_back({DiagnosticKind::SilentChainWithoutAck, Severity::Error, std::nullopt, a, ci,
                           "silent-mode instruction is not terminated by a final acknowledgement"});
        }
      }
    }
  });
  return diags;
}

}  // namespace eabss::script
