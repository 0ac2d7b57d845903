#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <regex>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "eabss/core.hpp"

namespace eabss::diagram {

using json = nlohmann::json;

enum class NodeKind { Actor, UseCase, Class, State, Participant, Other };

inline std::string_view to_string(NodeKind k) {
  switch (k) {
    case NodeKind::Actor: return "actor";
    case NodeKind::UseCase: return "usecase";
    case NodeKind::Class: return "class";
    case NodeKind::State: return "state";
    case NodeKind::Participant: return "participant";
    case NodeKind::Other: return "other";
  }
  return "other";
}

inline DiagramKind kind_from_string(std::string_view s) {
  auto l = text::to_lower(s);
  if (l == "usecase" || l == "use-case" || l == "use_case") return DiagramKind::UseCase;
  if (l == "class" || l == "classmodel") return DiagramKind::ClassModel;
  if (l == "state" || l == "statemachine" || l == "state-machine") return DiagramKind::StateMachine;
  if (l == "sequence") return DiagramKind::Sequence;
  throw Error(ErrorCode::UsageError, fmt::format("unknown diagram kind '{}'", s));
}

struct Node {
  std::string id;
  std::string label;
  NodeKind kind = NodeKind::Other;
  std::size_t line = 0;
};

struct Edge {
  std::string from;
  std::string to;
  std::string label;
  std::string arrow;
  std::size_t line = 0;
};

struct Note {
  std::string target;
  std::string placement;
  std::string text;
  std::size_t line = 0;
};

struct Member {
  std::string cls;
  std::string text;
  bool operation = false;
  std::string name;  // operation or attribute name
  std::size_t line = 0;
};

/// +1 activation, -1 deactivation. `marker` is true for the +/- shorthand
/// on a message, false for an activate/deactivate line.
struct Activation {
  std::string participant;
  int delta = 0;
  bool marker = false;
  std::size_t line = 0;
};

/// A brace block (class body, compound state, subgraph) or a sequence
/// control block (loop, alt, ...). close_line is npos when unterminated.
struct Block {
  std::string keyword;
  std::string label;
  std::size_t open_line = 0;
  std::size_t close_line = std::string::npos;
};

struct Diagnostic {
  std::string rule;
  std::size_t line = std::string::npos;  // npos: whole diagram
  std::string message;
  Severity severity = Severity::Error;
  bool auto_fixable = false;
  std::string subject;
  bool operator==(const Diagnostic&) const = default;
};

inline json to_json(const Diagnostic& d) {
  json j{{"rule", d.rule},
         {"severity", std::string(to_string(d.severity))},
         {"message", d.message},
         {"auto_fixable", d.auto_fixable}};
  j["line"] = d.line == std::string::npos ? json(nullptr) : json(d.line);
  if (!d.subject.empty()) j["subject"] = d.subject;
  return j;
}

struct DiagramScript {
  DiagramKind kind = DiagramKind::UseCase;
  std::vector<std::string> raw_lines;
  std::string header;
  std::size_t header_line = 0;
  std::optional<std::string> name_comment;  // state machines: "%% Name: X" text
  std::size_t name_line = std::string::npos;
  std::vector<Node> nodes;
  std::vector<Edge> edges;
  std::vector<Note> notes;
  std::vector<Member> members;
  std::vector<Activation> activations;
  std::vector<Block> blocks;
  /// Per-line findings made while parsing (unparsed lines, stray closers).
  std::vector<Diagnostic> parse_diagnostics;

  const Node* node(const std::string& id) const {
    for (const auto& n : nodes)
      if (n.id == id) return &n;
    return nullptr;
  }
  std::string text() const { return text::join(raw_lines, "\n"); }
};

// ---------------------------------------------------------------------------
// Parsing

namespace detail {

inline bool is_ident_char(char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '_'; }

inline bool is_comment(std::string_view t) { return t.rfind("%%", 0) == 0; }

inline std::string strip_quotes(std::string s) {
  s = text::trim(s);
  if (s.size() >= 2 && s.front() == '"' && s.back() == '"') s = s.substr(1, s.size() - 2);
  return s;
}

struct Shape {
  std::string_view open, close;
  NodeKind kind;
};

inline const std::vector<Shape>& shapes() {
  static const std::vector<Shape> v = {{"((", "))", NodeKind::Actor}, {"([", "])", NodeKind::UseCase},
                                       {"[[", "]]", NodeKind::Other}, {"[(", ")]", NodeKind::Other},
                                       {"{{", "}}", NodeKind::Other}, {"[", "]", NodeKind::Other},
                                       {"(", ")", NodeKind::Other},   {"{", "}", NodeKind::Other},
                                       {">", "]", NodeKind::Other}};
  return v;
}

struct NodeRef {
  std::string id;
  std::optional<std::string> label;
  NodeKind kind = NodeKind::Other;
  bool shaped = false;
};

/// Reads `id` or `id<shape>label<close>` at `pos`. Brackets nested inside the
/// label are balanced before a closer is accepted.
inline std::optional<NodeRef> read_node(std::string_view s, std::size_t& pos) {
  std::size_t p = pos;
  while (p < s.size() && s[p] == ' ') ++p;
  std::size_t start = p;
  while (p < s.size() && is_ident_char(s[p])) ++p;
  if (p == start) return std::nullopt;
  NodeRef ref;
  ref.id = std::string(s.substr(start, p - start));
  for (const auto& sh : shapes()) {
    if (s.substr(p, sh.open.size()) != sh.open) continue;
    std::size_t q = p + sh.open.size();
    int depth = 0;
    bool in_quote = false;
    for (; q < s.size(); ++q) {
      char c = s[q];
      if (c == '"') in_quote = !in_quote;
      if (in_quote) continue;
      if (depth == 0 && s.substr(q, sh.close.size()) == sh.close) break;
      if (c == '(' || c == '[' || c == '{') ++depth;
      else if ((c == ')' || c == ']' || c == '}') && depth > 0) --depth;
    }
    if (q >= s.size()) return std::nullopt;
    ref.label = strip_quotes(std::string(s.substr(p + sh.open.size(), q - p - sh.open.size())));
    ref.kind = sh.kind;
    ref.shaped = true;
    p = q + sh.close.size();
    break;
  }
  pos = p;
  return ref;
}

struct Link {
  std::string arrow;
  std::string label;
};

inline std::optional<Link> read_link(std::string_view s, std::size_t& pos) {
  std::size_t p = pos;
  while (p < s.size() && s[p] == ' ') ++p;
  std::size_t start = p;
  if (p < s.size() && s[p] == '<') ++p;
  std::size_t run = p;
  while (p < s.size() && (s[p] == '-' || s[p] == '=' || s[p] == '.')) ++p;
  if (p - run < 2) return std::nullopt;
  Link link;
  std::string_view body = s.substr(run, p - run);
  // "-- text -->" form.
  if (body == "--" && p < s.size() && s[p] == ' ') {
    auto close = s.find("-->", p);
    if (close != std::string_view::npos) {
      link.label = text::trim(s.substr(p, close - p));
      link.arrow = "-->";
      pos = close + 3;
      return link;
    }
  }
  if (p < s.size() && (s[p] == '>' || ((s[p] == 'o' || s[p] == 'x') && (p + 1 >= s.size() || s[p + 1] == ' ' || s[p + 1] == '|'))))
    ++p;
  link.arrow = std::string(s.substr(start, p - start));
  while (p < s.size() && s[p] == ' ') ++p;
  if (p < s.size() && s[p] == '|') {
    auto close = s.find('|', p + 1);
    if (close == std::string_view::npos) return std::nullopt;
    link.label = strip_quotes(std::string(s.substr(p + 1, close - p - 1)));
    p = close + 1;
  }
  pos = p;
  return link;
}

inline void add_node(DiagramScript& d, const NodeRef& r, std::size_t line) {
  for (auto& n : d.nodes) {
    if (n.id != r.id) continue;
    if (r.shaped && n.kind == NodeKind::Other && n.label == n.id) {
      n.kind = r.kind;
      n.label = *r.label;
      n.line = line;
    } else if (r.shaped && (n.kind != r.kind || n.label != *r.label)) {
      d.parse_diagnostics.push_back({"redefined-node", line, fmt::format("node {} is redefined", r.id),
                                     Severity::Warning, false, r.id});
    }
    return;
  }
  d.nodes.push_back(Node{r.id, r.label.value_or(r.id), r.shaped ? r.kind : NodeKind::Other, line});
}

inline void unparsed(DiagramScript& d, std::size_t line, const std::string& why = "line not understood") {
  d.parse_diagnostics.push_back({"unparsed", line, why, Severity::Warning, false, {}});
}

inline std::string strip_trailing_semicolon(std::string t) {
  t = text::trim(t);
  while (!t.empty() && t.back() == ';') t = text::trim(std::string_view(t).substr(0, t.size() - 1));
  return t;
}

inline void parse_flowchart(DiagramScript& d) {
  std::vector<std::size_t> open_subgraphs;
  for (std::size_t i = d.header_line + 1; i < d.raw_lines.size(); ++i) {
    std::string t = text::trim(d.raw_lines[i]);
    if (t.empty() || is_comment(t)) continue;
    if (!t.empty() && t.back() == ';') {
      d.parse_diagnostics.push_back({"trailing-semicolon", i, "statement ends with a semicolon", Severity::Warning,
                                     true, {}});
      t = strip_trailing_semicolon(t);
    }
    if (t.rfind("subgraph", 0) == 0) {
      d.blocks.push_back(Block{"subgraph", text::trim(std::string_view(t).substr(8)), i});
      open_subgraphs.push_back(d.blocks.size() - 1);
      continue;
    }
    if (t == "end") {
      if (open_subgraphs.empty()) unparsed(d, i, "'end' without an open subgraph");
      else {
        d.blocks[open_subgraphs.back()].close_line = i;
        open_subgraphs.pop_back();
      }
      continue;
    }
    for (std::string_view kw : {"classDef", "class ", "style", "linkStyle", "click", "direction"}) {
      if (t.rfind(kw, 0) == 0) {
        unparsed(d, i, fmt::format("'{}' statements are not part of the supported dialect", text::trim(kw)));
        t.clear();
        break;
      }
    }
    if (t.empty()) continue;
    std::size_t pos = 0;
    std::vector<NodeRef> refs;
    std::vector<Link> links;
    auto first = read_node(t, pos);
    bool ok = first.has_value();
    if (ok) refs.push_back(*first);
    while (ok) {
      std::size_t save = pos;
      while (pos < t.size() && t[pos] == ' ') ++pos;
      if (pos >= t.size()) break;
      pos = save;
      auto link = read_link(t, pos);
      auto next = link ? read_node(t, pos) : std::nullopt;
      if (!link || !next) {
        ok = false;
        break;
      }
      links.push_back(*link);
      refs.push_back(*next);
    }
    if (!ok) {
      unparsed(d, i);
      continue;
    }
    for (const auto& r : refs) add_node(d, r, i);
    for (std::size_t k = 0; k < links.size(); ++k)
      d.edges.push_back(Edge{refs[k].id, refs[k + 1].id, links[k].label, links[k].arrow, i});
  }
}

inline const std::regex& state_transition_re() {
  static const std::regex re(R"re(^(\[\*\]|[A-Za-z_][\w.]*)\s*-->\s*(\[\*\]|[A-Za-z_][\w.]*)\s*(?::\s*(.*))?$)re");
  return re;
}

inline void add_state(DiagramScript& d, const std::string& id, std::size_t line, std::string label = {}) {
  if (id == "[*]") return;
  for (auto& n : d.nodes) {
    if (n.id == id) {
      if (!label.empty() && n.label == n.id) n.label = label;
      return;
    }
  }
  d.nodes.push_back(Node{id, label.empty() ? id : label, NodeKind::State, line});
}

inline void parse_state_machine(DiagramScript& d) {
  static const std::regex note_re(R"re(^note\s+(left of|right of)\s+([A-Za-z_][\w.]*)\s*(?::\s*(.*))?$)re",
                                  std::regex::icase);
  static const std::regex state_as_re(R"re(^state\s+"([^"]*)"\s+as\s+([A-Za-z_]\w*)\s*(\{)?$)re");
  static const std::regex state_block_re(R"re(^state\s+([A-Za-z_]\w*)\s*(\{)?$)re");
  static const std::regex desc_re(R"re(^([A-Za-z_]\w*)\s*:\s*(.+)$)re");
  std::vector<std::size_t> open;
  std::optional<std::size_t> multi_note;
  for (std::size_t i = d.header_line + 1; i < d.raw_lines.size(); ++i) {
    std::string t = text::trim(d.raw_lines[i]);
    if (multi_note) {
      if (text::to_lower(t) == "end note") multi_note.reset();
      else d.notes[*multi_note].text += (d.notes[*multi_note].text.empty() ? "" : " ") + t;
      continue;
    }
    if (t.empty() || is_comment(t)) continue;
    t = strip_trailing_semicolon(t);
    std::smatch m;
    if (std::regex_match(t, m, state_transition_re())) {
      add_state(d, m[1], i);
      add_state(d, m[2], i);
      d.edges.push_back(Edge{m[1], m[2], text::trim(m[3].str()), "-->", i});
    } else if (std::regex_match(t, m, note_re)) {
      d.notes.push_back(Note{m[2], text::to_lower(m[1].str()), text::trim(m[3].str()), i});
      if (!m[3].matched) multi_note = d.notes.size() - 1;
    } else if (std::regex_match(t, m, state_as_re)) {
      add_state(d, m[2], i, m[1]);
      if (m[3].matched) {
        d.blocks.push_back(Block{"state", m[2], i});
        open.push_back(d.blocks.size() - 1);
      }
    } else if (std::regex_match(t, m, state_block_re)) {
      add_state(d, m[1], i);
      if (m[2].matched) {
        d.blocks.push_back(Block{"state", m[1], i});
        open.push_back(d.blocks.size() - 1);
      }
    } else if (t == "}") {
      if (open.empty()) unparsed(d, i, "'}' without an open state block");
      else {
        d.blocks[open.back()].close_line = i;
        open.pop_back();
      }
    } else if (t == "--") {
      // concurrency separator inside a compound state
    } else if (std::regex_match(t, m, desc_re)) {
      add_state(d, m[1], i, text::trim(m[2].str()));
    } else if (t.find_first_of(" \t") == std::string::npos && std::isalpha(static_cast<unsigned char>(t[0]))) {
      add_state(d, t, i);
    } else {
      unparsed(d, i);
    }
  }
}

inline std::string member_name(std::string t, bool& operation) {
  operation = t.find('(') != std::string::npos;
  if (!t.empty() && std::string_view("+-#~").find(t.front()) != std::string_view::npos) t.erase(0, 1);
  t = text::trim(t);
  if (operation) {
    std::string head = text::trim(std::string_view(t).substr(0, t.find('(')));
    auto sp = head.find_last_of(" \t");
    return sp == std::string::npos ? head : head.substr(sp + 1);
  }
  auto sp = t.find_last_of(" \t");
  return sp == std::string::npos ? t : t.substr(sp + 1);
}

inline void add_class(DiagramScript& d, const std::string& name, std::size_t line, bool declaration) {
  for (auto& n : d.nodes) {
    if (n.id != name) continue;
    if (declaration) {
      if (n.line == std::string::npos) n.line = line;  // first explicit declaration
      else
        d.parse_diagnostics.push_back({"duplicate-class", line, fmt::format("class {} is declared twice", name),
                                       Severity::Error, true, name});
    }
    return;
  }
  d.nodes.push_back(Node{name, name, NodeKind::Class, declaration ? line : std::string::npos});
}

inline void parse_class_diagram(DiagramScript& d) {
  static const std::regex class_re(R"re(^class\s+([A-Za-z_]\w*)(?:~[^~]*~)?(?::::\w+)?\s*(\{)?\s*(\})?$)re");
  static const std::regex rel_re(
      R"re(^([A-Za-z_]\w*)\s*(?:"[^"]*"\s*)?(<\|--|--\|>|\*--|--\*|o--|--o|-->|<--|--|\.\.>|<\.\.|\.\.\|>|<\|\.\.|\.\.)\s*(?:"[^"]*"\s*)?([A-Za-z_]\w*)\s*(?::\s*(.*))?$)re");
  static const std::regex member_re(R"re(^([A-Za-z_]\w*)\s*:\s*(.+)$)re");
  std::optional<std::size_t> open;
  std::string current;
  for (std::size_t i = d.header_line + 1; i < d.raw_lines.size(); ++i) {
    std::string t = text::trim(d.raw_lines[i]);
    if (t.empty() || is_comment(t)) continue;
    std::smatch m;
    if (open) {
      if (t == "}") {
        d.blocks[*open].close_line = i;
        open.reset();
        continue;
      }
      if (std::regex_match(t, m, class_re)) {
        // A class opened before the previous one closed.
        unparsed(d, d.blocks[*open].open_line, "class body is not closed");
        open.reset();
      } else {
        if (t.rfind("<<", 0) == 0) continue;  // annotation
        Member mem{current, t, false, {}, i};
        mem.name = member_name(t, mem.operation);
        d.members.push_back(std::move(mem));
        continue;
      }
    }
    if (std::regex_match(t, m, class_re)) {
      add_class(d, m[1], i, true);
      if (m[2].matched && !m[3].matched) {
        d.blocks.push_back(Block{"class", m[1], i});
        open = d.blocks.size() - 1;
        current = m[1];
      }
    } else if (std::regex_match(t, m, rel_re)) {
      add_class(d, m[1], i, false);
      add_class(d, m[3], i, false);
      d.edges.push_back(Edge{m[1], m[3], text::trim(m[4].str()), m[2], i});
    } else if (std::regex_match(t, m, member_re)) {
      add_class(d, m[1], i, false);
      Member mem{m[1], text::trim(m[2].str()), false, {}, i};
      mem.name = member_name(mem.text, mem.operation);
      d.members.push_back(std::move(mem));
    } else if (t == "}") {
      unparsed(d, i, "'}' without an open class");
    } else if (t.rfind("<<", 0) == 0) {
      d.parse_diagnostics.push_back({"annotation", i, "class annotations are outside the supported dialect",
                                     Severity::Warning, false, {}});
    } else {
      unparsed(d, i);
    }
  }
  if (open) unparsed(d, d.blocks[*open].open_line, "class body is not closed");
  for (auto& n : d.nodes)
    if (n.line == std::string::npos) n.line = d.header_line;
}

inline void add_participant(DiagramScript& d, const std::string& id, NodeKind kind, std::size_t line,
                            bool declaration) {
  for (auto& n : d.nodes) {
    if (n.id != id) continue;
    if (declaration) {
      if (n.kind == NodeKind::Other) {
        n.kind = kind;
        n.line = line;
      } else {
        d.parse_diagnostics.push_back({"duplicate-participant", line, fmt::format("{} declared twice", id),
                                       Severity::Warning, false, id});
      }
    }
    return;
  }
  d.nodes.push_back(Node{id, id, declaration ? kind : NodeKind::Other, line});
}

inline void parse_sequence(DiagramScript& d) {
  static const std::regex decl_re(R"re(^(participant|actor)\s+(.+?)(?:\s+as\s+(.+))?$)re");
  static const std::regex msg_re(
      R"re(^([^:+\-<>][^:<>]*?)\s*(-->>|->>|-->|->|--x|-x|--\)|-\))\s*([+-]?)\s*([^:+\-][^:]*?)\s*:\s*(.*)$)re");
  static const std::regex act_re(R"re(^(activate|deactivate)\s+(.+)$)re");
  static const std::regex note_re(R"re(^note\s+(over|left of|right of)\s+([^:]+?)\s*:\s*(.*)$)re", std::regex::icase);
  static const std::set<std::string> openers = {"loop", "alt", "opt", "par", "critical", "break", "rect"};
  static const std::set<std::string> middles = {"else", "and", "option"};
  std::vector<std::size_t> open;
  for (std::size_t i = d.header_line + 1; i < d.raw_lines.size(); ++i) {
    std::string t = text::trim(d.raw_lines[i]);
    if (t.empty() || is_comment(t)) continue;
    std::string first = t.substr(0, t.find(' '));
    std::smatch m;
    if (openers.count(first)) {
      d.blocks.push_back(Block{first, text::trim(std::string_view(t).substr(first.size())), i});
      open.push_back(d.blocks.size() - 1);
    } else if (middles.count(first)) {
      if (open.empty()) unparsed(d, i, fmt::format("'{}' outside a block", first));
    } else if (t == "end") {
      if (open.empty())
        d.parse_diagnostics.push_back({"stray-end", i, "'end' without an open block", Severity::Error, true, {}});
      else {
        d.blocks[open.back()].close_line = i;
        open.pop_back();
      }
    } else if (t == "autonumber" || first == "title") {
    } else if (std::regex_match(t, m, decl_re)) {
      std::string id = text::trim(m[2].str());
      add_participant(d, id, m[1] == "actor" ? NodeKind::Actor : NodeKind::Participant, i, true);
      if (m[3].matched) {
        for (auto& n : d.nodes)
          if (n.id == id) n.label = text::trim(m[3].str());
        d.parse_diagnostics.push_back({"alias", i, fmt::format("{} uses an alias", id), Severity::Warning, false, id});
      }
    } else if (std::regex_match(t, m, note_re)) {
      d.notes.push_back(Note{text::trim(m[2].str()), text::to_lower(m[1].str()), text::trim(m[3].str()), i});
    } else if (std::regex_match(t, m, act_re)) {
      std::string who = text::trim(m[2].str());
      add_participant(d, who, NodeKind::Other, i, false);
      d.activations.push_back(Activation{who, m[1] == "activate" ? 1 : -1, false, i});
    } else if (std::regex_match(t, m, msg_re)) {
      std::string from = text::trim(m[1].str()), to = text::trim(m[4].str());
      add_participant(d, from, NodeKind::Other, i, false);
      add_participant(d, to, NodeKind::Other, i, false);
      d.edges.push_back(Edge{from, to, text::trim(m[5].str()), m[2], i});
      if (m[3] == "+") d.activations.push_back(Activation{to, 1, true, i});
      else if (m[3] == "-") d.activations.push_back(Activation{from, -1, true, i});
    } else {
      unparsed(d, i);
    }
  }
  for (auto b : open)
    d.parse_diagnostics.push_back({"unclosed-block", d.blocks[b].open_line,
                                   fmt::format("'{}' block has no 'end'", d.blocks[b].keyword), Severity::Error,
                                   true, {}});
}

inline bool header_matches(DiagramKind kind, std::string_view t) {
  switch (kind) {
    case DiagramKind::UseCase: return t.rfind("graph", 0) == 0 || t.rfind("flowchart", 0) == 0;
    case DiagramKind::StateMachine: return t.rfind("stateDiagram", 0) == 0;
    case DiagramKind::ClassModel: return t.rfind("classDiagram", 0) == 0;
    case DiagramKind::Sequence: return t.rfind("sequenceDiagram", 0) == 0;
  }
  return false;
}

inline std::string_view expected_header(DiagramKind kind) {
  switch (kind) {
    case DiagramKind::UseCase: return "graph LR";
    case DiagramKind::StateMachine: return "stateDiagram-v2";
    case DiagramKind::ClassModel: return "classDiagram";
    case DiagramKind::Sequence: return "sequenceDiagram";
  }
  return "";
}

}  // namespace detail

/// Best-effort parse of one diagram. Lines outside the supported dialect are
/// kept in raw_lines and reported, never dropped. Leading blank and comment
/// lines may precede the header; anything else there is MissingHeader.
inline DiagramScript parse_diagram(DiagramKind kind, std::string_view src) {
  DiagramScript d;
  d.kind = kind;
  d.raw_lines = text::split_lines(src);
  while (!d.raw_lines.empty() && text::trim_view(d.raw_lines.back()).empty()) d.raw_lines.pop_back();
  std::optional<std::size_t> header;
  for (std::size_t i = 0; i < d.raw_lines.size(); ++i) {
    std::string t = detail::strip_trailing_semicolon(d.raw_lines[i]);
    if (t.empty()) continue;
    if (detail::is_comment(t)) {
      if (kind == DiagramKind::StateMachine && !d.name_comment && text::starts_with_icase(text::trim(t.substr(2)), "name:")) {
        d.name_comment = text::trim(text::trim(t.substr(2)).substr(5));
        d.name_line = i;
      }
      continue;
    }
    if (detail::header_matches(kind, t)) header = i;
    break;
  }
  if (!header)
    throw Error(ErrorCode::MissingHeader,
                fmt::format("{} diagram must start with '{}'", to_string(kind), detail::expected_header(kind)));
  d.header_line = *header;
  d.header = detail::strip_trailing_semicolon(d.raw_lines[*header]);
  switch (kind) {
    case DiagramKind::UseCase: detail::parse_flowchart(d); break;
    case DiagramKind::StateMachine: detail::parse_state_machine(d); break;
    case DiagramKind::ClassModel: detail::parse_class_diagram(d); break;
    case DiagramKind::Sequence: detail::parse_sequence(d); break;
  }
  return d;
}

// ---------------------------------------------------------------------------
// Validation

struct ValidateOptions {
  /// Names of human actors (from the memorised UML actors); sequence
  /// participants matching one of them must be declared with `actor`.
  std::vector<std::string> human_actors;
};

namespace detail {

inline std::string name_key(std::string_view s) {
  std::string out;
  for (char c : s)
    if (std::isalnum(static_cast<unsigned char>(c))) out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  if (out.rfind("the", 0) == 0 && out.size() > 3) out = out.substr(3);
  return out;
}

inline bool is_human(const std::string& id, const ValidateOptions& opt) {
  auto k = name_key(id);
  for (const auto& h : opt.human_actors)
    if (!k.empty() && name_key(h) == k) return true;
  return false;
}

inline bool is_getter_setter(const std::string& name) {
  if (name.size() < 3) return false;
  auto p = text::to_lower(name.substr(0, 3));
  if (p != "get" && p != "set") return false;
  return name.size() == 3 || std::isupper(static_cast<unsigned char>(name[3])) || name[3] == '_';
}

inline void validate_use_case(const DiagramScript& d, std::vector<Diagnostic>& out) {
  if (d.header != "graph LR")
    out.push_back({"header", d.header_line, "header must be 'graph LR'", Severity::Error, true, {}});
  auto kind_of = [&](const std::string& id) {
    const Node* n = d.node(id);
    return n ? n->kind : NodeKind::Other;
  };
  for (const auto& n : d.nodes) {
    if (n.kind == NodeKind::Actor && n.label.find_first_of("()[]{}") != std::string::npos)
      out.push_back({"R4", n.line, fmt::format("actor name '{}' contains brackets", n.label), Severity::Error, true,
                     n.id});
    if (n.kind == NodeKind::Other && n.label == n.id)
      out.push_back({"undeclared-node", n.line, fmt::format("{} is used without an actor or use-case shape", n.id),
                     Severity::Warning, false, n.id});
    else if (n.kind == NodeKind::Other)
      out.push_back({"unsupported-shape", n.line, fmt::format("{} uses a shape outside the supported dialect", n.id),
                     Severity::Warning, false, n.id});
  }
  for (const auto& n : d.nodes) {
    if (n.kind == NodeKind::Actor) {
      bool linked = std::any_of(d.edges.begin(), d.edges.end(), [&](const Edge& e) {
        return (e.from == n.id && kind_of(e.to) == NodeKind::UseCase) ||
               (e.to == n.id && kind_of(e.from) == NodeKind::UseCase);
      });
      if (!linked)
        out.push_back({"R1", n.line, fmt::format("actor {} is not linked to any use case", n.id), Severity::Error,
                       false, n.id});
    } else if (n.kind == NodeKind::UseCase) {
      bool ok = std::any_of(d.edges.begin(), d.edges.end(), [&](const Edge& e) {
        return (e.from == n.id && kind_of(e.to) == NodeKind::Actor) ||
               (e.to == n.id && kind_of(e.from) == NodeKind::Actor) ||
               (e.from == n.id && e.to != n.id && kind_of(e.to) == NodeKind::UseCase);
      });
      if (!ok)
        out.push_back({"R2", n.line,
                       fmt::format("use case {} is linked to no actor and points to no other use case", n.id),
                       Severity::Error, false, n.id});
    }
  }
  for (const auto& e : d.edges)
    if (kind_of(e.from) == NodeKind::Actor && kind_of(e.to) == NodeKind::Actor)
      out.push_back({"R3", e.line, fmt::format("actor-to-actor link {} -> {}", e.from, e.to), Severity::Error, true,
                     e.from + "->" + e.to});
  for (const auto& b : d.blocks)
    if (b.keyword == "subgraph")
      out.push_back({"R5", b.open_line, "subgraphs are not allowed", Severity::Error, true, b.label});
}

inline void validate_state_machine(const DiagramScript& d, std::vector<Diagnostic>& out) {
  if (!d.name_comment || d.name_line != 0)
    out.push_back({"name-comment", 0, "line 0 must be a '%% Name: <actor>' comment", Severity::Error, true, {}});
  for (std::size_t i = 0; i < d.raw_lines.size(); ++i)
    if (d.raw_lines[i].find(';') != std::string::npos)
      out.push_back({"semicolon", i, "semicolons are not allowed", Severity::Error, true, {}});
  for (const auto& b : d.blocks)
    out.push_back({"compound-state", b.open_line, fmt::format("compound state block '{}'", b.label), Severity::Error,
                   true, b.label});
  bool start = std::any_of(d.edges.begin(), d.edges.end(), [](const Edge& e) { return e.from == "[*]"; });
  if (!start) out.push_back({"start-state", d.header_line, "no start transition from [*]", Severity::Error, false, {}});
  std::set<std::string> states;
  for (const auto& n : d.nodes) states.insert(n.id);
  for (const auto& n : d.nodes) {
    bool entry = false, exit = false;
    for (const auto& e : d.edges) {
      if (e.to == n.id && e.from != n.id) entry = true;
      if (e.from == n.id && e.to != n.id) exit = true;
    }
    if (!entry && !exit) {
      out.push_back({"isolated-state", n.line, fmt::format("state {} has no transitions", n.id), Severity::Error,
                     true, n.id});
      continue;
    }
    if (!entry)
      out.push_back({"missing-entry", n.line, fmt::format("state {} has no entry transition", n.id), Severity::Error,
                     true, n.id});
    if (!exit)
      out.push_back({"missing-exit", n.line, fmt::format("state {} has no exit transition", n.id), Severity::Error,
                     true, n.id});
    bool noted = std::any_of(d.notes.begin(), d.notes.end(), [&](const Note& x) { return x.target == n.id; });
    if (!noted)
      out.push_back({"missing-note", n.line, fmt::format("state {} has no note", n.id), Severity::Error, true, n.id});
  }
  for (const auto& x : d.notes)
    if (!states.count(x.target))
      out.push_back({"note-target", x.line, fmt::format("note refers to unknown state {}", x.target), Severity::Error,
                     true, x.target});
}

inline void validate_class_model(const DiagramScript& d, std::vector<Diagnostic>& out) {
  int labs = 0;
  for (const auto& n : d.nodes)
    if (n.id == "ArtificialLab") ++labs;
  if (labs == 0)
    out.push_back({"artificial-lab", d.header_line, "no ArtificialLab class", Severity::Error, false, {}});
  for (std::size_t i = 0; i < d.raw_lines.size(); ++i)
    if (d.raw_lines[i].find('/') != std::string::npos)
      out.push_back({"slash", i, "lines containing '/' are not allowed", Severity::Error, true, {}});
  for (const auto& m : d.members)
    if (m.operation && is_getter_setter(m.name))
      out.push_back({"getter-setter", m.line, fmt::format("{}.{} is a getter or setter", m.cls, m.name),
                     Severity::Error, true, m.cls + "." + m.name});
  if (labs > 0) {
    bool stats = std::any_of(d.members.begin(), d.members.end(), [](const Member& m) {
      return m.cls == "ArtificialLab" && m.operation && text::contains_icase(m.name, "statistic");
    });
    if (!stats)
      out.push_back({"lab-statistics", d.header_line, "ArtificialLab has no summary-statistics operation",
                     Severity::Warning, false, "ArtificialLab"});
  }
}

inline void validate_sequence(const DiagramScript& d, const ValidateOptions& opt, std::vector<Diagnostic>& out) {
  for (const auto& n : d.nodes) {
    if (!is_human(n.id, opt) || n.kind == NodeKind::Actor) continue;
    if (n.kind == NodeKind::Participant)
      out.push_back({"human-actor", n.line, fmt::format("{} is human and must be declared with 'actor'", n.id),
                     Severity::Error, true, n.id});
    else
      out.push_back({"human-actor", n.line, fmt::format("{} is human but never declared as an actor", n.id),
                     Severity::Error, true, n.id});
  }
  std::map<std::string, int> level;
  std::set<std::string> reported;
  for (const auto& a : d.activations) {
    int& l = level[a.participant];
    l += a.delta;
    if (l < 0) {
      out.push_back({"activation-balance", a.line, fmt::format("{} deactivated while inactive", a.participant),
                     Severity::Error, true, a.participant});
      l = 0;
    }
  }
  for (const auto& [who, l] : level)
    if (l > 0)
      out.push_back({"activation-balance", std::string::npos, fmt::format("{} left active {} time(s)", who, l),
                     Severity::Error, true, who});
  for (const auto& x : d.notes) {
    bool followed = std::any_of(d.edges.begin(), d.edges.end(), [&](const Edge& e) { return e.line > x.line; });
    if (!followed)
      out.push_back({"note-without-message", x.line, "use-case note is not followed by any message",
                     Severity::Warning, false, x.target});
  }
}

}  // namespace detail

/// Structural findings for one parsed diagram, parse-time findings first.
inline std::vector<Diagnostic> validate(const DiagramScript& d, const ValidateOptions& opt = {}) {
  std::vector<Diagnostic> out = d.parse_diagnostics;
  switch (d.kind) {
    case DiagramKind::UseCase: detail::validate_use_case(d, out); break;
    case DiagramKind::StateMachine: detail::validate_state_machine(d, out); break;
    case DiagramKind::ClassModel: detail::validate_class_model(d, out); break;
    case DiagramKind::Sequence: detail::validate_sequence(d, opt, out); break;
  }
  return out;
}

inline std::size_t error_count(const std::vector<Diagnostic>& diags) {
  return static_cast<std::size_t>(
      std::count_if(diags.begin(), diags.end(), [](const Diagnostic& d) { return d.severity == Severity::Error; }));
}

// ---------------------------------------------------------------------------
// Repair

struct RepairEdit {
  enum class Op { Replace, Remove, Insert };
  std::string rule;
  Op op = Op::Replace;
  std::size_t line = 0;  // index in the text as it was when the edit applied
  std::string before;
  std::string after;
  bool operator==(const RepairEdit&) const = default;
};

inline std::string_view to_string(RepairEdit::Op op) {
  switch (op) {
    case RepairEdit::Op::Replace: return "replace";
    case RepairEdit::Op::Remove: return "remove";
    case RepairEdit::Op::Insert: return "insert";
  }
  return "replace";
}

struct RepairReport {
  std::vector<RepairEdit> applied;
  bool empty() const { return applied.empty(); }
  bool operator==(const RepairReport&) const = default;
};

inline json to_json(const RepairReport& r) {
  json arr = json::array();
  for (const auto& e : r.applied)
    arr.push_back({{"rule", e.rule}, {"op", std::string(to_string(e.op))}, {"line", e.line}, {"before", e.before},
                   {"after", e.after}});
  return arr;
}

/// Applies edits in order to `lines`; each edit's line index refers to the
/// text produced by the edits before it.
inline std::vector<std::string> replay(std::vector<std::string> lines, const RepairReport& report) {
  for (const auto& e : report.applied) {
    switch (e.op) {
      case RepairEdit::Op::Replace: lines.at(e.line) = e.after; break;
      case RepairEdit::Op::Remove: lines.erase(lines.begin() + static_cast<long>(e.line)); break;
      case RepairEdit::Op::Insert: lines.insert(lines.begin() + static_cast<long>(e.line), e.after); break;
    }
  }
  return lines;
}

struct RepairResult {
  DiagramScript script;
  RepairReport report;
  std::vector<Diagnostic> remaining;
  bool resolved() const { return error_count(remaining) == 0; }
};

namespace detail {

class Editor {
 public:
  Editor(std::vector<std::string>& lines, RepairReport& report) : lines_(lines), report_(report) {}
  void replace(const std::string& rule, std::size_t i, std::string after) {
    if (lines_[i] == after) return;
    report_.applied.push_back({rule, RepairEdit::Op::Replace, i, lines_[i], after});
    lines_[i] = std::move(after);
  }
  void remove(const std::string& rule, std::size_t i) {
    report_.applied.push_back({rule, RepairEdit::Op::Remove, i, lines_[i], {}});
    lines_.erase(lines_.begin() + static_cast<long>(i));
  }
  /// Removes several lines, highest index first so indices stay valid.
  void remove_all(const std::string& rule, std::vector<std::size_t> idx) {
    std::sort(idx.begin(), idx.end());
    idx.erase(std::unique(idx.begin(), idx.end()), idx.end());
    for (auto it = idx.rbegin(); it != idx.rend(); ++it) remove(rule, *it);
  }
  void insert(const std::string& rule, std::size_t i, std::string text) {
    report_.applied.push_back({rule, RepairEdit::Op::Insert, i, {}, text});
    lines_.insert(lines_.begin() + static_cast<long>(i), std::move(text));
  }
  std::string indent_of(std::size_t i) const {
    const auto& l = lines_.at(i);
    return l.substr(0, l.find_first_not_of(" \t") == std::string::npos ? 0 : l.find_first_not_of(" \t"));
  }
  const std::vector<std::string>& lines() const { return lines_; }

 private:
  std::vector<std::string>& lines_;
  RepairReport& report_;
};

inline std::string strip_brackets(std::string s) {
  std::string out;
  for (char c : s)
    if (std::string_view("()[]{}").find(c) == std::string_view::npos) out.push_back(c);
  return text::normalize_whitespace(out);
}

inline std::string semicolons_to_stops(const std::string& line) {
  std::string body = line;
  auto end = body.find_last_not_of(" \t");
  if (end != std::string::npos && body[end] == ';') {
    body.erase(end, 1);
    while (!body.empty() && (body.back() == ' ' || body.back() == '\t')) body.pop_back();
  }
  return text::replace_all(body, ";", ".");
}

/// Lines that mention a state id as a transition endpoint, declaration or
/// note target.
inline std::vector<std::size_t> state_lines(const DiagramScript& d, const std::string& id) {
  std::vector<std::size_t> out;
  for (const auto& e : d.edges)
    if (e.from == id || e.to == id) out.push_back(e.line);
  for (const auto& x : d.notes) {
    if (x.target != id) continue;
    out.push_back(x.line);
    if (x.text.empty() || d.raw_lines[x.line].find(':') == std::string::npos) {
      // multi-line note body through "end note"
      for (std::size_t i = x.line + 1; i < d.raw_lines.size(); ++i) {
        out.push_back(i);
        if (text::to_lower(text::trim(d.raw_lines[i])) == "end note") break;
      }
    }
  }
  static const std::regex decl(R"re(^\s*(?:state\s+(?:"[^"]*"\s+as\s+)?)?([A-Za-z_]\w*)\s*(?::.*)?$)re");
  for (std::size_t i = d.header_line + 1; i < d.raw_lines.size(); ++i) {
    std::smatch m;
    const std::string& l = d.raw_lines[i];
    if (std::regex_match(l, m, decl) && m[1] == id) out.push_back(i);
  }
  return out;
}

inline int rule_priority(const std::string& rule) {
  static const std::vector<std::string> order = {
      "trailing-semicolon", "semicolon",       "slash",          "compound-state", "R5",
      "header",             "R4",              "R3",             "duplicate-class", "getter-setter",
      "stray-end",          "unclosed-block",  "activation-balance", "human-actor", "name-comment",
      "note-target",        "isolated-state",  "missing-entry",  "missing-exit",   "missing-note"};
  auto it = std::find(order.begin(), order.end(), rule);
  return it == order.end() ? 1000 : static_cast<int>(it - order.begin());
}

/// Applies the fix for one diagnostic. Returns false when the fix does not
/// apply in the current text (the diagnostic then counts as unfixable).
inline bool apply_fix(const DiagramScript& d, const Diagnostic& diag, Editor& ed) {
  const auto& r = diag.rule;
  if (r == "trailing-semicolon") {
    std::string l = d.raw_lines[diag.line];
    while (!l.empty() && (l.back() == ';' || l.back() == ' ')) l.pop_back();
    ed.replace(r, diag.line, l);
    return true;
  }
  if (r == "semicolon") {
    ed.replace(r, diag.line, semicolons_to_stops(d.raw_lines[diag.line]));
    return true;
  }
  if (r == "slash" || r == "getter-setter" || r == "R3" || r == "stray-end") {
    const auto& l = d.raw_lines[diag.line];
    // A slash on a class opener would orphan its body; drop the whole block.
    if (r == "slash" && d.kind == DiagramKind::ClassModel) {
      for (const auto& b : d.blocks) {
        if (b.open_line == diag.line && b.close_line != std::string::npos) {
          std::vector<std::size_t> idx;
          for (std::size_t i = b.open_line; i <= b.close_line; ++i) idx.push_back(i);
          ed.remove_all(r, idx);
          return true;
        }
      }
    }
    if (r == "R3") {
      // Only whole-line single edges are removed; chains would lose valid links.
      std::size_t count = 0;
      for (const auto& e : d.edges)
        if (e.line == diag.line) ++count;
      if (count != 1) return false;
    }
    (void)l;
    ed.remove(r, diag.line);
    return true;
  }
  if (r == "compound-state" || r == "R5") {
    for (const auto& b : d.blocks) {
      if (b.open_line != diag.line) continue;
      std::vector<std::size_t> idx{b.open_line};
      if (b.close_line != std::string::npos) idx.push_back(b.close_line);
      ed.remove_all(r, idx);
      return true;
    }
    return false;
  }
  if (r == "header") {
    ed.replace(r, d.header_line, ed.indent_of(d.header_line) + "graph LR");
    return true;
  }
  if (r == "R4") {
    const Node* n = d.node(diag.subject);
    if (!n) return false;
    std::string l = d.raw_lines[n->line];
    auto pos = l.find(n->id + "((");
    if (pos == std::string::npos) return false;
    std::size_t start = pos + n->id.size() + 2;
    std::size_t p = pos;
    auto ref = read_node(l, p);
    if (!ref || !ref->label) return false;
    // p is just past the closing "))"
    std::string fixed = strip_brackets(*ref->label);
    if (fixed.empty()) return false;
    ed.replace(r, n->line, l.substr(0, start) + fixed + l.substr(p - 2));
    return true;
  }
  if (r == "duplicate-class") {
    for (const auto& b : d.blocks) {
      if (b.open_line == diag.line && b.close_line != std::string::npos) {
        std::vector<std::size_t> idx;
        for (std::size_t i = b.open_line; i <= b.close_line; ++i) idx.push_back(i);
        ed.remove_all(r, idx);
        return true;
      }
    }
    ed.remove(r, diag.line);
    return true;
  }
  if (r == "unclosed-block") {
    ed.insert(r, ed.lines().size(), "    end");
    return true;
  }
  if (r == "activation-balance") {
    const Activation* target = nullptr;
    if (diag.line != std::string::npos) {
      for (const auto& a : d.activations)
        if (a.line == diag.line && a.participant == diag.subject && a.delta < 0) target = &a;
    } else {
      for (const auto& a : d.activations)
        if (a.participant == diag.subject && a.delta > 0) target = &a;  // last activation
    }
    if (!target) return false;
    if (!target->marker) {
      ed.remove(r, target->line);
      return true;
    }
    std::string l = d.raw_lines[target->line];
    static const std::regex marker(R"re((-->>|->>|-->|->|--x|-x|--\)|-\))\s*[+-])re");
    ed.replace(r, target->line, std::regex_replace(l, marker, "$1", std::regex_constants::format_first_only));
    return true;
  }
  if (r == "human-actor") {
    const Node* n = d.node(diag.subject);
    if (!n) return false;
    if (n->kind == NodeKind::Participant) {
      std::string l = d.raw_lines[n->line];
      auto pos = l.find("participant");
      if (pos == std::string::npos) return false;
      ed.replace(r, n->line, l.substr(0, pos) + "actor" + l.substr(pos + 11));
    } else {
      ed.insert(r, d.header_line + 1, "    actor " + n->id);
    }
    return true;
  }
  if (r == "name-comment") {
    if (d.name_comment && d.name_line != std::string::npos) {
      std::string l = text::trim(d.raw_lines[d.name_line]);
      ed.remove(r, d.name_line);
      ed.insert(r, 0, l);
    } else {
      ed.insert(r, 0, "%% Name: UNNAMED");
    }
    return true;
  }
  if (r == "note-target") {
    std::vector<std::size_t> idx{diag.line};
    const auto& l = d.raw_lines[diag.line];
    if (l.find(':') == std::string::npos)
      for (std::size_t i = diag.line + 1; i < d.raw_lines.size(); ++i) {
        idx.push_back(i);
        if (text::to_lower(text::trim(d.raw_lines[i])) == "end note") break;
      }
    ed.remove_all(r, idx);
    return true;
  }
  if (r == "isolated-state") {
    auto idx = state_lines(d, diag.subject);
    if (idx.empty()) return false;
    ed.remove_all(r, idx);
    return true;
  }
  if (r == "missing-entry" || r == "missing-exit") {
    // Prune the dead-end state when every neighbour keeps another transition
    // in the same direction; otherwise leave it for a human.
    const std::string& id = diag.subject;
    bool entry_missing = r == "missing-entry";
    for (const auto& e : d.edges) {
      const std::string& other = entry_missing ? e.to : e.from;
      if ((entry_missing ? e.from : e.to) != id || other == "[*]" || other == id) continue;
      bool alt = std::any_of(d.edges.begin(), d.edges.end(), [&](const Edge& f) {
        return entry_missing ? (f.to == other && f.from != id && f.from != other)
                             : (f.from == other && f.to != id && f.to != other);
      });
      if (!alt) return false;
    }
    auto idx = state_lines(d, id);
    if (idx.empty()) return false;
    ed.remove_all(r, idx);
    return true;
  }
  if (r == "missing-note") {
    const Node* n = d.node(diag.subject);
    if (!n) return false;
    std::size_t last = d.header_line;
    for (const auto& e : d.edges)
      if (e.from == n->id || e.to == n->id) last = std::max(last, e.line);
    ed.insert(r, last + 1, fmt::format("    note left of {} : TODO describe {}", n->id, n->id));
    return true;
  }
  return false;
}

}  // namespace detail

/// Applies every auto-fixable rule until none applies. Fixes only rename,
/// remove or re-punctuate lines, plus placeholder notes, a missing name
/// comment and block terminators; no node or edge is ever added.
inline RepairResult repair(const DiagramScript& input, const ValidateOptions& opt = {}) {
  RepairResult res;
  std::vector<std::string> lines = input.raw_lines;
  std::set<std::pair<std::string, std::string>> given_up;
  DiagramScript cur = input;
  const std::size_t cap = 8 * (lines.size() + 8);
  for (std::size_t iter = 0; iter < cap; ++iter) {
    auto diags = validate(cur, opt);
    std::vector<const Diagnostic*> fixable;
    for (const auto& d : diags)
      if (d.auto_fixable && !given_up.count({d.rule, d.subject + "@" + std::to_string(d.line)})) fixable.push_back(&d);
    if (fixable.empty()) break;
    std::stable_sort(fixable.begin(), fixable.end(), [](const Diagnostic* a, const Diagnostic* b) {
      return detail::rule_priority(a->rule) < detail::rule_priority(b->rule);
    });
    bool applied = false;
    for (const auto* d : fixable) {
      std::vector<std::string> trial = lines;
      RepairReport trial_report;
      detail::Editor ed(trial, trial_report);
      if (!detail::apply_fix(cur, *d, ed) || trial_report.empty()) {
        given_up.insert({d->rule, d->subject + "@" + std::to_string(d->line)});
        continue;
      }
      // Parsing drops trailing blank lines; record them so the report replays.
      while (!trial.empty() && text::trim_view(trial.back()).empty()) ed.remove(d->rule, trial.size() - 1);
      DiagramScript next;
      try {
        next = parse_diagram(input.kind, text::join(trial, "\n"));
      } catch (const Error&) {
        given_up.insert({d->rule, d->subject + "@" + std::to_string(d->line)});
        continue;
      }
      lines = std::move(trial);
      for (auto& e : trial_report.applied) res.report.applied.push_back(std::move(e));
      cur = std::move(next);
      applied = true;
      break;
    }
    if (!applied) break;
  }
  res.script = std::move(cur);
  res.remaining = validate(res.script, opt);
  return res;
}

// ---------------------------------------------------------------------------
// Emission and comparison

/// Canonical text: trimmed statements, blank lines dropped, four-space
/// indentation per nesting level. Throws UnresolvedErrors while Errors remain.
inline std::string emit(const DiagramScript& d, const ValidateOptions& opt = {}) {
  auto diags = validate(d, opt);
  if (error_count(diags) > 0) {
    std::vector<std::string> msgs;
    for (const auto& x : diags)
      if (x.severity == Severity::Error) msgs.push_back(x.rule + ": " + x.message);
    throw Error(ErrorCode::UnresolvedErrors, text::join(msgs, "; "));
  }
  std::set<std::size_t> opens, closes, middles;
  for (const auto& b : d.blocks) {
    opens.insert(b.open_line);
    if (b.close_line != std::string::npos) closes.insert(b.close_line);
  }
  if (d.kind == DiagramKind::Sequence) {
    for (std::size_t i = 0; i < d.raw_lines.size(); ++i) {
      auto t = text::trim(d.raw_lines[i]);
      auto first = t.substr(0, t.find(' '));
      if (first == "else" || first == "and" || first == "option") middles.insert(i);
    }
  }
  std::vector<std::string> out;
  int depth = 0;
  for (std::size_t i = 0; i < d.raw_lines.size(); ++i) {
    std::string t = text::trim(d.raw_lines[i]);
    if (t.empty()) continue;
    if (i < d.header_line || i == d.header_line) {
      out.push_back(t);
      continue;
    }
    if (closes.count(i)) --depth;
    int level = 1 + depth - (middles.count(i) ? 1 : 0);
    out.push_back(std::string(static_cast<std::size_t>(4 * std::max(level, 1)), ' ') + t);
    if (opens.count(i)) ++depth;
  }
  return text::join(out, "\n") + "\n";
}

/// Same diagram up to whitespace, line positions and statement order of
/// declarations: node set, edges, notes, members and activations.
inline bool structurally_equal(const DiagramScript& a, const DiagramScript& b) {
  if (a.kind != b.kind || text::normalize_whitespace(a.header) != text::normalize_whitespace(b.header) ||
      a.name_comment != b.name_comment)
    return false;
  auto nodes = [](const DiagramScript& d) {
    std::set<std::tuple<std::string, std::string, NodeKind>> s;
    for (const auto& n : d.nodes) s.insert({n.id, n.label, n.kind});
    return s;
  };
  auto edges = [](const DiagramScript& d) {
    std::vector<std::tuple<std::string, std::string, std::string, std::string>> v;
    for (const auto& e : d.edges) v.emplace_back(e.from, e.to, e.label, e.arrow);
    return v;
  };
  auto notes = [](const DiagramScript& d) {
    std::vector<std::tuple<std::string, std::string, std::string>> v;
    for (const auto& n : d.notes) v.emplace_back(n.target, n.placement, n.text);
    return v;
  };
  auto members = [](const DiagramScript& d) {
    std::vector<std::pair<std::string, std::string>> v;
    for (const auto& m : d.members) v.emplace_back(m.cls, m.text);
    return v;
  };
  auto acts = [](const DiagramScript& d) {
    std::vector<std::pair<std::string, int>> v;
    for (const auto& x : d.activations) v.emplace_back(x.participant, x.delta);
    return v;
  };
  return nodes(a) == nodes(b) && edges(a) == edges(b) && notes(a) == notes(b) && members(a) == members(b) &&
         acts(a) == acts(b) && a.blocks.size() == b.blocks.size();
}

// ---------------------------------------------------------------------------
// Extraction from model replies

namespace detail {

// Splits lines into diagrams, one per header line (state machines also at
// each "%% Name:" comment, which keeps the header that follows it).
inline std::vector<std::string> segment_diagrams(DiagramKind kind, const std::vector<std::string>& lines) {
  std::vector<std::string> out;
  std::vector<std::string> cur;
  bool started = false;
  for (const auto& line : lines) {
    auto t = text::trim(line);
    bool name = kind == DiagramKind::StateMachine && is_comment(t) && text::starts_with_icase(text::trim(t.substr(2)), "name:");
    bool header = header_matches(kind, strip_trailing_semicolon(t));
    bool header_after_name = header && cur.size() == 1 && text::starts_with_icase(text::trim(text::trim(cur[0]).substr(2)), "name:");
    if ((name || header) && !header_after_name) {
      if (started && !cur.empty()) out.push_back(text::join(cur, "\n"));
      cur.clear();
      started = true;
    }
    if (started) cur.push_back(line);
  }
  if (started && !cur.empty()) out.push_back(text::join(cur, "\n"));
  return out;
}

}  // namespace detail

/// Diagram texts inside a reply: fenced ```mermaid blocks when present,
/// otherwise segments starting at each header line. State machines are also
/// split at each "%% Name:" comment, inside a fence or not.
inline std::vector<std::string> extract_diagrams(DiagramKind kind, std::string_view reply) {
  auto lines = text::split_lines(reply);
  std::vector<std::string> out;
  std::vector<std::vector<std::string>> blocks;
  std::vector<std::string> cur;
  bool fenced = false;
  for (const auto& l : lines) {
    if (text::trim(l).rfind("```", 0) == 0) {
      if (fenced) blocks.push_back(std::move(cur));
      cur.clear();
      fenced = !fenced;
      continue;
    }
    if (fenced) cur.push_back(l);
  }
  for (auto& b : blocks) {
    auto joined = text::join(b, "\n");
    if (text::trim_view(joined).empty()) continue;
    if (kind != DiagramKind::StateMachine) {
      out.push_back(std::move(joined));
      continue;
    }
    auto parts = detail::segment_diagrams(kind, b);
    if (parts.empty()) out.push_back(std::move(joined));
    else out.insert(out.end(), parts.begin(), parts.end());
  }
  if (out.empty()) out = detail::segment_diagrams(kind, lines);
  for (auto& s : out) {
    auto ls = text::split_lines(s);
    while (!ls.empty() && text::trim_view(ls.back()).empty()) ls.pop_back();
    s = text::join(ls, "\n");
  }
  return out;
}

}  // namespace eabss::diagram
