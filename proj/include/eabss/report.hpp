#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <regex>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "eabss/config.hpp"
#include "eabss/core.hpp"
#include "eabss/diagram.hpp"
#include "eabss/session.hpp"

namespace eabss::report {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Plain tables

struct PlainTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  /// Non-table lines that surrounded the table.
  std::vector<std::string> prose;
  bool operator==(const PlainTable&) const = default;

  std::optional<std::size_t> column(std::string_view name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (text::to_lower(text::trim(header[i])) == text::to_lower(name)) return i;
    for (std::size_t i = 0; i < header.size(); ++i)
      if (text::contains_icase(header[i], name)) return i;
    return std::nullopt;
  }
};

namespace detail {

enum class LineType { None, Pipe, Tab, Space };

inline bool is_separator_cell(std::string_view c) {
  c = text::trim_view(c);
  if (c.size() < 3) return false;
  for (char ch : c)
    if (ch != '-' && ch != ':') return false;
  return true;
}

inline std::vector<std::string> split_cells(const std::string& line, LineType t) {
  std::vector<std::string> cells;
  if (t == LineType::Pipe) {
    std::string s = text::trim(line);
    if (!s.empty() && s.front() == '|') s.erase(0, 1);
    if (!s.empty() && s.back() == '|') s.pop_back();
    std::size_t start = 0;
    for (;;) {
      auto bar = s.find('|', start);
      cells.push_back(text::trim(std::string_view(s).substr(start, bar == std::string::npos ? std::string::npos : bar - start)));
      if (bar == std::string::npos) break;
      start = bar + 1;
    }
  } else if (t == LineType::Tab) {
    std::string s = line;
    while (!s.empty() && (s.back() == '\r' || s.back() == ' ')) s.pop_back();
    std::size_t start = 0;
    for (;;) {
      auto tab = s.find('\t', start);
      cells.push_back(text::trim(std::string_view(s).substr(start, tab == std::string::npos ? std::string::npos : tab - start)));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
  } else if (t == LineType::Space) {
    std::string s = text::trim(line);
    std::size_t i = 0;
    std::string cur;
    while (i < s.size()) {
      if (s[i] == ' ' && i + 1 < s.size() && s[i + 1] == ' ') {
        cells.push_back(text::trim(cur));
        cur.clear();
        while (i < s.size() && s[i] == ' ') ++i;
        continue;
      }
      cur.push_back(s[i++]);
    }
    cells.push_back(text::trim(cur));
  }
  return cells;
}

inline LineType classify(const std::string& line) {
  auto t = text::trim_view(line);
  if (t.empty()) return LineType::None;
  if (t.find('|') != std::string_view::npos && split_cells(line, LineType::Pipe).size() >= 2) return LineType::Pipe;
  if (line.find('\t') != std::string::npos && split_cells(line, LineType::Tab).size() >= 2) return LineType::Tab;
  if (t.find("  ") != std::string_view::npos && split_cells(line, LineType::Space).size() >= 2) return LineType::Space;
  return LineType::None;
}

}  // namespace detail

/// Every table in `src`, in order. A table is a run of at least two
/// consecutive lines of one layout (pipe, tab or two-plus-space aligned);
/// its first line is the header. Tab tables keep empty cells so grouped
/// first columns survive. Throws RaggedRow on a row whose cell count
/// differs from the header's.
inline std::vector<PlainTable> parse_plain_tables(std::string_view src) {
  auto lines = text::split_lines(src);
  std::vector<PlainTable> out;
  std::vector<std::string> prose;
  std::size_t i = 0;
  while (i < lines.size()) {
    auto type = detail::classify(lines[i]);
    std::size_t j = i;
    while (j < lines.size() && detail::classify(lines[j]) == type && type != detail::LineType::None) ++j;
    std::size_t data_rows = 0;
    for (std::size_t k = i + 1; k < j; ++k) {
      auto cells = detail::split_cells(lines[k], type);
      if (!std::all_of(cells.begin(), cells.end(), detail::is_separator_cell)) ++data_rows;
    }
    if (type == detail::LineType::None || data_rows == 0) {
      if (!text::trim_view(lines[i]).empty()) prose.push_back(text::trim(lines[i]));
      ++i;
      continue;
    }
    PlainTable t;
    t.header = detail::split_cells(lines[i], type);
    for (std::size_t k = i + 1; k < j; ++k) {
      auto cells = detail::split_cells(lines[k], type);
      if (std::all_of(cells.begin(), cells.end(), detail::is_separator_cell)) continue;
      while (cells.size() > t.header.size() && cells.back().empty()) cells.pop_back();
      if (cells.size() != t.header.size())
        throw Error(ErrorCode::RaggedRow, fmt::format("line {}: {} cells, header has {}", k + 1, cells.size(),
                                                      t.header.size()));
      t.rows.push_back(std::move(cells));
    }
    t.prose = std::move(prose);
    prose.clear();
    out.push_back(std::move(t));
    i = j;
  }
  if (!out.empty())
    for (auto& p : prose) out.back().prose.push_back(std::move(p));
  return out;
}

inline PlainTable parse_plain_table(std::string_view src) {
  auto all = parse_plain_tables(src);
  if (all.empty()) throw Error(ErrorCode::NoTableFound, "no pipe, tab or column-aligned table found");
  return all.front();
}

/// Pipe-table rendering used by the Markdown export.
inline std::string to_markdown(const PlainTable& t) {
  auto esc = [](const std::string& c) { return text::replace_all(c, "|", "\\|"); };
  std::string out = "|";
  for (const auto& h : t.header) out += " " + esc(h) + " |";
  out += "\n|";
  for (std::size_t i = 0; i < t.header.size(); ++i) out += " --- |";
  out += "\n";
  for (const auto& r : t.rows) {
    out += "|";
    for (const auto& c : r) out += " " + esc(c) + " |";
    out += "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Findings

enum class Criterion { Usability, Generality, Pertinency, Readability, Conformity, Believability, Originality };

inline constexpr Criterion kCriteria[] = {Criterion::Usability,   Criterion::Generality, Criterion::Pertinency,
                                          Criterion::Readability, Criterion::Conformity, Criterion::Believability,
                                          Criterion::Originality};

inline std::string_view to_string(Criterion c) {
  switch (c) {
    case Criterion::Usability: return "Usability";
    case Criterion::Generality: return "Generality";
    case Criterion::Pertinency: return "Pertinency";
    case Criterion::Readability: return "Readability";
    case Criterion::Conformity: return "Conformity";
    case Criterion::Believability: return "Believability";
    case Criterion::Originality: return "Originality";
  }
  return "";
}

inline Criterion criterion_from_string(std::string_view s) {
  for (auto c : kCriteria)
    if (to_string(c) == s) return c;
  throw Error(ErrorCode::IOFailure, fmt::format("unknown criterion '{}'", s));
}

struct Finding {
  Criterion criterion = Criterion::Conformity;
  std::string rule;
  std::string message;
  Severity severity = Severity::Error;
  std::string subject;
  bool operator==(const Finding&) const = default;
};

inline json to_json(const Finding& f) {
  return json{{"criterion", std::string(to_string(f.criterion))},
              {"rule", f.rule},
              {"message", f.message},
              {"severity", std::string(to_string(f.severity))},
              {"subject", f.subject}};
}
inline Finding finding_from_json(const json& j) {
  return Finding{criterion_from_string(j.at("criterion").get<std::string>()), j.at("rule").get<std::string>(),
                 j.at("message").get<std::string>(),
                 j.at("severity").get<std::string>() == "warning" ? Severity::Warning : Severity::Error,
                 j.value("subject", "")};
}

// ---------------------------------------------------------------------------
// Scope table

enum class ScopeCategory { Actors, PhysicalEnvironment, SocialAspects, PsychologicalAspects, Misc };

inline std::string_view to_string(ScopeCategory c) {
  switch (c) {
    case ScopeCategory::Actors: return "Actors";
    case ScopeCategory::PhysicalEnvironment: return "PhysicalEnvironment";
    case ScopeCategory::SocialAspects: return "SocialAspects";
    case ScopeCategory::PsychologicalAspects: return "PsychologicalAspects";
    case ScopeCategory::Misc: return "Misc";
  }
  return "";
}

inline std::optional<ScopeCategory> scope_category(std::string_view s) {
  std::string k;
  for (char c : s)
    if (std::isalpha(static_cast<unsigned char>(c))) k.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  if (k == "actor" || k == "actors") return ScopeCategory::Actors;
  if (k == "physicalenvironment" || k == "physicalenvironments") return ScopeCategory::PhysicalEnvironment;
  if (k == "socialaspect" || k == "socialaspects") return ScopeCategory::SocialAspects;
  if (k == "psychologicalaspect" || k == "psychologicalaspects") return ScopeCategory::PsychologicalAspects;
  if (k == "misc" || k == "miscellaneous") return ScopeCategory::Misc;
  return std::nullopt;
}

struct ScopeRow {
  ScopeCategory category;
  std::string sub_category;
  std::string explanation;
  std::string justification;
};

namespace detail {

inline std::string name_key(std::string_view s) { return diagram::detail::name_key(s); }

/// Value of a grouped first column: empty cells repeat the cell above.
inline std::vector<std::string> filled_column(const PlainTable& t, std::size_t col) {
  std::vector<std::string> out;
  std::string last;
  for (const auto& r : t.rows) {
    if (!text::trim_view(r[col]).empty()) last = text::trim(r[col]);
    out.push_back(last);
  }
  return out;
}

}  // namespace detail

/// Typed rows of a scope table; rows with unknown categories are skipped.
inline std::vector<ScopeRow> scope_rows(const PlainTable& t) {
  std::vector<ScopeRow> out;
  auto cat = t.column("category");
  if (!cat) return out;
  auto sub = t.column("sub");
  auto expl = t.column("explanation");
  auto just = t.column("justification");
  auto cats = detail::filled_column(t, *cat);
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    auto c = scope_category(cats[i]);
    if (!c) continue;
    out.push_back({*c, sub ? t.rows[i][*sub] : "", expl ? t.rows[i][*expl] : "", just ? t.rows[i][*just] : ""});
  }
  return out;
}

/// Scope-table schema: 15 rows, every UML actor among the Actor rows, at
/// least two rows for each non-actor category, no sub-category filed under
/// two categories.
inline std::vector<Finding> check_scope_table(const PlainTable& t, const std::vector<std::string>& actors = {}) {
  std::vector<Finding> out;
  auto add = [&](std::string rule, std::string msg, std::string subject = {}) {
    out.push_back({Criterion::Conformity, std::move(rule), std::move(msg), Severity::Error, std::move(subject)});
  };
  auto cat = t.column("category");
  if (!cat) {
    add("scope-columns", "scope table has no Category column");
    return out;
  }
  auto sub = t.column("sub");
  if (t.rows.size() != 15) add("scope-row-count", fmt::format("scope table has {} rows, expected 15", t.rows.size()));
  auto cats = detail::filled_column(t, *cat);
  std::map<ScopeCategory, std::size_t> counts;
  std::map<std::string, std::set<ScopeCategory>> sub_cats;
  std::vector<std::string> actor_rows;
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    auto c = scope_category(cats[i]);
    if (!c) {
      add("scope-category", fmt::format("row {} has unknown category '{}'", i + 1, cats[i]), cats[i]);
      continue;
    }
    ++counts[*c];
    std::string s = sub ? t.rows[i][*sub] : "";
    if (!s.empty()) sub_cats[detail::name_key(s)].insert(*c);
    if (*c == ScopeCategory::Actors) actor_rows.push_back(detail::name_key(s));
  }
  for (const auto& a : actors) {
    auto k = detail::name_key(a);
    bool found = std::any_of(actor_rows.begin(), actor_rows.end(), [&](const std::string& r) {
      return r == k || (!k.empty() && r.find(k) != std::string::npos) || (!r.empty() && k.find(r) != std::string::npos);
    });
    if (!found) add("scope-actor", fmt::format("UML actor '{}' has no Actor row", a), a);
  }
  for (auto c : {ScopeCategory::PhysicalEnvironment, ScopeCategory::SocialAspects, ScopeCategory::PsychologicalAspects,
                 ScopeCategory::Misc}) {
    if (counts[c] < 2)
      add("scope-category-min", fmt::format("{} has {} rows, at least 2 required", to_string(c), counts[c]),
          std::string(to_string(c)));
  }
  for (const auto& [s, set] : sub_cats)
    if (set.size() > 1) add("scope-duplicate", fmt::format("sub-category '{}' appears under {} categories", s, set.size()), s);
  return out;
}

// ---------------------------------------------------------------------------
// Experimental factors

enum class Scale { Nominal, Ordinal, Ratio };

inline std::string_view to_string(Scale s) {
  switch (s) {
    case Scale::Nominal: return "Nominal";
    case Scale::Ordinal: return "Ordinal";
    case Scale::Ratio: return "Ratio";
  }
  return "";
}

struct ExperimentalFactor {
  std::string name;
  std::optional<Scale> scale;  // nullopt: ambiguous or absent
  std::string value_range;
  bool operator==(const ExperimentalFactor&) const = default;
};

/// Scale named in `s`; nullopt when none or more than one scale is named.
inline std::optional<Scale> scale_in(std::string_view s) {
  auto l = text::to_lower(s);
  std::vector<Scale> found;
  if (l.find("nominal") != std::string::npos) found.push_back(Scale::Nominal);
  if (l.find("ordinal") != std::string::npos) found.push_back(Scale::Ordinal);
  if (l.find("ratio") != std::string::npos && l.find("ration") == std::string::npos) found.push_back(Scale::Ratio);
  if (found.size() != 1) return std::nullopt;
  return found.front();
}

/// Numbered factor items ("1. Name (Nominal Scale): ... Value Range: ...").
/// The scale comes from the parenthetical, else from the item text.
inline std::vector<ExperimentalFactor> parse_factors(std::string_view src) {
  static const std::regex item(R"re((?:^|\s)(\d+)[.)]\s+)re");
  std::string s(src);
  std::vector<std::pair<std::size_t, std::size_t>> starts;  // (match pos, body pos)
  int expect = 1;
  for (auto it = std::sregex_iterator(s.begin(), s.end(), item); it != std::sregex_iterator(); ++it) {
    if (std::stoi((*it)[1].str()) != expect) continue;
    starts.emplace_back(static_cast<std::size_t>(it->position(0)),
                        static_cast<std::size_t>(it->position(0) + it->length(0)));
    ++expect;
  }
  std::vector<ExperimentalFactor> out;
  for (std::size_t k = 0; k < starts.size(); ++k) {
    std::size_t end = k + 1 < starts.size() ? starts[k + 1].first : s.size();
    std::string body = text::trim(std::string_view(s).substr(starts[k].second, end - starts[k].second));
    body = text::replace_all(body, "**", "");
    ExperimentalFactor f;
    auto paren = body.find('(');
    auto colon = body.find(':');
    std::size_t name_end = std::min(paren, colon);
    f.name = text::trim(std::string_view(body).substr(0, name_end == std::string::npos ? body.size() : name_end));
    if (paren != std::string::npos && paren < colon) {
      auto close = body.find(')', paren);
      f.scale = scale_in(std::string_view(body).substr(paren, close == std::string::npos ? std::string::npos : close - paren));
    }
    auto vr = text::to_lower(body).find("value range");
    if (vr != std::string::npos) {
      auto c = body.find(':', vr);
      std::string v = c == std::string::npos ? "" : body.substr(c + 1);
      v = text::replace_all(v, "*", "");
      f.value_range = text::trim(v);
      if (!f.value_range.empty() && f.value_range.back() == '.') f.value_range.pop_back();
    }
    if (!f.scale) f.scale = scale_in(body);
    out.push_back(std::move(f));
  }
  return out;
}

/// Exactly three factors using Nominal, Ordinal and Ratio once each. A wrong
/// count is one finding; a wrong mix of scales among three is another.
inline std::vector<Finding> check_factor_scales(const std::vector<ExperimentalFactor>& factors,
                                                const std::string& subject = "experimental factors") {
  std::vector<Finding> out;
  for (const auto& f : factors)
    if (!f.scale)
      out.push_back({Criterion::Conformity, "scale-ambiguous",
                     fmt::format("scale of '{}' is missing or ambiguous", f.name), Severity::Error, f.name});
  if (factors.size() != 3) {
    out.push_back({Criterion::Conformity, "factor-count",
                   fmt::format("{}: {} entries, expected 3", subject, factors.size()), Severity::Error, subject});
    return out;
  }
  std::map<Scale, int> n;
  for (const auto& f : factors)
    if (f.scale) ++n[*f.scale];
  std::vector<std::string> missing, dup;
  for (auto sc : {Scale::Nominal, Scale::Ordinal, Scale::Ratio}) {
    if (n[sc] == 0) missing.emplace_back(to_string(sc));
    if (n[sc] > 1) dup.emplace_back(to_string(sc));
  }
  if (!missing.empty() || !dup.empty()) {
    std::vector<std::string> parts;
    if (!missing.empty()) parts.push_back("missing " + text::join(missing, ", "));
    if (!dup.empty()) parts.push_back("duplicate " + text::join(dup, ", "));
    out.push_back({Criterion::Conformity, "scale-mix", fmt::format("{}: {}", subject, text::join(parts, "; ")),
                   Severity::Error, subject});
  }
  return out;
}

/// Categorisation schemata: one table per UML actor (or one table grouped by
/// its Actor Category column), each with three characteristic rows that use
/// the three scales once each.
inline std::vector<Finding> check_categorisation(const std::vector<PlainTable>& tables, std::size_t expected_tables) {
  std::vector<Finding> out;
  std::vector<std::pair<std::string, std::vector<ExperimentalFactor>>> groups;
  for (const auto& t : tables) {
    auto scale = t.column("scale");
    auto chr = t.column("characteristic");
    auto cat = t.column("actor category");
    auto range = t.column("value range");
    if (!scale) {
      out.push_back({Criterion::Conformity, "schema-columns", "categorisation table has no Scale column",
                     Severity::Error, {}});
      continue;
    }
    std::vector<std::string> cats = cat ? detail::filled_column(t, *cat) : std::vector<std::string>(t.rows.size());
    for (std::size_t i = 0; i < t.rows.size(); ++i) {
      std::string g = cat ? cats[i] : fmt::format("table {}", &t - tables.data() + 1);
      if (groups.empty() || groups.back().first != g) groups.push_back({g, {}});
      groups.back().second.push_back(ExperimentalFactor{chr ? t.rows[i][*chr] : "", scale_in(t.rows[i][*scale]),
                                                        range ? t.rows[i][*range] : ""});
    }
  }
  if (expected_tables && groups.size() != expected_tables)
    out.push_back({Criterion::Conformity, "schema-count",
                   fmt::format("{} categorisation schemata, expected {}", groups.size(), expected_tables),
                   Severity::Error, {}});
  for (const auto& [name, factors] : groups)
    for (auto& f : check_factor_scales(factors, name)) out.push_back(std::move(f));
  return out;
}

/// Column presence for the state tables, and transition types drawn from
/// {timeout, condition, rate}.
inline std::vector<Finding> check_state_tables(const std::optional<PlainTable>& variables,
                                               const std::optional<PlainTable>& transitions) {
  std::vector<Finding> out;
  auto need = [&](const PlainTable& t, const char* table, std::initializer_list<const char*> cols) {
    for (const char* c : cols)
      if (!t.column(c))
        out.push_back({Criterion::Conformity, "state-table-columns", fmt::format("{} lacks a '{}' column", table, c),
                       Severity::Error, table});
  };
  if (variables) need(*variables, "state variables table", {"state machine", "variable", "unit", "definition"});
  if (transitions) {
    need(*transitions, "state transitions table", {"actor", "start state", "end state", "type", "detail"});
    if (auto type = transitions->column("type")) {
      for (const auto& r : transitions->rows) {
        auto v = text::to_lower(text::trim(r[*type]));
        if (v != "timeout" && v != "condition" && v != "rate")
          out.push_back({Criterion::Conformity, "transition-type",
                         fmt::format("transition type '{}' is not timeout, condition or rate", r[*type]),
                         Severity::Error, r[*type]});
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Report document

inline constexpr std::string_view kSteps[] = {"Problem Statement", "Study Outline",          "Model Scope",
                                              "Key Activities",    "Archetypes",             "Agent & Object Templates",
                                              "Interactions",      "Artificial Lab"};

struct DiagramEntry {
  DiagramKind kind = DiagramKind::UseCase;
  std::string source;
  /// Canonical text when valid, otherwise the source as received.
  std::string text;
  bool valid = false;
  std::vector<diagram::Diagnostic> diagnostics;
  diagram::RepairReport repair;
  bool operator==(const DiagramEntry&) const = default;
};

struct SectionItem {
  std::string key;
  std::string title;
  std::string kind;  // prose | table | diagram
  std::string text;
  std::vector<PlainTable> tables;
  std::vector<DiagramEntry> diagrams;
  int version = 0;
  bool unlabeled = false;
  bool operator==(const SectionItem&) const = default;
};

struct Section {
  std::string step;
  std::vector<SectionItem> items;
  bool empty() const {
    return std::all_of(items.begin(), items.end(), [](const SectionItem& i) {
      return text::trim_view(i.text).empty() && i.tables.empty() && i.diagrams.empty();
    });
  }
  bool operator==(const Section&) const = default;
};

struct RubricEntry {
  std::vector<Finding> findings;
  std::optional<int> rating;  // 1-5, set by a human
  std::string notes;
  bool operator==(const RubricEntry&) const = default;
};

struct RubricSheet {
  std::map<Criterion, RubricEntry> entries;

  RubricSheet() {
    for (auto c : kCriteria) entries[c];
  }
  RubricEntry& at(Criterion c) { return entries.at(c); }
  const RubricEntry& at(Criterion c) const { return entries.at(c); }
  /// Believability and Originality take human ratings only.
  void add(const Finding& f) {
    if (f.criterion == Criterion::Believability || f.criterion == Criterion::Originality)
      throw Error(ErrorCode::InvalidAction, fmt::format("{} has no automated findings", to_string(f.criterion)));
    entries.at(f.criterion).findings.push_back(f);
  }
  void rate(Criterion c, int rating, std::string notes = {}) {
    if (rating < 1 || rating > 5) throw Error(ErrorCode::InvalidParams, "rating must be 1-5");
    entries.at(c).rating = rating;
    if (!notes.empty()) entries.at(c).notes = std::move(notes);
  }
  bool operator==(const RubricSheet&) const = default;
};

struct ReportDocument {
  std::string title;
  std::vector<Section> sections;  // the eight steps in order
  std::string conclusion;
  RubricSheet rubric;
  bool operator==(const ReportDocument&) const = default;

  const Section* section(std::string_view step) const {
    for (const auto& s : sections)
      if (s.step == step) return &s;
    return nullptr;
  }
  const SectionItem* item(std::string_view key) const {
    for (const auto& s : sections)
      for (const auto& i : s.items)
        if (i.key == key) return &i;
    return nullptr;
  }
  std::vector<Finding> findings(Criterion c) const { return rubric.at(c).findings; }
};

// ---------------------------------------------------------------------------
// Word limits

struct WordLimit {
  std::string key;
  std::size_t limit;
  bool count_items;  // count list items rather than words
};

inline const std::vector<WordLimit>& word_limits() {
  static const std::vector<WordLimit> v = {{"key-title", 12, false},     {"key-aim", 40, false},
                                           {"key-context", 200, false},  {"key-conclusion", 300, false},
                                           {"key-keywords", 5, true},    {"key-stakeholders", 5, true}};
  return v;
}

inline constexpr double kWordTolerance = 1.2;

/// Items of a comma-separated or line-per-item list.
inline std::size_t list_item_count(std::string_view s) {
  auto lines = text::split_lines(s);
  std::size_t bullets = 0;
  for (const auto& l : lines)
    if (session::detail::is_list_line(l)) ++bullets;
  if (bullets > 0) return bullets;
  std::size_t n = 0;
  for (auto& part : text::split_lines(text::replace_all(std::string(s), ",", "\n")))
    if (!text::trim_view(part).empty()) ++n;
  return n;
}

/// Soft limits: a Readability warning when a value exceeds limit x 1.2.
inline std::vector<Finding> check_word_limit(const std::string& key, std::string_view value) {
  std::vector<Finding> out;
  for (const auto& wl : word_limits()) {
    if (wl.key != key) continue;
    std::size_t n = wl.count_items ? list_item_count(value) : text::word_count(value);
    if (static_cast<double>(n) > static_cast<double>(wl.limit) * kWordTolerance)
      out.push_back({Criterion::Readability, "word-limit",
                     fmt::format("{} has {} {}, limit {} (tolerance {} )", key, n, wl.count_items ? "items" : "words",
                                 wl.limit, static_cast<double>(wl.limit) * kWordTolerance),
                     Severity::Warning, key});
  }
  return out;
}

inline std::vector<Finding> check_word_limits(const ReportDocument& r) {
  std::vector<Finding> out;
  for (const auto& wl : word_limits()) {
    std::string value;
    if (wl.key == "key-conclusion") value = r.conclusion;
    else if (const auto* it = r.item(wl.key)) value = it->text;
    else continue;
    for (auto& f : check_word_limit(wl.key, value)) out.push_back(std::move(f));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Assembly

struct AssembleOptions {
  bool allow_partial = false;
};

namespace detail {

inline std::string key_title(const std::string& key) {
  std::string ident = key.substr(4);
  bool diagram = ident.rfind("mermaid", 0) == 0;
  if (diagram) ident = ident.substr(7);
  if (ident.size() > 6 && ident.compare(ident.size() - 6, 6, "Script") == 0) ident.resize(ident.size() - 6);
  std::string out;
  for (std::size_t i = 0; i < ident.size(); ++i) {
    char c = ident[i];
    if (i > 0 && std::isupper(static_cast<unsigned char>(c)) && !std::isupper(static_cast<unsigned char>(ident[i - 1])))
      out.push_back(' ');
    out.push_back(i == 0 ? static_cast<char>(std::toupper(static_cast<unsigned char>(c))) : c);
  }
  out = text::replace_all(out, "Uml", "UML");
  if (diagram && out.find("Diagram") == std::string::npos) out += " Diagram";
  return out;
}

inline std::optional<DiagramKind> diagram_kind_of(const std::string& key) {
  if (key.find("mermaid") == std::string::npos) return std::nullopt;
  if (key.find("Class") != std::string::npos) return DiagramKind::ClassModel;
  if (key.find("StateMachine") != std::string::npos) return DiagramKind::StateMachine;
  if (key.find("Sequence") != std::string::npos) return DiagramKind::Sequence;
  return DiagramKind::UseCase;
}

inline bool is_table_key(const std::string& key) {
  return key == "key-modelScope" || key == "key-umlUseCaseTable" || key == "key-categorisationSchemata" ||
         key == "key-implementationModels" || key.find("Table") != std::string::npos;
}

inline std::optional<std::string> step_of(const std::string& segment, const std::string& heading) {
  for (auto s : kSteps)
    if (text::to_lower(text::trim(heading)) == text::to_lower(s)) return std::string(s);
  if (text::to_lower(segment) == "conclusion") return std::string("Conclusion");
  return std::nullopt;
}

inline DiagramEntry build_diagram(DiagramKind kind, const std::string& src, const diagram::ValidateOptions& opt) {
  DiagramEntry e;
  e.kind = kind;
  e.source = src;
  e.text = src;
  try {
    auto parsed = diagram::parse_diagram(kind, src);
    auto res = diagram::repair(parsed, opt);
    e.repair = res.report;
    e.diagnostics = res.remaining;
    if (res.resolved()) {
      e.text = diagram::emit(res.script, opt);
      e.valid = true;
    }
  } catch (const Error& err) {
    e.diagnostics.push_back({"missing-header", std::string::npos, err.detail(), Severity::Error, false, {}});
  }
  return e;
}

}  // namespace detail

/// Names of the memorised UML actors: the label of each list item.
inline std::vector<std::string> actor_names(std::string_view value) {
  std::vector<std::string> out;
  for (const auto& l : text::split_lines(value)) {
    if (!session::detail::is_list_line(l)) continue;
    std::string t = text::trim(l);
    std::size_t i = 0;
    while (i < t.size() && (std::isdigit(static_cast<unsigned char>(t[i])) || t[i] == '.' || t[i] == ')' ||
                            t[i] == '-' || t[i] == '*' || t[i] == ' '))
      ++i;
    t = text::replace_all(t.substr(i), "**", "");
    auto cut = t.find_first_of(":(");
    auto dash = t.find(" - ");
    cut = std::min(cut, dash);
    std::string name = text::trim(std::string_view(t).substr(0, cut));
    if (!name.empty()) out.push_back(name);
  }
  return out;
}

/// Builds the report from a session: each step collects the keys memorised
/// by chains under its heading (drafts dropped when a final version exists);
/// tables are parsed, diagrams repaired and validated, and the rubric's
/// automated findings filled in. Throws MissingSection for an incomplete
/// session unless allow_partial.
inline ReportDocument assemble_report(const session::SessionState& s, const AssembleOptions& opt = {}) {
  ReportDocument r;
  for (auto step : kSteps) r.sections.push_back(Section{std::string(step), {}});
  auto section = [&](const std::string& step) -> Section* {
    for (auto& x : r.sections)
      if (x.step == step) return &x;
    return nullptr;
  };

  std::vector<std::string> actors;
  if (const auto* rec = s.keys.find("key-umlActors")) actors = actor_names(rec->value);
  diagram::ValidateOptions vopt{actors};

  // Keys in script order, grouped by step.
  std::vector<std::pair<std::string, std::string>> step_keys;
  std::set<std::string> seen;
  s.script.for_each_chain([&](script::ChainAddress a, const script::PromptChain& chain) {
    const auto& seg = s.script.segments[a.segment];
    auto step = detail::step_of(seg.name, seg.subsection_of(a.chain).heading);
    if (!step) return;
    for (const auto* d : chain.directives()) {
      std::optional<script::KeyRef> k;
      if (auto m = d->as<script::Memorise>()) k = m->key;
      else if (d->updates) k = d->updates;
      if (k && seen.insert(k->name).second) step_keys.emplace_back(*step, k->name);
    }
  });

  std::vector<Finding> conformity;
  std::optional<PlainTable> variables, transitions;
  for (const auto& [step, key] : step_keys) {
    const auto* rec = s.keys.find(key);
    if (!rec) continue;
    if (key.size() > 5 && key.compare(key.size() - 5, 5, "Draft") == 0 && s.keys.contains(key.substr(0, key.size() - 5)))
      continue;
    if (step == "Conclusion") {
      r.conclusion = rec->value;
      continue;
    }
    SectionItem item;
    item.key = key;
    item.title = detail::key_title(key);
    item.text = rec->value;
    item.version = rec->version;
    item.unlabeled = rec->unlabeled;
    item.kind = "prose";
    if (auto kind = detail::diagram_kind_of(key)) {
      item.kind = "diagram";
      auto found = diagram::extract_diagrams(*kind, rec->value);
      if (found.empty())
        conformity.push_back({Criterion::Conformity, "no-diagram", fmt::format("{} holds no diagram", key),
                              Severity::Error, key});
      for (const auto& src : found) item.diagrams.push_back(detail::build_diagram(*kind, src, vopt));
      for (const auto& d : item.diagrams)
        if (!d.valid)
          conformity.push_back({Criterion::Conformity, "diagram-errors",
                                fmt::format("a {} diagram in {} has unresolved errors", to_string(d.kind), key),
                                Severity::Error, key});
      if (*kind == DiagramKind::StateMachine && !actors.empty() && found.size() < actors.size())
        conformity.push_back({Criterion::Conformity, "state-machine-count",
                              fmt::format("{} state machine diagrams for {} UML actors", found.size(), actors.size()),
                              Severity::Error, key});
    } else if (detail::is_table_key(key)) {
      item.kind = "table";
      try {
        item.tables = parse_plain_tables(rec->value);
      } catch (const Error& e) {
        conformity.push_back({Criterion::Conformity, "table-parse", fmt::format("{}: {}", key, e.what()),
                              Severity::Error, key});
      }
      if (item.tables.empty())
        conformity.push_back({Criterion::Conformity, "table-missing", fmt::format("{} holds no table", key),
                              Severity::Error, key});
      if (key == "key-modelScope" && !item.tables.empty())
        for (auto& f : check_scope_table(item.tables.front(), actors)) conformity.push_back(std::move(f));
      if (key == "key-categorisationSchemata" && !item.tables.empty())
        for (auto& f : check_categorisation(item.tables, actors.size())) conformity.push_back(std::move(f));
      if (key == "key-stateVariablesTable" && !item.tables.empty()) variables = item.tables.front();
      if (key == "key-stateTransitionsTable" && !item.tables.empty()) transitions = item.tables.front();
    }
    if (key == "key-experimentalFactors")
      for (auto& f : check_factor_scales(parse_factors(rec->value))) conformity.push_back(std::move(f));
    section(step)->items.push_back(std::move(item));
  }
  for (auto& f : check_state_tables(variables, transitions)) conformity.push_back(std::move(f));

  // The artificial lab is the ArtificialLab class of the final class diagram.
  if (const auto* cls = r.item("key-mermaidClassDiagramScript") ? r.item("key-mermaidClassDiagramScript")
                                                                : r.item("key-mermaidClassDiagramScriptDraft")) {
    for (const auto& d : cls->diagrams) {
      if (!d.valid) continue;
      auto parsed = diagram::parse_diagram(DiagramKind::ClassModel, d.text);
      std::vector<std::string> attrs, ops;
      for (const auto& m : parsed.members)
        if (m.cls == "ArtificialLab") (m.operation ? ops : attrs).push_back(m.text);
      if (!parsed.node("ArtificialLab")) continue;
      bool stats = std::any_of(ops.begin(), ops.end(), [](const std::string& o) { return text::contains_icase(o, "statistic"); });
      if (!stats) {
        conformity.push_back({Criterion::Conformity, "lab-statistics",
                              "ArtificialLab has no summary-statistics operations", Severity::Error, "ArtificialLab"});
        continue;
      }
      SectionItem item;
      item.key = "ArtificialLab";
      item.title = "ArtificialLab";
      item.kind = "prose";
      std::string body = "Attributes:\n";
      for (const auto& a : attrs) body += "- " + a + "\n";
      body += "Operations:\n";
      for (const auto& o : ops) body += "- " + o + "\n";
      item.text = body;
      section("Artificial Lab")->items.push_back(std::move(item));
      break;
    }
  }

  std::vector<std::string> missing;
  for (const auto& sec : r.sections) {
    if (sec.empty()) {
      missing.push_back(sec.step);
      conformity.insert(conformity.begin() + static_cast<long>(missing.size() - 1),
                        Finding{Criterion::Conformity, "missing-step", fmt::format("step '{}' has no content", sec.step),
                                Severity::Error, sec.step});
    }
  }
  if (text::trim_view(r.conclusion).empty()) {
    missing.push_back("Conclusion");
    conformity.push_back({Criterion::Conformity, "missing-step", "conclusion is empty", Severity::Error, "Conclusion"});
  }
  if (!opt.allow_partial && (!missing.empty() || s.status != session::Status::Complete))
    throw Error(ErrorCode::MissingSection,
                missing.empty() ? fmt::format("session is {}", session::to_string(s.status))
                                : fmt::format("missing: {}", text::join(missing, ", ")));

  if (const auto* t = s.keys.find("key-title")) r.title = diagram::detail::strip_quotes(t->value);
  if (r.title.empty()) r.title = "Conceptual model report";

  for (auto& f : conformity) r.rubric.add(f);
  for (auto& f : check_word_limits(r)) r.rubric.add(f);
  for (const auto& [name, rec] : s.keys.records())
    if (rec.unlabeled)
      r.rubric.add({Criterion::Pertinency, "unlabeled-key",
                    fmt::format("{} was stored from an unlabeled reply; review its content", name), Severity::Warning,
                    name});
  std::size_t failures = 0, interventions = 0, skipped = 0;
  for (const auto& e : s.log) {
    if (e.type == "status_change" && e.data.value("to", "") == "Failed") ++failures;
    if (e.type == "intervention") ++interventions;
    if (e.type == "chain_skipped") ++skipped;
  }
  if (failures)
    r.rubric.add({Criterion::Usability, "session-failures", fmt::format("session failed {} time(s)", failures),
                  Severity::Warning, {}});
  r.rubric.at(Criterion::Usability).notes = fmt::format("{} exchanges, {} interventions, {} chains skipped",
                                                        s.exchanges.size(), interventions, skipped);
  return r;
}

// ---------------------------------------------------------------------------
// Export

namespace detail {

inline json to_json(const diagram::Diagnostic& d) { return diagram::to_json(d); }

inline diagram::Diagnostic diagnostic_from_json(const json& j) {
  diagram::Diagnostic d;
  d.rule = j.at("rule").get<std::string>();
  d.line = j.at("line").is_null() ? std::string::npos : j.at("line").get<std::size_t>();
  d.message = j.at("message").get<std::string>();
  d.severity = j.at("severity").get<std::string>() == "warning" ? Severity::Warning : Severity::Error;
  d.auto_fixable = j.at("auto_fixable").get<bool>();
  d.subject = j.value("subject", "");
  return d;
}

inline json table_json(const PlainTable& t) { return json{{"header", t.header}, {"rows", t.rows}, {"prose", t.prose}}; }
inline PlainTable table_from_json(const json& j) {
  return PlainTable{j.at("header").get<std::vector<std::string>>(),
                    j.at("rows").get<std::vector<std::vector<std::string>>>(),
                    j.value("prose", std::vector<std::string>{})};
}

inline diagram::RepairEdit::Op op_from_string(const std::string& s) {
  if (s == "remove") return diagram::RepairEdit::Op::Remove;
  if (s == "insert") return diagram::RepairEdit::Op::Insert;
  return diagram::RepairEdit::Op::Replace;
}

}  // namespace detail

inline constexpr int kReportSchemaVersion = 1;

inline json to_json(const ReportDocument& r) {
  json sections = json::array();
  for (const auto& s : r.sections) {
    json items = json::array();
    for (const auto& i : s.items) {
      json tables = json::array(), diagrams = json::array();
      for (const auto& t : i.tables) tables.push_back(detail::table_json(t));
      for (const auto& d : i.diagrams) {
        json diags = json::array();
        for (const auto& x : d.diagnostics) diags.push_back(detail::to_json(x));
        diagrams.push_back({{"kind", std::string(to_string(d.kind))},
                            {"source", d.source},
                            {"text", d.text},
                            {"valid", d.valid},
                            {"diagnostics", diags},
                            {"repair", diagram::to_json(d.repair)}});
      }
      items.push_back({{"key", i.key},
                       {"title", i.title},
                       {"kind", i.kind},
                       {"text", i.text},
                       {"tables", tables},
                       {"diagrams", diagrams},
                       {"version", i.version},
                       {"unlabeled", i.unlabeled}});
    }
    sections.push_back({{"step", s.step}, {"items", items}});
  }
  json rubric = json::object();
  for (const auto& [c, e] : r.rubric.entries) {
    json findings = json::array();
    for (const auto& f : e.findings) findings.push_back(to_json(f));
    rubric[std::string(to_string(c))] = {
        {"findings", findings}, {"rating", e.rating ? json(*e.rating) : json(nullptr)}, {"notes", e.notes}};
  }
  return json{{"schema_version", kReportSchemaVersion},
              {"title", r.title},
              {"sections", sections},
              {"conclusion", r.conclusion},
              {"rubric", rubric}};
}

inline ReportDocument report_from_json(const json& j) {
  try {
    if (j.at("schema_version").get<int>() != kReportSchemaVersion)
      throw Error(ErrorCode::IOFailure, "unsupported report schema version");
    ReportDocument r;
    r.title = j.at("title").get<std::string>();
    r.conclusion = j.at("conclusion").get<std::string>();
    for (const auto& sj : j.at("sections")) {
      Section s{sj.at("step").get<std::string>(), {}};
      for (const auto& ij : sj.at("items")) {
        SectionItem i;
        i.key = ij.at("key").get<std::string>();
        i.title = ij.at("title").get<std::string>();
        i.kind = ij.at("kind").get<std::string>();
        i.text = ij.at("text").get<std::string>();
        i.version = ij.at("version").get<int>();
        i.unlabeled = ij.at("unlabeled").get<bool>();
        for (const auto& t : ij.at("tables")) i.tables.push_back(detail::table_from_json(t));
        for (const auto& dj : ij.at("diagrams")) {
          DiagramEntry d;
          d.kind = diagram::kind_from_string(dj.at("kind").get<std::string>());
          d.source = dj.at("source").get<std::string>();
          d.text = dj.at("text").get<std::string>();
          d.valid = dj.at("valid").get<bool>();
          for (const auto& x : dj.at("diagnostics")) d.diagnostics.push_back(detail::diagnostic_from_json(x));
          for (const auto& e : dj.at("repair"))
            d.repair.applied.push_back({e.at("rule").get<std::string>(), detail::op_from_string(e.at("op").get<std::string>()),
                                        e.at("line").get<std::size_t>(), e.at("before").get<std::string>(),
                                        e.at("after").get<std::string>()});
          i.diagrams.push_back(std::move(d));
        }
        s.items.push_back(std::move(i));
      }
      r.sections.push_back(std::move(s));
    }
    for (auto& [name, ej] : j.at("rubric").items()) {
      auto c = criterion_from_string(name);
      auto& e = r.rubric.entries[c];
      for (const auto& f : ej.at("findings")) e.findings.push_back(finding_from_json(f));
      if (!ej.at("rating").is_null()) e.rating = ej.at("rating").get<int>();
      e.notes = ej.value("notes", "");
    }
    return r;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::IOFailure, fmt::format("malformed report: {}", e.what()));
  }
}

inline std::string to_markdown(const ReportDocument& r) {
  std::string out = fmt::format("# {}\n\n", r.title);
  std::vector<std::pair<std::string, const DiagramEntry*>> failed;
  int n = 0;
  for (const auto& s : r.sections) {
    out += fmt::format("## {}. {}\n\n", ++n, s.step);
    if (s.empty()) out += "_No content._\n\n";
    for (const auto& i : s.items) {
      out += fmt::format("### {}\n\n", i.title);
      if (i.kind == "diagram") {
        for (const auto& d : i.diagrams) {
          if (d.valid) out += "```mermaid\n" + d.text + (d.text.empty() || d.text.back() != '\n' ? "\n" : "") + "```\n\n";
          else {
            out += "```text\n" + d.source + "\n```\n\n";
            out += fmt::format("_Diagram has unresolved errors; see the diagnostics appendix ({})._\n\n", failed.size() + 1);
            failed.emplace_back(i.title, &d);
          }
        }
      } else if (i.kind == "table" && !i.tables.empty()) {
        for (const auto& t : i.tables) {
          for (const auto& p : t.prose) out += p + "\n\n";
          out += to_markdown(t) + "\n";
        }
      } else {
        out += text::trim(i.text) + "\n\n";
      }
    }
  }
  out += "## Conclusion\n\n" + text::trim(r.conclusion) + "\n\n";
  out += "## Evaluation rubric\n\n| Criterion | Automated findings | Rating | Notes |\n| --- | --- | --- | --- |\n";
  for (const auto& [c, e] : r.rubric.entries) {
    std::vector<std::string> msgs;
    for (const auto& f : e.findings) msgs.push_back(text::replace_all(f.message, "|", "\\|"));
    bool manual = c == Criterion::Believability || c == Criterion::Originality;
    out += fmt::format("| {} | {} | {} | {} |\n", to_string(c),
                       manual ? "manual rating only" : (msgs.empty() ? "none" : text::join(msgs, "; ")),
                       e.rating ? std::to_string(*e.rating) : "", text::replace_all(e.notes, "|", "\\|"));
  }
  if (!failed.empty()) {
    out += "\n## Appendix: diagram diagnostics\n\n";
    for (std::size_t k = 0; k < failed.size(); ++k) {
      out += fmt::format("### ({}) {}\n\n", k + 1, failed[k].first);
      for (const auto& d : failed[k].second->diagnostics)
        out += fmt::format("- {} {} (line {}): {}\n", to_string(d.severity), d.rule,
                           d.line == std::string::npos ? std::string("-") : std::to_string(d.line + 1), d.message);
      out += "\n";
    }
  }
  return out;
}

enum class Format { Markdown, Json };

inline Format format_from_string(std::string_view s) {
  auto l = text::to_lower(s);
  if (l == "md" || l == "markdown") return Format::Markdown;
  if (l == "json") return Format::Json;
  throw Error(ErrorCode::UnknownFormat, fmt::format("unknown report format '{}'", s));
}

inline std::string render(const ReportDocument& r, Format f) {
  return f == Format::Markdown ? to_markdown(r) : to_json(r).dump(2) + "\n";
}

inline void export_report(const ReportDocument& r, std::string_view format, const std::string& path) {
  config::write_file(path, render(r, format_from_string(format)));
}

inline ReportDocument import_report(const std::string& path) {
  try {
    return report_from_json(json::parse(config::read_file(path)));
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::IOFailure, fmt::format("malformed report: {}", e.what()));
  }
}

}  // namespace eabss::report
