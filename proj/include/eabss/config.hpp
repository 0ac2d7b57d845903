#pragma once

#include <fstream>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "eabss/core.hpp"
#include "eabss/patterns.hpp"
#include "eabss/script.hpp"

namespace eabss::config {

using json = nlohmann::json;

namespace detail {

class TomlReader {
 public:
  explicit TomlReader(std::string_view src) : s_(src) {}

  json parse() {
    json root = json::object();
    json* table = &root;
    while (skip_ws_comments_newlines(), !eof()) {
      if (peek() == '[') {
        bool array = s_.substr(pos_, 2) == "[[";
        pos_ += array ? 2 : 1;
        auto path = parse_key_path(array ? "]]" : "]");
        json* node = &root;
        for (std::size_t i = 0; i + 1 < path.size(); ++i) node = &descend(*node, path[i]);
        const auto& last = path.back();
        if (array) {
          json& arr = (*node)[last];
          if (arr.is_null()) arr = json::array();
          if (!arr.is_array()) fail("'" + last + "' is not an array of tables");
          arr.push_back(json::object());
          table = &arr.back();
        } else {
          json& t = (*node)[last];
          if (t.is_null()) t = json::object();
          if (!t.is_object()) fail("'" + last + "' is not a table");
          table = &t;
        }
        expect_line_end();
        continue;
      }
      auto path = parse_key_path("=");
      json* node = table;
      for (std::size_t i = 0; i + 1 < path.size(); ++i) node = &descend(*node, path[i]);
      if (node->contains(path.back())) fail("duplicate key '" + path.back() + "'");
      (*node)[path.back()] = parse_value();
      expect_line_end();
    }
    return root;
  }

 private:
  bool eof() const { return pos_ >= s_.size(); }
  char peek() const { return eof() ? '\0' : s_[pos_]; }

  [[noreturn]] void fail(const std::string& msg) const {
    std::size_t line = 1 + static_cast<std::size_t>(std::count(s_.begin(), s_.begin() + static_cast<long>(std::min(pos_, s_.size())), '\n'));
    throw Error(ErrorCode::ConfigError, fmt::format("line {}: {}", line, msg));
  }

  void skip_inline_ws() {
    while (!eof() && (peek() == ' ' || peek() == '\t')) ++pos_;
  }
  void skip_comment() {
    if (peek() == '#')
      while (!eof() && peek() != '\n') ++pos_;
  }
  void skip_ws_comments_newlines() {
    for (;;) {
      skip_inline_ws();
      skip_comment();
      if (!eof() && (peek() == '\n' || peek() == '\r')) {
        ++pos_;
        continue;
      }
      return;
    }
  }
  void expect_line_end() {
    skip_inline_ws();
    skip_comment();
    if (peek() == '\r') ++pos_;
    if (!eof() && peek() != '\n') fail(fmt::format("unexpected '{}'", peek()));
  }

  static json& descend(json& node, const std::string& key) {
    json& child = node[key];
    if (child.is_null()) child = json::object();
    if (child.is_array() && !child.empty()) return child.back();
    return child;
  }

  std::vector<std::string> parse_key_path(std::string_view terminator) {
    std::vector<std::string> path;
    for (;;) {
      skip_inline_ws();
      if (peek() == '"' || peek() == '\'') path.push_back(parse_string());
      else {
        std::size_t start = pos_;
        while (!eof() && (std::isalnum(static_cast<unsigned char>(peek())) || peek() == '_' || peek() == '-')) ++pos_;
        if (start == pos_) fail("expected a key");
        path.emplace_back(s_.substr(start, pos_ - start));
      }
      skip_inline_ws();
      if (peek() == '.') {
        ++pos_;
        continue;
      }
      if (s_.substr(pos_, terminator.size()) != terminator) fail(fmt::format("expected '{}'", terminator));
      pos_ += terminator.size();
      return path;
    }
  }

  std::string parse_string() {
    char q = s_[pos_++];
    std::string out;
    while (!eof() && peek() != q) {
      char c = s_[pos_++];
      if (c == '\n') fail("newline in string");
      if (c == '\\' && q == '"') {
        if (eof()) break;
        char e = s_[pos_++];
        switch (e) {
          case 'n': out.push_back('\n'); break;
          case 't': out.push_back('\t'); break;
          case 'r': out.push_back('\r'); break;
          case '"': out.push_back('"'); break;
          case '\\': out.push_back('\\'); break;
          case 'u': {
            if (pos_ + 4 > s_.size()) fail("bad \\u escape");
            unsigned cp = static_cast<unsigned>(std::stoul(std::string(s_.substr(pos_, 4)), nullptr, 16));
            pos_ += 4;
            if (cp < 0x80) out.push_back(static_cast<char>(cp));
            else if (cp < 0x800) {
              out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
              out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
            } else {
              out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
              out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
              out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
            }
            break;
          }
          default: fail(fmt::format("unknown escape '\\{}'", e));
        }
        continue;
      }
      out.push_back(c);
    }
    if (eof()) fail("unterminated string");
    ++pos_;
    return out;
  }

  json parse_value() {
    skip_inline_ws();
    char c = peek();
    if (c == '"' || c == '\'') return parse_string();
    if (c == '[') {
      ++pos_;
      json arr = json::array();
      for (;;) {
        skip_ws_comments_newlines();
        if (peek() == ']') {
          ++pos_;
          return arr;
        }
        arr.push_back(parse_value());
        skip_ws_comments_newlines();
        if (peek() == ',') {
          ++pos_;
          continue;
        }
        if (peek() != ']') fail("expected ',' or ']'");
      }
    }
    std::size_t start = pos_;
    while (!eof() && !std::isspace(static_cast<unsigned char>(peek())) && peek() != ',' && peek() != ']' &&
           peek() != '#')
      ++pos_;
    std::string tok(s_.substr(start, pos_ - start));
    if (tok == "true") return true;
    if (tok == "false") return false;
    std::string clean;
    for (char ch : tok)
      if (ch != '_') clean.push_back(ch);
    try {
      std::size_t used = 0;
      if (clean.find_first_of(".eE") == std::string::npos) {
        long long v = std::stoll(clean, &used);
        if (used == clean.size()) return v;
      } else {
        double v = std::stod(clean, &used);
        if (used == clean.size()) return v;
      }
    } catch (const std::exception&) {
    }
    fail("invalid value '" + tok + "'");
  }

  std::string_view s_;
  std::size_t pos_ = 0;
};

inline std::string scalar_text(const json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_number_integer()) return std::to_string(v.get<long long>());
  if (v.is_number()) return text::format_param(v.get<double>());
  if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
  throw Error(ErrorCode::ConfigError, "expected a scalar value");
}

}  // namespace detail

/// Parses the TOML subset used for case and pattern files: tables, arrays
/// of tables, dotted keys, strings, integers, floats, booleans and
/// (multi-line) arrays. Returns the document as JSON.
inline json parse_toml(std::string_view src) { return detail::TomlReader(src).parse(); }

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IOFailure, fmt::format("cannot read '{}'", path));
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, std::string_view content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::IOFailure, fmt::format("cannot write '{}'", path));
  out << content;
  if (!out) throw Error(ErrorCode::IOFailure, fmt::format("write to '{}' failed", path));
}

/// Reads a case binding from a [case] table, or from top-level keys.
inline script::CaseBinding case_from_json(const json& doc) {
  const json& t = doc.contains("case") ? doc.at("case") : doc;
  auto get = [&](const char* name, bool required) -> std::string {
    if (!t.contains(name)) {
      if (required) throw Error(ErrorCode::ConfigError, fmt::format("case file lacks '{}'", name));
      return {};
    }
    return detail::scalar_text(t.at(name));
  };
  script::CaseBinding b;
  b.topic = get("topic", true);
  b.research_design = get("research_design", true);
  b.domain = get("domain", true);
  b.specialisation = get("specialisation", true);
  return b;
}

inline script::CaseBinding load_case(const std::string& path) {
  return case_from_json(parse_toml(read_file(path)));
}

/// One [[pattern]] table: `kind` selects the pattern, `optional` and
/// `intervene` list command numbers, array values become list slots and all
/// other values scalar slots.
inline patterns::PatternInstance pattern_from_json(const json& t) {
  if (!t.is_object() || !t.contains("kind")) throw Error(ErrorCode::ConfigError, "pattern table lacks 'kind'");
  patterns::PatternInstance inst;
  inst.kind = patterns::pattern_kind_from_string(t.at("kind").get<std::string>());
  for (auto& [name, value] : t.items()) {
    if (name == "kind" || name == "name") continue;
    if (name == "optional" || name == "intervene") {
      auto& target = name == "optional" ? inst.include_optional : inst.intervene_points;
      if (!value.is_array()) throw Error(ErrorCode::ConfigError, fmt::format("'{}' must be an array", name));
      for (auto& v : value) {
        if (!v.is_number_integer()) throw Error(ErrorCode::ConfigError, fmt::format("'{}' holds command numbers", name));
        target.insert(v.get<int>());
      }
      continue;
    }
    if (value.is_array()) {
      auto& list = inst.lists[name];
      for (auto& v : value) list.push_back(detail::scalar_text(v));
    } else {
      inst.slots[name] = detail::scalar_text(value);
    }
  }
  return inst;
}

struct NamedPattern {
  std::string name;
  patterns::PatternInstance instance;
};

inline std::vector<NamedPattern> patterns_from_json(const json& doc) {
  std::vector<NamedPattern> out;
  if (!doc.contains("pattern")) return out;
  const json& arr = doc.at("pattern");
  if (!arr.is_array()) throw Error(ErrorCode::ConfigError, "'pattern' must be an array of tables");
  for (std::size_t i = 0; i < arr.size(); ++i) {
    std::string name = arr[i].contains("name") ? detail::scalar_text(arr[i].at("name")) : fmt::format("pattern{}", i + 1);
    out.push_back({name, pattern_from_json(arr[i])});
  }
  return out;
}

inline std::vector<NamedPattern> load_patterns(const std::string& path) {
  return patterns_from_json(parse_toml(read_file(path)));
}

}  // namespace eabss::config
