#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <fmt/format.h>

namespace eabss {

/// Error categories shared by every module. Domain failures are thrown as
/// eabss::Error; diagnostics and findings are returned as data instead.
enum class ErrorCode {
  EmptyScript,
  UnterminatedBrace,
  MissingSlot,
  InvalidBinding,
  UnboundSlot,
  InvalidCount,
  EmptyTarget,
  InvalidParams,
  NetworkFailure,
  RateLimited,
  AuthFailure,
  TruncationUnresolved,
  ReplayMismatch,
  IOFailure,
  StaticCheckFailed,
  UnknownKey,
  InvalidInState,
  InvalidAction,
  MissingHeader,
  UnresolvedErrors,
  RaggedRow,
  NoTableFound,
  MissingSection,
  UnknownFormat,
  ConfigError,
  UsageError,
  SilentModeFailure,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::EmptyScript: return "EmptyScript";
    case ErrorCode::UnterminatedBrace: return "UnterminatedBrace";
    case ErrorCode::MissingSlot: return "MissingSlot";
    case ErrorCode::InvalidBinding: return "InvalidBinding";
    case ErrorCode::UnboundSlot: return "UnboundSlot";
    case ErrorCode::InvalidCount: return "InvalidCount";
    case ErrorCode::EmptyTarget: return "EmptyTarget";
    case ErrorCode::InvalidParams: return "InvalidParams";
    case ErrorCode::NetworkFailure: return "NetworkFailure";
    case ErrorCode::RateLimited: return "RateLimited";
    case ErrorCode::AuthFailure: return "AuthFailure";
    case ErrorCode::TruncationUnresolved: return "TruncationUnresolved";
    case ErrorCode::ReplayMismatch: return "ReplayMismatch";
    case ErrorCode::IOFailure: return "IOFailure";
    case ErrorCode::StaticCheckFailed: return "StaticCheckFailed";
    case ErrorCode::UnknownKey: return "UnknownKey";
    case ErrorCode::InvalidInState: return "InvalidInState";
    case ErrorCode::InvalidAction: return "InvalidAction";
    case ErrorCode::MissingHeader: return "MissingHeader";
    case ErrorCode::UnresolvedErrors: return "UnresolvedErrors";
    case ErrorCode::RaggedRow: return "RaggedRow";
    case ErrorCode::NoTableFound: return "NoTableFound";
    case ErrorCode::MissingSection: return "MissingSection";
    case ErrorCode::UnknownFormat: return "UnknownFormat";
    case ErrorCode::ConfigError: return "ConfigError";
    case ErrorCode::UsageError: return "UsageError";
    case ErrorCode::SilentModeFailure: return "SilentModeFailure";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(fmt::format("{}: {}", to_string(code), message)),
        code_(code),
        detail_(message) {}

  ErrorCode code() const noexcept { return code_; }
  const std::string& detail() const noexcept { return detail_; }

 private:
  ErrorCode code_;
  std::string detail_;
};

enum class Severity { Error, Warning };

inline std::string_view to_string(Severity s) {
  return s == Severity::Error ? "error" : "warning";
}

/// The four diagram kinds an EABSS script asks the model to produce.
enum class DiagramKind { UseCase, ClassModel, StateMachine, Sequence };

inline std::string_view to_string(DiagramKind k) {
  switch (k) {
    case DiagramKind::UseCase: return "usecase";
    case DiagramKind::ClassModel: return "class";
    case DiagramKind::StateMachine: return "state";
    case DiagramKind::Sequence: return "sequence";
  }
  return "usecase";
}

namespace text {

inline bool is_space(char c) {
  return std::isspace(static_cast<unsigned char>(c)) != 0;
}

inline std::string_view trim_view(std::string_view s) {
  while (!s.empty() && is_space(s.front())) s.remove_prefix(1);
  while (!s.empty() && is_space(s.back())) s.remove_suffix(1);
  return s;
}

inline std::string trim(std::string_view s) { return std::string(trim_view(s)); }

inline std::string to_lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

inline bool starts_with_icase(std::string_view s, std::string_view prefix) {
  if (s.size() < prefix.size()) return false;
  for (std::size_t i = 0; i < prefix.size(); ++i) {
    if (std::tolower(static_cast<unsigned char>(s[i])) !=
        std::tolower(static_cast<unsigned char>(prefix[i])))
      return false;
  }
  return true;
}

inline bool contains_icase(std::string_view hay, std::string_view needle) {
  return to_lower(hay).find(to_lower(needle)) != std::string::npos;
}

/// Whitespace-delimited word count; the unit used for every context budget.
inline std::size_t word_count(std::string_view s) {
  std::size_t n = 0;
  bool in_word = false;
  for (char c : s) {
    if (is_space(c)) {
      in_word = false;
    } else if (!in_word) {
      in_word = true;
      ++n;
    }
  }
  return n;
}

/// Collapses every whitespace run to one space and trims the ends.
inline std::string normalize_whitespace(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  bool pending = false;
  for (char c : s) {
    if (is_space(c)) {
      pending = !out.empty();
    } else {
      if (pending) out.push_back(' ');
      pending = false;
      out.push_back(c);
    }
  }
  return out;
}

inline std::vector<std::string> split_lines(std::string_view s) {
  std::vector<std::string> lines;
  std::size_t start = 0;
  while (start <= s.size()) {
    auto nl = s.find('\n', start);
    if (nl == std::string_view::npos) {
      lines.emplace_back(s.substr(start));
      break;
    }
    std::string_view line = s.substr(start, nl - start);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    lines.emplace_back(line);
    start = nl + 1;
  }
  return lines;
}

inline std::string join(const std::vector<std::string>& parts, std::string_view sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out.append(sep);
    out.append(parts[i]);
  }
  return out;
}

inline std::string replace_all(std::string s, std::string_view from, std::string_view to) {
  if (from.empty()) return s;
  std::size_t pos = 0;
  while ((pos = s.find(from, pos)) != std::string::npos) {
    s.replace(pos, from.size(), to);
    pos += to.size();
  }
  return s;
}

/// FNV-1a 64-bit, rendered as 16 lowercase hex digits. Used for fixture
/// integrity checks where a stable cross-platform hash is needed.
inline std::string fnv1a_hex(std::string_view s) {
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return fmt::format("{:016x}", h);
}

/// Formats a generation parameter so integral values keep one decimal ("1.0").
inline std::string format_param(double v) {
  std::string s = fmt::format("{}", v);
  if (s.find_first_of(".eE") == std::string::npos) s += ".0";
  return s;
}

}  // namespace text
}  // namespace eabss
