#pragma once

#include <map>
#include <optional>
#include <regex>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "eabss/config.hpp"
#include "eabss/context.hpp"
#include "eabss/core.hpp"
#include "eabss/gateway.hpp"
#include "eabss/patterns.hpp"
#include "eabss/script.hpp"

namespace eabss::session {

using json = nlohmann::json;
using script::KeyRef;

enum class Status { Running, AwaitingIntervention, AwaitingAck, Failed, Complete };

inline std::string_view to_string(Status s) {
  switch (s) {
    case Status::Running: return "Running";
    case Status::AwaitingIntervention: return "AwaitingIntervention";
    case Status::AwaitingAck: return "AwaitingAck";
    case Status::Failed: return "Failed";
    case Status::Complete: return "Complete";
  }
  return "Running";
}

inline Status status_from_string(std::string_view s) {
  for (auto st : {Status::Running, Status::AwaitingIntervention, Status::AwaitingAck, Status::Failed, Status::Complete})
    if (to_string(st) == s) return st;
  throw Error(ErrorCode::IOFailure, fmt::format("unknown status '{}'", s));
}

inline bool transition_allowed(Status from, Status to) {
  switch (from) {
    case Status::Running:
      return to == Status::AwaitingIntervention || to == Status::AwaitingAck || to == Status::Failed ||
             to == Status::Complete;
    case Status::AwaitingIntervention: return to == Status::Running || to == Status::Complete;
    case Status::AwaitingAck: return to == Status::Running || to == Status::Failed;
    case Status::Failed: return to == Status::Running;  // explicit resume only
    case Status::Complete: return false;
  }
  return false;
}

// ---------------------------------------------------------------------------
// Keys

struct KeyRecord {
  KeyRef key;
  std::string value;
  int version = 1;
  std::size_t created_turn = 0;
  std::size_t last_refreshed_turn = 0;
  bool unlabeled = false;
  bool operator==(const KeyRecord&) const = default;
};

struct KeyAuditEntry {
  KeyRef key;
  int version = 0;
  std::string value;
  std::size_t turn = 0;
  bool operator==(const KeyAuditEntry&) const = default;
};

class KeyStore {
 public:
  const KeyRecord* find(const std::string& name) const {
    auto it = records_.find(name);
    return it == records_.end() ? nullptr : &it->second;
  }
  const KeyRecord& at(const std::string& name) const {
    auto* r = find(name);
    if (!r) throw Error(ErrorCode::UnknownKey, name);
    return *r;
  }
  bool contains(const std::string& name) const { return records_.count(name) > 0; }
  int next_version(const std::string& name) const {
    auto* r = find(name);
    return r ? r->version + 1 : 1;
  }

  /// Stores a new value; the version must be exactly one above the current.
  void put(const KeyRef& key, std::string value, int version, std::size_t turn, bool unlabeled) {
    if (version != next_version(key.name))
      throw Error(ErrorCode::IOFailure, fmt::format("{} version {} out of sequence", key.name, version));
    auto it = records_.find(key.name);
    if (it == records_.end()) {
      records_.emplace(key.name, KeyRecord{key, value, 1, turn, turn, unlabeled});
    } else {
      it->second.value = value;
      it->second.version = version;
      it->second.last_refreshed_turn = turn;
      it->second.unlabeled = unlabeled;
    }
    audit_.push_back({key, version, std::move(value), turn});
  }
  void refresh(const std::string& name, std::size_t turn) {
    auto it = records_.find(name);
    if (it == records_.end()) throw Error(ErrorCode::UnknownKey, name);
    it->second.last_refreshed_turn = std::max(it->second.last_refreshed_turn, turn);
  }

  const std::map<std::string, KeyRecord>& records() const { return records_; }
  const std::vector<KeyAuditEntry>& audit() const { return audit_; }
  std::vector<KeyAuditEntry> history(const std::string& name) const {
    std::vector<KeyAuditEntry> out;
    for (const auto& a : audit_)
      if (a.key.name == name) out.push_back(a);
    return out;
  }
  bool operator==(const KeyStore&) const = default;

 private:
  std::map<std::string, KeyRecord> records_;
  std::vector<KeyAuditEntry> audit_;
};

inline json to_json(const KeyRecord& r) {
  return json{{"key", r.key.name},
              {"value", r.value},
              {"version", r.version},
              {"created_turn", r.created_turn},
              {"last_refreshed_turn", r.last_refreshed_turn},
              {"unlabeled", r.unlabeled}};
}

// ---------------------------------------------------------------------------
// Key extraction

struct ExtractedKey {
  KeyRef key;
  std::string value;
  bool unlabeled = false;
};

namespace detail {

inline std::string regex_escape(std::string_view s) {
  std::string out;
  for (char c : s) {
    if (std::strchr("\\^$.|?*+()[]{}-", c)) out.push_back('\\');
    out.push_back(c);
  }
  return out;
}

/// "key-experimentalFactors" -> "experimental factors".
inline std::string key_words(const KeyRef& key) {
  std::string ident = key.name.substr(4);
  std::string out;
  for (std::size_t i = 0; i < ident.size(); ++i) {
    char c = ident[i];
    if (c == '-' || c == '_') {
      out.push_back(' ');
      continue;
    }
    bool upper = std::isupper(static_cast<unsigned char>(c));
    bool prev_lower = i > 0 && std::islower(static_cast<unsigned char>(ident[i - 1]));
    if (upper && prev_lower) out.push_back(' ');
    out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  }
  return out;
}

inline const std::regex& any_label_re() {
  static const std::regex re(R"re(^\s*(?:[-*]\s*)?(?:\*\*)?(?:memorised\s+[^{:\n]*?)?[*`]*\{?\s*key-[A-Za-z0-9_-]+\s*\}?[*`]*\s*:)re",
                             std::regex::ECMAScript | std::regex::icase);
  return re;
}

inline bool is_list_line(std::string_view line) {
  auto t = text::trim_view(line);
  if (t.empty()) return false;
  if (t[0] == '-' || t[0] == '*' || t[0] == '|') return true;
  std::size_t i = 0;
  while (i < t.size() && std::isdigit(static_cast<unsigned char>(t[i]))) ++i;
  return i > 0 && i < t.size() && (t[i] == '.' || t[i] == ')');
}

inline std::string clean_value(std::string v) {
  v = text::trim(v);
  if (v.size() >= 2 && v.back() == '.' && v[v.size() - 2] == '"') v.pop_back();
  if (v.size() >= 2 && v.front() == '"' && v.back() == '"' && v.find('"', 1) == v.size() - 1)
    v = v.substr(1, v.size() - 2);
  return v;
}

/// Collects the span that starts after a label on `lines[start]`.
inline std::string span_after(const std::vector<std::string>& lines, std::size_t start, const std::string& first,
                              const std::regex& stop_label) {
  std::vector<std::string> parts{first};
  for (std::size_t i = start + 1; i < lines.size(); ++i) {
    const std::string& line = lines[i];
    if (std::regex_search(line, any_label_re()) || std::regex_search(line, stop_label)) break;
    if (text::trim_view(line).empty()) {
      std::size_t j = i + 1;
      while (j < lines.size() && text::trim_view(lines[j]).empty()) ++j;
      if (j >= lines.size() || !is_list_line(lines[j])) break;
      parts.emplace_back();
      i = j - 1;
      continue;
    }
    parts.push_back(line);
  }
  while (!parts.empty() && text::trim_view(parts.back()).empty()) parts.pop_back();
  std::string joined = text::join(parts, "\n");
  // Drop a leading newline left by an empty label-line remainder.
  auto first_nonspace = joined.find_first_not_of(" \t\n");
  return first_nonspace == std::string::npos ? std::string() : joined.substr(first_nonspace);
}

}  // namespace detail

/// Values for every key a chain memorises (or explicitly updates), read from
/// labelled spans of the reply. A span starts after `Memorised <label> {k}:`
/// or `{k}:` and runs to the next label or a blank line not followed by a
/// list item. Without a key label, a heading naming the key ("Experimental
/// Factors:") is accepted; failing that, a literal Memorise keeps its literal
/// and anything else stores the whole reply flagged unlabeled.
inline std::vector<ExtractedKey> extract_key_values(const script::PromptChain& chain, const std::string& reply) {
  std::vector<std::pair<KeyRef, std::optional<std::string>>> targets;
  auto add_target = [&](const KeyRef& k, std::optional<std::string> literal) {
    for (auto& t : targets)
      if (t.first == k) return;
    targets.emplace_back(k, std::move(literal));
  };
  for (const auto* d : chain.directives()) {
    if (auto m = d->as<script::Memorise>()) add_target(m->key, m->literal);
    else if (d->updates) add_target(*d->updates, std::nullopt);
  }

  auto lines = text::split_lines(reply);
  std::vector<ExtractedKey> out;
  for (const auto& [key, literal] : targets) {
    std::string k = detail::regex_escape(key.name.substr(4));
    std::regex label(
        R"re(^\s*(?:[-*]\s*)?(?:\*\*)?(?:memorised\s+[^{:\n]*?)?[*`]*\{?\s*key-)re" + k + R"re(\s*\}?[*`]*\s*:(.*)$)re",
        std::regex::ECMAScript | std::regex::icase);
    std::regex heading(R"re(^\s*(?:[-*]\s*)?(?:\*\*)?(?:memorised\s+)?)re" +
                           detail::regex_escape(detail::key_words(key)) + R"re(\s*(?:\*\*)?\s*:(?:\*\*)?(.*)$)re",
                       std::regex::ECMAScript | std::regex::icase);
    std::optional<std::string> value;
    for (const std::regex* re : {&label, &heading}) {
      for (std::size_t i = 0; i < lines.size() && !value; ++i) {
        std::smatch m;
        if (std::regex_search(lines[i], m, *re)) value = detail::span_after(lines, i, m[1].str(), heading);
      }
      if (value) break;
    }
    if (value && !value->empty()) out.push_back({key, detail::clean_value(*value), false});
    else if (literal) out.push_back({key, *literal, false});
    else out.push_back({key, text::trim(reply), true});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Session state

struct Cursor {
  std::size_t segment = 0;
  std::size_t chain = 0;
  auto operator<=>(const Cursor&) const = default;
};

struct SessionOptions {
  bool skip_co_creation = false;
  std::size_t budget_words = 3000;
  /// Re-list keys a chain reads when their value has left the context.
  bool auto_refresh_stale_keys = false;
  /// Sessions created by the service wait for a human Approve first.
  bool start_paused = false;
  bool operator==(const SessionOptions&) const = default;
};

inline json to_json(const SessionOptions& o) {
  return json{{"skip_co_creation", o.skip_co_creation},
              {"budget_words", o.budget_words},
              {"auto_refresh_stale_keys", o.auto_refresh_stale_keys},
              {"start_paused", o.start_paused}};
}
inline SessionOptions options_from_json(const json& j) {
  SessionOptions o;
  o.skip_co_creation = j.value("skip_co_creation", o.skip_co_creation);
  o.budget_words = j.value("budget_words", o.budget_words);
  o.auto_refresh_stale_keys = j.value("auto_refresh_stale_keys", o.auto_refresh_stale_keys);
  o.start_paused = j.value("start_paused", o.start_paused);
  if (o.budget_words == 0) throw Error(ErrorCode::InvalidParams, "budget_words must be positive");
  return o;
}

struct BackendDescriptor {
  std::string kind = "scripted";  // live | replay | scripted
  std::string endpoint;
  std::string credential_env;
  std::string fixture_path;
  std::string rules_path;
  bool operator==(const BackendDescriptor&) const = default;
};

inline json to_json(const BackendDescriptor& b) {
  json j{{"kind", b.kind}};
  if (!b.endpoint.empty()) j["endpoint"] = b.endpoint;
  if (!b.credential_env.empty()) j["credential_env"] = b.credential_env;
  if (!b.fixture_path.empty()) j["fixture_path"] = b.fixture_path;
  if (!b.rules_path.empty()) j["rules_path"] = b.rules_path;
  return j;
}
inline BackendDescriptor backend_from_json(const json& j) {
  BackendDescriptor b;
  b.kind = j.value("kind", b.kind);
  b.endpoint = j.value("endpoint", "");
  b.credential_env = j.value("credential_env", "");
  b.fixture_path = j.value("fixture_path", "");
  b.rules_path = j.value("rules_path", "");
  if (b.kind != "live" && b.kind != "replay" && b.kind != "scripted")
    throw Error(ErrorCode::ConfigError, fmt::format("unknown backend '{}'", b.kind));
  return b;
}

struct Failure {
  std::string code;
  std::string message;
  bool operator==(const Failure&) const = default;
};

struct Event {
  std::size_t seq = 0;
  std::string type;
  json data = json::object();
  bool operator==(const Event&) const = default;
};

inline json to_json(const Event& e) {
  json j = e.data;
  j["seq"] = e.seq;
  j["type"] = e.type;
  return j;
}
inline Event event_from_json(const json& j) {
  Event e;
  e.seq = j.at("seq").get<std::size_t>();
  e.type = j.at("type").get<std::string>();
  e.data = j;
  e.data.erase("seq");
  e.data.erase("type");
  return e;
}

/// One prompt/reply pair with the chain it belongs to.
struct Exchange {
  Cursor cursor;
  std::string kind;  // chain | refresh | refine | redirect
  std::string prompt;
  std::string reply;
  std::size_t user_turn = 0;
  bool operator==(const Exchange&) const = default;
};

struct SessionState {
  script::ScriptDocument script;
  Cursor cursor;
  ConversationContext context;
  KeyStore keys;
  std::vector<gateway::ChatTurn> transcript;
  std::vector<Exchange> exchanges;
  std::vector<Event> log;
  Status status = Status::Running;
  SessionOptions options;
  gateway::GenerationParams params;
  BackendDescriptor backend;
  std::optional<Failure> failure;
  /// Set by Approve; lets the next intervene-flagged chain be sent.
  bool gate_open = false;
  /// Backend calls made so far, continuations included.
  std::size_t backend_calls = 0;

  bool at_end() const { return cursor.segment >= script.segments.size(); }
  bool terminal() const { return status == Status::Complete; }
  const script::PromptChain* current_chain() const {
    if (at_end()) return nullptr;
    return &script.segments[cursor.segment].chain(cursor.chain);
  }
};

namespace detail {

inline Cursor next_cursor(const script::ScriptDocument& doc, Cursor c) {
  ++c.chain;
  while (c.segment < doc.segments.size() && c.chain >= doc.segments[c.segment].chain_count()) {
    ++c.segment;
    c.chain = 0;
  }
  return c;
}

inline Cursor first_cursor(const script::ScriptDocument& doc) {
  Cursor c{0, 0};
  while (c.segment < doc.segments.size() && doc.segments[c.segment].chain_count() == 0) ++c.segment;
  return c;
}

/// Applies one event to the state; returns transcript indices that fell out
/// of the context window as a result.
inline std::vector<std::size_t> apply(SessionState& s, const Event& e) {
  const json& d = e.data;
  if (e.type == "status_change") {
    s.status = status_from_string(d.at("to").get<std::string>());
    if (s.status == Status::Failed) s.failure = Failure{d.value("code", ""), d.value("message", "")};
    else if (s.status == Status::Running) s.failure.reset();
  } else if (e.type == "chain_sent") {
    std::size_t idx = s.transcript.size();
    auto turn = gateway::ChatTurn::make(gateway::Author::User, d.at("text").get<std::string>(), idx);
    s.transcript.push_back(turn);
    s.exchanges.push_back(Exchange{Cursor{d.value("segment", std::size_t{0}), d.value("chain", std::size_t{0})},
                                   d.value("kind", "chain"), turn.text, "", idx});
    return s.context.push(std::move(turn));
  } else if (e.type == "reply_received") {
    std::size_t idx = s.transcript.size();
    auto turn = gateway::ChatTurn::make(gateway::Author::Assistant, d.at("text").get<std::string>(), idx);
    s.transcript.push_back(turn);
    if (!s.exchanges.empty()) s.exchanges.back().reply = turn.text;
    s.backend_calls += d.value("calls", std::size_t{1});
    return s.context.push(std::move(turn));
  } else if (e.type == "key_memorised") {
    s.keys.put(KeyRef{d.at("key").get<std::string>()}, d.at("value").get<std::string>(), d.at("version").get<int>(),
               d.at("turn").get<std::size_t>(), d.value("unlabeled", false));
  } else if (e.type == "key_refreshed") {
    s.keys.refresh(d.at("key").get<std::string>(), d.at("turn").get<std::size_t>());
  } else if (e.type == "cursor_advanced") {
    s.cursor = Cursor{d.at("segment").get<std::size_t>(), d.at("chain").get<std::size_t>()};
    s.gate_open = false;
  } else if (e.type == "intervention") {
    if (d.value("action", "") == "approve") s.gate_open = true;
  }
  // session_started, evicted and chain_skipped carry no state of their own.
  return {};
}

}  // namespace detail

/// Appends an event, applies it, and logs any resulting evictions.
inline void emit(SessionState& s, std::string type, json data = json::object()) {
  Event e{s.log.size(), std::move(type), std::move(data)};
  if (e.type == "status_change") {
    auto from = s.status;
    auto to = status_from_string(e.data.at("to").get<std::string>());
    if (!transition_allowed(from, to))
      throw Error(ErrorCode::InvalidInState,
                  fmt::format("transition {} -> {} not allowed", to_string(from), to_string(to)));
    e.data["from"] = std::string(to_string(from));
  }
  auto evicted = detail::apply(s, e);
  s.log.push_back(std::move(e));
  for (auto idx : evicted) s.log.push_back(Event{s.log.size(), "evicted", json{{"turn", idx}}});
}

inline void set_status(SessionState& s, Status to, std::string reason, const Failure* failure = nullptr) {
  json d{{"to", std::string(to_string(to))}, {"reason", std::move(reason)}};
  if (failure) {
    d["code"] = failure->code;
    d["message"] = failure->message;
  }
  emit(s, "status_change", std::move(d));
}

namespace detail {

inline script::ScriptDocument preparation_first(script::ScriptDocument doc) {
  auto it = std::find_if(doc.segments.begin(), doc.segments.end(),
                         [](const script::Segment& s) { return text::to_lower(s.name) == "preparation"; });
  if (it != doc.segments.end() && it != doc.segments.begin()) std::rotate(doc.segments.begin(), it, it + 1);
  return doc;
}

inline SessionState initial_state(const script::ScriptDocument& doc, const SessionOptions& options,
                                  const gateway::GenerationParams& params, const BackendDescriptor& backend) {
  SessionState s;
  s.script = preparation_first(doc);
  s.options = options;
  s.params = params;
  s.backend = backend;
  s.context = ConversationContext(options.budget_words);
  s.cursor = first_cursor(s.script);
  return s;
}

}  // namespace detail

/// Creates a Running session positioned at the first chain. Throws
/// StaticCheckFailed when any key is read before it is memorised.
inline SessionState start_session(const script::ScriptDocument& doc, const BackendDescriptor& backend,
                                  const gateway::GenerationParams& params, const SessionOptions& options = {}) {
  params.validate();
  if (options.budget_words == 0) throw Error(ErrorCode::InvalidParams, "budget_words must be positive");
  std::vector<std::string> bad;
  for (const auto& d : script::static_check(doc))
    if (d.kind == script::DiagnosticKind::KeyReadBeforeMemorise && d.key) bad.push_back(d.key->name);
  if (!bad.empty())
    throw Error(ErrorCode::StaticCheckFailed, fmt::format("key read before memorise: {}", text::join(bad, ", ")));

  SessionState s = detail::initial_state(doc, options, params, backend);
  emit(s, "session_started",
       json{{"script", doc.source_text},
            {"options", to_json(options)},
            {"params", params},
            {"backend", to_json(backend)}});
  if (s.at_end()) set_status(s, Status::Complete, "script has no chains");
  else if (options.start_paused) set_status(s, Status::AwaitingIntervention, "awaiting confirmation");
  return s;
}

/// Rebuilds a session by folding its event log.
inline SessionState fold(const std::vector<Event>& events) {
  if (events.empty() || events.front().type != "session_started")
    throw Error(ErrorCode::IOFailure, "session log must begin with session_started");
  const json& d = events.front().data;
  auto doc = script::parse_script(d.at("script").get<std::string>());
  SessionState s = detail::initial_state(doc, options_from_json(d.at("options")),
                                         d.at("params").get<gateway::GenerationParams>(),
                                         backend_from_json(d.at("backend")));
  for (const auto& e : events) {
    if (e.seq != s.log.size())
      throw Error(ErrorCode::IOFailure, fmt::format("log sequence gap at {}", s.log.size()));
    detail::apply(s, e);
    s.log.push_back(e);
  }
  return s;
}

inline std::string log_jsonl(const SessionState& s, std::size_t from = 0) {
  std::string out;
  for (std::size_t i = from; i < s.log.size(); ++i) out += to_json(s.log[i]).dump() + "\n";
  return out;
}

inline std::vector<Event> parse_log(std::string_view jsonl) {
  std::vector<Event> out;
  for (const auto& line : text::split_lines(jsonl)) {
    if (text::trim_view(line).empty()) continue;
    try {
      out.push_back(event_from_json(json::parse(line)));
    } catch (const json::exception& e) {
      throw Error(ErrorCode::IOFailure, fmt::format("bad log line: {}", e.what()));
    }
  }
  return out;
}

inline void save_log(const std::string& path, const SessionState& s) { config::write_file(path, log_jsonl(s)); }
inline SessionState load_log(const std::string& path) { return fold(parse_log(config::read_file(path))); }

/// Fixture entries reproducing every exchange of a session, one per prompt.
inline std::vector<gateway::FixtureEntry> record_fixture(const SessionState& s) {
  std::vector<gateway::FixtureEntry> out;
  for (const auto& x : s.exchanges) {
    if (x.reply.empty() && &x == &s.exchanges.back()) break;
    out.push_back(gateway::make_entry(out.size(), x.prompt, x.reply, false, "recorded"));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Execution

namespace detail {

inline bool is_yes(std::string_view reply) {
  std::string norm;
  for (char c : reply)
    if (std::isalnum(static_cast<unsigned char>(c))) norm.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  return norm == "yes";
}

inline gateway::ChatRequest build_request(const SessionState& s, const std::string& prompt) {
  gateway::ChatRequest req;
  req.params = s.params;
  req.turns = s.context.snapshot();
  req.turns.push_back(gateway::ChatTurn::make(gateway::Author::User, prompt, s.transcript.size()));
  return req;
}

struct Sent {
  std::string reply;
  std::size_t calls = 0;
};

inline Sent send(SessionState& s, gateway::Gateway& gw, const std::string& prompt) {
  auto c = gw.complete_ex(build_request(s, prompt));
  return Sent{std::move(c.text), c.calls};
}

inline void record_exchange(SessionState& s, const std::string& kind, const std::string& prompt, const Sent& sent) {
  emit(s, "chain_sent",
       json{{"segment", s.cursor.segment}, {"chain", s.cursor.chain}, {"turn", s.transcript.size()}, {"kind", kind},
            {"text", prompt}});
  emit(s, "reply_received", json{{"turn", s.transcript.size()}, {"text", sent.reply}, {"calls", sent.calls}});
}

inline void memorise(SessionState& s, const std::vector<ExtractedKey>& keys, std::size_t turn) {
  for (const auto& k : keys) {
    emit(s, "key_memorised",
         json{{"key", k.key.name},
              {"version", s.keys.next_version(k.key.name)},
              {"value", k.value},
              {"unlabeled", k.unlabeled},
              {"turn", turn}});
  }
}

inline void advance(SessionState& s) {
  Cursor next = next_cursor(s.script, s.cursor);
  emit(s, "cursor_advanced", json{{"segment", next.segment}, {"chain", next.chain}});
  if (s.at_end() && s.status == Status::Running) set_status(s, Status::Complete, "all chains executed");
}

inline Failure failure_of(const Error& e) { return Failure{std::string(eabss::to_string(e.code())), e.detail()}; }

}  // namespace detail

/// Sends "List the memorised {key}." and marks the key refreshed. The value
/// and version are unchanged. Gateway errors propagate with no state change.
inline void refresh_key(SessionState& s, gateway::Gateway& gw, const KeyRef& key) {
  if (!s.keys.contains(key.name)) throw Error(ErrorCode::UnknownKey, key.name);
  if (s.status == Status::AwaitingAck || s.status == Status::Complete || s.status == Status::Failed)
    throw Error(ErrorCode::InvalidInState, fmt::format("cannot refresh while {}", to_string(s.status)));
  std::string prompt = fmt::format("List the memorised {}.", key.name);
  auto sent = detail::send(s, gw, prompt);
  detail::record_exchange(s, "refresh", prompt, sent);
  emit(s, "key_refreshed", json{{"key", key.name}, {"turn", s.transcript.size() - 1}});
}

/// Runs the chain at the cursor. Gateway failures and a non-Yes silent-mode
/// acknowledgement move the session to Failed instead of throwing.
inline void step(SessionState& s, gateway::Gateway& gw) {
  if (s.status != Status::Running)
    throw Error(ErrorCode::InvalidInState, fmt::format("step requires Running, session is {}", to_string(s.status)));
  if (s.at_end()) {
    set_status(s, Status::Complete, "all chains executed");
    return;
  }
  const script::PromptChain chain = *s.current_chain();
  if (chain.optional() && s.options.skip_co_creation) {
    emit(s, "chain_skipped", json{{"segment", s.cursor.segment}, {"chain", s.cursor.chain}, {"reason", "co-creation"}});
    detail::advance(s);
    return;
  }
  if (chain.intervene() && !s.gate_open) {
    set_status(s, Status::AwaitingIntervention, "intervene point");
    return;
  }
  try {
    if (s.options.auto_refresh_stale_keys) {
      std::set<std::string> seen;
      for (const auto* d : chain.directives()) {
        for (const auto& k : d->reads) {
          const auto* rec = s.keys.find(k.name);
          if (!rec || !seen.insert(k.name).second) continue;
          std::string probe = rec->value.substr(0, std::min<std::size_t>(rec->value.size(), 80));
          if (!s.context.contains_text(probe)) refresh_key(s, gw, k);
        }
      }
    }
    const bool ack = chain.ends_with_ack();
    std::string prompt = script::render_chain(chain);
    detail::Sent sent = detail::send(s, gw, prompt);
    if (ack) set_status(s, Status::AwaitingAck, "silent-mode acknowledgement");
    detail::record_exchange(s, "chain", prompt, sent);
    std::size_t reply_turn = s.transcript.size() - 1;
    if (ack) {
      if (!detail::is_yes(sent.reply)) {
        Failure f{"SilentModeFailure", fmt::format("expected Yes, got '{}'", text::trim(sent.reply))};
        set_status(s, Status::Failed, "silent-mode acknowledgement refused", &f);
        return;
      }
      set_status(s, Status::Running, "acknowledged");
    }
    detail::memorise(s, extract_key_values(chain, sent.reply), reply_turn);
    std::set<std::string> listed;
    for (const auto* d : chain.directives()) {
      auto l = d->as<script::ListKey>();
      if (l && s.keys.contains(l->key.name) && listed.insert(l->key.name).second)
        emit(s, "key_refreshed", json{{"key", l->key.name}, {"turn", reply_turn}});
    }
    detail::advance(s);
  } catch (const gateway::GatewayError& e) {
    auto f = detail::failure_of(e);
    if (s.status == Status::AwaitingAck || s.status == Status::Running) set_status(s, Status::Failed, "gateway error", &f);
  }
}

/// Steps until the session leaves Running.
inline void run(SessionState& s, gateway::Gateway& gw) {
  while (s.status == Status::Running) step(s, gw);
}

/// User-initiated pause of a running session.
inline void pause(SessionState& s) {
  if (s.status != Status::Running)
    throw Error(ErrorCode::InvalidInState, fmt::format("cannot pause while {}", to_string(s.status)));
  set_status(s, Status::AwaitingIntervention, "paused by user");
}

/// Failed -> Running after the cause (backend outage, refused ack) has been
/// dealt with. The failed chain is retried by the next step.
inline void resume(SessionState& s) {
  if (s.status != Status::Failed)
    throw Error(ErrorCode::InvalidInState, fmt::format("resume requires Failed, session is {}", to_string(s.status)));
  set_status(s, Status::Running, "resumed");
}

struct Approve {};
struct Skip {};
struct Refine {
  patterns::RefinementKind kind = patterns::RefinementKind::Reflect;
  std::string target;
  KeyRef key;
};
struct Redirect {
  std::string prompt;
};
using InterventionAction = std::variant<Approve, Skip, Refine, Redirect>;

inline InterventionAction action_from_json(const json& j) {
  if (!j.is_object() || !j.contains("action")) throw Error(ErrorCode::InvalidAction, "body lacks 'action'");
  auto a = text::to_lower(j.at("action").get<std::string>());
  if (a == "approve") return Approve{};
  if (a == "skip") return Skip{};
  if (a == "refine") {
    Refine r;
    r.kind = patterns::refinement_kind_from_string(j.value("kind", "reflect"));
    r.target = j.value("target", "");
    auto key = script::normalize_key(j.value("key", ""));
    if (!key) throw Error(ErrorCode::InvalidAction, "refine needs a key");
    r.key = *key;
    return r;
  }
  if (a == "redirect") return Redirect{j.value("prompt", j.value("text", ""))};
  throw Error(ErrorCode::InvalidAction, fmt::format("unknown action '{}'", a));
}

/// Applies a human decision at an intervention point. Refine and Redirect
/// exchange with the backend and leave the session paused for further
/// decisions. Gateway errors propagate and leave the state untouched.
inline void intervene(SessionState& s, gateway::Gateway& gw, const InterventionAction& action) {
  if (s.status != Status::AwaitingIntervention)
    throw Error(ErrorCode::InvalidInState,
                fmt::format("intervention requires AwaitingIntervention, session is {}", to_string(s.status)));
  if (std::holds_alternative<Approve>(action)) {
    emit(s, "intervention", json{{"action", "approve"}});
    set_status(s, Status::Running, "approved");
  } else if (std::holds_alternative<Skip>(action)) {
    if (s.at_end()) throw Error(ErrorCode::InvalidAction, "nothing left to skip");
    emit(s, "intervention", json{{"action", "skip"}});
    emit(s, "chain_skipped", json{{"segment", s.cursor.segment}, {"chain", s.cursor.chain}, {"reason", "user"}});
    Cursor next = detail::next_cursor(s.script, s.cursor);
    emit(s, "cursor_advanced", json{{"segment", next.segment}, {"chain", next.chain}});
    set_status(s, s.at_end() ? Status::Complete : Status::Running, "skipped");
  } else if (auto r = std::get_if<Refine>(&action)) {
    if (!s.keys.contains(r->key.name))
      throw Error(ErrorCode::InvalidAction, fmt::format("refine target {} is not memorised", r->key.name));
    auto cmd = patterns::refinement(r->kind, r->target, r->key);
    auto sent = detail::send(s, gw, cmd.raw);
    emit(s, "intervention",
         json{{"action", "refine"}, {"kind", std::string(patterns::to_string(r->kind))}, {"target", r->target}, {"key", r->key.name}});
    detail::record_exchange(s, "refine", cmd.raw, sent);
    auto chain = script::parse_chain(cmd.raw);
    detail::memorise(s, extract_key_values(chain, sent.reply), s.transcript.size() - 1);
  } else if (auto d = std::get_if<Redirect>(&action)) {
    if (text::trim_view(d->prompt).empty()) throw Error(ErrorCode::InvalidAction, "redirect prompt is empty");
    auto sent = detail::send(s, gw, d->prompt);
    emit(s, "intervention", json{{"action", "redirect"}, {"prompt", d->prompt}});
    detail::record_exchange(s, "redirect", d->prompt, sent);
  }
}

}  // namespace eabss::session
