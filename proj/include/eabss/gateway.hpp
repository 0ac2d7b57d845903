#pragma once

#include <chrono>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <regex>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "eabss/config.hpp"
#include "eabss/core.hpp"
#include "eabss/script.hpp"

namespace eabss::gateway {

using json = nlohmann::json;

struct GenerationParams {
  double temperature = 1.8;
  double top_p = 0.9;
  std::string model_id = "gpt-3.5-turbo";
  int max_continuations = 3;

  GenerationParams() = default;
  GenerationParams(double t, double p, std::string model = "gpt-3.5-turbo", int continuations = 3)
      : temperature(t), top_p(p), model_id(std::move(model)), max_continuations(continuations) {
    validate();
  }

  void validate() const {
    if (!(temperature >= 0.0 && temperature <= 2.0))
      throw Error(ErrorCode::InvalidParams, fmt::format("temperature {} outside [0,2]", temperature));
    if (!(top_p > 0.0 && top_p <= 1.0))
      throw Error(ErrorCode::InvalidParams, fmt::format("top_p {} outside (0,1]", top_p));
    if (max_continuations < 0) throw Error(ErrorCode::InvalidParams, "max_continuations must be >= 0");
  }
  bool operator==(const GenerationParams&) const = default;
};

inline void to_json(json& j, const GenerationParams& p) {
  j = json{{"temperature", p.temperature},
           {"top_p", p.top_p},
           {"model_id", p.model_id},
           {"max_continuations", p.max_continuations}};
}
inline void from_json(const json& j, GenerationParams& p) {
  GenerationParams d;
  p = GenerationParams(j.value("temperature", d.temperature), j.value("top_p", d.top_p),
                       j.value("model_id", d.model_id), j.value("max_continuations", d.max_continuations));
}

enum class Author { User, Assistant, System };

inline std::string_view to_string(Author a) {
  switch (a) {
    case Author::User: return "user";
    case Author::Assistant: return "assistant";
    case Author::System: return "system";
  }
  return "user";
}

struct ChatTurn {
  Author author = Author::User;
  std::string text;
  std::size_t word_count = 0;
  /// Position in the full session transcript; stable across eviction.
  std::size_t index = 0;

  static ChatTurn make(Author a, std::string t, std::size_t idx = 0) {
    std::size_t words = text::word_count(t);
    return ChatTurn{a, std::move(t), words, idx};
  }
  bool operator==(const ChatTurn&) const = default;
};

struct ChatRequest {
  std::vector<ChatTurn> turns;
  GenerationParams params;

  void validate() const {
    if (turns.empty()) throw Error(ErrorCode::InvalidParams, "request has no turns");
    if (turns.back().author != Author::User)
      throw Error(ErrorCode::InvalidParams, "last turn of a request must be a user turn");
    params.validate();
  }
  const std::string& prompt() const { return turns.back().text; }
};

struct BackendReply {
  std::string text;
  bool truncated = false;
};

/// Transport-level failure reported by a backend. RateLimited carries the
/// server's retry hint.
class GatewayError : public Error {
 public:
  GatewayError(ErrorCode code, const std::string& msg,
               std::chrono::milliseconds retry_after = std::chrono::milliseconds(0))
      : Error(code, msg), retry_after_(retry_after) {}
  std::chrono::milliseconds retry_after() const { return retry_after_; }

 private:
  std::chrono::milliseconds retry_after_;
};

class Backend {
 public:
  virtual ~Backend() = default;
  virtual BackendReply send(const ChatRequest& request) = 0;
  virtual std::string kind() const = 0;
};

/// Removes the overlap between the tail of `head` and the start of `tail`
/// (at least 8 bytes) so continuation parts join without duplication.
inline std::string join_continuation(const std::string& head, const std::string& tail) {
  constexpr std::size_t min_overlap = 8;
  std::size_t max_k = std::min(head.size(), tail.size());
  for (std::size_t k = max_k; k >= min_overlap; --k) {
    if (head.compare(head.size() - k, k, tail, 0, k) == 0) return head + tail.substr(k);
  }
  return head + tail;
}

struct RetryPolicy {
  int attempts = 3;
  std::chrono::milliseconds base_delay{250};
  int max_rate_limit_waits = 5;
};

using Sleeper = std::function<void(std::chrono::milliseconds)>;

inline Sleeper real_sleeper() {
  return [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); };
}

/// Stateless per request: retries transport failures and resolves truncated
/// replies by asking the backend to continue.
class Gateway {
 public:
  explicit Gateway(std::shared_ptr<Backend> backend, Sleeper sleeper = real_sleeper(), RetryPolicy policy = {})
      : backend_(std::move(backend)), sleeper_(std::move(sleeper)), policy_(policy) {}

  struct Completion {
    std::string text;
    /// Successful backend calls, continuations included.
    std::size_t calls = 0;
  };

  Completion complete_ex(const ChatRequest& request) {
    request.validate();
    ChatRequest req = request;
    Completion out;
    BackendReply reply = send_with_retry(req);
    ++out.calls;
    out.text = reply.text;
    int continuations = 0;
    while (reply.truncated) {
      if (continuations >= req.params.max_continuations)
        throw GatewayError(ErrorCode::TruncationUnresolved,
                           fmt::format("reply still truncated after {} continuations", continuations));
      ++continuations;
      std::size_t next = req.turns.back().index + 1;
      req.turns.push_back(ChatTurn::make(Author::Assistant, reply.text, next));
      req.turns.push_back(ChatTurn::make(Author::User, "continue", next + 1));
      reply = send_with_retry(req);
      ++out.calls;
      out.text = join_continuation(out.text, reply.text);
    }
    return out;
  }

  std::string complete(const ChatRequest& request) { return complete_ex(request).text; }

  Backend& backend() { return *backend_; }
  std::shared_ptr<Backend> backend_ptr() const { return backend_; }

 private:
  BackendReply send_with_retry(const ChatRequest& req) {
    int network_failures = 0;
    int rate_waits = 0;
    for (;;) {
      try {
        return backend_->send(req);
      } catch (const GatewayError& e) {
        if (e.code() == ErrorCode::NetworkFailure) {
          if (++network_failures >= policy_.attempts) throw;
          sleeper_(policy_.base_delay * (1 << (network_failures - 1)));
          continue;
        }
        if (e.code() == ErrorCode::RateLimited) {
          if (++rate_waits > policy_.max_rate_limit_waits) throw;
          sleeper_(e.retry_after().count() > 0 ? e.retry_after() : policy_.base_delay);
          continue;
        }
        throw;
      }
    }
  }

  std::shared_ptr<Backend> backend_;
  Sleeper sleeper_;
  RetryPolicy policy_;
};

// ---------------------------------------------------------------------------
// Fixtures

struct FixtureEntry {
  std::size_t index = 0;
  std::string request_hash;
  std::string reply;
  std::string reply_hash;
  bool truncated = false;
  std::string source;
  bool operator==(const FixtureEntry&) const = default;
};

inline json to_json(const FixtureEntry& e) {
  json j{{"index", e.index}, {"request_hash", e.request_hash}, {"reply", e.reply}, {"reply_hash", e.reply_hash}};
  if (e.truncated) j["truncated"] = true;
  if (!e.source.empty()) j["source"] = e.source;
  return j;
}

inline FixtureEntry make_entry(std::size_t index, std::string_view prompt, std::string reply, bool truncated = false,
                               std::string source = {}) {
  FixtureEntry e;
  e.index = index;
  e.request_hash = text::fnv1a_hex(prompt);
  e.reply_hash = text::fnv1a_hex(reply);
  e.reply = std::move(reply);
  e.truncated = truncated;
  e.source = std::move(source);
  return e;
}

inline std::vector<FixtureEntry> parse_fixture(std::string_view jsonl) {
  std::vector<FixtureEntry> out;
  auto lines = text::split_lines(jsonl);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (text::trim_view(lines[i]).empty()) continue;
    json j;
    try {
      j = json::parse(lines[i]);
    } catch (const json::exception& ex) {
      throw Error(ErrorCode::IOFailure, fmt::format("fixture line {}: {}", i + 1, ex.what()));
    }
    FixtureEntry e;
    e.index = j.at("index").get<std::size_t>();
    e.request_hash = j.value("request_hash", "");
    e.reply = j.at("reply").get<std::string>();
    e.reply_hash = j.value("reply_hash", "");
    e.truncated = j.value("truncated", false);
    e.source = j.value("source", "");
    out.push_back(std::move(e));
  }
  return out;
}

inline std::string fixture_jsonl(const std::vector<FixtureEntry>& entries) {
  std::string out;
  for (const auto& e : entries) out += to_json(e).dump() + "\n";
  return out;
}

inline void write_fixture(const std::string& path, const std::vector<FixtureEntry>& entries) {
  config::write_file(path, fixture_jsonl(entries));
}

/// Answers exchange k with fixture entry k. With hash checking on, a request
/// whose prompt hash differs, or an entry whose reply no longer matches its
/// recorded hash, raises ReplayMismatch at that exchange only.
struct ReplayOptions {
  bool check_request_hash = true;
  bool check_reply_hash = true;
};

class ReplayBackend : public Backend {
 public:
  using Options = ReplayOptions;

  explicit ReplayBackend(std::vector<FixtureEntry> entries, Options opts = Options())
      : entries_(std::move(entries)), opts_(opts) {}
  ReplayBackend(std::vector<FixtureEntry> entries, bool check_hashes)
      : ReplayBackend(std::move(entries), Options{check_hashes, check_hashes}) {}

  static std::shared_ptr<ReplayBackend> from_file(const std::string& path, Options opts = Options()) {
    return std::make_shared<ReplayBackend>(parse_fixture(config::read_file(path)), opts);
  }

  BackendReply send(const ChatRequest& request) override {
    std::lock_guard lock(mu_);
    std::size_t k = position_;
    if (k >= entries_.size())
      throw GatewayError(ErrorCode::ReplayMismatch, fmt::format("fixture exhausted at exchange {}", k));
    const FixtureEntry& e = entries_[k];
    if (e.index != k)
      throw GatewayError(ErrorCode::ReplayMismatch,
                         fmt::format("exchange {} found fixture entry indexed {}", k, e.index));
    if (opts_.check_request_hash && !e.request_hash.empty() && e.request_hash != text::fnv1a_hex(request.prompt()))
      throw GatewayError(ErrorCode::ReplayMismatch, fmt::format("request hash differs at exchange {}", k));
    if (opts_.check_reply_hash && !e.reply_hash.empty() && e.reply_hash != text::fnv1a_hex(e.reply))
      throw GatewayError(ErrorCode::ReplayMismatch, fmt::format("reply hash differs at exchange {}", k));
    ++position_;
    return {e.reply, e.truncated};
  }
  std::string kind() const override { return "replay"; }

  std::size_t position() const {
    std::lock_guard lock(mu_);
    return position_;
  }
  void seek(std::size_t pos) {
    std::lock_guard lock(mu_);
    position_ = pos;
  }
  std::size_t size() const { return entries_.size(); }

 private:
  std::vector<FixtureEntry> entries_;
  Options opts_;
  std::size_t position_ = 0;
  mutable std::mutex mu_;
};

/// Deterministic rule-based stand-in for a model. Custom rules are tried
/// first, in order; otherwise silent-mode acks get "Yes", Memorise commands
/// get labelled synthetic values, and List commands echo remembered values.
class ScriptedBackend : public Backend {
 public:
  struct Rule {
    std::regex pattern;
    std::string reply;
    bool truncated = false;
    std::string source;  // original pattern text
  };

  ScriptedBackend() = default;
  explicit ScriptedBackend(std::vector<Rule> rules) : rules_(std::move(rules)) {}

  static Rule rule(const std::string& pattern, std::string reply, bool truncated = false) {
    return Rule{std::regex(pattern, std::regex::ECMAScript | std::regex::icase), std::move(reply), truncated, pattern};
  }

  /// Rules from a TOML file of [[rule]] tables with match / reply /
  /// truncated fields.
  static std::vector<Rule> load_rules(const std::string& path) {
    auto doc = config::parse_toml(config::read_file(path));
    std::vector<Rule> out;
    if (!doc.contains("rule")) return out;
    for (const auto& r : doc.at("rule")) {
      try {
        out.push_back(rule(r.at("match").get<std::string>(), r.at("reply").get<std::string>(), r.value("truncated", false)));
      } catch (const std::regex_error& e) {
        throw Error(ErrorCode::ConfigError, fmt::format("bad rule pattern: {}", e.what()));
      } catch (const json::exception& e) {
        throw Error(ErrorCode::ConfigError, fmt::format("bad rule: {}", e.what()));
      }
    }
    return out;
  }

  BackendReply send(const ChatRequest& request) override {
    std::lock_guard lock(mu_);
    const std::string& prompt = request.prompt();
    for (const auto& r : rules_) {
      if (std::regex_search(prompt, r.pattern)) return {r.reply, r.truncated};
    }
    return {default_reply(prompt), false};
  }
  std::string kind() const override { return "scripted"; }

  /// Diagram text the scripted model returns for a diagram request.
  static std::string sample_diagram(DiagramKind kind) {
    switch (kind) {
      case DiagramKind::UseCase:
        return "graph LR\n    A((Visitor))\n    B([Explore Exhibits])\n    A -->|explores| B";
      case DiagramKind::ClassModel:
        return "classDiagram\n    class Visitor {\n        +int id\n        +move()\n    }\n"
               "    class ArtificialLab {\n        +Visitor[] visitors\n        +summaryStatistics()\n    }";
      case DiagramKind::StateMachine:
        return "%% Name: Visitor\nstateDiagram-v2\n    [*] --> Exploring\n    Exploring --> [*] : leaves\n"
               "    note left of Exploring : Visitor explores the room";
      case DiagramKind::Sequence:
        return "sequenceDiagram\n    actor TheVisitor\n    participant TheScreen\n    note over TheVisitor : Explore Exhibits\n"
               "    TheVisitor->>+TheScreen: approach\n    TheScreen-->>-TheVisitor: show content";
    }
    return {};
  }

 private:
  static DiagramKind kind_from_key(const std::string& key) {
    if (key.find("Class") != std::string::npos) return DiagramKind::ClassModel;
    if (key.find("StateMachine") != std::string::npos) return DiagramKind::StateMachine;
    if (key.find("Sequence") != std::string::npos) return DiagramKind::Sequence;
    return DiagramKind::UseCase;
  }

  std::string default_reply(const std::string& prompt) {
    script::PromptChain chain;
    try {
      chain = script::parse_chain(prompt);
    } catch (const Error&) {
      return "Acknowledged.";
    }
    std::string out;
    std::optional<DiagramKind> diagram;
    bool ack = chain.ends_with_ack();
    for (const auto* d : chain.directives()) {
      if (auto dr = d->as<script::DiagramRequest>()) diagram = dr->kind;
      if (auto m = d->as<script::Memorise>()) {
        std::string value;
        if (m->literal) value = *m->literal;
        else if (diagram || m->key.name.find("mermaid") != std::string::npos)
          value = "\n" + sample_diagram(diagram.value_or(kind_from_key(m->key.name)));
        else value = fmt::format("Synthetic {} for {}", m->description, m->key.name);
        memory_[m->key.name] = value;
        if (!ack) out += fmt::format("Memorised {} {{{}}}: {}\n\n", m->description, m->key.name, value);
      } else if (auto l = d->as<script::ListKey>()) {
        if (ack) continue;
        auto it = memory_.find(l->key.name);
        out += fmt::format("{}: {}\n\n", l->key.name, it == memory_.end() ? "(not memorised)" : it->second);
      }
      if (d->updates && !d->is<script::Memorise>()) {
        auto& v = memory_[d->updates->name];
        v = v.empty() ? "Updated value" : v + " (updated)";
        out += fmt::format("Memorised {{{}}}: {}\n\n", d->updates->name, v);
      }
    }
    if (ack) return "Yes";
    if (out.empty()) return "Acknowledged.";
    while (!out.empty() && out.back() == '\n') out.pop_back();
    return out;
  }

  std::vector<Rule> rules_;
  std::map<std::string, std::string> memory_;
  std::mutex mu_;
};

/// Forwards to an inner backend and records each exchange as a fixture entry.
class RecordingBackend : public Backend {
 public:
  explicit RecordingBackend(std::shared_ptr<Backend> inner) : inner_(std::move(inner)) {}

  BackendReply send(const ChatRequest& request) override {
    BackendReply r = inner_->send(request);
    std::lock_guard lock(mu_);
    entries_.push_back(make_entry(entries_.size(), request.prompt(), r.text, r.truncated, "recorded"));
    return r;
  }
  std::string kind() const override { return inner_->kind(); }

  std::vector<FixtureEntry> entries() const {
    std::lock_guard lock(mu_);
    return entries_;
  }

 private:
  std::shared_ptr<Backend> inner_;
  std::vector<FixtureEntry> entries_;
  mutable std::mutex mu_;
};

}  // namespace eabss::gateway
