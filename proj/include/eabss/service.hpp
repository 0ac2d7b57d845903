#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include <fmt/chrono.h>
#include <httplib.h>
#include <nlohmann/json.hpp>

#include "eabss/backends.hpp"
#include "eabss/report.hpp"
#include "eabss/session.hpp"

namespace eabss::service {

using json = nlohmann::json;

struct ServiceConfig {
  std::string host = "127.0.0.1";
  int port = 8080;
  /// Base directory for relative script, case and fixture paths.
  std::string root;
  /// When set, each session's event log is saved here after every change.
  std::string log_dir;
  std::function<std::shared_ptr<gateway::Backend>(const session::BackendDescriptor&)> backend_factory;
  gateway::Sleeper sleeper = gateway::real_sleeper();
  /// Interval between keep-alive comments on an idle event stream.
  std::chrono::milliseconds heartbeat{10000};
};

struct ApiResponse {
  int status = 200;
  std::string body;
  std::string content_type = "application/json";

  json json_body() const { return json::parse(body); }
};

inline ApiResponse reply(int status, const json& body) { return {status, body.dump(), "application/json"}; }

inline ApiResponse error_reply(int status, std::string_view code, std::string_view message, json extra = json::object()) {
  extra["code"] = code;
  extra["message"] = message;
  return reply(status, extra);
}

inline int http_status(ErrorCode c) {
  switch (c) {
    case ErrorCode::UnknownKey: return 404;
    case ErrorCode::InvalidInState:
    case ErrorCode::MissingSection: return 409;
    case ErrorCode::NetworkFailure:
    case ErrorCode::RateLimited:
    case ErrorCode::AuthFailure:
    case ErrorCode::TruncationUnresolved:
    case ErrorCode::ReplayMismatch: return 502;
    default: return 400;
  }
}

inline ApiResponse error_reply(const Error& e) { return error_reply(http_status(e.code()), to_string(e.code()), e.detail()); }

/// One hosted session. Mutations go through `owner`; readers use the
/// published snapshot and never wait on a gateway call.
class HostedSession {
 public:
  HostedSession(std::string id, session::SessionState state, std::shared_ptr<gateway::Backend> backend,
                gateway::Sleeper sleeper, std::string log_path)
      : id_(std::move(id)),
        created_at_(fmt::format("{:%Y-%m-%dT%H:%M:%SZ}", fmt::gmtime(std::time(nullptr)))),
        state_(std::move(state)),
        gw_(std::move(backend), std::move(sleeper)),
        log_path_(std::move(log_path)) {
    publish();
  }
  ~HostedSession() { stop(); }
  HostedSession(const HostedSession&) = delete;
  HostedSession& operator=(const HostedSession&) = delete;

  const std::string& id() const { return id_; }
  const std::string& created_at() const { return created_at_; }

  std::shared_ptr<const session::SessionState> snapshot() const {
    std::lock_guard lock(view_mu_);
    return snap_;
  }
  session::Status status() const { return snapshot()->status; }
  bool pause_requested() const { return pause_requested_; }

  /// Events with seq > after, waiting up to `timeout` for at least one.
  std::vector<session::Event> events_after(std::optional<std::size_t> after, std::chrono::milliseconds timeout) const {
    std::unique_lock lock(view_mu_);
    std::size_t from = after ? *after + 1 : 0;
    cv_.wait_for(lock, timeout, [&] { return snap_->log.size() > from || stopping_; });
    if (from >= snap_->log.size()) return {};
    return {snap_->log.begin() + static_cast<long>(from), snap_->log.end()};
  }

  /// Blocks until the session leaves Running with no worker active.
  bool wait_idle(std::chrono::milliseconds timeout) const {
    std::unique_lock lock(view_mu_);
    return cv_.wait_for(lock, timeout, [&] { return (snap_->status != session::Status::Running && !busy_) || stopping_; });
  }

  /// Runs `f` as the session's owner, then publishes the result.
  template <typename F>
  auto mutate(F&& f) {
    std::lock_guard lock(owner_);
    struct Publish {
      HostedSession* self;
      ~Publish() { self->publish(); }
    } guard{this};
    return f(state_, gw_);
  }

  /// Starts the worker that steps a Running session until it pauses, fails
  /// or completes.
  void kick() {
    std::lock_guard lock(worker_mu_);
    if (busy_) return;
    if (worker_.joinable()) worker_.join();
    {
      std::lock_guard v(view_mu_);
      busy_ = true;
    }
    worker_ = std::thread([this] { work(); });
  }

  void request_pause() { pause_requested_ = true; }

  void stop() {
    {
      std::lock_guard v(view_mu_);
      stopping_ = true;
    }
    cv_.notify_all();
    std::lock_guard lock(worker_mu_);
    if (worker_.joinable()) worker_.join();
  }

 private:
  void work() {
    for (;;) {
      bool more = mutate([&](session::SessionState& s, gateway::Gateway& gw) {
        if (stopping_ || s.status != session::Status::Running) return false;
        if (pause_requested_) {
          session::pause(s);
          pause_requested_ = false;
          return false;
        }
        try {
          session::step(s, gw);
        } catch (const Error& e) {
          auto f = session::detail::failure_of(e);
          if (s.status == session::Status::Running) session::set_status(s, session::Status::Failed, "step error", &f);
          return false;
        }
        return s.status == session::Status::Running;
      });
      if (!more) break;
    }
    {
      std::lock_guard v(view_mu_);
      busy_ = false;
    }
    cv_.notify_all();
  }

  void publish() {
    auto snap = std::make_shared<const session::SessionState>(state_);
    {
      std::lock_guard lock(view_mu_);
      snap_ = std::move(snap);
    }
    cv_.notify_all();
    if (!log_path_.empty()) session::save_log(log_path_, state_);
  }

  std::string id_;
  std::string created_at_;
  std::mutex owner_;
  session::SessionState state_;
  gateway::Gateway gw_;
  std::string log_path_;

  mutable std::mutex view_mu_;
  mutable std::condition_variable cv_;
  std::shared_ptr<const session::SessionState> snap_;
  bool busy_ = false;
  std::atomic<bool> stopping_{false};
  std::atomic<bool> pause_requested_{false};

  std::mutex worker_mu_;
  std::thread worker_;
};

inline json key_json(const session::SessionState& s, const session::KeyRecord& r) {
  json j = session::to_json(r);
  std::size_t tail = s.transcript.empty() ? 0 : s.transcript.size() - 1;
  j["staleness"] = tail >= r.last_refreshed_turn ? tail - r.last_refreshed_turn : 0;
  bool in_context = false;
  for (const auto& t : s.context.turns())
    if (t.index == r.last_refreshed_turn) in_context = true;
  j["in_context"] = in_context;
  return j;
}

/// Transport-independent API. Each method maps to one endpoint.
class SessionService {
 public:
  explicit SessionService(ServiceConfig cfg = {}) : cfg_(std::move(cfg)) {
    if (!cfg_.backend_factory) {
      std::string base = cfg_.root;
      cfg_.backend_factory = [base](const session::BackendDescriptor& b) { return make_backend(b, base); };
    }
  }
  ~SessionService() { shutdown(); }

  const ServiceConfig& config() const { return cfg_; }

  void shutdown() {
    std::vector<std::shared_ptr<HostedSession>> all;
    {
      std::lock_guard lock(mu_);
      for (auto& [id, s] : sessions_) all.push_back(s);
    }
    for (auto& s : all) s->stop();
  }

  /// POST /sessions
  ApiResponse create(const json& body) {
    if (!body.is_object()) return error_reply(400, "InvalidBody", "body must be a JSON object");
    std::string token = body.value("client_token", "");
    std::unique_lock lock(mu_, std::defer_lock);
    if (!token.empty()) {
      lock.lock();
      if (auto it = tokens_.find(token); it != tokens_.end())
        return error_reply(409, "DuplicateToken", "client_token already used", json{{"id", it->second}});
      lock.unlock();
    }
    std::shared_ptr<HostedSession> hosted;
    try {
      std::string src;
      if (body.contains("script_text")) src = body.at("script_text").get<std::string>();
      else if (body.contains("script")) src = config::read_file(resolve_path(cfg_.root, body.at("script").get<std::string>()));
      else return error_reply(400, "MissingScript", "body needs 'script' (path) or 'script_text'");
      auto doc = script::parse_script(src);
      if (body.contains("case")) {
        const json& c = body.at("case");
        doc = script::bind_case(doc, c.is_string() ? config::load_case(resolve_path(cfg_.root, c.get<std::string>()))
                                                   : config::case_from_json(c));
      }
      auto backend = session::backend_from_json(body.value("backend", json{{"kind", "scripted"}}));
      gateway::GenerationParams params;
      if (body.contains("params")) params = body.at("params").get<gateway::GenerationParams>();
      auto options = session::options_from_json(body.value("options", json::object()));
      options.start_paused = true;
      auto impl = cfg_.backend_factory(backend);
      auto state = session::start_session(doc, backend, params, options);

      lock.lock();
      if (!token.empty() && tokens_.count(token))
        return error_reply(409, "DuplicateToken", "client_token already used", json{{"id", tokens_.at(token)}});
      std::string id = fmt::format("s{}", ++counter_);
      std::string log_path = cfg_.log_dir.empty() ? "" : resolve_path(cfg_.log_dir, id + ".jsonl");
      hosted = std::make_shared<HostedSession>(id, std::move(state), std::move(impl), cfg_.sleeper, log_path);
      sessions_[id] = hosted;
      if (!token.empty()) tokens_[token] = id;
    } catch (const Error& e) {
      return error_reply(400, to_string(e.code()), e.detail());
    } catch (const json::exception& e) {
      return error_reply(400, "InvalidBody", e.what());
    }
    return reply(201, handle_json(*hosted));
  }

  /// GET /sessions
  ApiResponse list() const {
    json arr = json::array();
    std::lock_guard lock(mu_);
    for (const auto& [id, s] : sessions_) arr.push_back(handle_json(*s));
    return reply(200, arr);
  }

  /// GET /sessions/{id}
  ApiResponse get(const std::string& id) const {
    auto s = find(id);
    if (!s) return not_found(id);
    return reply(200, handle_json(*s));
  }

  /// GET /sessions/{id}/keys
  ApiResponse keys(const std::string& id) const {
    auto s = find(id);
    if (!s) return not_found(id);
    auto snap = s->snapshot();
    json arr = json::array();
    for (const auto& [name, r] : snap->keys.records()) arr.push_back(key_json(*snap, r));
    return reply(200, arr);
  }

  /// GET /sessions/{id}/events/poll?after=k
  ApiResponse poll(const std::string& id, std::optional<std::size_t> after, std::chrono::milliseconds wait = {}) const {
    auto s = find(id);
    if (!s) return not_found(id);
    json arr = json::array();
    for (const auto& e : s->events_after(after, wait)) arr.push_back(session::to_json(e));
    return reply(200, json{{"events", arr}, {"status", std::string(session::to_string(s->status()))}});
  }

  /// GET /sessions/{id}/diagrams
  ApiResponse diagrams(const std::string& id) const {
    auto s = find(id);
    if (!s) return not_found(id);
    auto doc = report::assemble_report(*s->snapshot(), {true});
    json arr = json::array();
    for (const auto& sec : doc.sections)
      for (const auto& item : sec.items)
        for (const auto& d : item.diagrams) {
          json diags = json::array();
          for (const auto& x : d.diagnostics) diags.push_back(diagram::to_json(x));
          arr.push_back({{"key", item.key},
                         {"kind", std::string(to_string(d.kind))},
                         {"source", d.source},
                         {"text", d.text},
                         {"valid", d.valid},
                         {"diagnostics", diags},
                         {"repair", diagram::to_json(d.repair)}});
        }
    return reply(200, arr);
  }

  /// GET /sessions/{id}/report?format=md|json[&partial=1]
  ApiResponse report(const std::string& id, const std::string& format, bool partial) const {
    auto s = find(id);
    if (!s) return not_found(id);
    try {
      auto f = report::format_from_string(format.empty() ? "md" : format);
      auto doc = report::assemble_report(*s->snapshot(), {partial});
      return {200, report::render(doc, f), f == report::Format::Markdown ? "text/markdown; charset=utf-8" : "application/json"};
    } catch (const Error& e) {
      return error_reply(e);
    }
  }

  /// POST /sessions/{id}/intervene
  ApiResponse intervene(const std::string& id, const json& body) {
    auto s = find(id);
    if (!s) return not_found(id);
    if (s->status() != session::Status::AwaitingIntervention)
      return error_reply(409, "InvalidInState",
                         fmt::format("intervention requires AwaitingIntervention, session is {}",
                                     session::to_string(s->status())));
    try {
      auto action = session::action_from_json(body);
      auto changed = s->mutate([&](session::SessionState& st, gateway::Gateway& gw) {
        std::map<std::string, int> before;
        for (const auto& [k, r] : st.keys.records()) before[k] = r.version;
        session::intervene(st, gw, action);
        json versions = json::object();
        for (const auto& [k, r] : st.keys.records())
          if (!before.count(k) || before[k] != r.version) versions[k] = r.version;
        return versions;
      });
      if (s->status() == session::Status::Running) s->kick();
      return reply(200, json{{"id", id}, {"status", std::string(session::to_string(s->status()))}, {"keys", changed}});
    } catch (const Error& e) {
      return error_reply(e);
    } catch (const json::exception& e) {
      return error_reply(400, "InvalidBody", e.what());
    }
  }

  /// POST /sessions/{id}/pause. Waits for the step in flight to finish.
  ApiResponse pause(const std::string& id, std::chrono::milliseconds wait = std::chrono::seconds(60)) {
    auto s = find(id);
    if (!s) return not_found(id);
    if (s->status() != session::Status::Running)
      return error_reply(409, "InvalidInState", fmt::format("cannot pause while {}", session::to_string(s->status())));
    s->request_pause();
    s->kick();
    s->wait_idle(wait);
    return reply(200, handle_json(*s));
  }

  /// POST /sessions/{id}/resume: Failed -> Running, retrying the failed chain.
  ApiResponse resume(const std::string& id) {
    auto s = find(id);
    if (!s) return not_found(id);
    try {
      s->mutate([](session::SessionState& st, gateway::Gateway&) { session::resume(st); });
      s->kick();
      return reply(200, handle_json(*s));
    } catch (const Error& e) {
      return error_reply(e);
    }
  }

  std::shared_ptr<HostedSession> find(const std::string& id) const {
    std::lock_guard lock(mu_);
    auto it = sessions_.find(id);
    return it == sessions_.end() ? nullptr : it->second;
  }

 private:
  static ApiResponse not_found(const std::string& id) {
    return error_reply(404, "UnknownSession", fmt::format("no session '{}'", id));
  }

  static json handle_json(const HostedSession& h) {
    auto snap = h.snapshot();
    json j{{"id", h.id()},
           {"created_at", h.created_at()},
           {"status", std::string(session::to_string(snap->status))},
           {"cursor", {{"segment", snap->cursor.segment}, {"chain", snap->cursor.chain}}},
           {"events", snap->log.size()},
           {"exchanges", snap->exchanges.size()},
           {"backend_calls", snap->backend_calls},
           {"chain_count", snap->script.chain_count()},
           {"pause_requested", h.pause_requested()}};
    if (const auto* c = snap->current_chain()) j["pending_chain"] = c->raw_text;
    if (snap->failure) j["failure"] = {{"code", snap->failure->code}, {"message", snap->failure->message}};
    return j;
  }

  ServiceConfig cfg_;
  mutable std::mutex mu_;
  std::map<std::string, std::shared_ptr<HostedSession>> sessions_;
  std::map<std::string, std::string> tokens_;
  std::size_t counter_ = 0;
};

inline std::string sse_frame(const session::Event& e) {
  return fmt::format("id: {}\nevent: {}\ndata: {}\n\n", e.seq, e.type, session::to_json(e).dump());
}

/// HTTP front end over a SessionService.
class HttpServer {
 public:
  explicit HttpServer(SessionService& svc) : svc_(svc) { routes(); }
  ~HttpServer() { stop(); }

  /// Binds to host:port (port 0 picks a free one) and returns the port.
  int bind(const std::string& host, int port) {
    int p = port == 0 ? srv_.bind_to_any_port(host) : (srv_.bind_to_port(host, port) ? port : -1);
    if (p < 0) throw Error(ErrorCode::IOFailure, fmt::format("cannot bind {}:{}", host, port));
    return p;
  }
  void listen() { srv_.listen_after_bind(); }

  /// Binds and serves on a background thread.
  int start(const std::string& host, int port) {
    int p = bind(host, port);
    thread_ = std::thread([this] { listen(); });
    srv_.wait_until_ready();
    return p;
  }

  void stop() {
    stopping_ = true;
    svc_.shutdown();
    srv_.stop();
    if (thread_.joinable()) thread_.join();
  }

 private:
  static void send(httplib::Response& res, const ApiResponse& r) {
    res.status = r.status;
    res.set_content(r.body, r.content_type);
  }

  static std::optional<std::size_t> after_param(const httplib::Request& req) {
    std::string v;
    if (req.has_header("Last-Event-ID")) v = req.get_header_value("Last-Event-ID");
    else if (req.has_param("after")) v = req.get_param_value("after");
    if (v.empty()) return std::nullopt;
    try {
      return static_cast<std::size_t>(std::stoull(v));
    } catch (const std::exception&) {
      return std::nullopt;
    }
  }

  static json body_json(const httplib::Request& req) {
    if (req.body.empty()) return json::object();
    return json::parse(req.body);
  }

  void routes() {
    static const std::string id = R"re(/sessions/([A-Za-z0-9_-]+))re";
    srv_.Post("/sessions", [this](const httplib::Request& req, httplib::Response& res) {
      try {
        send(res, svc_.create(body_json(req)));
      } catch (const json::exception& e) {
        send(res, error_reply(400, "InvalidBody", e.what()));
      }
    });
    srv_.Get("/sessions", [this](const httplib::Request&, httplib::Response& res) { send(res, svc_.list()); });
    srv_.Get(id, [this](const httplib::Request& req, httplib::Response& res) { send(res, svc_.get(req.matches[1])); });
    srv_.Get(id + "/keys", [this](const httplib::Request& req, httplib::Response& res) {
      send(res, svc_.keys(req.matches[1]));
    });
    srv_.Get(id + "/diagrams", [this](const httplib::Request& req, httplib::Response& res) {
      send(res, svc_.diagrams(req.matches[1]));
    });
    srv_.Get(id + "/report", [this](const httplib::Request& req, httplib::Response& res) {
      bool partial = req.has_param("partial") && req.get_param_value("partial") != "0";
      send(res, svc_.report(req.matches[1], req.get_param_value("format"), partial));
    });
    srv_.Get(id + "/events/poll", [this](const httplib::Request& req, httplib::Response& res) {
      std::chrono::milliseconds wait{0};
      if (req.has_param("wait_ms")) wait = std::chrono::milliseconds(std::stol(req.get_param_value("wait_ms")));
      send(res, svc_.poll(req.matches[1], after_param(req), wait));
    });
    srv_.Get(id + "/events", [this](const httplib::Request& req, httplib::Response& res) { stream(req, res); });
    srv_.Post(id + "/intervene", [this](const httplib::Request& req, httplib::Response& res) {
      try {
        send(res, svc_.intervene(req.matches[1], body_json(req)));
      } catch (const json::exception& e) {
        send(res, error_reply(400, "InvalidBody", e.what()));
      }
    });
    srv_.Post(id + "/pause", [this](const httplib::Request& req, httplib::Response& res) {
      send(res, svc_.pause(req.matches[1]));
    });
    srv_.Post(id + "/resume", [this](const httplib::Request& req, httplib::Response& res) {
      send(res, svc_.resume(req.matches[1]));
    });
  }

  /// Server-sent events from the session log. Resumes after Last-Event-ID
  /// (or ?after=k); ends once a Complete session has sent its last event,
  /// or immediately after the backlog with ?follow=0.
  void stream(const httplib::Request& req, httplib::Response& res) {
    auto hosted = svc_.find(req.matches[1]);
    if (!hosted) {
      send(res, error_reply(404, "UnknownSession", fmt::format("no session '{}'", req.matches[1].str())));
      return;
    }
    bool follow = !(req.has_param("follow") && req.get_param_value("follow") == "0");
    auto last = std::make_shared<std::optional<std::size_t>>(after_param(req));
    auto heartbeat = svc_.config().heartbeat;
    res.set_header("Cache-Control", "no-cache");
    res.set_chunked_content_provider(
        "text/event-stream", [this, hosted, last, follow, heartbeat](std::size_t, httplib::DataSink& sink) {
          if (stopping_) {
            sink.done();
            return true;
          }
          auto events = hosted->events_after(*last, follow ? heartbeat : std::chrono::milliseconds(0));
          if (events.empty()) {
            auto snap = hosted->snapshot();
            std::size_t sent = *last ? **last + 1 : 0;
            if (!follow || (snap->status == session::Status::Complete && sent >= snap->log.size())) {
              sink.done();
              return true;
            }
            static const std::string ping = ": keep-alive\n\n";
            return sink.write(ping.data(), ping.size());
          }
          for (const auto& e : events) {
            auto frame = sse_frame(e);
            if (!sink.write(frame.data(), frame.size())) return false;
            *last = e.seq;
          }
          return true;
        });
  }

  SessionService& svc_;
  httplib::Server srv_;
  std::thread thread_;
  std::atomic<bool> stopping_{false};
};

}  // namespace eabss::service
