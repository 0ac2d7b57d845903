#include <gtest/gtest.h>

#include <condition_variable>
#include <deque>
#include <future>

#include "eabss/backends.hpp"
#include "eabss/service.hpp"
#include "test_support.hpp"

using namespace eabss;
using namespace eabss::service;
using namespace std::chrono_literals;
using eabss::testing::data_path;

namespace {

// Replies from a queue; while held, calls block until released.
class GateBackend : public gateway::Backend {
 public:
  explicit GateBackend(std::vector<std::string> replies) : replies_(replies.begin(), replies.end()) {}

  gateway::BackendReply send(const gateway::ChatRequest& r) override {
    std::unique_lock lock(mu_);
    prompts.push_back(r.prompt());
    ++entered_;
    cv_.notify_all();
    cv_.wait(lock, [&] { return !held_; });
    if (replies_.empty()) throw gateway::GatewayError(ErrorCode::NetworkFailure, "no more replies");
    auto next = replies_.front();
    replies_.pop_front();
    return {next, false};
  }
  std::string kind() const override { return "gate"; }

  void hold() {
    std::lock_guard lock(mu_);
    held_ = true;
  }
  void release() {
    {
      std::lock_guard lock(mu_);
      held_ = false;
    }
    cv_.notify_all();
  }
  bool wait_entered(int n, std::chrono::milliseconds t) {
    std::unique_lock lock(mu_);
    return cv_.wait_for(lock, t, [&] { return entered_ >= n; });
  }

  std::vector<std::string> prompts;

 private:
  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<std::string> replies_;
  bool held_ = false;
  int entered_ = 0;
};

const char* kActors =
    "A\n\n- Define 3 actors. Memorise these actors as {key-potentialUMLActors}.\n"
    "- [intervene] Consider the memorised key-potentialUMLActors. Memorise the final actors as {key-umlActors}.\n";

ServiceConfig data_config() {
  ServiceConfig c;
  c.root = EABSS_DATA_DIR;
  c.sleeper = [](std::chrono::milliseconds) {};
  return c;
}

json museum_body() {
  return json{{"script", "scripts/eabss_adaptive_architecture.txt"},
              {"case", "cases/museum.toml"},
              {"backend", {{"kind", "replay"}, {"fixture_path", "fixtures/museum_replay.jsonl"}}}};
}

std::string created_id(const ApiResponse& r) { return r.json_body().at("id").get<std::string>(); }

std::string status_of(const SessionService& svc, const std::string& id) {
  return svc.get(id).json_body().at("status").get<std::string>();
}

void wait_idle(SessionService& svc, const std::string& id) { ASSERT_TRUE(svc.find(id)->wait_idle(20s)); }

}  // namespace

TEST(Service, CreateValidatesTheBody) {
  SessionService svc(data_config());
  EXPECT_EQ(svc.create(json::array()).status, 400);
  auto missing = svc.create(json::object());
  EXPECT_EQ(missing.status, 400);
  EXPECT_EQ(missing.json_body().at("code"), "MissingScript");
  auto backend = museum_body();
  backend["backend"] = {{"kind", "oracle"}};
  EXPECT_EQ(svc.create(backend).json_body().at("code"), "ConfigError");
  EXPECT_EQ(svc.create(json{{"script", "scripts/absent.txt"}}).json_body().at("code"), "IOFailure");
  EXPECT_EQ(svc.create(json{{"script_text", ""}}).json_body().at("code"), "EmptyScript");
  auto budget = museum_body();
  budget["options"] = {{"budget_words", 0}};
  EXPECT_EQ(svc.create(budget).status, 400);
  EXPECT_EQ(svc.list().json_body().size(), 0u);
}

TEST(Service, CreateStartsAwaitingConfirmation) {
  SessionService svc(data_config());
  auto r = svc.create(museum_body());
  ASSERT_EQ(r.status, 201);
  auto j = r.json_body();
  EXPECT_EQ(j.at("status"), "AwaitingIntervention");
  EXPECT_EQ(j.at("chain_count"), 38);
  EXPECT_EQ(j.at("exchanges"), 0);
  EXPECT_TRUE(j.contains("pending_chain"));
}

TEST(Service, ClientTokenIsIdempotent) {
  SessionService svc(data_config());
  auto body = museum_body();
  body["client_token"] = "tab-1";
  auto first = svc.create(body);
  ASSERT_EQ(first.status, 201);
  auto again = svc.create(body);
  EXPECT_EQ(again.status, 409);
  EXPECT_EQ(again.json_body().at("id"), created_id(first));
  EXPECT_EQ(svc.list().json_body().size(), 1u);
}

TEST(Service, UnknownSessionIs404) {
  SessionService svc(data_config());
  for (const auto& r : {svc.get("nope"), svc.keys("nope"), svc.poll("nope", std::nullopt), svc.diagrams("nope"),
                        svc.report("nope", "md", false), svc.intervene("nope", {{"action", "approve"}}),
                        svc.pause("nope"), svc.resume("nope")}) {
    EXPECT_EQ(r.status, 404);
    EXPECT_EQ(r.json_body().at("code"), "UnknownSession");
  }
}

TEST(Service, MuseumReplayRunsToComplete) {
  SessionService svc(data_config());
  auto id = created_id(svc.create(museum_body()));
  EXPECT_EQ(svc.report(id, "md", false).status, 409);
  auto ok = svc.intervene(id, {{"action", "approve"}});
  ASSERT_EQ(ok.status, 200);
  wait_idle(svc, id);
  auto j = svc.get(id).json_body();
  EXPECT_EQ(j.at("status"), "Complete");
  EXPECT_EQ(j.at("exchanges"), 38);
  EXPECT_FALSE(j.contains("pending_chain"));

  auto keys = svc.keys(id).json_body();
  bool title = false;
  for (const auto& k : keys) {
    EXPECT_TRUE(k.contains("staleness"));
    EXPECT_TRUE(k.contains("in_context"));
    if (k.at("key") == "key-title") title = true;
  }
  EXPECT_TRUE(title);

  auto md = svc.report(id, "md", false);
  EXPECT_EQ(md.status, 200);
  EXPECT_EQ(md.content_type.rfind("text/markdown", 0), 0u);
  EXPECT_NE(md.body.find("# Adaptive Architecture"), std::string::npos);
  auto js = svc.report(id, "json", false);
  EXPECT_EQ(js.status, 200);
  EXPECT_EQ(js.json_body().at("schema_version"), 1);
  auto pdf = svc.report(id, "pdf", false);
  EXPECT_EQ(pdf.status, 400);
  EXPECT_EQ(pdf.json_body().at("code"), "UnknownFormat");

  auto diagrams = svc.diagrams(id).json_body();
  EXPECT_GE(diagrams.size(), 4u);
  for (const auto& d : diagrams) EXPECT_TRUE(d.at("valid").get<bool>()) << d.at("key");

  EXPECT_EQ(svc.intervene(id, {{"action", "approve"}}).status, 409);
  EXPECT_EQ(svc.pause(id).status, 409);
  EXPECT_EQ(svc.resume(id).status, 409);
}

TEST(Service, PollReturnsEventsAfterACursor) {
  SessionService svc(data_config());
  auto id = created_id(svc.create(museum_body()));
  svc.intervene(id, {{"action", "approve"}});
  wait_idle(svc, id);
  auto all = svc.poll(id, std::nullopt).json_body().at("events");
  ASSERT_GT(all.size(), 38u);
  for (std::size_t i = 0; i < all.size(); ++i) EXPECT_EQ(all[i].at("seq"), i);
  auto tail = svc.poll(id, 10).json_body().at("events");
  EXPECT_EQ(tail.size(), all.size() - 11);
  EXPECT_EQ(tail[0].at("seq"), 11);
  auto t0 = std::chrono::steady_clock::now();
  auto none = svc.poll(id, all.size() - 1, 100ms).json_body();
  EXPECT_TRUE(none.at("events").empty());
  EXPECT_GE(std::chrono::steady_clock::now() - t0, 90ms);
  EXPECT_EQ(none.at("status"), "Complete");
}

TEST(Service, RefineIncrementsTheKeyVersion) {
  auto backend = std::make_shared<GateBackend>(std::vector<std::string>{
      "{key-potentialUMLActors}: Visitor, Curator, Cleaner", "{key-potentialUMLActors}: Visitor, Curator",
      "{key-umlActors}: Visitor, Curator"});
  auto cfg = data_config();
  cfg.backend_factory = [backend](const session::BackendDescriptor&) { return backend; };
  SessionService svc(cfg);
  auto id = created_id(svc.create({{"script_text", kActors}}));
  svc.intervene(id, {{"action", "approve"}});
  wait_idle(svc, id);
  ASSERT_EQ(status_of(svc, id), "AwaitingIntervention");

  auto bad = svc.intervene(id, {{"action", "dance"}});
  EXPECT_EQ(bad.status, 400);
  EXPECT_EQ(bad.json_body().at("code"), "InvalidAction");

  auto r = svc.intervene(id, {{"action", "refine"}, {"kind", "remove"}, {"target", "Cleaner"}, {"key", "key-potentialUMLActors"}});
  ASSERT_EQ(r.status, 200) << r.body;
  EXPECT_EQ(r.json_body().at("keys").at("key-potentialUMLActors"), 2);
  EXPECT_EQ(r.json_body().at("status"), "AwaitingIntervention");
  EXPECT_EQ(backend->prompts.back(), "Remove Cleaner. Update the memorised key-potentialUMLActors.");

  svc.intervene(id, {{"action", "approve"}});
  wait_idle(svc, id);
  EXPECT_EQ(status_of(svc, id), "Complete");
  for (const auto& k : svc.keys(id).json_body())
    if (k.at("key") == "key-umlActors") EXPECT_EQ(k.at("value"), "Visitor, Curator");
}

TEST(Service, ReadsStayResponsiveWhileABackendCallBlocks) {
  auto backend = std::make_shared<GateBackend>(std::vector<std::string>{"{key-potentialUMLActors}: Visitor"});
  auto cfg = data_config();
  cfg.backend_factory = [backend](const session::BackendDescriptor&) { return backend; };
  SessionService svc(cfg);
  auto id = created_id(svc.create({{"script_text", kActors}}));
  backend->hold();
  svc.intervene(id, {{"action", "approve"}});
  ASSERT_TRUE(backend->wait_entered(1, 5s));

  auto t0 = std::chrono::steady_clock::now();
  EXPECT_EQ(status_of(svc, id), "Running");
  EXPECT_EQ(svc.keys(id).status, 200);
  EXPECT_EQ(svc.poll(id, std::nullopt).status, 200);
  EXPECT_EQ(svc.list().status, 200);
  EXPECT_LT(std::chrono::steady_clock::now() - t0, 500ms);

  // Pause waits for the call in flight, then stops before the next chain.
  auto paused = std::async(std::launch::async, [&] { return svc.pause(id); });
  EXPECT_EQ(paused.wait_for(100ms), std::future_status::timeout);
  backend->release();
  auto p = paused.get();
  ASSERT_EQ(p.status, 200);
  EXPECT_EQ(p.json_body().at("status"), "AwaitingIntervention");
  EXPECT_EQ(p.json_body().at("exchanges"), 1);
}

TEST(Service, GatewayFailureThenResume) {
  auto backend = std::make_shared<GateBackend>(std::vector<std::string>{});
  auto cfg = data_config();
  cfg.backend_factory = [backend](const session::BackendDescriptor&) { return backend; };
  SessionService svc(cfg);
  auto id = created_id(svc.create({{"script_text", kActors}}));
  svc.intervene(id, {{"action", "approve"}});
  wait_idle(svc, id);
  auto j = svc.get(id).json_body();
  EXPECT_EQ(j.at("status"), "Failed");
  EXPECT_EQ(j.at("failure").at("code"), "NetworkFailure");
  auto r = svc.resume(id);
  EXPECT_EQ(r.status, 200);
  wait_idle(svc, id);
  EXPECT_EQ(status_of(svc, id), "Failed");
}

TEST(Service, EventLogIsSavedAndFolds) {
  eabss::testing::TempDir dir;
  auto cfg = data_config();
  cfg.log_dir = dir.path().string();
  SessionService svc(cfg);
  auto id = created_id(svc.create(museum_body()));
  svc.intervene(id, {{"action", "approve"}});
  wait_idle(svc, id);
  auto folded = session::load_log(dir.file(id + ".jsonl"));
  EXPECT_EQ(folded.status, session::Status::Complete);
  EXPECT_EQ(folded.keys, svc.find(id)->snapshot()->keys);
}

// ---------------------------------------------------------------------------
// HTTP

namespace {

struct Frame {
  std::size_t id;
  std::string event;
  json data;
};

std::vector<Frame> parse_sse(const std::string& body) {
  std::vector<Frame> out;
  Frame cur{};
  for (const auto& line : text::split_lines(body)) {
    if (line.rfind("id: ", 0) == 0) cur.id = std::stoul(line.substr(4));
    else if (line.rfind("event: ", 0) == 0) cur.event = line.substr(7);
    else if (line.rfind("data: ", 0) == 0) cur.data = json::parse(line.substr(6));
    else if (line.empty() && !cur.event.empty()) {
      out.push_back(cur);
      cur = {};
    }
  }
  return out;
}

}  // namespace

TEST(Http, LoopbackSessionLifecycle) {
  SessionService svc(data_config());
  HttpServer server(svc);
  int port = server.start("127.0.0.1", 0);
  httplib::Client cli("127.0.0.1", port);
  cli.set_read_timeout(20, 0);

  auto created = cli.Post("/sessions", museum_body().dump(), "application/json");
  ASSERT_TRUE(created);
  ASSERT_EQ(created->status, 201);
  auto id = json::parse(created->body).at("id").get<std::string>();

  auto bad = cli.Post("/sessions", "{not json", "application/json");
  ASSERT_TRUE(bad);
  EXPECT_EQ(bad->status, 400);
  EXPECT_EQ(json::parse(bad->body).at("code"), "InvalidBody");

  auto missing = cli.Get("/sessions/zzz");
  ASSERT_TRUE(missing);
  EXPECT_EQ(missing->status, 404);

  auto approved = cli.Post("/sessions/" + id + "/intervene", R"({"action":"approve"})", "application/json");
  ASSERT_TRUE(approved);
  EXPECT_EQ(approved->status, 200);
  ASSERT_TRUE(svc.find(id)->wait_idle(20s));

  auto got = cli.Get("/sessions/" + id);
  ASSERT_TRUE(got);
  EXPECT_EQ(json::parse(got->body).at("status"), "Complete");

  auto report = cli.Get("/sessions/" + id + "/report?format=md");
  ASSERT_TRUE(report);
  EXPECT_EQ(report->status, 200);
  EXPECT_NE(report->body.find("```mermaid"), std::string::npos);

  auto poll = cli.Get("/sessions/" + id + "/events/poll?after=3");
  ASSERT_TRUE(poll);
  EXPECT_EQ(json::parse(poll->body).at("events").at(0).at("seq"), 4);

  // Backlog only.
  auto sse = cli.Get("/sessions/" + id + "/events?follow=0");
  ASSERT_TRUE(sse);
  EXPECT_EQ(sse->get_header_value("Content-Type"), "text/event-stream");
  auto frames = parse_sse(sse->body);
  ASSERT_EQ(frames.size(), svc.find(id)->snapshot()->log.size());
  EXPECT_EQ(frames.front().event, "session_started");
  EXPECT_EQ(frames.back().data.at("type"), "status_change");
  for (std::size_t i = 0; i < frames.size(); ++i) EXPECT_EQ(frames[i].id, i);

  // Reconnect after an event id; a Complete session's stream ends by itself.
  auto resumed = cli.Get("/sessions/" + id + "/events", httplib::Headers{{"Last-Event-ID", "5"}});
  ASSERT_TRUE(resumed);
  auto rest = parse_sse(resumed->body);
  ASSERT_EQ(rest.size(), frames.size() - 6);
  EXPECT_EQ(rest.front().id, 6u);

  auto keys = cli.Get("/sessions/" + id + "/keys");
  ASSERT_TRUE(keys);
  EXPECT_TRUE(json::parse(keys->body).is_array());
  auto diagrams = cli.Get("/sessions/" + id + "/diagrams");
  ASSERT_TRUE(diagrams);
  EXPECT_FALSE(json::parse(diagrams->body).empty());
  auto list = cli.Get("/sessions");
  ASSERT_TRUE(list);
  EXPECT_EQ(json::parse(list->body).size(), 1u);
  server.stop();
}

TEST(Http, StreamFollowsALiveSession) {
  auto backend = std::make_shared<GateBackend>(std::vector<std::string>{
      "{key-potentialUMLActors}: Visitor", "{key-umlActors}: Visitor"});
  auto cfg = data_config();
  cfg.backend_factory = [backend](const session::BackendDescriptor&) { return backend; };
  cfg.heartbeat = 50ms;
  SessionService svc(cfg);
  HttpServer server(svc);
  int port = server.start("127.0.0.1", 0);
  auto id = created_id(svc.create({{"script_text", kActors}}));

  auto streamed = std::async(std::launch::async, [&] {
    httplib::Client cli("127.0.0.1", port);
    cli.set_read_timeout(20, 0);
    auto r = cli.Get("/sessions/" + id + "/events");
    return r ? r->body : std::string();
  });
  std::this_thread::sleep_for(100ms);
  svc.intervene(id, {{"action", "approve"}});
  ASSERT_TRUE(svc.find(id)->wait_idle(10s));
  svc.intervene(id, {{"action", "approve"}});
  ASSERT_TRUE(svc.find(id)->wait_idle(10s));
  ASSERT_EQ(status_of(svc, id), "Complete");
  ASSERT_EQ(streamed.wait_for(10s), std::future_status::ready);
  auto body = streamed.get();
  auto frames = parse_sse(body);
  ASSERT_EQ(frames.size(), svc.find(id)->snapshot()->log.size());
  EXPECT_NE(body.find(": keep-alive"), std::string::npos);
  server.stop();
}
