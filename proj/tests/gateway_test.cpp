#include <gtest/gtest.h>

#include <cstdlib>
#include <deque>
#include <functional>
#include <thread>

#include "eabss/backends.hpp"
#include "eabss/gateway.hpp"
#include "eabss/live_backend.hpp"
#include "test_support.hpp"

using namespace eabss;
using namespace eabss::gateway;
using eabss::testing::code_of;
using namespace std::chrono_literals;

namespace {

// Backend driven by a queue of canned outcomes; records every request.
class QueueBackend : public Backend {
 public:
  using Outcome = std::function<BackendReply()>;
  std::deque<Outcome> outcomes;
  std::vector<ChatRequest> seen;

  BackendReply send(const ChatRequest& r) override {
    seen.push_back(r);
    if (outcomes.empty()) throw GatewayError(ErrorCode::NetworkFailure, "queue empty");
    auto o = outcomes.front();
    outcomes.pop_front();
    return o();
  }
  std::string kind() const override { return "queue"; }

  void reply(std::string text, bool truncated = false) {
    outcomes.push_back([=] { return BackendReply{text, truncated}; });
  }
  void fail(ErrorCode code, std::chrono::milliseconds retry = 0ms) {
    outcomes.push_back([=]() -> BackendReply { throw GatewayError(code, "injected", retry); });
  }
};

ChatRequest request(const std::string& prompt, GenerationParams p = {}) {
  ChatRequest r;
  r.params = p;
  r.turns.push_back(ChatTurn::make(Author::User, prompt, 0));
  return r;
}

struct SleepLog {
  std::vector<std::chrono::milliseconds> waits;
  Sleeper sleeper() {
    return [this](std::chrono::milliseconds d) { waits.push_back(d); };
  }
};

// Sets an environment variable for the lifetime of the guard.
class EnvGuard {
 public:
  EnvGuard(const char* name, const char* value) : name_(name) {
    if (value) setenv(name, value, 1);
    else unsetenv(name);
  }
  ~EnvGuard() { unsetenv(name_); }

 private:
  const char* name_;
};

}  // namespace

TEST(Params, DefaultsAndBounds) {
  GenerationParams p;
  EXPECT_DOUBLE_EQ(p.temperature, 1.8);
  EXPECT_DOUBLE_EQ(p.top_p, 0.9);
  EXPECT_EQ(p.max_continuations, 3);
  EXPECT_NO_THROW(GenerationParams(0.0, 1.0));
  EXPECT_NO_THROW(GenerationParams(2.0, 0.01));
  EXPECT_EQ(code_of([] { GenerationParams(2.1, 0.9); }), ErrorCode::InvalidParams);
  EXPECT_EQ(code_of([] { GenerationParams(-0.1, 0.9); }), ErrorCode::InvalidParams);
  EXPECT_EQ(code_of([] { GenerationParams(1.0, 0.0); }), ErrorCode::InvalidParams);
  EXPECT_EQ(code_of([] { GenerationParams(1.0, 1.01); }), ErrorCode::InvalidParams);
  EXPECT_EQ(code_of([] { json{{"temperature", 3.0}, {"top_p", 0.9}}.get<GenerationParams>(); }), ErrorCode::InvalidParams);
  json j = GenerationParams(1.2, 0.5);
  EXPECT_EQ(j.get<GenerationParams>(), GenerationParams(1.2, 0.5));
}

TEST(Requests, ValidationAndWordCounts) {
  EXPECT_EQ(ChatTurn::make(Author::User, "  three  little words ").word_count, 3u);
  ChatRequest empty;
  EXPECT_EQ(code_of([&] { empty.validate(); }), ErrorCode::InvalidParams);
  ChatRequest last_assistant = request("hi");
  last_assistant.turns.push_back(ChatTurn::make(Author::Assistant, "hello", 1));
  EXPECT_EQ(code_of([&] { last_assistant.validate(); }), ErrorCode::InvalidParams);
}

TEST(Hashing, MatchesPublishedFnvVectors) {
  EXPECT_EQ(text::fnv1a_hex(""), "cbf29ce484222325");
  EXPECT_EQ(text::fnv1a_hex("a"), "af63dc4c8601ec8c");
  EXPECT_EQ(text::fnv1a_hex("foobar"), "85944171f73967e8");
  for (const char* s : {"", "Yes", "Define the aim.", "\xc3\xa9\n\t"})
    EXPECT_EQ(text::fnv1a_hex(s), eabss::testing::fnv1a_oracle(s));
}

TEST(Gateway, PassesParametersThroughUnchanged) {
  auto q = std::make_shared<QueueBackend>();
  q->reply("ok");
  Gateway gw(q, [](auto) {});
  EXPECT_EQ(gw.complete(request("hi", GenerationParams(0.3, 0.4, "m"))), "ok");
  ASSERT_EQ(q->seen.size(), 1u);
  EXPECT_EQ(q->seen[0].params, GenerationParams(0.3, 0.4, "m"));
}

TEST(Gateway, RetriesNetworkFailuresWithExponentialBackoff) {
  auto q = std::make_shared<QueueBackend>();
  q->fail(ErrorCode::NetworkFailure);
  q->fail(ErrorCode::NetworkFailure);
  q->reply("finally");
  SleepLog log;
  Gateway gw(q, log.sleeper());
  auto c = gw.complete_ex(request("hi"));
  EXPECT_EQ(c.text, "finally");
  EXPECT_EQ(c.calls, 1u);
  EXPECT_EQ(q->seen.size(), 3u);
  EXPECT_EQ(log.waits, (std::vector<std::chrono::milliseconds>{250ms, 500ms}));
}

TEST(Gateway, SurfacesNetworkFailureAfterThreeAttempts) {
  auto q = std::make_shared<QueueBackend>();
  for (int i = 0; i < 3; ++i) q->fail(ErrorCode::NetworkFailure);
  q->reply("too late");
  SleepLog log;
  Gateway gw(q, log.sleeper());
  EXPECT_EQ(code_of([&] { gw.complete(request("hi")); }), ErrorCode::NetworkFailure);
  EXPECT_EQ(q->seen.size(), 3u);
}

TEST(Gateway, RateLimitWaitsTheAdvertisedDelay) {
  auto q = std::make_shared<QueueBackend>();
  q->fail(ErrorCode::RateLimited, 1500ms);
  q->reply("ok");
  SleepLog log;
  Gateway gw(q, log.sleeper());
  EXPECT_EQ(gw.complete(request("hi")), "ok");
  EXPECT_EQ(log.waits, (std::vector<std::chrono::milliseconds>{1500ms}));
}

TEST(Gateway, AuthFailureIsNotRetried) {
  auto q = std::make_shared<QueueBackend>();
  q->fail(ErrorCode::AuthFailure);
  q->reply("never");
  Gateway gw(q, [](auto) {});
  EXPECT_EQ(code_of([&] { gw.complete(request("hi")); }), ErrorCode::AuthFailure);
  EXPECT_EQ(q->seen.size(), 1u);
}

TEST(Gateway, ContinuationsJoinWithoutDuplicatingTheSeam) {
  auto q = std::make_shared<QueueBackend>();
  q->reply("| Actor | Visitor |\n| Actor | Curat", true);
  q->reply("| Actor | Curator |\n| Misc | Lighting |");
  Gateway gw(q, [](auto) {});
  auto c = gw.complete_ex(request("table please"));
  EXPECT_EQ(c.text, "| Actor | Visitor |\n| Actor | Curator |\n| Misc | Lighting |");
  EXPECT_EQ(c.calls, 2u);
  ASSERT_EQ(q->seen.size(), 2u);
  const auto& follow = q->seen[1].turns;
  ASSERT_GE(follow.size(), 3u);
  EXPECT_EQ(follow[follow.size() - 2].author, Author::Assistant);
  EXPECT_EQ(follow.back().text, "continue");
}

TEST(Gateway, TruncationIsUnresolvedAfterTheContinuationLimit) {
  auto q = std::make_shared<QueueBackend>();
  for (int i = 0; i < 5; ++i) q->reply("part " + std::to_string(i), true);
  Gateway gw(q, [](auto) {});
  EXPECT_EQ(code_of([&] { gw.complete(request("long", GenerationParams(1.8, 0.9, "m", 2))); }),
            ErrorCode::TruncationUnresolved);
  EXPECT_EQ(q->seen.size(), 3u);
}

TEST(Gateway, JoinContinuationNeedsARealOverlap) {
  EXPECT_EQ(join_continuation("abc", "abd"), "abcabd");
  EXPECT_EQ(join_continuation("hello wonderful", "wonderful world"), "hello wonderful world");
  EXPECT_EQ(join_continuation("", "x"), "x");
}

TEST(Replay, AnswersExchangeKWithEntryK) {
  std::vector<FixtureEntry> f = {make_entry(0, "p0", "r0"), make_entry(1, "p1", "r1"), make_entry(2, "p2", "r2")};
  ReplayBackend rb(f);
  for (int k = 0; k < 3; ++k) EXPECT_EQ(rb.send(request("p" + std::to_string(k))).text, "r" + std::to_string(k));
  EXPECT_EQ(code_of([&] { rb.send(request("p3")); }), ErrorCode::ReplayMismatch);
}

TEST(Replay, EditedReplyFailsOnlyAtItsExchange) {
  std::vector<FixtureEntry> f = {make_entry(0, "p0", "r0"), make_entry(1, "p1", "r1"), make_entry(2, "p2", "r2")};
  f[2].reply = "tampered";
  ReplayBackend rb(f);
  EXPECT_EQ(rb.send(request("p0")).text, "r0");
  EXPECT_EQ(rb.send(request("p1")).text, "r1");
  try {
    rb.send(request("p2"));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ReplayMismatch);
    EXPECT_NE(e.detail().find("exchange 2"), std::string::npos);
  }
  ReplayBackend lax(f, false);
  lax.seek(2);
  EXPECT_EQ(lax.send(request("p2")).text, "tampered");
}

TEST(Replay, RequestHashAndIndexAreChecked) {
  ReplayBackend rb({make_entry(0, "expected", "r0")});
  EXPECT_EQ(code_of([&] { rb.send(request("different")); }), ErrorCode::ReplayMismatch);
  ReplayBackend gap({make_entry(1, "p", "r")});
  EXPECT_EQ(code_of([&] { gap.send(request("p")); }), ErrorCode::ReplayMismatch);
}

TEST(Replay, FixtureJsonlRoundTrips) {
  std::vector<FixtureEntry> f = {make_entry(0, "p0", "line\n\"two\"", true, "synthetic"), make_entry(1, "p1", "")};
  EXPECT_EQ(parse_fixture(fixture_jsonl(f)), f);
  EXPECT_TRUE(parse_fixture(fixture_jsonl({})).empty());
  EXPECT_EQ(code_of([] { parse_fixture("{not json}\n"); }), ErrorCode::IOFailure);
  eabss::testing::TempDir dir;
  write_fixture(dir.file("f.jsonl"), f);
  EXPECT_EQ(ReplayBackend::from_file(dir.file("f.jsonl"))->size(), 2u);
}

TEST(Replay, MuseumFixtureIsWellFormed) {
  auto f = parse_fixture(config::read_file(eabss::testing::data_path("fixtures/museum_replay.jsonl")));
  ASSERT_EQ(f.size(), 38u);
  std::size_t published = 0;
  for (std::size_t i = 0; i < f.size(); ++i) {
    EXPECT_EQ(f[i].index, i);
    EXPECT_EQ(f[i].reply_hash, text::fnv1a_hex(f[i].reply));
    EXPECT_TRUE(f[i].source == "published" || f[i].source == "synthetic") << f[i].source;
    published += f[i].source == "published";
  }
  EXPECT_GE(published, 1u);
}

TEST(Recording, RecordThenReplayReproducesReplies) {
  auto inner = std::make_shared<ScriptedBackend>();
  auto rec = std::make_shared<RecordingBackend>(inner);
  std::vector<std::string> prompts = {"Memorise \"A\" as {key-a}. Got it? Say \"yes\" or say \"no\".",
                                      "Define a goal. Memorise this goal as {key-goal}.", "List the memorised key-goal."};
  std::vector<std::string> replies;
  for (auto& p : prompts) replies.push_back(rec->send(request(p)).text);
  auto entries = rec->entries();
  ASSERT_EQ(entries.size(), 3u);
  ReplayBackend rb(parse_fixture(fixture_jsonl(entries)));
  for (std::size_t i = 0; i < prompts.size(); ++i) EXPECT_EQ(rb.send(request(prompts[i])).text, replies[i]);
}

TEST(Scripted, SilentChainsGetExactlyYes) {
  ScriptedBackend sb;
  EXPECT_EQ(sb.send(request("Memorise \"X\" as {key-x}. Got it? Say \"yes\" or say \"no\".")).text, "Yes");
  auto r = sb.send(request("Define the aim. Memorise this aim as {key-aim}. List the memorised key-aim."));
  EXPECT_NE(r.text.find("{key-aim}"), std::string::npos);
  EXPECT_EQ(sb.send(request("List the memorised key-x.")).text, "key-x: X");
}

TEST(Scripted, RulesWinAndLoadFromToml) {
  eabss::testing::TempDir dir;
  config::write_file(dir.file("rules.toml"), "[[rule]]\nmatch = 'hello'\nreply = 'No'\n[[rule]]\nmatch = 'long'\nreply = 'part'\ntruncated = true\n");
  ScriptedBackend sb(ScriptedBackend::load_rules(dir.file("rules.toml")));
  EXPECT_EQ(sb.send(request("HELLO there")).text, "No");
  EXPECT_TRUE(sb.send(request("a long one")).truncated);
  config::write_file(dir.file("bad.toml"), "[[rule]]\nmatch = '('\nreply = 'x'\n");
  EXPECT_EQ(code_of([&] { ScriptedBackend::load_rules(dir.file("bad.toml")); }), ErrorCode::ConfigError);
}

TEST(Scripted, SampleDiagramsCarryTheirHeaders) {
  EXPECT_EQ(ScriptedBackend::sample_diagram(DiagramKind::UseCase).rfind("graph LR", 0), 0u);
  EXPECT_EQ(ScriptedBackend::sample_diagram(DiagramKind::ClassModel).rfind("classDiagram", 0), 0u);
  EXPECT_NE(ScriptedBackend::sample_diagram(DiagramKind::StateMachine).find("stateDiagram-v2"), std::string::npos);
  EXPECT_EQ(ScriptedBackend::sample_diagram(DiagramKind::Sequence).rfind("sequenceDiagram", 0), 0u);
}

TEST(Live, WireBodyCarriesDefaultsAndRoles) {
  ChatRequest r;
  r.turns = {ChatTurn::make(Author::User, "hi", 0), ChatTurn::make(Author::Assistant, "hello", 1),
             ChatTurn::make(Author::User, "again", 2)};
  auto body = serialize_request(r);
  EXPECT_DOUBLE_EQ(body["temperature"].get<double>(), 1.8);
  EXPECT_DOUBLE_EQ(body["top_p"].get<double>(), 0.9);
  EXPECT_EQ(body["model"], "gpt-3.5-turbo");
  ASSERT_EQ(body["messages"].size(), 3u);
  EXPECT_EQ(body["messages"][1]["role"], "assistant");
  EXPECT_EQ(body["messages"][2]["content"], "again");
}

TEST(Live, MissingCredentialIsAnAuthFailure) {
  EnvGuard env("EABSS_TEST_MISSING_KEY", nullptr);
  LiveConfig cfg;
  cfg.credential_env = "EABSS_TEST_MISSING_KEY";
  EXPECT_EQ(code_of([&] { LiveBackend b(cfg); }), ErrorCode::AuthFailure);
  EnvGuard empty("EABSS_TEST_EMPTY_KEY", "");
  cfg.credential_env = "EABSS_TEST_EMPTY_KEY";
  EXPECT_EQ(code_of([&] { LiveBackend b(cfg); }), ErrorCode::AuthFailure);
}

namespace {

// Loopback stand-in for a chat-completions endpoint.
struct CaptureServer {
  httplib::Server server;
  std::thread thread;
  int port = 0;
  std::vector<json> bodies;
  std::vector<std::string> auth;
  std::mutex mu;
  std::function<void(const httplib::Request&, httplib::Response&)> respond;

  CaptureServer() {
    server.Post("/v1/chat/completions", [this](const httplib::Request& req, httplib::Response& res) {
      {
        std::lock_guard lock(mu);
        bodies.push_back(json::parse(req.body));
        auth.push_back(req.get_header_value("Authorization"));
      }
      respond(req, res);
    });
    port = server.bind_to_any_port("127.0.0.1");
    thread = std::thread([this] { server.listen_after_bind(); });
    server.wait_until_ready();
  }
  ~CaptureServer() {
    server.stop();
    thread.join();
  }
  std::string endpoint() const { return "http://127.0.0.1:" + std::to_string(port) + "/v1/chat/completions"; }
};

void ok_reply(httplib::Response& res, const std::string& content, const std::string& finish = "stop") {
  json body{{"choices", {{{"message", {{"role", "assistant"}, {"content", content}}}, {"finish_reason", finish}}}}};
  res.set_content(body.dump(), "application/json");
}

}  // namespace

TEST(Live, PostsTheWireBodyWithABearerToken) {
  EnvGuard env("EABSS_TEST_KEY", "sk-test-123");
  CaptureServer srv;
  srv.respond = [](const httplib::Request&, httplib::Response& res) { ok_reply(res, "Yes"); };
  LiveConfig cfg{srv.endpoint(), "EABSS_TEST_KEY", std::chrono::seconds(5)};
  LiveBackend live(cfg);
  auto reply = live.send(request("Got it? Say \"yes\" or say \"no\"."));
  EXPECT_EQ(reply.text, "Yes");
  EXPECT_FALSE(reply.truncated);
  ASSERT_EQ(srv.bodies.size(), 1u);
  EXPECT_DOUBLE_EQ(srv.bodies[0]["temperature"].get<double>(), 1.8);
  EXPECT_DOUBLE_EQ(srv.bodies[0]["top_p"].get<double>(), 0.9);
  EXPECT_EQ(srv.auth[0], "Bearer sk-test-123");
}

TEST(Live, MapsHttpStatusesToGatewayErrors) {
  EnvGuard env("EABSS_TEST_KEY", "sk-test");
  CaptureServer srv;
  int status = 429;
  srv.respond = [&](const httplib::Request&, httplib::Response& res) {
    res.status = status;
    if (status == 429) res.set_header("Retry-After", "2");
    if (status == 200) ok_reply(res, "cut off", "length");
  };
  LiveBackend live(LiveConfig{srv.endpoint(), "EABSS_TEST_KEY", std::chrono::seconds(5)});
  try {
    live.send(request("x"));
    FAIL();
  } catch (const GatewayError& e) {
    EXPECT_EQ(e.code(), ErrorCode::RateLimited);
    EXPECT_EQ(e.retry_after(), 2000ms);
  }
  status = 401;
  EXPECT_EQ(code_of([&] { live.send(request("x")); }), ErrorCode::AuthFailure);
  status = 503;
  EXPECT_EQ(code_of([&] { live.send(request("x")); }), ErrorCode::NetworkFailure);
  status = 200;
  EXPECT_TRUE(live.send(request("x")).truncated);
}

TEST(Live, UnreachableEndpointIsANetworkFailure) {
  EnvGuard env("EABSS_TEST_KEY", "sk-test");
  int port;
  {
    httplib::Server probe;
    port = probe.bind_to_any_port("127.0.0.1");
  }
  LiveBackend live(LiveConfig{"http://127.0.0.1:" + std::to_string(port) + "/v1/chat/completions", "EABSS_TEST_KEY",
                              std::chrono::seconds(2)});
  EXPECT_EQ(code_of([&] { live.send(request("x")); }), ErrorCode::NetworkFailure);
}

TEST(BackendFactory, BuildsEachKind) {
  session::BackendDescriptor scripted;
  EXPECT_EQ(make_backend(scripted)->kind(), "scripted");
  session::BackendDescriptor replay{"replay", "", "", "fixtures/museum_replay.jsonl", ""};
  EXPECT_EQ(make_backend(replay, EABSS_DATA_DIR)->kind(), "replay");
  session::BackendDescriptor no_fixture{"replay", "", "", "", ""};
  EXPECT_EQ(code_of([&] { make_backend(no_fixture); }), ErrorCode::ConfigError);
  EnvGuard env("EABSS_TEST_ABSENT", nullptr);
  session::BackendDescriptor live{"live", "http://127.0.0.1:1/x", "EABSS_TEST_ABSENT", "", ""};
  EXPECT_EQ(code_of([&] { make_backend(live); }), ErrorCode::AuthFailure);
}
