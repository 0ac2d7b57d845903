#pragma once

#include <cstdlib>
#include <string>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "eabss/gateway.hpp"

namespace eabss::gateway {

struct LiveConfig {
  /// Full URL of a chat-completions endpoint, e.g.
  /// https://api.openai.com/v1/chat/completions
  std::string endpoint = "https://api.openai.com/v1/chat/completions";
  std::string credential_env = "OPENAI_API_KEY";
  std::chrono::seconds timeout{120};
};

/// Wire body for a chat-completions request. Parameters are copied through
/// unchanged.
inline json serialize_request(const ChatRequest& request) {
  json messages = json::array();
  for (const auto& t : request.turns)
    messages.push_back({{"role", std::string(to_string(t.author))}, {"content", t.text}});
  return json{{"model", request.params.model_id},
              {"messages", std::move(messages)},
              {"temperature", request.params.temperature},
              {"top_p", request.params.top_p}};
}

class LiveBackend : public Backend {
 public:
  explicit LiveBackend(LiveConfig cfg) : cfg_(std::move(cfg)) {
    const char* key = std::getenv(cfg_.credential_env.c_str());
    if (key == nullptr || *key == '\0')
      throw Error(ErrorCode::AuthFailure,
                  fmt::format("environment variable {} holds no credential", cfg_.credential_env));
    credential_ = key;
    split_endpoint();
  }

  BackendReply send(const ChatRequest& request) override {
    httplib::Client cli(origin_);
    cli.set_connection_timeout(cfg_.timeout);
    cli.set_read_timeout(cfg_.timeout);
    cli.set_bearer_token_auth(credential_);
    auto res = cli.Post(path_, serialize_request(request).dump(), "application/json");
    if (!res) throw GatewayError(ErrorCode::NetworkFailure, httplib::to_string(res.error()));
    int status = res->status;
    if (status == 401 || status == 403) throw GatewayError(ErrorCode::AuthFailure, fmt::format("HTTP {}", status));
    if (status == 429) {
      std::chrono::milliseconds wait{1000};
      if (res->has_header("Retry-After")) {
        try {
          wait = std::chrono::milliseconds(static_cast<long>(std::stod(res->get_header_value("Retry-After")) * 1000));
        } catch (const std::exception&) {
        }
      }
      throw GatewayError(ErrorCode::RateLimited, "HTTP 429", wait);
    }
    if (status >= 500) throw GatewayError(ErrorCode::NetworkFailure, fmt::format("HTTP {}", status));
    if (status != 200) throw GatewayError(ErrorCode::NetworkFailure, fmt::format("unexpected HTTP {}", status));
    try {
      auto body = json::parse(res->body);
      const auto& choice = body.at("choices").at(0);
      BackendReply reply;
      reply.text = choice.at("message").at("content").get<std::string>();
      reply.truncated = choice.value("finish_reason", "") == "length";
      return reply;
    } catch (const json::exception& e) {
      throw GatewayError(ErrorCode::NetworkFailure, fmt::format("malformed response: {}", e.what()));
    }
  }
  std::string kind() const override { return "live"; }

 private:
  void split_endpoint() {
    auto scheme = cfg_.endpoint.find("://");
    if (scheme == std::string::npos) throw Error(ErrorCode::ConfigError, "endpoint must be an absolute URL");
    auto slash = cfg_.endpoint.find('/', scheme + 3);
    origin_ = cfg_.endpoint.substr(0, slash);
    path_ = slash == std::string::npos ? "/" : cfg_.endpoint.substr(slash);
  }

  LiveConfig cfg_;
  std::string credential_;
  std::string origin_;
  std::string path_;
};

}  // namespace eabss::gateway
