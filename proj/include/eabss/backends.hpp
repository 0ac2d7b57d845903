#pragma once

#include <filesystem>
#include <memory>
#include <string>

#include "eabss/gateway.hpp"
#include "eabss/live_backend.hpp"
#include "eabss/session.hpp"

namespace eabss {

/// `p` unchanged when absolute or when `base` is empty, else base/p.
inline std::string resolve_path(const std::string& base, const std::string& p) {
  if (p.empty() || base.empty() || std::filesystem::path(p).is_absolute()) return p;
  return (std::filesystem::path(base) / p).string();
}

/// Backend for a descriptor. Relative fixture and rule paths resolve against
/// `base`. The live credential is read from the environment variable named
/// by the descriptor, never from the descriptor itself.
inline std::shared_ptr<gateway::Backend> make_backend(const session::BackendDescriptor& b, const std::string& base = {}) {
  if (b.kind == "live") {
    gateway::LiveConfig cfg;
    if (!b.endpoint.empty()) cfg.endpoint = b.endpoint;
    if (!b.credential_env.empty()) cfg.credential_env = b.credential_env;
    return std::make_shared<gateway::LiveBackend>(cfg);
  }
  if (b.kind == "replay") {
    if (b.fixture_path.empty()) throw Error(ErrorCode::ConfigError, "replay backend needs a fixture file");
    return gateway::ReplayBackend::from_file(resolve_path(base, b.fixture_path));
  }
  if (b.kind == "scripted") {
    if (b.rules_path.empty()) return std::make_shared<gateway::ScriptedBackend>();
    return std::make_shared<gateway::ScriptedBackend>(gateway::ScriptedBackend::load_rules(resolve_path(base, b.rules_path)));
  }
  throw Error(ErrorCode::ConfigError, fmt::format("unknown backend '{}'", b.kind));
}

/// Positions a replay backend after the exchanges a folded session already
/// made; other backends are left alone.
inline void sync_backend(gateway::Backend& backend, const session::SessionState& s) {
  if (auto* r = dynamic_cast<gateway::ReplayBackend*>(&backend)) r->seek(s.backend_calls);
}

}  // namespace eabss
