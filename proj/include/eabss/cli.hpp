#pragma once

#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "eabss/backends.hpp"
#include "eabss/diagram.hpp"
#include "eabss/report.hpp"
#include "eabss/service.hpp"
#include "eabss/session.hpp"

namespace eabss::cli {

using json = nlohmann::json;

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

/// Flags shared by every subcommand that drives a backend.
struct CliConfig {
  session::BackendDescriptor backend;
  gateway::GenerationParams params;
  std::string script_path;
  std::string case_path;
  session::SessionOptions options;
  bool allow_partial = false;
};

namespace detail {

struct BackendFlags {
  std::string kind;
  std::string fixtures;
  std::string rules;
  std::string endpoint;
  std::string credential_env;
  double temperature = 1.8;
  double top_p = 0.9;
  std::string model = "gpt-3.5-turbo";
  int continuations = 3;
};

inline void add_backend_flags(CLI::App* app, BackendFlags& f, bool required) {
  auto* opt = app->add_option("--backend", f.kind, "live, replay or scripted")
                  ->check(CLI::IsMember({"live", "replay", "scripted"}));
  if (required) opt->default_val("scripted");
  app->add_option("--fixtures", f.fixtures, "replay fixture (JSONL)");
  app->add_option("--rules", f.rules, "scripted-backend rules (TOML)");
  app->add_option("--endpoint", f.endpoint, "live chat-completions URL");
  app->add_option("--credential-env", f.credential_env, "environment variable holding the live API key");
  app->add_option("--temperature", f.temperature, "sampling temperature")->capture_default_str();
  app->add_option("--top-p", f.top_p, "nucleus sampling mass")->capture_default_str();
  app->add_option("--model", f.model, "model id")->capture_default_str();
  app->add_option("--max-continuations", f.continuations, "follow-ups for truncated replies")->capture_default_str();
}

inline session::BackendDescriptor descriptor(const BackendFlags& f) {
  session::BackendDescriptor b;
  b.kind = f.kind.empty() ? "scripted" : f.kind;
  b.fixture_path = f.fixtures;
  b.rules_path = f.rules;
  b.endpoint = f.endpoint;
  b.credential_env = f.credential_env;
  if (b.kind == "replay" && b.fixture_path.empty())
    throw Error(ErrorCode::UsageError, "--backend replay needs --fixtures");
  return b;
}

inline void progress(std::ostream& err, const session::SessionState& s) {
  if (s.exchanges.empty()) return;
  const auto& x = s.exchanges.back();
  err << fmt::format("[{} {}/{}] {} ({} keys)\n", s.script.segments.at(x.cursor.segment).name, x.cursor.chain + 1,
                     s.script.segments.at(x.cursor.segment).chain_count(), x.kind, s.keys.records().size());
}

/// Steps a session to a resting state. INTERVENE points are approved
/// automatically since the CLI has no operator to ask.
inline void drive(session::SessionState& s, gateway::Gateway& gw, std::ostream& err) {
  for (;;) {
    while (s.status == session::Status::Running) {
      std::size_t before = s.exchanges.size();
      session::step(s, gw);
      if (s.exchanges.size() != before) progress(err, s);
    }
    if (s.status != session::Status::AwaitingIntervention) break;
    err << "intervention point: approving\n";
    session::intervene(s, gw, session::Approve{});
  }
}

/// Writes the report; returns false when it carries Error findings.
inline bool write_report(const session::SessionState& s, const std::string& path, const std::string& format,
                         bool allow_partial, std::ostream& err) {
  auto doc = report::assemble_report(s, {allow_partial});
  report::export_report(doc, format, path);
  std::size_t errors = 0;
  for (auto c : report::kCriteria)
    for (const auto& f : doc.rubric.at(c).findings) {
      if (f.severity == Severity::Error) ++errors;
      err << fmt::format("{} {}: {}\n", report::to_string(c), to_string(f.severity), f.message);
    }
  err << fmt::format("report written to {}\n", path);
  return errors == 0;
}

inline std::string format_of(const std::string& format, const std::string& path) {
  if (!format.empty()) return format;
  auto dot = path.rfind('.');
  return dot != std::string::npos && text::to_lower(path.substr(dot + 1)) == "json" ? "json" : "md";
}

inline int finish(const session::SessionState& s, const std::string& log_path, const std::string& report_path,
                  const std::string& format, bool allow_partial, std::ostream& out, std::ostream& err) {
  if (!log_path.empty()) session::save_log(log_path, s);
  out << json{{"status", std::string(session::to_string(s.status))},
              {"exchanges", s.exchanges.size()},
              {"keys", s.keys.records().size()},
              {"events", s.log.size()}}
             .dump()
      << "\n";
  if (s.status == session::Status::Failed) {
    err << fmt::format("session failed: {} {}\n", s.failure ? s.failure->code : "", s.failure ? s.failure->message : "");
    return kExitFailure;
  }
  bool clean = true;
  if (!report_path.empty() && (s.status == session::Status::Complete || allow_partial))
    clean = write_report(s, report_path, format_of(format, report_path), allow_partial, err);
  return clean && s.status == session::Status::Complete ? kExitOk : kExitFailure;
}

}  // namespace detail

/// Entry point: returns 0 on success, 1 on a domain failure, 2 on misuse.
inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"EABSS co-creation engine: run prompt scripts, repair diagrams, build reports"};
  app.require_subcommand(1);

  // bind
  std::string bind_script, bind_case, bind_out;
  auto* bind = app.add_subcommand("bind", "bind a case study into a script");
  bind->add_option("--script", bind_script, "script file")->required();
  bind->add_option("--case", bind_case, "case binding (TOML)")->required();
  bind->add_option("--out", bind_out, "output file (default: standard output)");

  // run
  detail::BackendFlags run_flags;
  std::string run_script, run_case, run_log, run_report = "report.md", run_format, run_record;
  bool skip_co = false, allow_partial = false, auto_refresh = false;
  std::size_t budget = 3000;
  auto* runc = app.add_subcommand("run", "run a script to completion and write the report");
  runc->add_option("--script", run_script, "script file")->required();
  runc->add_option("--case", run_case, "case binding (TOML)");
  detail::add_backend_flags(runc, run_flags, true);
  runc->add_option("--log", run_log, "save the session event log here");
  runc->add_option("--report", run_report, "report file")->capture_default_str();
  runc->add_option("--format", run_format, "md or json (default from the report extension)");
  runc->add_option("--record-fixture", run_record, "save the exchanges as a replay fixture");
  runc->add_flag("--skip-co-creation", skip_co, "skip optional co-creation chains");
  runc->add_flag("--allow-partial", allow_partial, "write a report even for an incomplete session");
  runc->add_flag("--auto-refresh", auto_refresh, "re-list keys about to leave the context window");
  runc->add_option("--budget-words", budget, "context window in words")->capture_default_str()->check(CLI::PositiveNumber);

  // resume
  detail::BackendFlags resume_flags;
  std::string resume_log, resume_report = "report.md", resume_format;
  bool resume_partial = false;
  auto* resumec = app.add_subcommand("resume", "continue a saved session log");
  resumec->add_option("--log", resume_log, "session event log")->required();
  detail::add_backend_flags(resumec, resume_flags, false);
  resumec->add_option("--report", resume_report, "report file")->capture_default_str();
  resumec->add_option("--format", resume_format, "md or json");
  resumec->add_flag("--allow-partial", resume_partial, "write a report even for an incomplete session");

  // validate-diagram
  std::string vd_kind, vd_file;
  std::vector<std::string> vd_humans;
  bool vd_fix = false;
  auto* vd = app.add_subcommand("validate-diagram", "check a Mermaid diagram; JSON diagnostics on standard output");
  vd->add_option("--kind", vd_kind, "usecase, class, state or sequence")->required();
  vd->add_option("file", vd_file, "diagram file")->required()->check(CLI::ExistingFile);
  vd->add_option("--human-actor", vd_humans, "participant that must be drawn as an actor");
  vd->add_flag("--fix", vd_fix, "repair, print the repaired text in the JSON, judge the result");

  // replay
  std::string rp_log;
  auto* rp = app.add_subcommand("replay", "rebuild a session from its event log and summarise it");
  rp->add_option("--log", rp_log, "session event log")->required();

  // export
  std::string ex_log, ex_out, ex_format;
  bool ex_partial = false;
  auto* ex = app.add_subcommand("export", "assemble and export the report of a saved session");
  ex->add_option("--log", ex_log, "session event log")->required();
  ex->add_option("--out", ex_out, "report file")->required();
  ex->add_option("--format", ex_format, "md or json (default from the extension)");
  ex->add_flag("--allow-partial", ex_partial, "allow an incomplete session");

  // serve
  std::string sv_host = "127.0.0.1", sv_root, sv_logs;
  int sv_port = 8080;
  auto* sv = app.add_subcommand("serve", "host sessions over HTTP for the steering dashboard");
  sv->add_option("--host", sv_host, "bind address")->capture_default_str();
  sv->add_option("--port", sv_port, "port (0 picks a free one)")->capture_default_str();
  sv->add_option("--root", sv_root, "base directory for relative paths in requests");
  sv->add_option("--log-dir", sv_logs, "save each session's event log here");

  std::vector<const char*> argv{"eabss"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      out << app.help();
      return kExitOk;
    }
    err << e.what() << "\n" << "run with --help for usage\n";
    return kExitUsage;
  }

  try {
    if (*bind) {
      auto doc = script::bind_case(script::parse_script(config::read_file(bind_script)), config::load_case(bind_case));
      if (bind_out.empty()) out << doc.source_text;
      else config::write_file(bind_out, doc.source_text);
      return kExitOk;
    }
    if (*runc) {
      auto desc = detail::descriptor(run_flags);
      gateway::GenerationParams params(run_flags.temperature, run_flags.top_p, run_flags.model, run_flags.continuations);
      auto doc = script::parse_script(config::read_file(run_script));
      if (!run_case.empty()) doc = script::bind_case(doc, config::load_case(run_case));
      session::SessionOptions opts;
      opts.skip_co_creation = skip_co;
      opts.budget_words = budget;
      opts.auto_refresh_stale_keys = auto_refresh;
      auto backend = make_backend(desc);
      std::shared_ptr<gateway::RecordingBackend> recorder;
      if (!run_record.empty()) backend = recorder = std::make_shared<gateway::RecordingBackend>(backend);
      gateway::Gateway gw(backend);
      auto s = session::start_session(doc, desc, params, opts);
      detail::drive(s, gw, err);
      if (recorder) gateway::write_fixture(run_record, session::record_fixture(s));
      return detail::finish(s, run_log, run_report, run_format, allow_partial, out, err);
    }
    if (*resumec) {
      auto s = session::load_log(resume_log);
      auto desc = resume_flags.kind.empty() ? s.backend : detail::descriptor(resume_flags);
      auto backend = make_backend(desc);
      sync_backend(*backend, s);
      gateway::Gateway gw(backend);
      if (s.status == session::Status::Failed) session::resume(s);
      else if (s.status == session::Status::AwaitingAck)
        throw Error(ErrorCode::InvalidInState, "log ends while awaiting an acknowledgement");
      detail::drive(s, gw, err);
      return detail::finish(s, resume_log, resume_report, resume_format, resume_partial, out, err);
    }
    if (*vd) {
      auto kind = diagram::kind_from_string(vd_kind);
      auto parsed = diagram::parse_diagram(kind, config::read_file(vd_file));
      diagram::ValidateOptions opt{vd_humans};
      json diags = json::array();
      std::size_t errors = 0;
      json result{{"kind", vd_kind}, {"file", vd_file}};
      if (vd_fix) {
        auto r = diagram::repair(parsed, opt);
        for (const auto& d : r.remaining) diags.push_back(diagram::to_json(d));
        errors = diagram::error_count(r.remaining);
        result["repair"] = diagram::to_json(r.report);
        result["repaired"] = r.script.text();
      } else {
        auto found = diagram::validate(parsed, opt);
        for (const auto& d : found) diags.push_back(diagram::to_json(d));
        errors = diagram::error_count(found);
      }
      result["diagnostics"] = diags;
      result["errors"] = errors;
      out << result.dump(2) << "\n";
      return errors == 0 ? kExitOk : kExitFailure;
    }
    if (*rp) {
      auto s = session::load_log(rp_log);
      json keys = json::array();
      for (const auto& [name, r] : s.keys.records()) keys.push_back(session::to_json(r));
      out << json{{"status", std::string(session::to_string(s.status))},
                  {"events", s.log.size()},
                  {"exchanges", s.exchanges.size()},
                  {"cursor", {{"segment", s.cursor.segment}, {"chain", s.cursor.chain}}},
                  {"keys", keys}}
                 .dump(2)
          << "\n";
      return s.status == session::Status::Failed ? kExitFailure : kExitOk;
    }
    if (*ex) {
      auto s = session::load_log(ex_log);
      return detail::write_report(s, ex_out, detail::format_of(ex_format, ex_out), ex_partial, err) ? kExitOk
                                                                                                     : kExitFailure;
    }
    if (*sv) {
      service::ServiceConfig cfg;
      cfg.host = sv_host;
      cfg.port = sv_port;
      cfg.root = sv_root;
      cfg.log_dir = sv_logs;
      service::SessionService svc(cfg);
      service::HttpServer http(svc);
      int port = http.bind(sv_host, sv_port);
      err << fmt::format("serving on http://{}:{}\n", sv_host, port);
      http.listen();
      return kExitOk;
    }
  } catch (const Error& e) {
    err << fmt::format("error: {}: {}\n", to_string(e.code()), e.detail());
    return e.code() == ErrorCode::UsageError ? kExitUsage : kExitFailure;
  }
  return kExitUsage;
}

}  // namespace eabss::cli
