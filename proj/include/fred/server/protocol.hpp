#pragma once

// Wire messages for the session server, independent of any transport.
//   request  {"id": n, "verb": "...", "args": {...}}
//   response {"id": n, "ok": true, "payload": ...} | {"id": n, "ok": false, "error": {"code", "message"}}
//   event    {"event": kind, "seq": n, "payload": ...}
// schema/session-protocol.json documents every field.

#include <string>

#include "json.hpp"

#include "fred/debugger/session.hpp"

namespace fred::server {

using nlohmann::json;

inline json source_window(const dbg::Session& s, uint16_t tid, int radius = 5) {
  const auto& p = s.program();
  const vm::Thread* t = s.vm().thread(tid);
  if (!t || t->frames.empty()) return json::object();
  uint32_t line = s.top_loc(tid).line;
  json lines = json::array();
  int lo = std::max<int>(1, int(line) - radius);
  for (int n = lo; n <= int(line) + radius; ++n) {
    std::string text = p.source_line(static_cast<uint32_t>(n));
    if (n > int(line) && text.empty() && n > int(line) + 1) break;
    lines.push_back({{"n", n}, {"text", text}});
  }
  return {{"file", p.file}, {"line", line}, {"lines", lines}};
}

// Read-only view of a stopped session for UI clients.
inline json snapshot_state(const dbg::Session& s) {
  const auto& vm = s.vm();
  const auto& p = s.program();
  json threads = json::array();
  for (const auto& t : vm.threads) {
    json frames = json::array();
    for (size_t i = t.frames.size(); i-- > 0;) {
      const auto& f = t.frames[i];
      const auto& fn = p.functions[f.func];
      uint32_t line = i + 1 == t.frames.size() ? s.top_loc(t.tid).line : p.loc_of_instr(f.ip - 1).line;
      if (fn.nosym) frames.push_back({{"function", "??"}, {"file", nullptr}, {"line", nullptr}});
      else frames.push_back({{"function", fn.name}, {"file", p.file}, {"line", line}});
    }
    threads.push_back({{"tid", t.tid},
                       {"status", vm::to_string(t.status)},
                       {"focus", t.tid == s.focus()},
                       {"frames", frames}});
  }
  json doc = {{"file", p.file},
              {"tick", s.tick()},
              {"position", s.position().str()},
              {"running", s.running()},
              {"exited", vm.exited},
              {"focus", s.focus()},
              {"scheduler_locking", s.scheduler_locking()},
              {"threads", threads},
              {"source", source_window(s, s.focus())},
              {"checkpoints", s.store().index()},
              {"log", {{"cursor", s.cursor()}, {"committed", s.log().committed()}}},
              {"stats", s.last_search().is_null() ? json::object() : s.last_search()}};
  if (vm.fault) {
    const auto& f = *vm.fault;
    doc["fault"] = {{"kind", vm::to_string(f.kind)},
                    {"tid", f.tid},
                    {"detail", f.detail},
                    {"line", p.loc_of_stmt(f.stmt).line}};
  }
  json bps = json::array();
  for (const auto& b : s.breakpoints()) bps.push_back({{"id", b.id}, {"location", b.loc.str()}, {"hits", b.hits}});
  doc["breakpoints"] = bps;
  return doc;
}

inline json error_response(const json& id, const std::string& code, const std::string& msg) {
  return {{"id", id}, {"ok", false}, {"error", {{"code", code}, {"message", msg}}}};
}

// Builds the REPL command line a request stands for.
inline std::string command_line(const std::string& verb, const json& args) {
  auto arg = [&](const char* key) -> std::string {
    if (!args.is_object() || !args.contains(key)) throw Error(ErrorCode::ProtocolError, std::string("missing args.") + key);
    const auto& v = args.at(key);
    return v.is_string() ? v.get<std::string>() : v.dump();
  };
  if (verb == "command") return arg("line");
  if (verb == "print" || verb == "watch" || verb == "fred-reverse-watch") return verb + " " + arg("expr");
  if (verb == "break") return "break " + arg("location");
  if (verb == "switch-thread") return "switch-thread " + arg("tid");
  if (verb == "scheduler-locking") return "scheduler-locking " + arg("mode");
  if (verb == "fred-ticks") return "fred-ticks " + arg("count");
  if (verb == "info") return "info " + arg("what");
  return verb;
}

// Executes one request against the session. Never throws.
inline json handle_request(dbg::Session& s, const json& req) {
  json id = req.is_object() && req.contains("id") ? req["id"] : json(nullptr);
  if (!req.is_object() || !req.contains("verb") || !req["verb"].is_string())
    return error_response(id, "ProtocolError", "request needs a string \"verb\"");
  const std::string verb = req["verb"];
  const json args = req.value("args", json::object());
  try {
    if (verb == "ping") return {{"id", id}, {"ok", true}, {"payload", "pong"}};
    if (verb == "snapshot") return {{"id", id}, {"ok", true}, {"payload", snapshot_state(s)}};
    std::string line = command_line(verb, args);
    auto cmd = dbg::DebugCommand::parse(line);
    std::string out = s.execute(cmd);
    json payload = {{"output", out}, {"tick", s.tick()}, {"position", s.position().str()}};
    if (cmd.verb == dbg::Verb::Print) {
      auto r = s.evaluate(cmd.arg);
      payload["value"] = r.text;
      payload["verdict"] = r.ok() ? (r.truthy() ? "good" : "bad") : "eval-error";
    }
    if (cmd.verb == dbg::Verb::ReverseWatch) payload["report"] = s.last_search();
    return {{"id", id}, {"ok", true}, {"payload", payload}};
  } catch (const Error& e) {
    return error_response(id, to_string(e.code()), e.message());
  } catch (const std::exception& e) {
    return error_response(id, "ProtocolError", e.what());
  }
}

}  // namespace fred::server
