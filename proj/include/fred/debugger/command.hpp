#pragma once

// REPL command grammar. `parse` accepts the usual gdb abbreviations;
// `str` prints the canonical spelling, and parse(str(c)) == c.

#include <cctype>
#include <cstdint>
#include <string>
#include <vector>

#include "fred/support.hpp"

namespace fred::dbg {

enum class Verb : uint8_t {
  Break,
  Run,
  Continue,
  Next,
  Step,
  Finish,
  Print,
  Watch,
  SwitchThread,
  SchedulerLocking,
  Checkpoint,
  ReverseStep,
  ReverseNext,
  ReverseFinish,
  ReverseContinue,
  ReverseWatch,
  InfoThreads,
  InfoCheckpoints,
  InfoBreakpoints,
  Backtrace,
  Ticks,  // internal: run N statements; used to reach positions between steps
};

struct DebugCommand {
  Verb verb = Verb::Step;
  std::string arg;  // location, expression, tid, on/off, or tick count

  friend bool operator==(const DebugCommand&, const DebugCommand&) = default;

  // Commands that move the target forward and enter the history.
  bool moving() const {
    switch (verb) {
      case Verb::Run:
      case Verb::Continue:
      case Verb::Next:
      case Verb::Step:
      case Verb::Finish:
      case Verb::Ticks: return true;
      default: return false;
    }
  }
  bool reverse() const {
    return verb == Verb::ReverseStep || verb == Verb::ReverseNext || verb == Verb::ReverseFinish ||
           verb == Verb::ReverseContinue || verb == Verb::ReverseWatch;
  }

  std::string str() const {
    switch (verb) {
      case Verb::Break: return "break " + arg;
      case Verb::Run: return "run";
      case Verb::Continue: return "continue";
      case Verb::Next: return "next";
      case Verb::Step: return "step";
      case Verb::Finish: return "finish";
      case Verb::Print: return "print " + arg;
      case Verb::Watch: return "watch " + arg;
      case Verb::SwitchThread: return "switch-thread " + arg;
      case Verb::SchedulerLocking: return "scheduler-locking " + arg;
      case Verb::Checkpoint: return "fred-checkpoint";
      case Verb::ReverseStep: return "fred-reverse-step";
      case Verb::ReverseNext: return "fred-reverse-next";
      case Verb::ReverseFinish: return "fred-reverse-finish";
      case Verb::ReverseContinue: return "fred-reverse-continue";
      case Verb::ReverseWatch: return "fred-reverse-watch " + arg;
      case Verb::InfoThreads: return "info threads";
      case Verb::InfoCheckpoints: return "info checkpoints";
      case Verb::InfoBreakpoints: return "info breakpoints";
      case Verb::Backtrace: return "backtrace";
      case Verb::Ticks: return "fred-ticks " + arg;
    }
    return "?";
  }

  static DebugCommand parse(std::string_view line) {
    std::string s = trim(line);
    if (s.empty()) throw Error(ErrorCode::BadCommand, "empty command");
    size_t sp = s.find_first_of(" \t");
    std::string head = s.substr(0, sp);
    std::string rest = sp == std::string::npos ? "" : trim(s.substr(sp));
    auto need_arg = [&](const char* what) {
      if (rest.empty()) throw Error(ErrorCode::BadCommand, std::string("argument required (") + what + ")");
    };
    auto no_arg = [&] {
      if (!rest.empty()) throw Error(ErrorCode::BadCommand, "\"" + head + "\" takes no argument");
    };
    auto make = [](Verb v, std::string a = {}) { return DebugCommand{v, std::move(a)}; };

    if (head == "break" || head == "b" || head == "br") return need_arg("location"), make(Verb::Break, rest);
    if (head == "run" || head == "r") return no_arg(), make(Verb::Run);
    if (head == "continue" || head == "c" || head == "cont") return no_arg(), make(Verb::Continue);
    if (head == "next" || head == "n") return no_arg(), make(Verb::Next);
    if (head == "step" || head == "s") return no_arg(), make(Verb::Step);
    if (head == "finish" || head == "fin") return no_arg(), make(Verb::Finish);
    if (head == "print" || head == "p") return need_arg("expression"), make(Verb::Print, rest);
    if (head == "watch") return need_arg("expression"), make(Verb::Watch, rest);
    if (head == "switch-thread" || head == "thread") {
      need_arg("thread id");
      for (char ch : rest)
        if (!std::isdigit(static_cast<unsigned char>(ch))) throw Error(ErrorCode::BadCommand, "invalid thread id " + rest);
      return make(Verb::SwitchThread, std::to_string(std::stoul(rest)));
    }
    if (head == "set" && rest.rfind("scheduler-locking", 0) == 0) return parse(rest);
    if (head == "scheduler-locking") {
      if (rest != "on" && rest != "off") throw Error(ErrorCode::BadCommand, "scheduler-locking takes on or off");
      return make(Verb::SchedulerLocking, rest);
    }
    if (head == "fred-checkpoint") return no_arg(), make(Verb::Checkpoint);
    if (head == "fred-reverse-step" || head == "reverse-step" || head == "rs") return no_arg(), make(Verb::ReverseStep);
    if (head == "fred-reverse-next" || head == "reverse-next" || head == "rn") return no_arg(), make(Verb::ReverseNext);
    if (head == "fred-reverse-finish" || head == "reverse-finish") return no_arg(), make(Verb::ReverseFinish);
    if (head == "fred-reverse-continue" || head == "reverse-continue" || head == "rc")
      return no_arg(), make(Verb::ReverseContinue);
    if (head == "fred-reverse-watch" || head == "reverse-watch" || head == "rw")
      return need_arg("expression"), make(Verb::ReverseWatch, rest);
    if (head == "info") {
      if (rest == "threads") return make(Verb::InfoThreads);
      if (rest == "checkpoints") return make(Verb::InfoCheckpoints);
      if (rest == "breakpoints" || rest == "break") return make(Verb::InfoBreakpoints);
      throw Error(ErrorCode::BadCommand, "unknown info subcommand \"" + rest + "\"");
    }
    if (head == "backtrace" || head == "bt" || head == "where") return no_arg(), make(Verb::Backtrace);
    if (head == "fred-ticks") {
      need_arg("count");
      for (char ch : rest)
        if (!std::isdigit(static_cast<unsigned char>(ch))) throw Error(ErrorCode::BadCommand, "invalid count " + rest);
      return make(Verb::Ticks, std::to_string(std::stoull(rest)));
    }
    throw Error(ErrorCode::BadCommand, "undefined command: \"" + head + "\"");
  }

  static std::string trim(std::string_view v) {
    size_t b = 0, e = v.size();
    while (b < e && std::isspace(static_cast<unsigned char>(v[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(v[e - 1]))) --e;
    return std::string(v.substr(b, e - b));
  }
};

inline std::vector<std::string> verbs_of(const std::vector<DebugCommand>& cmds) {
  std::vector<std::string> out;
  for (const auto& c : cmds) out.push_back(c.str());
  return out;
}

}  // namespace fred::dbg
