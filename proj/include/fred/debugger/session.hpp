#pragma once

// A debugging session: the target VM, its event log, checkpoint images,
// the command history, and the expanded-step "marks" that history
// decomposition and the searches index into.
//
// Positions are tick counts (vm::VmState::ticks). Every history entry
// covers a half-open tick range and records whether it ran with the
// scheduler locked to one thread, which is all replay_to needs: restore
// the nearest image at or before the target and run ticks in the modes the
// history dictates.

#include <algorithm>
#include <chrono>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "fred/checkpoint/store.hpp"
#include "fred/debugger/command.hpp"
#include "fred/debugger/eval.hpp"
#include "fred/log/event_log.hpp"
#include "fred/vm/machine.hpp"

namespace fred::dbg {

// Boundary of one expanded step: the focus thread just completed a
// statement in a frame with symbols, or a command stopped.
struct Mark {
  uint64_t tick = 0;
  uint64_t cursor = 0;
  uint32_t depth = 0;  // focus frames after the step
  uint32_t stmt = 0;   // statement the focus thread is at
  uint16_t focus = 0;
  bool bp = false;     // some thread hit a breakpoint here
};

struct HistoryEntry {
  DebugCommand cmd;
  int32_t locked = -1;  // tid the scheduler was locked to, or -1
  uint16_t focus = 0;
  uint64_t tick_begin = 0, tick_end = 0;
  size_t mark_begin = 0, mark_end = 0;  // covers marks (mark_begin, mark_end]
  uint64_t event_begin = 0, event_end = 0;
  std::string output;

  uint64_t ticks() const { return tick_end - tick_begin; }
  size_t steps() const { return mark_end - mark_begin; }
};

struct Breakpoint {
  int id = 0;
  std::string spec;
  uint32_t stmt = 0;
  vm::SourceLoc loc;
  uint64_t hits = 0;
};

struct Watchpoint {
  int id = 0;
  WatchExpr expr;
  std::string last;
};

// A restored copy of the target used by searches. Probes never touch the
// session; a probe that leaves the recorded timeline forks its own log.
struct Probe {
  vm::VmState vm;
  std::shared_ptr<log::EventLog> log;
  uint64_t cursor = 0;
  bool forked = false;

  uint64_t tick() const { return vm.ticks; }
};

struct SessionOptions {
  uint64_t seed = 1;
  uint64_t auto_ckpt = 1000;  // expanded steps between intermediate images; 0 disables
  bool strict_eval = false;
  size_t store_cap = 1 << 16;
  std::string session_dir;  // empty: images kept in memory only
  std::vector<std::string> input;
  uint64_t step_budget = 10000;  // per-thread budget for the scheduler-locking endgame
  std::function<int64_t()> clock;  // override for record-side clock reads
  std::function<uint64_t()> rand;  // override for record-side rand()
};

using EventSink = std::function<void(const std::string& kind, const nlohmann::json& payload)>;

class Session {
 public:
  Session(std::shared_ptr<const vm::Program> program, SessionOptions opts = {})
      : program_(std::move(program)),
        opts_(std::move(opts)),
        vm_(vm::vm_new(program_, opts_.seed)),
        log_(std::make_shared<log::EventLog>()),
        store_(opts_.store_cap, opts_.session_dir) {
    sources_.input_lines = opts_.input;
    if (opts_.clock) sources_.clock = opts_.clock;
    if (opts_.rand) sources_.rand = opts_.rand;
    auto_every_ = opts_.auto_ckpt;
    marks_.push_back(make_mark(false));
    take_image(ckpt::ImageKind::Initial);
  }

  static std::shared_ptr<const vm::Program> load_program(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::IoError, "No such file: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    std::string name = path.substr(path.find_last_of('/') == std::string::npos ? 0 : path.find_last_of('/') + 1);
    return std::make_shared<const vm::Program>(vm::compile(ss.str(), name));
  }

  // ---- commands -------------------------------------------------------

  std::string execute(std::string_view line) { return execute(DebugCommand::parse(line)); }

  std::string execute(const DebugCommand& cmd) {
    if (busy_) throw Error(ErrorCode::CommandInterruptedUnsupported, "a command is already running");
    busy_ = true;
    struct Reset {
      bool& b;
      ~Reset() { b = false; }
    } reset{busy_};
    std::string out = dispatch(cmd);
    if (!cmd.moving() && !cmd.reverse()) record_passive(cmd, out);
    return out;
  }

  // ---- inspection -----------------------------------------------------

  const vm::VmState& vm() const { return vm_; }
  const vm::Program& program() const { return *program_; }
  std::shared_ptr<const vm::Program> program_ptr() const { return program_; }
  const std::vector<HistoryEntry>& history() const { return history_; }
  const std::vector<Mark>& marks() const { return marks_; }
  const ckpt::CheckpointStore& store() const { return store_; }
  ckpt::CheckpointStore& store() { return store_; }
  const log::EventLog& log() const { return *log_; }
  std::shared_ptr<log::EventLog> log_ptr() const { return log_; }
  uint64_t cursor() const { return cursor_; }
  uint64_t tick() const { return vm_.ticks; }
  size_t mark_index() const { return marks_.size() - 1; }
  uint16_t focus() const { return focus_; }
  bool scheduler_locking() const { return locking_; }
  bool running() const { return running_; }
  const SessionOptions& options() const { return opts_; }
  SessionOptions& options() { return opts_; }
  const std::vector<Breakpoint>& breakpoints() const { return breakpoints_; }
  const vm::RecordSources& sources() const { return sources_; }
  void set_sink(EventSink s) { sink_ = std::move(s); }
  void emit(const std::string& kind, const nlohmann::json& payload) const {
    if (sink_) sink_(kind, payload);
  }
  const nlohmann::json& last_search() const { return last_search_; }
  void set_auto_checkpoint(uint64_t k) { auto_every_ = opts_.auto_ckpt = k; }

  ckpt::TimePosition position() const {
    ckpt::TimePosition p;
    p.statement = vm_.ticks;
    p.event = cursor_;
    if (auto id = store_.at_or_before(vm_.ticks)) {
      const auto& img = store_.get(*id);
      p.checkpoint = *id;
      uint64_t since = img.position.command;
      uint64_t done = 0;
      for (const auto& h : history_)
        if (h.cmd.moving() && h.tick_end <= vm_.ticks && h.tick_end > img.tick()) ++done;
      p.command = since + done;
    }
    return p;
  }

  // Moving commands since the latest user checkpoint, as the user would
  // retype them.
  std::vector<DebugCommand> effective_history() const {
    uint64_t base = 0;
    bool have_user = false;
    for (const auto& img : store_.images())
      if (img.kind == ckpt::ImageKind::User && img.tick() <= vm_.ticks) base = img.tick(), have_user = true;
    std::vector<DebugCommand> out;
    for (const auto& h : history_) {
      if (!h.cmd.moving()) continue;
      if (have_user && h.tick_begin < base) continue;
      if (have_user && h.tick_begin == base && h.ticks() == 0 && h.cmd.verb == Verb::Run) continue;
      out.push_back(h.cmd);
    }
    return out;
  }

  EvalResult evaluate(const lang::Expr& e, std::optional<uint16_t> tid = std::nullopt) const {
    return dbg::evaluate(vm_, e, tid.value_or(focus_));
  }
  EvalResult evaluate(const std::string& src, std::optional<uint16_t> tid = std::nullopt) const {
    auto w = WatchExpr::parse(src);
    return evaluate(*w.ast, tid);
  }

  std::string where(uint16_t tid) const {
    const vm::Thread* t = vm_.thread(tid);
    if (!t || t->frames.empty()) return "(thread " + std::to_string(tid) + " has exited)";
    const auto& f = t->frames.back();
    const auto& fn = program_->functions[f.func];
    if (fn.nosym) return "?? ()";
    return fn.name + " () at " + top_loc(tid).str();
  }

  // Innermost location of `tid`; a faulted thread stays on its faulting statement.
  vm::SourceLoc top_loc(uint16_t tid) const {
    if (vm_.fault && vm_.fault->tid == tid) return program_->loc_of_stmt(vm_.fault->stmt);
    return program_->loc_of_instr(vm_.threads.at(tid).frames.back().ip);
  }

  std::string source_text(uint16_t tid) const {
    const vm::Thread* t = vm_.thread(tid);
    if (!t || t->frames.empty()) return {};
    const auto& f = t->frames.back();
    if (program_->functions[f.func].nosym) return {};
    uint32_t line = top_loc(tid).line;
    return std::to_string(line) + "\t" + program_->source_line(line);
  }

  // ---- timeline -------------------------------------------------------

  // Locked tid for the tick that starts at `t`, from the history.
  int32_t mode_at(uint64_t t) const {
    auto it = std::upper_bound(history_.begin(), history_.end(), t,
                               [](uint64_t x, const HistoryEntry& h) { return x < h.tick_end; });
    while (it != history_.end() && it->ticks() == 0) ++it;
    if (it == history_.end() || it->tick_begin > t) return -1;
    return it->locked;
  }

  // Restores the nearest image at or before `t` into a probe and replays
  // ticks up to `t` in history modes. `t` must not exceed the current tick.
  Probe probe_at(uint64_t t, uint64_t* restarts = nullptr) const {
    if (t > vm_.ticks) throw Error(ErrorCode::TargetBeyondHistory, "tick " + std::to_string(t) + " is in the future");
    auto id = store_.at_or_before(t);
    if (!id) throw Error(ErrorCode::MissingImage, "no image at or before tick " + std::to_string(t));
    auto r = store_.restore(*id, program_);
    if (restarts) ++*restarts;
    Probe p{std::move(r.vm), log_, r.blob.log_cursor, false};
    probe_advance(p, t);
    return p;
  }

  Probe probe_here() const { return Probe{vm_, log_, cursor_, false}; }

  // Replays recorded ticks until the probe reaches `t` (or stops).
  void probe_advance(Probe& p, uint64_t t, const std::function<void(const vm::StepOutcome&)>& each = {}) const {
    if (p.forked) throw Error(ErrorCode::ReplayDivergence, "probe left the recorded timeline");
    while (p.vm.ticks < t && !p.vm.stopped()) {
      int32_t locked = mode_at(p.vm.ticks);
      auto o = probe_tick_raw(p, locked);
      if (o.reason == vm::StopReason::Blocked)
        throw Error(ErrorCode::ReplayDivergence, "recorded tick " + std::to_string(p.vm.ticks) + " now blocks");
      if (each) each(o);
    }
  }

  // One tick outside the recorded schedule; forks the probe's log first.
  vm::StepOutcome probe_tick(Probe& p, std::optional<uint16_t> locked) const {
    if (!p.forked) {
      p.log = std::make_shared<log::EventLog>(p.log->prefix(p.cursor));
      p.forked = true;
    }
    return probe_tick_raw(p, locked ? int32_t(*locked) : -1);
  }

  // Moves the session to tick `t` (<= now), rewriting the history so that
  // it ends exactly there.
  void rewind_to_tick(uint64_t t) {
    if (t > vm_.ticks) throw Error(ErrorCode::TargetBeyondHistory, "cannot rewind forward");
    std::vector<HistoryEntry> kept;
    bool dropped_locked = false;
    int32_t partial_locked = -1;
    while (marks_.size() > 1 && marks_.back().tick > t) marks_.pop_back();
    for (const auto& h : history_) {
      if (h.tick_end <= t) {
        kept.push_back(h);
        continue;
      }
      if (h.tick_begin <= t && t < h.tick_end) {
        dropped_locked |= h.locked >= 0;
        partial_locked = h.locked;
        if (h.cmd.verb == Verb::Run) {
          HistoryEntry r = h;
          r.tick_end = r.tick_begin;
          r.mark_end = r.mark_begin;
          r.event_end = r.event_begin;
          r.output.clear();
          kept.push_back(r);
        }
        size_t last = marks_.size() - 1;
        if (last > h.mark_begin) {
          auto parts = expand(h, h.mark_begin, last);
          kept.insert(kept.end(), parts.begin(), parts.end());
        }
        continue;
      }
      if (h.cmd.moving() && h.ticks() > 0) dropped_locked |= h.locked >= 0;
    }
    history_ = std::move(kept);
    store_.truncate_after(t);
    uint64_t last_mark_tick = marks_.back().tick;
    replay_to(t);
    if (last_mark_tick < t) {
      // The target lies between two expanded steps; finish with raw ticks.
      HistoryEntry rest;
      rest.cmd = DebugCommand{Verb::Ticks, std::to_string(t - last_mark_tick)};
      rest.locked = partial_locked;
      rest.focus = focus_;
      rest.tick_begin = last_mark_tick;
      rest.tick_end = t;
      rest.mark_begin = marks_.size() - 1;
      rest.event_begin = marks_.back().cursor;
      marks_.push_back(make_mark(false));
      rest.mark_end = marks_.size() - 1;
      rest.event_end = cursor_;
      history_.push_back(rest);
    }
    if (dropped_locked) log_ = std::make_shared<log::EventLog>(log_->prefix(cursor_));
    running_ = std::any_of(history_.begin(), history_.end(), [](const HistoryEntry& h) { return h.cmd.verb == Verb::Run; });
    if (!vm_.thread(focus_) || vm_.threads[focus_].status == vm::ThreadStatus::Exited) focus_ = 0;
  }

  void rewind_to_mark(size_t m) {
    if (m >= marks_.size()) throw Error(ErrorCode::TargetBeyondHistory, "no such step");
    rewind_to_tick(marks_[m].tick);
  }

  // Decomposes the marks (a, b] of entry `h` into steps and nexts.
  std::vector<HistoryEntry> expand(const HistoryEntry& h, size_t a, size_t b) const {
    std::vector<HistoryEntry> out;
    size_t i = a;
    while (i < b) {
      size_t j = i + 1;
      while (j <= b && marks_[j].depth > marks_[i].depth) ++j;
      bool as_next = j <= b && marks_[j].depth == marks_[i].depth;
      size_t end = as_next ? j : i + 1;
      HistoryEntry e;
      e.cmd = DebugCommand{as_next ? Verb::Next : Verb::Step, {}};
      e.locked = h.locked;
      e.focus = h.focus;
      e.tick_begin = marks_[i].tick;
      e.tick_end = marks_[end].tick;
      e.mark_begin = i;
      e.mark_end = end;
      e.event_begin = marks_[i].cursor;
      e.event_end = marks_[end].cursor;
      out.push_back(std::move(e));
      i = end;
    }
    return out;
  }

  // Expanded form of a history slice, as command verbs.
  std::vector<DebugCommand> expand_history(size_t from, size_t to) const {
    std::vector<DebugCommand> out;
    for (size_t k = from; k < to && k < history_.size(); ++k) {
      const auto& h = history_[k];
      if (!h.cmd.moving()) continue;
      if (h.cmd.verb == Verb::Step || h.steps() == 0) {
        if (h.steps() > 0 || h.cmd.verb == Verb::Run) out.push_back(h.cmd.verb == Verb::Run && h.steps() == 0 ? h.cmd : DebugCommand{Verb::Step, {}});
        continue;
      }
      if (h.cmd.verb == Verb::Continue || h.cmd.verb == Verb::Run || h.cmd.verb == Verb::Ticks) {
        for (size_t m = h.mark_begin; m < h.mark_end; ++m) out.push_back({Verb::Step, {}});
        continue;
      }
      // next / finish: step into calls, next across the callee, step out.
      auto parts = expand(h, h.mark_begin, h.mark_end);
      if (parts.size() == 1 && parts[0].cmd.verb == Verb::Next && h.steps() > 1) {
        auto inner = expand(h, h.mark_begin + 1, h.mark_end);
        out.push_back({Verb::Step, {}});
        for (auto& p : inner) out.push_back(p.cmd);
        continue;
      }
      for (auto& p : parts) out.push_back(p.cmd);
    }
    return out;
  }

  void replay_to(uint64_t t) {
    if (t < vm_.ticks) {
      auto id = store_.at_or_before(t);
      if (!id) throw Error(ErrorCode::MissingImage, "no image at or before tick " + std::to_string(t));
      auto r = store_.restore(*id, program_);
      vm_ = std::move(r.vm);
      cursor_ = r.blob.log_cursor;
      ++restarts_;
    }
    while (vm_.ticks < t && !vm_.stopped()) {
      auto o = tick(mode_at(vm_.ticks));
      if (o.reason == vm::StopReason::Blocked)
        throw Error(ErrorCode::ReplayDivergence, "recorded tick " + std::to_string(vm_.ticks) + " now blocks");
    }
    if (vm_.ticks != t) throw Error(ErrorCode::TargetBeyondHistory, "history ends before tick " + std::to_string(t));
  }

  uint64_t restarts() const { return restarts_; }

  // Image of the current quiescent state.
  uint64_t take_image(ckpt::ImageKind kind) {
    auto t0 = std::chrono::steady_clock::now();
    ckpt::SessionBlob b;
    b.vm = vm::serialize(vm_);
    b.log_cursor = cursor_;
    b.tick = vm_.ticks;
    b.mark = marks_.size() - 1;
    b.history_index = history_.size();
    b.substep = pending_ ? marks_.size() - 1 - pending_->mark_begin : 0;
    for (const auto& h : history_) b.history.push_back({h.cmd.str(), h.locked, h.ticks()});
    if (pending_) b.history.push_back({pending_->cmd.str(), pending_->locked, vm_.ticks - pending_->tick_begin});
    ckpt::TimePosition pos = position();
    pos.substep = b.substep;
    uint64_t id = store_.take(kind, pos, b);
    store_.note_take(static_cast<uint64_t>(
        std::chrono::duration_cast<std::chrono::microseconds>(std::chrono::steady_clock::now() - t0).count()));
    image_marks_.resize(id + 1);
    image_marks_[id] = b.mark;
    last_image_mark_ = b.mark;
    emit("checkpoint-taken", {{"id", id}, {"kind", ckpt::to_string(kind)}, {"tick", vm_.ticks}, {"position", pos.str()}});
    return id;
  }

  // Mark index an image was taken at.
  size_t image_mark(uint64_t id) const {
    if (id < image_marks_.size()) return image_marks_[id];
    return ckpt::decode_blob(store_.get(id).blob).mark;
  }

  // Positions the session at `t` on the recorded timeline, then runs
  // `locked_ticks` statements of `tid` with the scheduler locked. Used to
  // hand the user the state just before a culprit statement.
  void position_at(uint64_t t, uint16_t tid, uint64_t locked_ticks) {
    rewind_to_tick(t);
    if (locked_ticks == 0) return;
    run_motion(DebugCommand{Verb::Ticks, std::to_string(locked_ticks)}, int32_t(tid));
  }

 private:
  friend struct SessionAccess;

  Mark make_mark(bool bp) const {
    Mark m;
    m.tick = vm_.ticks;
    m.cursor = cursor_;
    m.focus = focus_;
    m.bp = bp;
    const vm::Thread* t = vm_.thread(focus_);
    if (t && !t->frames.empty()) {
      m.depth = static_cast<uint32_t>(t->frames.size());
      m.stmt = vm_.current_stmt(focus_);
    }
    return m;
  }

  vm::StepOutcome probe_tick_raw(Probe& p, int32_t locked) const {
    vm::LogPort port(*p.log, p.cursor, sources_);
    auto o = vm::vm_step(p.vm, locked >= 0 ? vm::StepMode::lock(uint16_t(locked)) : vm::StepMode::free(), port);
    p.cursor = port.cursor();
    return o;
  }

  vm::StepOutcome tick(int32_t locked) {
    // Copy-on-write: never append to a log another session still reads.
    if (cursor_ >= log_->committed() && log_.use_count() > 1) log_ = std::make_shared<log::EventLog>(*log_);
    vm::LogPort port(*log_, cursor_, sources_);
    auto o = vm::vm_step(vm_, locked >= 0 ? vm::StepMode::lock(uint16_t(locked)) : vm::StepMode::free(), port);
    cursor_ = port.cursor();
    return o;
  }

  void record_passive(const DebugCommand& cmd, const std::string& out) {
    HistoryEntry e;
    e.cmd = cmd;
    e.locked = locking_ ? focus_ : -1;
    e.focus = focus_;
    e.tick_begin = e.tick_end = vm_.ticks;
    e.mark_begin = e.mark_end = marks_.size() - 1;
    e.event_begin = e.event_end = cursor_;
    e.output = out;
    history_.push_back(std::move(e));
  }

  std::string dispatch(const DebugCommand& cmd) {
    switch (cmd.verb) {
      case Verb::Break: return add_breakpoint(cmd.arg);
      case Verb::Run:
      case Verb::Continue:
      case Verb::Next:
      case Verb::Step:
      case Verb::Finish:
      case Verb::Ticks: return run_motion(cmd, locking_ ? int32_t(focus_) : -1);
      case Verb::Print: {
        auto w = WatchExpr::parse(cmd.arg);
        auto r = evaluate(*w.ast);
        if (!r.ok()) throw Error(ErrorCode::EvalError, r.error);
        return "$" + std::to_string(++value_counter_) + " = " + r.text;
      }
      case Verb::Watch: {
        Watchpoint wp;
        wp.id = next_bp_id_++;
        wp.expr = WatchExpr::parse(cmd.arg);
        wp.last = evaluate(*wp.expr.ast, uint16_t(0)).text;
        watchpoints_.push_back(wp);
        return "Watchpoint " + std::to_string(wp.id) + ": " + cmd.arg;
      }
      case Verb::SwitchThread: {
        if (!locking_)
          throw Error(ErrorCode::SwitchThreadRejected,
                      "switch-thread requires scheduler-locking on; debugging is restricted to the primary thread");
        uint16_t tid = static_cast<uint16_t>(std::stoul(cmd.arg));
        const vm::Thread* t = vm_.thread(tid);
        if (!t || t->status == vm::ThreadStatus::Exited)
          throw Error(ErrorCode::SwitchThreadRejected, "Invalid thread ID: " + cmd.arg);
        focus_ = tid;
        return "[Switching to thread " + cmd.arg + "]\n#0  " + where(tid);
      }
      case Verb::SchedulerLocking:
        locking_ = cmd.arg == "on";
        if (!locking_ && focus_ != 0) {
          focus_ = 0;
          return "scheduler-locking off; focus returns to thread 0";
        }
        return std::string("scheduler-locking ") + (locking_ ? "on" : "off");
      case Verb::Checkpoint: {
        uint64_t id = take_image(ckpt::ImageKind::User);
        return "[fred] checkpoint " + std::to_string(id) + " taken at " + store_.get(id).position.str();
      }
      case Verb::ReverseStep:
      case Verb::ReverseNext:
      case Verb::ReverseFinish:
      case Verb::ReverseContinue: return reverse(cmd.verb);
      case Verb::ReverseWatch: return reverse_watch_command(*this, cmd.arg);
      case Verb::InfoThreads: return info_threads();
      case Verb::InfoCheckpoints: return info_checkpoints();
      case Verb::InfoBreakpoints: return info_breakpoints();
      case Verb::Backtrace: return backtrace(focus_);
    }
    throw Error(ErrorCode::BadCommand, "unhandled command");
  }

  std::string add_breakpoint(const std::string& spec) {
    Breakpoint bp;
    bp.spec = spec;
    std::optional<uint32_t> stmt;
    if (auto f = program_->find_function(spec)) {
      stmt = program_->code[program_->functions[*f].entry].stmt;
    } else {
      std::string num = spec;
      if (auto c = spec.rfind(':'); c != std::string::npos) {
        if (spec.substr(0, c) != program_->file)
          throw Error(ErrorCode::NoSuchBreakpointLocation, "No source file named " + spec.substr(0, c) + ".");
        num = spec.substr(c + 1);
      }
      bool digits = !num.empty() && std::all_of(num.begin(), num.end(), [](char ch) { return std::isdigit(static_cast<unsigned char>(ch)); });
      if (!digits) throw Error(ErrorCode::NoSuchBreakpointLocation, "Function \"" + spec + "\" not defined.");
      auto at = program_->statements_at_line(static_cast<uint32_t>(std::stoul(num)));
      if (at.empty()) throw Error(ErrorCode::NoSuchBreakpointLocation, "No statement at line " + num + ".");
      stmt = at.front();
    }
    bp.id = next_bp_id_++;
    bp.stmt = *stmt;
    bp.loc = program_->loc_of_stmt(*stmt);
    breakpoints_.push_back(bp);
    bp_stmts_.insert(*stmt);
    return "Breakpoint " + std::to_string(bp.id) + " at " + bp.loc.str();
  }

  Breakpoint* breakpoint_at(uint32_t stmt) {
    for (auto& b : breakpoints_)
      if (b.stmt == stmt) return &b;
    return nullptr;
  }

  std::string stop_banner_bp(uint16_t tid, Breakpoint& bp) const {
    std::string s = tid == 0 ? "" : "[Switching to thread " + std::to_string(tid) + "]\n";
    s += "\nBreakpoint " + std::to_string(bp.id) + ", " + where(tid) + "\n" + source_text(tid);
    return s;
  }

  std::string fault_banner(const vm::FaultInfo& f) const {
    std::string s = "\nThread " + std::to_string(f.tid) + " received signal " + vm::to_string(f.kind) + ".\n";
    s += f.detail + "\n";
    const vm::Thread* t = vm_.thread(f.tid);
    if (t && !t->frames.empty() && program_->functions[t->frames.back().func].nosym) {
      s += "0x" + std::string("0000000000000000") + " in ?? ()";
      return s;
    }
    auto loc = program_->loc_of_stmt(f.stmt);
    std::string fn = t && !t->frames.empty() ? program_->functions[t->frames.back().func].name : "??";
    s += fn + " () at " + loc.str() + "\n" + std::to_string(loc.line) + "\t" + program_->source_line(loc.line);
    return s;
  }

  // Runs one moving command and appends it to the history.
  std::string run_motion(const DebugCommand& cmd, int32_t locked) {
    if (cmd.verb == Verb::Run) {
      if (running_) throw Error(ErrorCode::BadCommand, "The program being debugged has been started already.");
    } else if (!running_ && cmd.verb != Verb::Ticks) {
      throw Error(ErrorCode::NotRunning, "The program is not being run.");
    }
    if (vm_.stopped())
      throw Error(ErrorCode::ProgramStopped, vm_.exited ? "The program is not being run (it exited)."
                                                        : "The program has faulted; only reverse commands can continue.");
    if (locked >= 0 && cursor_ < log_->committed()) log_ = std::make_shared<log::EventLog>(log_->prefix(cursor_));

    const uint16_t f = focus_;
    const vm::Thread* ft = vm_.thread(f);
    const uint32_t d0 = ft ? static_cast<uint32_t>(ft->frames.size()) : 0;
    const uint32_t fn0 = ft && !ft->frames.empty() ? ft->frames.back().func : 0;
    if (cmd.verb == Verb::Finish && d0 <= 1)
      throw Error(ErrorCode::BadCommand, "\"finish\" not meaningful in the outermost frame.");

    HistoryEntry e;
    e.cmd = cmd;
    e.locked = locked;
    e.focus = f;
    e.tick_begin = vm_.ticks;
    e.mark_begin = marks_.size() - 1;
    e.event_begin = cursor_;
    pending_ = &e;
    const size_t out0 = vm_.output.size();
    const uint64_t limit = cmd.verb == Verb::Ticks ? std::stoull(cmd.arg) : 0;
    const bool honor_stops = cmd.verb != Verb::Ticks;
    std::string banner;
    std::string prefix = cmd.verb == Verb::Finish ? "Run till exit from #0  " + where(f) + "\n" : "";
    if (cmd.verb == Verb::Run) running_ = true;

    bool stop = false;
    if (cmd.verb == Verb::Run && ft && !ft->frames.empty()) {
      if (auto* bp = breakpoint_at(vm_.current_stmt(f))) {
        ++bp->hits;
        banner = stop_banner_bp(f, *bp);
        stop = true;
      }
    }
    uint64_t done = 0;
    while (!stop) {
      if (limit && done >= limit) break;
      if (cmd.verb == Verb::Ticks && limit == 0) break;
      auto o = tick(locked);
      if (o.reason == vm::StopReason::Blocked) {
        banner = "Thread " + std::to_string(o.tid) + " cannot run: " +
                 vm::to_string(vm_.threads[o.tid].status) + (vm_.threads[o.tid].status == vm::ThreadStatus::Runnable ? "" : "") +
                 " (scheduler-locking is on)";
        break;
      }
      ++done;
      if (o.reason == vm::StopReason::Fault) {
        banner = fault_banner(*o.fault);
        emit_stop("fault", o.tid);
        break;
      }
      if (o.reason == vm::StopReason::ProgramExit) {
        banner = "[Inferior 1 (program) exited normally]";
        emit_stop("exited", o.tid);
        break;
      }
      const vm::Thread& ran = vm_.threads[o.tid];
      bool focus_alive = vm_.threads[f].status != vm::ThreadStatus::Exited;
      bool focus_step = o.tid == f && focus_alive && !vm_.in_nosym(f);
      Breakpoint* bp = nullptr;
      if (honor_stops && !ran.frames.empty()) bp = breakpoint_at(vm_.current_stmt(o.tid));
      std::string wp_text;
      if (honor_stops && !watchpoints_.empty()) {
        for (auto& w : watchpoints_) {
          std::string now = evaluate(*w.expr.ast, uint16_t(0)).text;
          if (now != w.last) {
            wp_text += "\nWatchpoint " + std::to_string(w.id) + ": " + w.expr.text + "\n\nOld value = " + w.last +
                       "\nNew value = " + now + "\n";
            w.last = now;
          }
        }
      }
      bool focus_exit = o.tid == f && !focus_alive;
      if (focus_step || bp || !wp_text.empty() || focus_exit) {
        marks_.push_back(make_mark(bp != nullptr));
        if (auto_every_ && marks_.size() - 1 - last_image_mark_ >= auto_every_) auto_image();
      }
      if (bp) {
        ++bp->hits;
        banner = stop_banner_bp(o.tid, *bp);
        emit_stop("breakpoint", o.tid);
        break;
      }
      if (!wp_text.empty()) {
        banner = wp_text + where(f) + "\n" + source_text(f);
        emit_stop("watchpoint", f);
        break;
      }
      if (focus_exit && cmd.verb != Verb::Ticks && cmd.verb != Verb::Continue && cmd.verb != Verb::Run) {
        banner = "[Thread " + std::to_string(f) + " exited]";
        break;
      }
      if (focus_step) {
        uint32_t d = static_cast<uint32_t>(vm_.threads[f].frames.size());
        bool done_cmd = (cmd.verb == Verb::Step) || (cmd.verb == Verb::Next && d <= d0) ||
                        (cmd.verb == Verb::Finish && d < d0);
        if (done_cmd) {
          const auto& fr = vm_.threads[f].frames.back();
          banner = (fr.func != fn0 || cmd.verb == Verb::Finish ? where(f) + "\n" : "") + source_text(f);
          emit_stop("step", f);
          break;
        }
      }
    }
    if (marks_.back().tick != vm_.ticks) {
      marks_.push_back(make_mark(false));
      if (auto_every_ && marks_.size() - 1 - last_image_mark_ >= auto_every_) auto_image();
    }
    pending_ = nullptr;
    e.tick_end = vm_.ticks;
    e.mark_end = marks_.size() - 1;
    e.event_end = cursor_;
    std::string program_out = vm_.output.substr(out0);
    if (!program_out.empty()) emit("output", {{"text", program_out}});
    e.output = program_out + prefix + banner;
    while (!e.output.empty() && e.output.front() == '\n') e.output.erase(0, 1);
    if (e.ticks() == 0 && cmd.verb != Verb::Run) return e.output;  // nothing ran; not history
    history_.push_back(e);
    return e.output;
  }

  void auto_image() {
    try {
      take_image(ckpt::ImageKind::Intermediate);
    } catch (const Error& err) {
      if (err.code() != ErrorCode::StoreFull) throw;
      auto_every_ = 0;
      warnings_.push_back("checkpoint store full; intermediate checkpoints disabled");
    }
  }

  void emit_stop(const char* reason, uint16_t tid) const {
    auto loc = vm_.thread(tid) && !vm_.threads[tid].frames.empty() ? program_->loc_of_instr(vm_.threads[tid].frames.back().ip)
                                                                   : vm::SourceLoc{};
    emit("stopped", {{"reason", reason}, {"tid", tid}, {"line", loc.line}, {"tick", vm_.ticks}});
  }

  std::string reverse(Verb v) {
    size_t s = marks_.size() - 1;
    if (s == 0) throw Error(ErrorCode::AtSessionStart, "No more reverse-execution history.");
    uint32_t d = marks_[s].depth;
    size_t target = 0;
    switch (v) {
      case Verb::ReverseStep: target = s - 1; break;
      case Verb::ReverseNext:
        target = 0;
        for (size_t j = s; j-- > 0;)
          if (marks_[j].depth <= d) {
            target = j;
            break;
          }
        break;
      case Verb::ReverseFinish: {
        bool found = false;
        for (size_t j = s; j-- > 0;)
          if (marks_[j].depth < d) {
            target = j;
            found = true;
            break;
          }
        if (!found) throw Error(ErrorCode::BadCommand, "\"finish\" not meaningful in the outermost frame.");
        break;
      }
      default:
        target = 0;
        for (size_t j = s; j-- > 0;)
          if (marks_[j].bp || (j > 0 && bp_stmts_.count(marks_[j].stmt))) {
            target = j;
            break;
          }
        break;
    }
    rewind_to_mark(target);
    emit_stop("reverse", focus_);
    if (target == 0 && v == Verb::ReverseContinue) return "\nNo more reverse-execution history.\n" + where(focus_) + "\n" + source_text(focus_);
    for (auto& b : breakpoints_)
      if (v == Verb::ReverseContinue && marks_.back().stmt == b.stmt)
        return "\nBreakpoint " + std::to_string(b.id) + ", " + where(focus_) + "\n" + source_text(focus_);
    return where(focus_) + "\n" + source_text(focus_);
  }

  std::string info_threads() const {
    std::string s = "  Id   Status            Where\n";
    for (const auto& t : vm_.threads) {
      char buf[64];
      std::snprintf(buf, sizeof buf, "%c %-4u %-17s ", t.tid == focus_ ? '*' : ' ', unsigned(t.tid), vm::to_string(t.status));
      s += buf + where(t.tid) + "\n";
    }
    return s;
  }

  std::string info_checkpoints() const {
    std::string s;
    for (const auto& i : store_.images())
      s += std::to_string(i.id) + "  " + ckpt::to_string(i.kind) + "  tick " + std::to_string(i.tick()) + "  " +
           i.position.str() + "\n";
    return s.empty() ? "No checkpoints.\n" : s;
  }

  std::string info_breakpoints() const {
    if (breakpoints_.empty() && watchpoints_.empty()) return "No breakpoints or watchpoints.\n";
    std::string s = "Num  Type        What\n";
    for (const auto& b : breakpoints_)
      s += std::to_string(b.id) + "    breakpoint  " + b.loc.str() + " (hit " + std::to_string(b.hits) + ")\n";
    for (const auto& w : watchpoints_) s += std::to_string(w.id) + "    watchpoint  " + w.expr.text + "\n";
    return s;
  }

  std::string backtrace(uint16_t tid) const {
    const vm::Thread* t = vm_.thread(tid);
    if (!t || t->frames.empty()) return "No stack.\n";
    std::string s;
    size_t n = 0;
    for (size_t i = t->frames.size(); i-- > 0;) {
      const auto& f = t->frames[i];
      const auto& fn = program_->functions[f.func];
      s += "#" + std::to_string(n++) + "  ";
      if (fn.nosym) {
        s += "?? ()\n";
        continue;
      }
      auto loc = i + 1 == t->frames.size() ? top_loc(tid) : program_->loc_of_instr(f.ip - 1);
      s += fn.name + " () at " + loc.str() + "\n";
    }
    return s;
  }

  static std::string reverse_watch_command(Session& s, const std::string& expr);

  std::shared_ptr<const vm::Program> program_;
  SessionOptions opts_;
  vm::VmState vm_;
  std::shared_ptr<log::EventLog> log_;
  uint64_t cursor_ = 0;
  vm::RecordSources sources_;
  ckpt::CheckpointStore store_;
  std::vector<HistoryEntry> history_;
  std::vector<Mark> marks_;
  std::vector<size_t> image_marks_;
  std::vector<Breakpoint> breakpoints_;
  std::set<uint32_t> bp_stmts_;
  std::vector<Watchpoint> watchpoints_;
  std::vector<std::string> warnings_;
  HistoryEntry* pending_ = nullptr;
  uint64_t auto_every_ = 1000;
  size_t last_image_mark_ = 0;
  uint16_t focus_ = 0;
  bool locking_ = false;
  bool running_ = false;
  bool busy_ = false;
  int next_bp_id_ = 1;
  int value_counter_ = 0;
  uint64_t restarts_ = 0;
  EventSink sink_;
  nlohmann::json last_search_;
};

}  // namespace fred::dbg

#include "fred/search/reverse_watch.hpp"
