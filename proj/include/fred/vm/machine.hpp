#pragma once

// The target machine: green threads interleaved at statement granularity,
// a deterministic bump heap, a lock table, and every nondeterminism source
// routed through the event log.
//
// One `vm_step` completes exactly one source statement of one thread (a
// "tick"), or reports that the chosen thread blocked or faulted. A thread
// that blocks, or whose first event of the tick does not match the replay
// head, is rolled back to the start of its statement; the language
// guarantees nothing observable happened before that point (at most one
// call or runtime operation per statement, stores last).

#include <chrono>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "fred/log/event_log.hpp"
#include "fred/support.hpp"
#include "fred/vm/program.hpp"
#include "fred/vm/value.hpp"

namespace fred::vm {

inline constexpr uint64_t kHeapBase = 0x1000000;
inline constexpr uint64_t kHeapAlign = 16;
inline constexpr uint64_t kHeapCap = 1ULL << 32;
inline constexpr size_t kMaxFrames = 4096;

struct Cell {
  uint64_t base = 0;
  uint64_t size = 0;  // bytes, multiple of 8
  uint64_t seq = 0;   // allocation sequence number
  bool freed = false;
  std::vector<Value> words;
};

enum class ThreadStatus : uint8_t { Runnable, BlockedLock, BlockedJoin, Exited };

inline const char* to_string(ThreadStatus s) {
  switch (s) {
    case ThreadStatus::Runnable: return "runnable";
    case ThreadStatus::BlockedLock: return "blocked-on-lock";
    case ThreadStatus::BlockedJoin: return "blocked-on-join";
    case ThreadStatus::Exited: return "exited";
  }
  return "?";
}

struct Frame {
  uint32_t func = 0;
  uint32_t ip = 0;
  uint32_t stack_base = 0;
  std::vector<Value> locals;
};

struct Thread {
  uint16_t tid = 0;
  ThreadStatus status = ThreadStatus::Runnable;
  int64_t wait_on = 0;  // lock id or joined tid
  std::vector<Frame> frames;
  std::vector<Value> stack;
};

enum class FaultKind : uint8_t {
  NilDeref,
  Unmapped,
  UseAfterFree,
  DoubleFree,
  DivByZero,
  AssertFailed,
  TypeError,
  IndexOutOfRange,
  BadLock,
  Deadlock,
  ResourceExhausted,
  StackOverflow,
};

inline const char* to_string(FaultKind k) {
  switch (k) {
    case FaultKind::NilDeref: return "SIGSEGV (nil dereference)";
    case FaultKind::Unmapped: return "SIGSEGV (unmapped address)";
    case FaultKind::UseAfterFree: return "SIGSEGV (use after free)";
    case FaultKind::DoubleFree: return "SIGABRT (double free)";
    case FaultKind::DivByZero: return "SIGFPE (division by zero)";
    case FaultKind::AssertFailed: return "SIGABRT (assertion failed)";
    case FaultKind::TypeError: return "SIGILL (type error)";
    case FaultKind::IndexOutOfRange: return "SIGSEGV (index out of range)";
    case FaultKind::BadLock: return "SIGSEGV (bad mutex)";
    case FaultKind::Deadlock: return "deadlock (all threads blocked)";
    case FaultKind::ResourceExhausted: return "SIGKILL (heap exhausted)";
    case FaultKind::StackOverflow: return "SIGSEGV (stack overflow)";
  }
  return "?";
}

struct FaultInfo {
  FaultKind kind = FaultKind::TypeError;
  uint16_t tid = 0;
  uint32_t stmt = 0;
  std::string detail;
  uint64_t address = 0;
};

struct VmState {
  std::shared_ptr<const Program> program;
  std::vector<Thread> threads;
  std::map<uint64_t, Cell> heap;
  uint64_t heap_next = kHeapBase;
  uint64_t heap_bytes = 0;
  uint64_t alloc_seq = 0;
  std::vector<Value> globals;
  std::vector<std::vector<Value>> lists;
  std::vector<std::string> strings;
  std::map<int64_t, uint16_t> locks;  // lock id -> owner tid
  uint16_t current = 0;
  uint64_t statements = 0;  // completed statements
  uint64_t ticks = 0;       // vm_step calls that changed state (completed, faulted or exited)
  SplitMix64 sched{0};
  uint64_t input_pos = 0;
  std::string output;
  bool exited = false;
  std::optional<FaultInfo> fault;

  bool stopped() const { return exited || fault.has_value(); }
  const Thread* thread(uint16_t tid) const { return tid < threads.size() ? &threads[tid] : nullptr; }
  size_t live_threads() const {
    size_t n = 0;
    for (const auto& t : threads) n += t.status != ThreadStatus::Exited;
    return n;
  }
  // Statement the thread is at (about to execute, or faulted inside).
  uint32_t current_stmt(uint16_t tid) const {
    const Thread& t = threads.at(tid);
    if (t.frames.empty()) return 0;
    return program->code.at(t.frames.back().ip).stmt;
  }
  size_t depth(uint16_t tid) const { return threads.at(tid).frames.size(); }
  // True when some frame of the thread lacks symbols.
  bool in_nosym(uint16_t tid) const {
    for (const auto& f : threads.at(tid).frames)
      if (program->functions[f.func].nosym) return true;
    return false;
  }
};

// Record-side nondeterminism. Replay never consults these.
struct RecordSources {
  std::function<int64_t()> clock = [] {
    return std::chrono::duration_cast<std::chrono::microseconds>(
               std::chrono::system_clock::now().time_since_epoch())
        .count();
  };
  std::function<uint64_t()> rand = [] {
    static std::random_device rd;
    return (static_cast<uint64_t>(rd()) << 32) ^ rd();
  };
  std::vector<std::string> input_lines;
};

// Binds a VM to a log position. While the cursor is behind the committed
// head the port replays (gated); once it catches up it records.
class LogPort {
 public:
  LogPort(log::EventLog& log, uint64_t cursor, const RecordSources& sources)
      : log_(&log), cursor_(cursor), sources_(&sources) {}

  bool replaying() const { return !cursor_.exhausted(*log_); }
  uint64_t cursor() const { return cursor_.position(); }
  const log::EventLog& log() const { return *log_; }
  const RecordSources& sources() const { return *sources_; }

  // Replay: returns the logged event if `intent` matches the head, else
  // nullopt. Record: `fill` computes the payload and the entry is appended.
  template <typename Fill>
  std::optional<log::Event> perform(const log::Intent& intent, Fill&& fill) {
    if (replaying()) {
      auto permit = cursor_.gate(*log_, intent);
      if (!permit) return std::nullopt;
      return cursor_.consume(*log_, *permit);
    }
    auto slot = log_->reserve(intent.tid, intent.kind);
    log::Event payload;
    payload.a = intent.a;
    payload.b = intent.b;
    fill(payload);
    log_->fill(slot, intent.tid, payload);
    cursor_.set_position(log_->committed());
    return log_->at(slot.seqno);
  }

  const log::Event* head() const { return replaying() ? &log_->at(cursor_.position()) : nullptr; }

 private:
  log::EventLog* log_;
  log::ReplayCursor cursor_;
  const RecordSources* sources_;
};

enum class StopReason : uint8_t { Completed, Breakpoint, Fault, Blocked, ProgramExit };

inline const char* to_string(StopReason r) {
  switch (r) {
    case StopReason::Completed: return "completed";
    case StopReason::Breakpoint: return "breakpoint";
    case StopReason::Fault: return "fault";
    case StopReason::Blocked: return "blocked";
    case StopReason::ProgramExit: return "program-exit";
  }
  return "?";
}

struct StepOutcome {
  uint16_t tid = 0;
  SourceLoc loc;
  uint64_t event_begin = 0;  // seqnos [event_begin, event_end) emitted or consumed
  uint64_t event_end = 0;
  StopReason reason = StopReason::Completed;
  std::optional<FaultInfo> fault;

  bool has_events() const { return event_end > event_begin; }
};

struct StepMode {
  std::optional<uint16_t> locked;  // scheduler locking on this tid

  static StepMode free() { return {}; }
  static StepMode lock(uint16_t tid) { return {tid}; }
};

inline VmState vm_new(std::shared_ptr<const Program> program, uint64_t seed) {
  VmState s;
  s.program = program;
  s.sched = SplitMix64(seed);
  s.strings = program->strings;
  std::function<Value(const Constant&)> make = [&](const Constant& c) -> Value {
    if (c.kind == ValueKind::List) {
      std::vector<Value> items;
      for (const auto& it : c.items) items.push_back(make(it));
      s.lists.push_back(std::move(items));
      return Value::list(static_cast<uint32_t>(s.lists.size() - 1));
    }
    return {c.kind, c.v};
  };
  for (const auto& c : program->global_inits) s.globals.push_back(make(c));
  Thread main;
  main.tid = 0;
  Frame f;
  f.func = program->main_func;
  f.ip = program->functions[f.func].entry;
  f.locals.resize(program->functions[f.func].locals);
  main.frames.push_back(std::move(f));
  s.threads.push_back(std::move(main));
  return s;
}

inline std::string format_value(const VmState& s, Value v, int depth = 0) {
  switch (v.kind) {
    case ValueKind::Nil: return "nil";
    case ValueKind::Int: return std::to_string(v.v);
    case ValueKind::Bool: return v.v ? "true" : "false";
    case ValueKind::Addr: return hex(static_cast<uint64_t>(v.v));
    case ValueKind::Str: return s.strings.at(static_cast<size_t>(v.v));
    case ValueKind::List: {
      if (depth > 4) return "[...]";
      std::string out = "[";
      const auto& items = s.lists.at(static_cast<size_t>(v.v));
      for (size_t i = 0; i < items.size(); ++i) {
        if (i) out += ", ";
        out += format_value(s, items[i], depth + 1);
      }
      return out + "]";
    }
  }
  return "?";
}

// Locates the heap word at `addr`. Returns nullptr with `why` set when the
// address is not a readable word of a live cell.
enum class MemStatus { Ok, Null, Unmapped, Freed };

inline MemStatus locate(const std::map<uint64_t, Cell>& heap, uint64_t addr, const Cell** cell,
                        size_t* word) {
  if (addr == 0) return MemStatus::Null;
  auto it = heap.upper_bound(addr);
  if (it == heap.begin()) return MemStatus::Unmapped;
  --it;
  const Cell& c = it->second;
  if (addr >= c.base + c.size || (addr - c.base) % 8 != 0) return MemStatus::Unmapped;
  *cell = &c;
  *word = (addr - c.base) / 8;
  return c.freed ? MemStatus::Freed : MemStatus::Ok;
}

namespace detail {

enum class TickResult { Completed, Blocked, Gated, Faulted, Exited };

class Interp {
 public:
  Interp(VmState& s, LogPort& port) : s_(s), port_(port), prog_(*s.program) {}

  TickResult tick(uint16_t tid, StepOutcome& out) {
    Thread& t = s_.threads[tid];
    tid_ = tid;
    events_ = 0;
    const size_t depth0 = t.frames.size();
    const uint32_t ip0 = t.frames.back().ip;
    const size_t stack0 = t.stack.size();
    out.tid = tid;
    out.loc = prog_.loc_of_instr(ip0);
    out.event_begin = port_.cursor();
    bool first = true;
    for (;;) {
      Thread& th = s_.threads[tid];
      if (th.frames.empty()) return TickResult::Exited;
      Frame& f = th.frames.back();
      const Instr& in = prog_.code[f.ip];
      if (in.op == Op::Stmt && !first) return TickResult::Completed;
      first = false;
      ++f.ip;
      Flow flow = exec(in);
      switch (flow) {
        case Flow::Next: break;
        case Flow::Done: return TickResult::Completed;
        case Flow::ThreadExit: return TickResult::Exited;
        case Flow::Fault: return TickResult::Faulted;
        case Flow::Block:
        case Flow::Gate: {
          Thread& tb = s_.threads[tid];
          if (events_ > 0 || tb.frames.size() != depth0) {
            const log::Event* h = port_.head();
            throw Error(ErrorCode::ReplayDivergence,
                        "thread " + std::to_string(tid) + " diverged mid-statement at " +
                            out.loc.str() + (h ? "; log head: " + log::describe(*h) : ""));
          }
          tb.frames.back().ip = ip0;
          tb.stack.resize(stack0);
          return flow == Flow::Block ? TickResult::Blocked : TickResult::Gated;
        }
      }
    }
  }

  std::string gated_intent;

 private:
  enum class Flow { Next, Done, ThreadExit, Fault, Block, Gate };

  Thread& me() { return s_.threads[tid_]; }
  Value pop() {
    Value v = me().stack.back();
    me().stack.pop_back();
    return v;
  }
  void push(Value v) { me().stack.push_back(v); }

  Flow fault(FaultKind k, std::string detail, uint64_t addr = 0) {
    FaultInfo fi;
    fi.kind = k;
    fi.tid = tid_;
    fi.stmt = prog_.code[me().frames.back().ip - 1].stmt;
    fi.detail = std::move(detail);
    fi.address = addr;
    s_.fault = std::move(fi);
    return Flow::Fault;
  }

  // Performs a logged action. Returns nullopt when replay gating refuses it.
  template <typename Fill>
  std::optional<log::Event> event(log::EventKind kind, uint64_t a, uint64_t b, Fill&& fill) {
    log::Intent in{tid_, kind, a, b};
    auto e = port_.perform(in, std::forward<Fill>(fill));
    if (!e) {
      gated_intent = log::describe(in);
      return std::nullopt;
    }
    ++events_;
    return e;
  }
  std::optional<log::Event> event(log::EventKind kind, uint64_t a = 0, uint64_t b = 0) {
    return event(kind, a, b, [](log::Event&) {});
  }

  void wake(ThreadStatus st, int64_t on) {
    for (auto& t : s_.threads)
      if (t.status == st && t.wait_on == on) t.status = ThreadStatus::Runnable;
  }

  std::optional<int64_t> lock_id(Value v, Flow& f) {
    if (v.kind == ValueKind::Nil || (v.is_numeric() && v.as_number() == 0)) {
      f = fault(FaultKind::BadLock, "mutex pointer is nil", 0);
      return std::nullopt;
    }
    if (v.kind == ValueKind::Addr) {
      const Cell* c = nullptr;
      size_t w = 0;
      auto st = locate(s_.heap, static_cast<uint64_t>(v.v), &c, &w);
      if (st == MemStatus::Freed) {
        f = fault(FaultKind::UseAfterFree, "mutex at " + hex(static_cast<uint64_t>(v.v)) + " was freed",
                  static_cast<uint64_t>(v.v));
        return std::nullopt;
      }
      if (st != MemStatus::Ok) {
        f = fault(FaultKind::BadLock, "mutex address " + hex(static_cast<uint64_t>(v.v)) + " unmapped",
                  static_cast<uint64_t>(v.v));
        return std::nullopt;
      }
      return v.v;
    }
    if (v.kind == ValueKind::Int) return v.v;
    f = fault(FaultKind::TypeError, "mutex must be an address or integer");
    return std::nullopt;
  }

  // Resolves a load/store target; sets `f` on fault.
  Cell* mem(Value addr, size_t* word, Flow& f, const char* what) {
    if (addr.kind == ValueKind::Nil) {
      f = fault(FaultKind::NilDeref, std::string(what) + " through nil pointer", 0);
      return nullptr;
    }
    if (addr.kind != ValueKind::Addr && addr.kind != ValueKind::Int) {
      f = fault(FaultKind::TypeError, std::string(what) + " of a non-address");
      return nullptr;
    }
    uint64_t a = static_cast<uint64_t>(addr.v);
    const Cell* c = nullptr;
    switch (locate(s_.heap, a, &c, word)) {
      case MemStatus::Ok: return const_cast<Cell*>(c);
      case MemStatus::Null: f = fault(FaultKind::NilDeref, std::string(what) + " at address 0x0", 0); break;
      case MemStatus::Freed:
        f = fault(FaultKind::UseAfterFree, std::string(what) + " of freed memory at " + hex(a), a);
        break;
      case MemStatus::Unmapped:
        f = fault(FaultKind::Unmapped, std::string(what) + " of unmapped address " + hex(a), a);
        break;
    }
    return nullptr;
  }

  Flow alloc_cell(uint64_t bytes, Value* out) {
    uint64_t size = (bytes + 7) / 8 * 8;
    uint64_t span = (size + kHeapAlign - 1) / kHeapAlign * kHeapAlign;
    if (s_.heap_bytes + span > kHeapCap) return fault(FaultKind::ResourceExhausted, "heap cap reached");
    uint64_t addr = s_.heap_next;
    auto e = event(log::EventKind::Alloc, bytes, 0, [&](log::Event& p) { p.b = addr; });
    if (!e) return Flow::Gate;
    if (e->b != addr)
      throw Error(ErrorCode::ReplayDivergence,
                  "allocation returned " + hex(addr) + " but the log recorded " + hex(e->b));
    Cell c;
    c.base = addr;
    c.size = size;
    c.seq = s_.alloc_seq++;
    c.words.resize(size / 8);
    s_.heap.emplace(addr, std::move(c));
    s_.heap_next += span;
    s_.heap_bytes += span;
    *out = Value::addr(addr);
    return Flow::Next;
  }

  Flow arith(Op op) {
    Value b = pop();
    Value a = pop();
    auto num = [](Value v) { return v.kind == ValueKind::Int; };
    switch (op) {
      case Op::Add:
        if (num(a) && num(b)) return push(Value::integer(a.v + b.v)), Flow::Next;
        if (a.kind == ValueKind::Addr && num(b)) return push(Value::addr(static_cast<uint64_t>(a.v + b.v))), Flow::Next;
        if (num(a) && b.kind == ValueKind::Addr) return push(Value::addr(static_cast<uint64_t>(a.v + b.v))), Flow::Next;
        if (a.kind == ValueKind::Str && b.kind == ValueKind::Str) {
          s_.strings.push_back(s_.strings[static_cast<size_t>(a.v)] + s_.strings[static_cast<size_t>(b.v)]);
          push(Value::str(static_cast<uint32_t>(s_.strings.size() - 1)));
          return Flow::Next;
        }
        break;
      case Op::Sub:
        if (num(a) && num(b)) return push(Value::integer(a.v - b.v)), Flow::Next;
        if (a.kind == ValueKind::Addr && num(b)) return push(Value::addr(static_cast<uint64_t>(a.v - b.v))), Flow::Next;
        if (a.kind == ValueKind::Addr && b.kind == ValueKind::Addr) return push(Value::integer(a.v - b.v)), Flow::Next;
        break;
      case Op::Mul:
        if (num(a) && num(b)) return push(Value::integer(a.v * b.v)), Flow::Next;
        break;
      case Op::Div:
      case Op::Mod:
        if (num(a) && num(b)) {
          if (b.v == 0) return fault(FaultKind::DivByZero, "division by zero");
          push(Value::integer(op == Op::Div ? a.v / b.v : a.v % b.v));
          return Flow::Next;
        }
        break;
      case Op::Eq:
      case Op::Ne: {
        bool eq;
        if (a.is_numeric() && b.is_numeric()) eq = a.as_number() == b.as_number();
        else if (a.kind == ValueKind::Str && b.kind == ValueKind::Str)
          eq = s_.strings[static_cast<size_t>(a.v)] == s_.strings[static_cast<size_t>(b.v)];
        else eq = a == b;
        push(Value::boolean(op == Op::Eq ? eq : !eq));
        return Flow::Next;
      }
      case Op::Lt:
      case Op::Le:
      case Op::Gt:
      case Op::Ge:
        if (a.is_numeric() && b.is_numeric()) {
          int64_t x = a.as_number(), y = b.as_number();
          bool r = op == Op::Lt ? x < y : op == Op::Le ? x <= y : op == Op::Gt ? x > y : x >= y;
          push(Value::boolean(r));
          return Flow::Next;
        }
        break;
      default: break;
    }
    return fault(FaultKind::TypeError, std::string("bad operands to ") + op_name(op));
  }

  Flow exec(const Instr& in) {
    Flow f = Flow::Next;
    switch (in.op) {
      case Op::Stmt: return Flow::Next;
      case Op::PushInt: push(Value::integer(in.a)); return f;
      case Op::PushStr: push(Value::str(static_cast<uint32_t>(in.a))); return f;
      case Op::PushNil: push(Value::nil()); return f;
      case Op::PushBool: push(Value::boolean(in.a != 0)); return f;
      case Op::LoadLocal: push(me().frames.back().locals[static_cast<size_t>(in.a)]); return f;
      case Op::StoreLocal: {
        Value v = pop();
        me().frames.back().locals[static_cast<size_t>(in.a)] = v;
        return f;
      }
      case Op::LoadGlobal: push(s_.globals[static_cast<size_t>(in.a)]); return f;
      case Op::StoreGlobal: s_.globals[static_cast<size_t>(in.a)] = pop(); return f;
      case Op::LoadMem: {
        size_t w = 0;
        Cell* c = mem(pop(), &w, f, "read");
        if (!c) return f;
        push(c->words[w]);
        return f;
      }
      case Op::StoreMem: {
        Value v = pop();
        size_t w = 0;
        Cell* c = mem(pop(), &w, f, "write");
        if (!c) return f;
        c->words[w] = v;
        return f;
      }
      case Op::FieldAddr: {
        Value p = pop();
        if (p.kind == ValueKind::Nil || (p.is_numeric() && p.as_number() == 0))
          return fault(FaultKind::NilDeref, "field access through nil pointer", 0);
        if (p.kind != ValueKind::Addr && p.kind != ValueKind::Int)
          return fault(FaultKind::TypeError, "field access on a non-pointer");
        push(Value::addr(static_cast<uint64_t>(p.v + in.a)));
        return f;
      }
      case Op::LoadIndex: {
        Value i = pop();
        Value l = pop();
        if (l.kind != ValueKind::List || i.kind != ValueKind::Int)
          return fault(FaultKind::TypeError, "indexing requires a list and an integer");
        auto& items = s_.lists[static_cast<size_t>(l.v)];
        if (i.v < 0 || static_cast<size_t>(i.v) >= items.size())
          return fault(FaultKind::IndexOutOfRange, "index " + std::to_string(i.v) + " of list of length " +
                                                       std::to_string(items.size()));
        push(items[static_cast<size_t>(i.v)]);
        return f;
      }
      case Op::StoreIndex: {
        Value v = pop();
        Value i = pop();
        Value l = pop();
        if (l.kind != ValueKind::List || i.kind != ValueKind::Int)
          return fault(FaultKind::TypeError, "indexing requires a list and an integer");
        auto& items = s_.lists[static_cast<size_t>(l.v)];
        if (i.v < 0 || static_cast<size_t>(i.v) >= items.size())
          return fault(FaultKind::IndexOutOfRange, "index " + std::to_string(i.v) + " of list of length " +
                                                       std::to_string(items.size()));
        items[static_cast<size_t>(i.v)] = v;
        return f;
      }
      case Op::MakeList: {
        auto& st = me().stack;
        std::vector<Value> items(st.end() - in.a, st.end());
        st.resize(st.size() - static_cast<size_t>(in.a));
        s_.lists.push_back(std::move(items));
        push(Value::list(static_cast<uint32_t>(s_.lists.size() - 1)));
        return f;
      }
      case Op::Append: {
        Value v = pop();
        Value l = pop();
        if (l.kind != ValueKind::List) return fault(FaultKind::TypeError, "push onto a non-list");
        s_.lists[static_cast<size_t>(l.v)].push_back(v);
        return f;
      }
      case Op::Len: {
        Value v = pop();
        if (v.kind == ValueKind::List) push(Value::integer(static_cast<int64_t>(s_.lists[static_cast<size_t>(v.v)].size())));
        else if (v.kind == ValueKind::Str) push(Value::integer(static_cast<int64_t>(s_.strings[static_cast<size_t>(v.v)].size())));
        else return fault(FaultKind::TypeError, "len of a non-list");
        return f;
      }
      case Op::Neg: {
        Value v = pop();
        if (v.kind != ValueKind::Int) return fault(FaultKind::TypeError, "negation of a non-integer");
        push(Value::integer(-v.v));
        return f;
      }
      case Op::Not: push(Value::boolean(!pop().truthy())); return f;
      case Op::Add:
      case Op::Sub:
      case Op::Mul:
      case Op::Div:
      case Op::Mod:
      case Op::Eq:
      case Op::Ne:
      case Op::Lt:
      case Op::Le:
      case Op::Gt:
      case Op::Ge: return arith(in.op);
      case Op::Dup: push(me().stack.back()); return f;
      case Op::Pop: pop(); return f;
      case Op::Jmp: me().frames.back().ip = static_cast<uint32_t>(in.a); return f;
      case Op::JmpIfFalse:
        if (!pop().truthy()) me().frames.back().ip = static_cast<uint32_t>(in.a);
        return f;
      case Op::Call: {
        if (me().frames.size() >= kMaxFrames) return fault(FaultKind::StackOverflow, "call depth limit");
        const Function& fn = prog_.functions[static_cast<size_t>(in.a)];
        Frame nf;
        nf.func = static_cast<uint32_t>(in.a);
        nf.ip = fn.entry;
        nf.locals.resize(fn.locals);
        auto& st = me().stack;
        for (int32_t i = in.b - 1; i >= 0; --i) {
          nf.locals[static_cast<size_t>(i)] = st.back();
          st.pop_back();
        }
        nf.stack_base = static_cast<uint32_t>(st.size());
        me().frames.push_back(std::move(nf));
        return f;
      }
      case Op::Ret: {
        Value rv = pop();
        Thread& t = me();
        uint32_t base = t.frames.back().stack_base;
        if (t.frames.size() == 1) {
          if (tid_ == 0) {
            t.frames.pop_back();
            t.stack.clear();
            t.status = ThreadStatus::Exited;
            s_.exited = true;
            return Flow::ThreadExit;
          }
          if (!event(log::EventKind::ThreadExit)) return Flow::Gate;
          Thread& t2 = me();
          t2.frames.pop_back();
          t2.stack.clear();
          t2.status = ThreadStatus::Exited;
          for (auto it = s_.locks.begin(); it != s_.locks.end();) {
            if (it->second != tid_) {
              ++it;
              continue;
            }
            wake(ThreadStatus::BlockedLock, it->first);
            it = s_.locks.erase(it);
          }
          wake(ThreadStatus::BlockedJoin, tid_);
          return Flow::ThreadExit;
        }
        t.frames.pop_back();
        t.stack.resize(base);
        t.stack.push_back(rv);
        return f;
      }
      case Op::Spawn: {
        uint16_t child = static_cast<uint16_t>(s_.threads.size());
        if (!event(log::EventKind::ThreadCreate, child)) return Flow::Gate;
        const Function& fn = prog_.functions[static_cast<size_t>(in.a)];
        Thread t;
        t.tid = child;
        Frame nf;
        nf.func = static_cast<uint32_t>(in.a);
        nf.ip = fn.entry;
        nf.locals.resize(fn.locals);
        auto& st = me().stack;
        for (int32_t i = in.b - 1; i >= 0; --i) {
          nf.locals[static_cast<size_t>(i)] = st.back();
          st.pop_back();
        }
        t.frames.push_back(std::move(nf));
        s_.threads.push_back(std::move(t));
        push(Value::integer(child));
        return f;
      }
      case Op::Join: {
        Value v = pop();
        if (v.kind != ValueKind::Int || v.v < 0 || static_cast<size_t>(v.v) >= s_.threads.size() || v.v == tid_)
          return fault(FaultKind::TypeError, "join of invalid thread id");
        if (s_.threads[static_cast<size_t>(v.v)].status != ThreadStatus::Exited) {
          me().status = ThreadStatus::BlockedJoin;
          me().wait_on = v.v;
          return Flow::Block;
        }
        if (!event(log::EventKind::Join, static_cast<uint64_t>(v.v))) return Flow::Gate;
        return f;
      }
      case Op::Lock: {
        auto id = lock_id(pop(), f);
        if (!id) return f;
        auto it = s_.locks.find(*id);
        if (it != s_.locks.end()) {
          if (it->second == tid_) return fault(FaultKind::BadLock, "relock of a held mutex " + hex(static_cast<uint64_t>(*id)));
          me().status = ThreadStatus::BlockedLock;
          me().wait_on = *id;
          return Flow::Block;
        }
        if (!event(log::EventKind::LockAcquire, static_cast<uint64_t>(*id))) return Flow::Gate;
        s_.locks[*id] = tid_;
        return f;
      }
      case Op::Unlock: {
        auto id = lock_id(pop(), f);
        if (!id) return f;
        auto it = s_.locks.find(*id);
        if (it == s_.locks.end() || it->second != tid_)
          return fault(FaultKind::BadLock, "unlock of a mutex not held by this thread");
        if (!event(log::EventKind::LockRelease, static_cast<uint64_t>(*id))) return Flow::Gate;
        s_.locks.erase(*id);
        wake(ThreadStatus::BlockedLock, *id);
        return f;
      }
      case Op::Alloc:
      case Op::New: {
        int64_t bytes = in.op == Op::New ? in.a : 0;
        if (in.op == Op::Alloc) {
          Value n = pop();
          if (n.kind != ValueKind::Int || n.v <= 0) return fault(FaultKind::TypeError, "alloc size must be positive");
          bytes = n.v;
        }
        Value out;
        f = alloc_cell(static_cast<uint64_t>(bytes), &out);
        if (f == Flow::Next) push(out);
        return f;
      }
      case Op::Free: {
        Value p = pop();
        if (p.kind == ValueKind::Nil || (p.is_numeric() && p.as_number() == 0)) return f;
        if (p.kind != ValueKind::Addr && p.kind != ValueKind::Int)
          return fault(FaultKind::TypeError, "free of a non-address");
        uint64_t a = static_cast<uint64_t>(p.v);
        auto it = s_.heap.find(a);
        if (it == s_.heap.end()) return fault(FaultKind::Unmapped, "free of non-heap address " + hex(a), a);
        if (it->second.freed) return fault(FaultKind::DoubleFree, "double free of " + hex(a), a);
        if (!event(log::EventKind::Free, a)) return Flow::Gate;
        it->second.freed = true;
        return f;
      }
      case Op::Realloc: {
        Value n = pop();
        Value p = pop();
        if (n.kind != ValueKind::Int || n.v <= 0) return fault(FaultKind::TypeError, "realloc size must be positive");
        uint64_t old = p.kind == ValueKind::Nil ? 0 : static_cast<uint64_t>(p.v);
        Cell* oc = nullptr;
        if (old != 0) {
          auto it = s_.heap.find(old);
          if (it == s_.heap.end()) return fault(FaultKind::Unmapped, "realloc of non-heap address " + hex(old), old);
          if (it->second.freed) return fault(FaultKind::UseAfterFree, "realloc of freed " + hex(old), old);
          oc = &it->second;
        }
        uint64_t size = (static_cast<uint64_t>(n.v) + 7) / 8 * 8;
        uint64_t span = (size + kHeapAlign - 1) / kHeapAlign * kHeapAlign;
        if (s_.heap_bytes + span > kHeapCap) return fault(FaultKind::ResourceExhausted, "heap cap reached");
        uint64_t addr = s_.heap_next;
        auto e = event(log::EventKind::Realloc, old, static_cast<uint64_t>(n.v),
                       [&](log::Event& pl) { pl.c = addr; });
        if (!e) return Flow::Gate;
        if (e->c != addr)
          throw Error(ErrorCode::ReplayDivergence, "realloc returned " + hex(addr) + " but the log recorded " + hex(e->c));
        Cell c;
        c.base = addr;
        c.size = size;
        c.seq = s_.alloc_seq++;
        c.words.resize(size / 8);
        if (oc) {
          for (size_t i = 0; i < std::min(c.words.size(), oc->words.size()); ++i) c.words[i] = oc->words[i];
          oc->freed = true;
        }
        s_.heap.emplace(addr, std::move(c));
        s_.heap_next += span;
        s_.heap_bytes += span;
        push(Value::addr(addr));
        return f;
      }
      case Op::Rand: {
        const auto& src = port_.sources();
        auto e = event(log::EventKind::RandRead, 0, 0, [&](log::Event& p) { p.a = src.rand(); });
        if (!e) return Flow::Gate;
        push(Value::integer(static_cast<int64_t>(e->a >> 1)));
        return f;
      }
      case Op::Clock: {
        const auto& src = port_.sources();
        auto e = event(log::EventKind::ClockRead, 0, 0,
                       [&](log::Event& p) { p.a = static_cast<uint64_t>(src.clock()); });
        if (!e) return Flow::Gate;
        push(Value::integer(static_cast<int64_t>(e->a)));
        return f;
      }
      case Op::Input: {
        const auto& src = port_.sources();
        uint64_t idx = s_.input_pos;
        auto e = event(log::EventKind::InputRead, 0, 0, [&](log::Event& p) {
          p.bytes = idx < src.input_lines.size() ? src.input_lines[idx] : std::string();
        });
        if (!e) return Flow::Gate;
        ++s_.input_pos;
        s_.strings.push_back(e->bytes);
        push(Value::str(static_cast<uint32_t>(s_.strings.size() - 1)));
        return f;
      }
      case Op::Print: {
        auto& st = me().stack;
        std::string line;
        for (size_t i = st.size() - static_cast<size_t>(in.a); i < st.size(); ++i) {
          if (!line.empty()) line += ' ';
          line += format_value(s_, st[i]);
        }
        st.resize(st.size() - static_cast<size_t>(in.a));
        s_.output += line + "\n";
        return f;
      }
      case Op::Assert:
        if (!pop().truthy()) return fault(FaultKind::AssertFailed, "assertion failed");
        return f;
    }
    return f;
  }

  VmState& s_;
  LogPort& port_;
  const Program& prog_;
  uint16_t tid_ = 0;
  int events_ = 0;
};

inline void finish(VmState& s, StepOutcome& out, LogPort& port, StopReason r) {
  out.reason = r;
  out.event_end = port.cursor();
  if (r == StopReason::Completed) ++s.statements;
  ++s.ticks;
  if (r == StopReason::Fault) out.fault = s.fault;
}

}  // namespace detail

// Executes one statement. Free mode draws the thread from the scheduler
// PRNG among runnable threads; locked mode runs only `mode.locked`.
// Throws Error(ReplayDivergence) when no thread can match the replay head,
// Error(ProgramStopped) when the program already exited or faulted.
inline StepOutcome vm_step(VmState& s, StepMode mode, LogPort& port) {
  if (s.stopped()) throw Error(ErrorCode::ProgramStopped, "the program is not running");
  detail::Interp in(s, port);
  StepOutcome out;
  out.event_begin = port.cursor();
  auto run = [&](uint16_t tid) -> std::optional<StepOutcome> {
    s.current = tid;
    auto r = in.tick(tid, out);
    switch (r) {
      case detail::TickResult::Completed: detail::finish(s, out, port, StopReason::Completed); return out;
      case detail::TickResult::Exited:
        detail::finish(s, out, port, s.exited ? StopReason::ProgramExit : StopReason::Completed);
        return out;
      case detail::TickResult::Faulted: detail::finish(s, out, port, StopReason::Fault); return out;
      case detail::TickResult::Blocked:
      case detail::TickResult::Gated: return std::nullopt;
    }
    return std::nullopt;
  };

  if (mode.locked) {
    uint16_t tid = *mode.locked;
    if (tid >= s.threads.size() || s.threads[tid].status == ThreadStatus::Exited)
      throw Error(ErrorCode::BadCommand, "thread " + std::to_string(tid) + " is not live");
    Thread& t = s.threads[tid];
    // Re-check the wait condition; a refused attempt leaves no trace.
    const ThreadStatus st0 = t.status;
    const int64_t wait0 = t.wait_on;
    const uint16_t cur0 = s.current;
    t.status = ThreadStatus::Runnable;
    if (auto o = run(tid)) return *o;
    bool gated = s.threads[tid].status == ThreadStatus::Runnable;
    s.threads[tid].status = st0;
    s.threads[tid].wait_on = wait0;
    s.current = cur0;
    out.tid = tid;
    out.reason = StopReason::Blocked;
    out.event_end = port.cursor();
    if (gated) {
      const log::Event* h = port.head();
      throw Error(ErrorCode::ReplayDivergence, "locked thread " + std::to_string(tid) + " attempted " +
                                                   in.gated_intent +
                                                   (h ? " but the log expects " + log::describe(*h) : ""));
    }
    return out;
  }

  std::vector<uint16_t> cands;
  for (const auto& t : s.threads)
    if (t.status == ThreadStatus::Runnable) cands.push_back(t.tid);
  bool gated = false;
  while (!cands.empty()) {
    size_t k = cands.size() == 1 ? 0 : static_cast<size_t>(s.sched.below(cands.size()));
    uint16_t tid = cands[k];
    if (auto o = run(tid)) return *o;
    if (s.threads[tid].status == ThreadStatus::Runnable) gated = true;
    cands.erase(cands.begin() + static_cast<std::ptrdiff_t>(k));
  }
  if (gated) {
    const log::Event* h = port.head();
    throw Error(ErrorCode::ReplayDivergence,
                "no thread can perform the next logged event" + (h ? ": " + log::describe(*h) : std::string()));
  }
  FaultInfo fi;
  fi.kind = FaultKind::Deadlock;
  fi.tid = 0;
  fi.stmt = s.threads[0].frames.empty() ? 0 : s.current_stmt(0);
  fi.detail = "every live thread is blocked";
  s.fault = fi;
  out.tid = 0;
  out.loc = s.program->loc_of_stmt(fi.stmt);
  detail::finish(s, out, port, StopReason::Fault);
  return out;
}

// Heap access outside of execution, for inspection and watched expressions.
struct HeapRead {
  MemStatus status;
  Value value;
};

inline HeapRead read_mem(const VmState& s, uint64_t addr) {
  const Cell* c = nullptr;
  size_t w = 0;
  auto st = locate(s.heap, addr, &c, &w);
  if (st != MemStatus::Ok) return {st, {}};
  return {st, c->words[w]};
}

inline void write_value(ByteWriter& w, Value v) {
  w.u8(static_cast<uint8_t>(v.kind));
  w.i64(v.v);
}

inline Value read_value(ByteReader& r) {
  Value v;
  v.kind = static_cast<ValueKind>(r.u8());
  v.v = r.i64();
  return v;
}

inline uint64_t program_fingerprint(const Program& p) {
  Fnv1a h;
  h.update(p.file);
  h.update(p.source);
  return h.digest();
}

// Byte-exact serialization of everything except the program text, which is
// identified by fingerprint.
inline std::vector<uint8_t> serialize(const VmState& s) {
  ByteWriter w;
  w.u64(program_fingerprint(*s.program));
  w.u32(static_cast<uint32_t>(s.threads.size()));
  for (const auto& t : s.threads) {
    w.u16(t.tid);
    w.u8(static_cast<uint8_t>(t.status));
    w.i64(t.wait_on);
    w.u32(static_cast<uint32_t>(t.frames.size()));
    for (const auto& f : t.frames) {
      w.u32(f.func);
      w.u32(f.ip);
      w.u32(f.stack_base);
      w.u32(static_cast<uint32_t>(f.locals.size()));
      for (auto v : f.locals) write_value(w, v);
    }
    w.u32(static_cast<uint32_t>(t.stack.size()));
    for (auto v : t.stack) write_value(w, v);
  }
  w.u32(static_cast<uint32_t>(s.heap.size()));
  for (const auto& [addr, c] : s.heap) {
    w.u64(c.base);
    w.u64(c.size);
    w.u64(c.seq);
    w.u8(c.freed);
    for (auto v : c.words) write_value(w, v);
  }
  w.u64(s.heap_next);
  w.u64(s.heap_bytes);
  w.u64(s.alloc_seq);
  w.u32(static_cast<uint32_t>(s.globals.size()));
  for (auto v : s.globals) write_value(w, v);
  w.u32(static_cast<uint32_t>(s.lists.size()));
  for (const auto& l : s.lists) {
    w.u32(static_cast<uint32_t>(l.size()));
    for (auto v : l) write_value(w, v);
  }
  w.u32(static_cast<uint32_t>(s.strings.size()));
  for (const auto& str : s.strings) w.str(str);
  w.u32(static_cast<uint32_t>(s.locks.size()));
  for (const auto& [id, owner] : s.locks) {
    w.i64(id);
    w.u16(owner);
  }
  w.u16(s.current);
  w.u64(s.statements);
  w.u64(s.ticks);
  w.u64(s.sched.state());
  w.u64(s.input_pos);
  w.str(s.output);
  w.u8(s.exited);
  w.u8(s.fault.has_value());
  if (s.fault) {
    w.u8(static_cast<uint8_t>(s.fault->kind));
    w.u16(s.fault->tid);
    w.u32(s.fault->stmt);
    w.str(s.fault->detail);
    w.u64(s.fault->address);
  }
  return std::move(w).take();
}

inline VmState deserialize(std::shared_ptr<const Program> program, std::span<const uint8_t> bytes) {
  ByteReader r(bytes);
  if (r.u64() != program_fingerprint(*program))
    throw Error(ErrorCode::CorruptImage, "image was taken from a different program");
  VmState s;
  s.program = std::move(program);
  s.threads.resize(r.u32());
  for (auto& t : s.threads) {
    t.tid = r.u16();
    t.status = static_cast<ThreadStatus>(r.u8());
    t.wait_on = r.i64();
    t.frames.resize(r.u32());
    for (auto& f : t.frames) {
      f.func = r.u32();
      f.ip = r.u32();
      f.stack_base = r.u32();
      f.locals.resize(r.u32());
      for (auto& v : f.locals) v = read_value(r);
    }
    t.stack.resize(r.u32());
    for (auto& v : t.stack) v = read_value(r);
  }
  uint32_t cells = r.u32();
  for (uint32_t i = 0; i < cells; ++i) {
    Cell c;
    c.base = r.u64();
    c.size = r.u64();
    c.seq = r.u64();
    c.freed = r.u8() != 0;
    c.words.resize(c.size / 8);
    for (auto& v : c.words) v = read_value(r);
    s.heap.emplace(c.base, std::move(c));
  }
  s.heap_next = r.u64();
  s.heap_bytes = r.u64();
  s.alloc_seq = r.u64();
  s.globals.resize(r.u32());
  for (auto& v : s.globals) v = read_value(r);
  s.lists.resize(r.u32());
  for (auto& l : s.lists) {
    l.resize(r.u32());
    for (auto& v : l) v = read_value(r);
  }
  s.strings.resize(r.u32());
  for (auto& str : s.strings) str = r.str();
  uint32_t nlocks = r.u32();
  for (uint32_t i = 0; i < nlocks; ++i) {
    int64_t id = r.i64();
    s.locks[id] = r.u16();
  }
  s.current = r.u16();
  s.statements = r.u64();
  s.ticks = r.u64();
  s.sched.set_state(r.u64());
  s.input_pos = r.u64();
  s.output = r.str();
  s.exited = r.u8() != 0;
  if (r.u8()) {
    FaultInfo f;
    f.kind = static_cast<FaultKind>(r.u8());
    f.tid = r.u16();
    f.stmt = r.u32();
    f.detail = r.str();
    f.address = r.u64();
    s.fault = f;
  }
  if (!r.done()) throw Error(ErrorCode::CorruptImage, "trailing bytes in VM image");
  return s;
}

inline uint64_t state_hash(const VmState& s) { return fnv1a(serialize(s)); }

}  // namespace fred::vm
