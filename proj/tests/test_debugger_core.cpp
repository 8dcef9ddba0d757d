#include <gtest/gtest.h>

#include "fred/corpus.hpp"
#include "fred/debugger/session.hpp"

using namespace fred;
using dbg::Session;

namespace {

std::shared_ptr<const vm::Program> compile(const std::string& src, const std::string& name = "t.fr") {
  return std::make_shared<const vm::Program>(vm::compile(src, name));
}

corpus::BugSpec spec(const std::string& name) {
  return corpus::load_spec(std::string(FRED_CORPUS_DIR) + "/" + name + ".json");
}

std::vector<std::string> verbs(const std::vector<dbg::DebugCommand>& cmds, size_t from = 0) {
  std::vector<std::string> v;
  for (size_t i = from; i < cmds.size(); ++i) v.push_back(cmds[i].str());
  return v;
}

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error";
  return ErrorCode::BadCommand;
}

const char* kList = R"(global g = 0;
fn add3(l) {
  push(l, 1);
  push(l, 2);
  push(l, 3);
}
fn main() {
  let l = [];
  add3(l);
  print(len(l));
  g = alloc(8);
}
)";

const char* kSeven = R"(global x = 0;
fn seven() {
  x = 1;
  x = 2;
  x = 3;
  x = 4;
  x = 5;
  x = 6;
}
fn main() {
  x = 0;
  seven();
  x = 9;
}
)";

const char* kGolden = R"(fn f() {
  let a = 1;
}
fn main() {
  let x = 0;
  x = 1;
  x = 2;
  f();
  x = 3;
}
)";

}  // namespace

TEST(Command, ParseAndPrintRoundTrip) {
  for (const char* line : {"break main", "break t.fr:4", "run", "continue", "next", "step", "finish", "print x + 1",
                           "watch *(16777216) == 0", "switch-thread 2", "scheduler-locking on", "fred-checkpoint",
                           "reverse-step", "reverse-next", "reverse-finish", "reverse-continue",
                           "fred-reverse-watch table.ptr == 0", "info threads", "bt"}) {
    auto c = dbg::DebugCommand::parse(line);
    EXPECT_EQ(dbg::DebugCommand::parse(c.str()), c) << line;
  }
  EXPECT_EQ(dbg::DebugCommand::parse("fred-reverse-step").verb, dbg::Verb::ReverseStep);
  EXPECT_EQ(code_of([] { dbg::DebugCommand::parse("frobnicate"); }), ErrorCode::BadCommand);
}

TEST(Execute, BreakMainRunStopsAtFirstStatement) {
  Session s(compile(kList));
  s.execute("break main");
  auto out = s.execute("run");
  EXPECT_NE(out.find("Breakpoint 1, main () at t.fr:8"), std::string::npos) << out;
  EXPECT_EQ(s.vm().statements, 0u);
}

TEST(Execute, UnknownBreakpointLocation) {
  Session s(compile(kList));
  EXPECT_EQ(code_of([&] { s.execute("break nowhere"); }), ErrorCode::NoSuchBreakpointLocation);
  EXPECT_EQ(code_of([&] { s.execute("break 400"); }), ErrorCode::NoSuchBreakpointLocation);
}

TEST(Execute, ContinueReachesCorpusFault) {
  for (const char* name : {"atomicity_12228", "datarace_42419", "pbzip_order"}) {
    auto b = spec(name);
    auto s = corpus::open(b);
    corpus::run_setup(*s, b);
    ASSERT_TRUE(s->vm().fault.has_value()) << name;
    EXPECT_EQ(s->program().loc_of_stmt(s->vm().fault->stmt).line, b.fault_line) << name;
    EXPECT_NE(s->history().back().output.find("received signal"), std::string::npos) << name;
  }
}

TEST(Execute, FaultingThreadIsShownOnItsFaultingLine) {
  auto b = spec("pbzip_order");
  auto s = corpus::open(b);
  corpus::run_setup(*s, b);
  uint16_t tid = s->vm().fault->tid;
  EXPECT_NE(s->where(tid).find(":" + std::to_string(b.fault_line)), std::string::npos) << s->where(tid);
}

TEST(Execute, PrintLenAfterThreePushes) {
  Session s(compile(kList));
  s.execute("break 10");
  s.execute("run");
  EXPECT_EQ(s.execute("print len(l)"), "$1 = 3");
}

TEST(Execute, ReentryIsRejected) {
  Session s(compile(kList));
  s.set_sink([&](const std::string& kind, const nlohmann::json&) {
    if (kind == "stopped")
      EXPECT_EQ(code_of([&] { s.execute("next"); }), ErrorCode::CommandInterruptedUnsupported);
  });
  s.execute("break main");
  s.execute("run");
}

TEST(Evaluate, TrivialTruthIsGood) {
  Session s(compile(kList));
  auto r = s.evaluate("1 == 1");
  ASSERT_TRUE(r.ok());
  EXPECT_TRUE(r.truthy());
  EXPECT_EQ(dbg::classify(r, false), dbg::Verdict::Good);
}

TEST(Evaluate, UnmappedDerefIsEvalError) {
  Session s(compile(kList));
  s.execute("break main");
  s.execute("run");
  auto r = s.evaluate("*(16777216) == 0");
  EXPECT_FALSE(r.ok());
  EXPECT_EQ(dbg::classify(r, true), dbg::Verdict::EvalError);
  EXPECT_FALSE(s.vm().fault.has_value());
}

TEST(Evaluate, PbzipMutexIsBadAtFault) {
  auto b = spec("pbzip_order");
  auto s = corpus::open(b);
  corpus::run_setup(*s, b);
  EXPECT_EQ(s->execute("print fifo.mut"), "$1 = nil");
  auto r = s->evaluate(b.watch);
  ASSERT_TRUE(r.ok());
  // Observed polarity: the value at the failure defines bad.
  EXPECT_EQ(dbg::classify(r, r.truthy()), dbg::Verdict::Bad);
}

TEST(Evaluate, IsPure) {
  for (const char* name : {"atomicity_12228", "datarace_42419", "pbzip_order"}) {
    auto b = spec(name);
    auto s = corpus::open(b);
    corpus::run_setup(*s, b);
    auto h = vm::state_hash(s->vm());
    for (const std::string& e : {b.watch, std::string("1 + 2 * 3"), std::string("*(16777216)"),
                                 std::string("nosuch"), std::string("len([1, 2])")}) {
      s->evaluate(e);
      EXPECT_EQ(vm::state_hash(s->vm()), h) << name << ": " << e;
    }
  }
}

TEST(Expand, GoldenDecomposition) {
  Session s(compile(kGolden));
  s.execute("break 5");
  s.execute("break 7");
  s.execute("run");
  size_t base = s.effective_history().size();
  s.execute("continue");
  s.execute("next");
  s.execute("next");
  EXPECT_EQ(verbs(s.effective_history(), base), (std::vector<std::string>{"continue", "next", "next"}));
  s.execute("reverse-step");
  EXPECT_EQ(verbs(s.effective_history(), base), (std::vector<std::string>{"continue", "next", "step", "next"}));
}

TEST(Expand, StepIsFixedPoint) {
  Session s(compile(kSeven));
  s.execute("break main");
  s.execute("run");
  s.execute("step");
  size_t k = s.history().size() - 1;
  EXPECT_EQ(verbs(s.expand_history(k, k + 1)), std::vector<std::string>{"step"});
}

TEST(Expand, NextOverSevenStatementCall) {
  Session s(compile(kSeven));
  s.execute("break 12");
  s.execute("run");
  s.execute("next");
  const auto& h = s.history().back();
  size_t inside = 0;
  for (size_t m = h.mark_begin + 1; m <= h.mark_end; ++m) inside += s.marks()[m].depth > s.marks()[h.mark_begin].depth;
  EXPECT_EQ(inside, 7u);  // six assignments and the return
  size_t k = s.history().size() - 1;
  auto ex = verbs(s.expand_history(k, k + 1));
  std::vector<std::string> want = {"step"};
  for (int i = 0; i < 6; ++i) want.push_back("next");
  want.push_back("step");
  EXPECT_EQ(ex, want);
}

TEST(Expand, ExpandedPrefixesReachSameState) {
  auto b = spec("atomicity_12228");
  auto s = corpus::open(b);
  s->execute("break 33");
  s->execute("run");
  for (const char* c : {"next", "step", "next", "next", "finish", "step", "next", "continue"}) {
    try {
      s->execute(c);
    } catch (const Error&) {
    }
  }
  const auto& hist = s->history();
  size_t first = 0;
  while (hist[first].cmd.verb != dbg::Verb::Run) ++first;
  for (size_t k = first + 1; k <= hist.size(); ++k) {
    auto fresh = corpus::open(b);
    fresh->execute("break 33");
    fresh->execute("run");
    for (const auto& c : s->expand_history(first + 1, k)) fresh->execute(c);
    auto want = s->probe_at(hist[k - 1].tick_end);
    EXPECT_EQ(vm::state_hash(fresh->vm()), vm::state_hash(want.vm)) << "prefix " << k;
  }
}

TEST(ReplayTo, ImagePositionNeedsNoReexecution) {
  auto b = spec("atomicity_12228");
  auto s = corpus::open(b, 20);
  corpus::run_setup(*s, b);
  auto& img = s->store().images()[s->store().size() / 2];
  uint64_t restarts = s->restarts();
  s->replay_to(img.tick());
  EXPECT_EQ(s->restarts(), restarts + 1);
  auto r = s->store().restore(img.id, s->program_ptr());
  EXPECT_EQ(vm::state_hash(s->vm()), vm::state_hash(r.vm));
}

TEST(ReplayTo, MidContinueAndDeterminism) {
  auto b = spec("atomicity_12228");
  auto s = corpus::open(b, 20);
  corpus::run_setup(*s, b);
  uint64_t end = s->tick();
  const auto& cont = s->history().back();
  uint64_t mid = (cont.tick_begin + cont.tick_end) / 2;
  s->replay_to(mid);
  EXPECT_EQ(s->vm().ticks, mid);
  auto h1 = vm::state_hash(s->vm());
  s->replay_to(end);
  s->replay_to(mid);
  EXPECT_EQ(vm::state_hash(s->vm()), h1);
  // Independent straight-line replay from tick 0.
  auto p = s->probe_at(0);
  s->probe_advance(p, mid);
  EXPECT_EQ(vm::state_hash(p.vm), h1);
  EXPECT_EQ(code_of([&] { s->replay_to(end + 1000); }), ErrorCode::TargetBeyondHistory);
}

TEST(Reverse, ReverseNextUndoesNext) {
  Session s(compile(kGolden));
  s.execute("break 5");
  s.execute("break 6");
  s.execute("run");
  s.execute("continue");
  auto after_continue = vm::state_hash(s.vm());
  auto eff = verbs(s.effective_history());
  s.execute("next");
  s.execute("reverse-next");
  EXPECT_EQ(vm::state_hash(s.vm()), after_continue);
  EXPECT_EQ(verbs(s.effective_history()), eff);
}

TEST(Reverse, ReverseStepDecomposesLastNext) {
  Session s(compile(kSeven));
  s.execute("break 11");
  s.execute("break 12");
  s.execute("run");
  s.execute("continue");
  size_t base = s.effective_history().size();
  s.execute("next");
  size_t k = s.history().size() - 1;
  auto ex = verbs(s.expand_history(k, k + 1));
  ex.pop_back();
  s.execute("reverse-step");
  EXPECT_EQ(verbs(s.effective_history(), base), ex);
}

TEST(Reverse, ReverseStepFromNosymFault) {
  auto b = corpus::load_spec(std::string(FRED_CORPUS_DIR) + "/variants/nosym_crash.json");
  auto s = corpus::open(b);
  corpus::run_setup(*s, b);
  ASSERT_TRUE(s->vm().fault.has_value());
  EXPECT_NE(s->history().back().output.find("?? ()"), std::string::npos);
  auto out = s->execute("reverse-step");
  uint32_t last = b.raw.at("last_symbolic_line").get<uint32_t>();
  EXPECT_NE(out.find("main () at nosym_crash.fr:" + std::to_string(last)), std::string::npos) << out;
  EXPECT_EQ(s->execute("bt"), "#0  main () at nosym_crash.fr:" + std::to_string(last) + "\n");
}

TEST(Reverse, ReverseStepUndoesStep) {
  Session s(compile(kSeven));
  s.execute("break main");
  s.execute("run");
  for (int i = 0; i < 8; ++i) {
    auto h = vm::state_hash(s.vm());
    s.execute("step");
    s.execute("reverse-step");
    EXPECT_EQ(vm::state_hash(s.vm()), h) << "position " << i;
    s.execute("step");
  }
}

TEST(Reverse, AtSessionStart) {
  Session s(compile(kSeven));
  EXPECT_EQ(code_of([&] { s.execute("reverse-step"); }), ErrorCode::AtSessionStart);
  EXPECT_EQ(code_of([&] { s.execute("reverse-continue"); }), ErrorCode::AtSessionStart);
}

TEST(Reverse, ReverseContinueStopsAtEarlierBreakpoint) {
  Session s(compile(kSeven));
  s.execute("break 4");
  s.execute("run");
  auto at_bp = vm::state_hash(s.vm());
  s.execute("next");
  s.execute("next");
  auto out = s.execute("reverse-continue");
  EXPECT_EQ(vm::state_hash(s.vm()), at_bp) << out;
}

TEST(Threads, SwitchThreadNeedsSchedulerLocking) {
  auto b = spec("pbzip_order");
  auto s = corpus::open(b);
  s->execute("break 42");
  s->execute("run");
  ASSERT_GE(s->vm().threads.size(), 2u);
  EXPECT_EQ(code_of([&] { s->execute("switch-thread 1"); }), ErrorCode::SwitchThreadRejected);
  s->execute("scheduler-locking on");
  s->execute("switch-thread 1");
  EXPECT_EQ(s->focus(), 1);
  s->execute("step");
  EXPECT_EQ(s->history().back().locked, 1);
}
