#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "fred/vm/machine.hpp"

using namespace fred;

namespace {

std::shared_ptr<const vm::Program> compile(const std::string& src) {
  return std::make_shared<const vm::Program>(vm::compile(src, "t.fr"));
}

std::string slurp(const std::string& path) {
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct Recorded {
  vm::VmState vm;
  std::vector<vm::StepOutcome> steps;
};

Recorded run_free(std::shared_ptr<const vm::Program> p, uint64_t seed, log::EventLog& lg) {
  vm::RecordSources src;
  vm::LogPort port(lg, 0, src);
  Recorded r{vm::vm_new(p, seed), {}};
  while (!r.vm.stopped()) r.steps.push_back(vm::vm_step(r.vm, vm::StepMode::free(), port));
  return r;
}

}  // namespace

TEST(Compile, MinimalProgram) {
  auto p = vm::compile("fn main(){ let x = 1; }");
  EXPECT_EQ(p.functions.size(), 1u);
  EXPECT_GE(p.statements.size(), 2u);
}

TEST(Compile, SyntaxErrorReportsLine) {
  try {
    vm::compile("fn main(){ let x = ; }");
    FAIL() << "no error";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::SyntaxError);
    EXPECT_NE(e.message().find("line 1"), std::string::npos) << e.message();
  }
}

TEST(Compile, CorpusProgramHasSyncOps) {
  auto p = vm::compile(slurp(std::string(FRED_CORPUS_DIR) + "/pbzip_order.fr"), "pbzip_order.fr");
  std::string dis = vm::disassemble(p);
  for (const char* op : {"SPAWN", "JOIN", "LOCK"}) EXPECT_NE(dis.find(op), std::string::npos) << op;
}

TEST(VmNew, OneThreadAtZero) {
  auto s = vm::vm_new(compile("fn main(){ let x = 1; }"), 42);
  ASSERT_EQ(s.threads.size(), 1u);
  EXPECT_EQ(s.threads[0].status, vm::ThreadStatus::Runnable);
  EXPECT_EQ(s.statements, 0u);
  EXPECT_TRUE(s.heap.empty());
}

TEST(VmNew, ConstructionIsDeterministic) {
  auto p = compile("global g = 3;\nfn main(){ g = g + 1; }");
  EXPECT_EQ(vm::serialize(vm::vm_new(p, 42)), vm::serialize(vm::vm_new(p, 42)));
}

TEST(VmNew, SeedDoesNotChangeInitialState) {
  auto p = compile("fn main(){ let x = 1; }");
  auto a = vm::vm_new(p, 42), b = vm::vm_new(p, 43);
  EXPECT_NE(vm::state_hash(a), vm::state_hash(b));  // scheduler state differs
  b.sched = a.sched;
  EXPECT_EQ(vm::serialize(a), vm::serialize(b));
}

TEST(VmStep, SingleStatementNoEvents) {
  auto p = compile("global x = 0;\nfn main(){\n  x = x + 1;\n}");
  log::EventLog lg;
  vm::RecordSources src;
  vm::LogPort port(lg, 0, src);
  auto s = vm::vm_new(p, 1);
  auto o = vm::vm_step(s, vm::StepMode::free(), port);
  EXPECT_EQ(o.tid, 0);
  EXPECT_EQ(o.reason, vm::StopReason::Completed);
  EXPECT_FALSE(o.has_events());
  EXPECT_EQ(s.statements, 1u);
}

TEST(VmStep, LockedModeReportsBlockedWithoutSideEffects) {
  auto p = compile(R"(global m = 0;
fn w() {
  lock(m);
  unlock(m);
}
fn main() {
  m = alloc(8);
  lock(m);
  let a = spawn w();
  let b = spawn w();
  unlock(m);
}
)");
  log::EventLog lg;
  vm::RecordSources src;
  vm::LogPort port(lg, 0, src);
  auto s = vm::vm_new(p, 7);
  for (int i = 0; i < 4; ++i) vm::vm_step(s, vm::StepMode::lock(0), port);
  ASSERT_EQ(s.threads.size(), 3u);
  auto before = vm::serialize(s);
  uint64_t events = lg.head();
  auto o = vm::vm_step(s, vm::StepMode::lock(2), port);
  EXPECT_EQ(o.reason, vm::StopReason::Blocked);
  EXPECT_EQ(o.tid, 2);
  EXPECT_EQ(vm::serialize(s), before);
  EXPECT_EQ(lg.head(), events);
}

TEST(VmStep, LockedModeOnlyRunsNamedThread) {
  auto p = compile(R"(global n = 0;
fn w() {
  n = n + 1;
  n = n + 1;
}
fn main() {
  let t = spawn w();
  n = n + 10;
  join(t);
}
)");
  log::EventLog lg;
  vm::RecordSources src;
  vm::LogPort port(lg, 0, src);
  auto s = vm::vm_new(p, 3);
  vm::vm_step(s, vm::StepMode::lock(0), port);
  for (int i = 0; i < 2; ++i) EXPECT_EQ(vm::vm_step(s, vm::StepMode::lock(1), port).tid, 1);
}

TEST(VmStep, ReplayMatchesRecordOnCorpusRun) {
  auto p = std::make_shared<const vm::Program>(
      vm::compile(slurp(std::string(FRED_CORPUS_DIR) + "/atomicity_12228.fr"), "atomicity_12228.fr"));
  log::EventLog lg;
  auto rec = run_free(p, 7, lg);
  auto rep = run_free(p, 7, lg);
  auto trace = [](const Recorded& r) {
    std::vector<std::pair<uint16_t, uint32_t>> t;
    for (const auto& o : r.steps)
      if (o.has_events()) t.emplace_back(o.tid, o.loc.stmt);
    return t;
  };
  EXPECT_FALSE(trace(rec).empty());
  EXPECT_EQ(trace(rec), trace(rep));
  EXPECT_EQ(vm::serialize(rec.vm), vm::serialize(rep.vm));
}

TEST(VmStep, StatementCounterCountsCompletions) {
  auto p = compile("fn main(){\n  let i = 0;\n  while (i < 5) {\n    i = i + 1;\n  }\n}");
  log::EventLog lg;
  auto r = run_free(p, 1, lg);
  uint64_t completed = 0;
  for (const auto& o : r.steps) completed += o.reason == vm::StopReason::Completed;
  EXPECT_EQ(r.vm.statements, completed);
}

TEST(Heap, FirstAllocIsBase) {
  auto p = compile("global a = 0;\nfn main(){\n  a = alloc(16);\n}");
  log::EventLog lg;
  auto r = run_free(p, 99, lg);
  EXPECT_EQ(r.vm.globals[0].v, int64_t(vm::kHeapBase));
}

TEST(Heap, AddressesStableAcrossReplay) {
  auto p = compile(R"(fn w(k) {
  let i = 0;
  while (i < k) {
    let q = alloc(8 * (i % 3 + 1));
    print(q);
    free(q);
    i = i + 1;
  }
}
fn main() {
  let t = spawn w(40);
  w(40);
  join(t);
}
)");
  log::EventLog lg;
  auto rec = run_free(p, 5, lg);
  auto rep = run_free(p, 5, lg);
  EXPECT_EQ(rec.vm.output, rep.vm.output);
  ASSERT_EQ(rec.vm.heap.size(), rep.vm.heap.size());
  auto it = rep.vm.heap.begin();
  for (const auto& [base, cell] : rec.vm.heap) {
    EXPECT_EQ(base, it->first);
    EXPECT_EQ(cell.seq, it->second.seq);
    ++it;
  }
}

TEST(Heap, DoubleFreeFaults) {
  auto p = compile("fn main(){\n  let a = alloc(8);\n  free(a);\n  free(a);\n}");
  log::EventLog lg;
  auto r = run_free(p, 1, lg);
  ASSERT_TRUE(r.vm.fault.has_value());
  EXPECT_EQ(r.vm.fault->kind, vm::FaultKind::DoubleFree);
  EXPECT_EQ(r.steps.back().loc.line, 4u);
}

TEST(Heap, FreedMemoryReadsAsFreed) {
  auto p = compile("global a = 0;\nfn main(){\n  a = alloc(8);\n  free(a);\n}");
  log::EventLog lg;
  auto r = run_free(p, 1, lg);
  EXPECT_EQ(vm::read_mem(r.vm, vm::kHeapBase).status, vm::MemStatus::Freed);
  EXPECT_EQ(vm::read_mem(r.vm, 0x10).status, vm::MemStatus::Unmapped);
}

TEST(Faults, NilDerefIsAFaultNotACrash) {
  auto p = compile("fn main(){\n  let p = nil;\n  *p = 1;\n}");
  log::EventLog lg;
  auto r = run_free(p, 1, lg);
  ASSERT_TRUE(r.vm.fault.has_value());
  EXPECT_EQ(r.vm.fault->kind, vm::FaultKind::NilDeref);
  vm::RecordSources src;
  vm::LogPort port(lg, 0, src);
  EXPECT_THROW(vm::vm_step(r.vm, vm::StepMode::free(), port), Error);
}

TEST(Serialize, RoundTrip) {
  auto p = compile("global g = 0;\nfn main(){\n  g = alloc(24);\n  *(g + 8) = 5;\n  print(\"x\", [1, 2]);\n}");
  log::EventLog lg;
  auto r = run_free(p, 1, lg);
  auto copy = vm::deserialize(p, vm::serialize(r.vm));
  EXPECT_EQ(vm::state_hash(copy), vm::state_hash(r.vm));
}
