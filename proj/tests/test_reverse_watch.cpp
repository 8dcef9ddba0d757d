#include <gtest/gtest.h>

#include <cmath>

#include "fred/corpus.hpp"
#include "fred/search/reverse_watch.hpp"
#include "support/oracle.hpp"

using namespace fred;
using dbg::Session;
using nlohmann::json;

namespace {

std::shared_ptr<const vm::Program> synthetic(uint64_t n) {
  return std::make_shared<const vm::Program>(vm::compile(corpus::synthetic_source(n), "synthetic.fr"));
}

// Synthetic counting loop stopped at its final print.
Session recorded(uint64_t n, uint64_t k) {
  dbg::SessionOptions o;
  o.auto_ckpt = k;
  Session s(synthetic(n), o);
  s.execute("break 7");
  s.execute("run");
  return s;
}

int64_t value_of_i(const Session& s, uint64_t image) {
  auto r = s.store().restore(image, s.program_ptr());
  auto v = dbg::evaluate(r.vm, *dbg::WatchExpr::parse("i").ast, 0);
  return v.ok() ? std::stoll(v.text == "nil" ? "0" : v.text) : 0;
}

std::vector<json> progress_of(Session& s, const std::string& expr, search::SearchOptions o = {}) {
  std::vector<json> events;
  o.progress = [&](const json& j) { events.push_back(j); };
  search::reverse_watch(s, expr, o);
  return events;
}

json first_of_stage(const std::vector<json>& ev, const std::string& stage) {
  for (const auto& e : ev)
    if (e["stage"] == stage) return e;
  return nullptr;
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

json without_timings(json j) {
  j["stats"].erase("ms");
  return j;
}

}  // namespace

TEST(StageA, WindowBracketsFirstBadImage) {
  auto s = recorded(900, 100);
  ASSERT_GE(s.store().size(), 5u);
  uint64_t t2 = s.store().get(2).tick(), t3 = s.store().get(3).tick();
  auto events = progress_of(s, "i < " + std::to_string(value_of_i(s, 3)));
  EXPECT_EQ(s.store().get(0).value, ckpt::Tri::Good);
  EXPECT_EQ(s.store().get(2).value, ckpt::Tri::Good);
  // Images past the reported position are dropped with the discarded future.
  EXPECT_EQ(s.store().size(), 3u);
  auto b = first_of_stage(events, "B");
  ASSERT_FALSE(b.is_null());
  EXPECT_EQ(b["window"][0], t2);
  EXPECT_EQ(b["window"][1], t3);
}

TEST(StageA, AllImagesGoodUsesCurrentAsRight) {
  auto s = recorded(900, 100);
  uint64_t last = s.store().size() - 1, end = s.tick();
  uint64_t last_tick = s.store().get(last).tick();
  int64_t v = std::stoll(s.evaluate("i").text);
  ASSERT_LT(value_of_i(s, last), v);
  auto events = progress_of(s, "i < " + std::to_string(v));
  auto b = first_of_stage(events, "B");
  ASSERT_FALSE(b.is_null());
  EXPECT_EQ(b["window"][0], last_tick);
  EXPECT_EQ(b["window"][1], end);
}

TEST(StageA, BadFromTheStartIsNoGoodAnchor) {
  auto s = recorded(300, 100);
  EXPECT_EQ(code_of([&] { search::reverse_watch(s, "i >= 0"); }), ErrorCode::NoGoodAnchor);
}

TEST(Search, GoodAtCurrentPositionIsRejected) {
  auto s = recorded(300, 100);
  search::SearchOptions o;
  o.polarity = dbg::Polarity::TrueIsGood;
  EXPECT_EQ(code_of([&] { search::reverse_watch(s, "1 == 1", o); }), ErrorCode::PreconditionNotBad);
}

TEST(Search, NeedsARunningProgram) {
  Session s(synthetic(100));
  EXPECT_EQ(code_of([&] { search::reverse_watch(s, "1 == 1"); }), ErrorCode::NotRunning);
}

TEST(Search, StrictModeAbortsOnEvalError) {
  auto p = std::make_shared<const vm::Program>(vm::compile(R"(global g = 0;
fn main() {
  let i = 0;
  while (i < 50) {
    i = i + 1;
  }
  g = alloc(8);
  *g = 5;
  print(g);
}
)", "strict.fr"));
  dbg::SessionOptions o;
  o.auto_ckpt = 10;
  Session s(p, o);
  s.execute("break 9");
  s.execute("run");
  search::SearchOptions so;
  so.strict_eval = true;
  EXPECT_EQ(code_of([&] { search::reverse_watch(s, "*(g) == 5", so); }), ErrorCode::EvalError);
}

TEST(StageB, SingleStepWindowMatchesOracle) {
  for (uint64_t k : {1u, 7u, 700u, 2047u}) {
    auto s = recorded(1 << 12, 1000);
    auto oracle = fred::testing::linear_scan(s, 0, "i < " + std::to_string(k));
    ASSERT_TRUE(oracle);
    auto r = search::reverse_watch(s, "i < " + std::to_string(k));
    EXPECT_EQ(r.tick, oracle->tick) << k;
    EXPECT_EQ(r.loc.line, 5u);
    EXPECT_LE(r.stats.evaluations(), 12u + 8) << k;
    EXPECT_EQ(s.execute("print i"), "$1 = " + std::to_string(k - 1));
  }
}

TEST(StageB, FlipRightAfterLeftImage) {
  auto s = recorded(1 << 12, 500);
  int64_t at2 = value_of_i(s, 2);
  uint64_t w = s.image_mark(3) - s.image_mark(2);
  auto r = search::reverse_watch(s, "i < " + std::to_string(at2 + 1));
  EXPECT_LE(r.stats.evals_b, uint64_t(std::ceil(std::log2(double(w)))) + 1);
  EXPECT_EQ(r.loc.line, 5u);
}

TEST(StageB, NoStepExecutedMoreThanTwice) {
  for (uint64_t k : {100u, 1000u}) {
    for (uint64_t target : {3u, 1500u, 4000u}) {
      auto s = recorded(1 << 13, k);
      auto r = search::reverse_watch(s, "i < " + std::to_string(target));
      EXPECT_LE(r.stats.max_step_executions, 2u) << k << " " << target;
    }
  }
  for (const char* name : {"atomicity_12228", "datarace_42419", "pbzip_order"}) {
    auto b = corpus::load_spec(std::string(FRED_CORPUS_DIR) + "/" + name + ".json");
    auto s = corpus::open(b);
    corpus::run_setup(*s, b);
    EXPECT_LE(search::reverse_watch(*s, b.watch).stats.max_step_executions, 2u) << name;
  }
}

TEST(StageC, FlipByThreadSpawnedInsideTheStep) {
  auto p = std::make_shared<const vm::Program>(vm::compile(R"(global g = 0;
fn w() {
  g = 1;
}
fn main() {
  let x = 0;
  let t = spawn w();
  join(t);
  print(g);
}
)", "spawn.fr"));
  Session s(p);
  s.execute("break 6");
  s.execute("break 9");
  s.execute("run");
  s.execute("fred-checkpoint");
  s.execute("continue");
  uint64_t create_tick = 0;
  {
    auto q = s.probe_at(0);
    s.probe_advance(q, s.tick(), [&](const vm::StepOutcome& o) {
      for (uint64_t e = o.event_begin; e < o.event_end; ++e)
        if (s.log().at(e).kind == log::EventKind::ThreadCreate) create_tick = q.vm.ticks;
    });
  }
  auto oracle = fred::testing::linear_scan(s, 1, "g == 0");
  auto r = search::reverse_watch(s, "g == 0");
  EXPECT_EQ(r.tid, 1);
  EXPECT_EQ(r.loc.line, 3u);
  EXPECT_GE(r.tick, create_tick);
  ASSERT_TRUE(oracle);
  EXPECT_EQ(oracle->stmt, r.loc.stmt);
}

TEST(StageC, SingleThreadedRunSkipsEventStage) {
  auto s = recorded(1 << 10, 100);
  auto r = search::reverse_watch(s, "i < 100");
  EXPECT_EQ(r.stats.evals_c, 0u);
  EXPECT_EQ(r.tid, 0);
  EXPECT_TRUE(r.stats.skipped_threads.empty());
}

TEST(StageD, CorpusCulpritsMatchOracle) {
  for (const char* name : {"atomicity_12228", "datarace_42419", "pbzip_order"}) {
    auto b = corpus::load_spec(std::string(FRED_CORPUS_DIR) + "/" + name + ".json");
    auto s = corpus::open(b);
    corpus::run_setup(*s, b);
    auto oracle = fred::testing::linear_scan(*s, corpus::first_user_image(*s).value(), b.watch);
    auto r = search::reverse_watch(*s, b.watch);
    ASSERT_TRUE(oracle) << name;
    EXPECT_EQ(r.tid, oracle->tid) << name;
    EXPECT_EQ(r.loc.stmt, oracle->stmt) << name;
    EXPECT_EQ(r.tid, b.culprit->tid) << name;
    EXPECT_EQ(r.loc.stmt, b.culprit->stmt) << name;
    EXPECT_EQ(r.loc.line, b.culprit->line) << name;
    EXPECT_EQ(r.function, b.culprit->function) << name;
  }
}

TEST(StageD, DecoyBlockedThreadIsSkipped) {
  auto b = corpus::load_spec(std::string(FRED_CORPUS_DIR) + "/variants/atomicity_decoy.json");
  auto s = corpus::open(b);
  corpus::run_setup(*s, b);
  auto r = search::reverse_watch(*s, b.watch);
  EXPECT_EQ(r.tid, b.culprit->tid);
  EXPECT_EQ(r.loc.stmt, b.culprit->stmt);
  const auto& sk = r.stats.skipped_threads;
  EXPECT_NE(std::find(sk.begin(), sk.end(), b.raw.at("decoy_tid").get<uint16_t>()), sk.end());
}

TEST(Report, OneLockedStepOfCulpritFlipsTheExpression) {
  for (const char* name : {"atomicity_12228", "datarace_42419", "pbzip_order"}) {
    auto b = corpus::load_spec(std::string(FRED_CORPUS_DIR) + "/" + name + ".json");
    auto s = corpus::open(b);
    corpus::run_setup(*s, b);
    auto end = s->evaluate(b.watch);
    auto r = search::reverse_watch(*s, b.watch);
    auto before = s->evaluate(b.watch);
    EXPECT_FALSE(before.ok() && end.ok() && before.truthy() == end.truthy()) << name;
    auto p = s->probe_here();
    auto o = s->probe_tick(p, r.tid);
    EXPECT_EQ(o.tid, r.tid);
    auto after = dbg::evaluate(p.vm, *dbg::WatchExpr::parse(b.watch).ast, 0);
    EXPECT_EQ(after.ok(), end.ok()) << name;
    if (after.ok() && end.ok()) EXPECT_EQ(after.truthy(), end.truthy()) << name;
  }
}

TEST(Report, RepeatedSearchesAgree) {
  auto b = corpus::load_spec(std::string(FRED_CORPUS_DIR) + "/atomicity_12228.json");
  auto s = corpus::open(b);
  corpus::run_setup(*s, b);
  Session copy = *s;
  auto r1 = search::reverse_watch(*s, b.watch);
  auto r2 = search::reverse_watch(copy, b.watch);
  EXPECT_EQ(without_timings(r1.to_json()), without_timings(r2.to_json()));
  EXPECT_EQ(vm::state_hash(s->vm()), vm::state_hash(copy.vm()));
}

TEST(Report, ProgressWindowsNeverGrow) {
  auto b = corpus::load_spec(std::string(FRED_CORPUS_DIR) + "/pbzip_order.json");
  auto s = corpus::open(b);
  corpus::run_setup(*s, b);
  auto events = progress_of(*s, b.watch);
  ASSERT_FALSE(events.empty());
  uint64_t lo = 0, hi = UINT64_MAX;
  for (const auto& e : events) {
    uint64_t l = e["window"][0], h = e["window"][1];
    EXPECT_GE(l, lo) << e.dump();
    EXPECT_LE(h, hi) << e.dump();
    lo = l;
    hi = h;
  }
}

TEST(Report, LargeRunStaysWithinProbeBound) {
  auto s = recorded(1 << 16, 1000);
  auto r = search::reverse_watch(s, "i < 12345");
  EXPECT_LE(double(r.stats.evaluations() + r.stats.validation_evals), std::log2(double(1 << 16)) + 8);
  EXPECT_EQ(s.execute("print i"), "$1 = 12344");
}

TEST(Report, CommandFormAndLastSearch) {
  auto b = corpus::load_spec(std::string(FRED_CORPUS_DIR) + "/pbzip_order.json");
  auto s = corpus::open(b);
  corpus::run_setup(*s, b);
  auto out = s->execute("fred-reverse-watch " + b.watch);
  EXPECT_NE(out.find("queue_delete () at pbzip_order.fr:32"), std::string::npos) << out;
  EXPECT_EQ(s->last_search()["line"], 32);
}
