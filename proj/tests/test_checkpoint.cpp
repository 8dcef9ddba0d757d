#include <gtest/gtest.h>

#include <filesystem>

#include "fred/corpus.hpp"
#include "fred/debugger/session.hpp"

using namespace fred;
using ckpt::ImageKind;

namespace {

std::shared_ptr<const vm::Program> loop_program(int n) {
  return std::make_shared<const vm::Program>(vm::compile(
      "fn main() {\n  let i = 0;\n  while (i < " + std::to_string(n) + ") {\n    i = i + 1;\n  }\n  print(i);\n}\n",
      "loop.fr"));
}

size_t count(const dbg::Session& s, ImageKind k) {
  size_t n = 0;
  for (const auto& i : s.store().images()) n += i.kind == k;
  return n;
}

dbg::Session session(std::shared_ptr<const vm::Program> p, uint64_t k) {
  dbg::SessionOptions o;
  o.auto_ckpt = k;
  return dbg::Session(p, o);
}

dbg::Probe restore(const dbg::Session& s, uint64_t id) {
  auto r = s.store().restore(id, s.program_ptr());
  return dbg::Probe{std::move(r.vm), s.log_ptr(), r.blob.log_cursor, false};
}

}  // namespace

TEST(Take, FreshSessionHasImageZeroAtOrigin) {
  auto s = session(loop_program(3), 1000);
  ASSERT_EQ(s.store().size(), 1u);
  const auto& img = s.store().get(0);
  EXPECT_EQ(img.position, ckpt::TimePosition{});
  EXPECT_EQ(img.position.str(), "(0,0,0,0)");
  EXPECT_EQ(img.kind, ImageKind::Initial);
}

TEST(Take, TakeRestoreTakeGivesIdenticalBlobs) {
  auto s = session(loop_program(50), 0);
  s.execute("break 4");
  s.execute("run");
  s.execute("fred-checkpoint");
  uint64_t id = s.store().size() - 1;
  auto r = s.store().restore(id, s.program_ptr());
  ckpt::SessionBlob again = r.blob;
  again.vm = vm::serialize(r.vm);
  EXPECT_EQ(ckpt::encode_blob(again), s.store().get(id).blob);
}

TEST(Take, DoesNotChangeSession) {
  auto s = session(loop_program(20), 0);
  s.execute("break 4");
  s.execute("run");
  auto before = vm::serialize(s.vm());
  auto tick = s.tick();
  s.execute("fred-checkpoint");
  EXPECT_EQ(vm::serialize(s.vm()), before);
  EXPECT_EQ(s.tick(), tick);
}

TEST(Take, StoreFullOnExplicitCheckpoint) {
  dbg::SessionOptions o;
  o.auto_ckpt = 0;
  o.store_cap = 2;
  dbg::Session s(loop_program(5), o);
  s.execute("fred-checkpoint");
  try {
    s.execute("fred-checkpoint");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::StoreFull);
  }
}

TEST(Take, PersistedStoreLoadsBack) {
  auto dir = std::filesystem::temp_directory_path() / "fred_ckpt_test";
  std::filesystem::remove_all(dir);
  dbg::SessionOptions o;
  o.auto_ckpt = 100;
  o.session_dir = dir.string();
  dbg::Session s(loop_program(200), o);
  s.execute("run");
  auto back = ckpt::CheckpointStore::load(dir.string());
  ASSERT_EQ(back.size(), s.store().size());
  for (size_t i = 0; i < back.size(); ++i) EXPECT_EQ(back.get(i).blob, s.store().get(i).blob);
}

TEST(Restore, MatchesLiveStateAfterNSteps) {
  auto s = session(loop_program(300), 0);
  s.execute("break 2");
  s.execute("run");
  s.execute("next");
  s.execute("fred-checkpoint");
  uint64_t id = s.store().size() - 1;
  auto live = s.probe_here();
  s.execute("break 6");
  s.execute("continue");
  for (uint64_t n : {1, 10, 100}) {
    auto a = restore(s, id);
    auto b = live;
    s.probe_advance(a, a.tick() + n);
    s.probe_advance(b, b.tick() + n);
    EXPECT_EQ(vm::state_hash(a.vm), vm::state_hash(b.vm)) << n;
  }
}

TEST(Restore, OldestImageIsOrigin) {
  auto s = session(loop_program(2000), 5);
  s.execute("run");
  ASSERT_GE(s.store().size(), 50u);
  auto p = restore(s, 0);
  EXPECT_EQ(p.tick(), 0u);
  EXPECT_EQ(p.cursor, 0u);
  EXPECT_EQ(s.store().get(0).position.str(), "(0,0,0,0)");
}

TEST(Restore, MidRunImageReplaysToRecordedOutput) {
  auto b = corpus::load_spec(std::string(FRED_CORPUS_DIR) + "/atomicity_12228.json");
  auto s = corpus::open(b, 20);
  s->execute("run");
  ASSERT_GE(s->store().size(), 3u);
  auto p = restore(*s, s->store().size() / 2);
  s->probe_advance(p, s->tick());
  EXPECT_EQ(p.vm.output, s->vm().output);
  EXPECT_EQ(vm::state_hash(p.vm), vm::state_hash(s->vm()));
}

TEST(Restore, MissingImage) {
  auto s = session(loop_program(3), 0);
  try {
    s.store().restore(99, s.program_ptr());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::MissingImage);
  }
}

TEST(Restore, CorruptImage) {
  auto s = session(loop_program(3), 0);
  s.store().get(0).blob[3] ^= 1;
  try {
    s.store().restore(0, s.program_ptr());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::CorruptImage);
  }
}

TEST(AutoHook, IntervalCountOverLongRun) {
  auto b = corpus::load_spec(std::string(FRED_CORPUS_DIR) + "/atomicity_12228.json");
  auto s = corpus::open(b, 500);
  s->execute("run");
  size_t steps = s->mark_index();
  EXPECT_EQ(count(*s, ImageKind::Intermediate), steps / 500) << steps << " steps";

  auto big = session(loop_program(2500), 500);
  big.execute("run");
  steps = big.mark_index();
  ASSERT_GE(steps, 4500u);
  ASSERT_LE(steps, 5500u);
  EXPECT_EQ(count(big, ImageKind::Intermediate), steps / 500);
  EXPECT_NEAR(double(count(big, ImageKind::Intermediate)), 10.0, 1.0);
}

TEST(AutoHook, ContinueOverTwoThousandSteps) {
  auto s = session(loop_program(999), 500);
  s.execute("break 2");
  s.execute("break 6");
  s.execute("run");
  size_t before = count(s, ImageKind::Intermediate);
  size_t m0 = s.mark_index();
  s.execute("continue");
  size_t spent = s.mark_index() - m0;
  EXPECT_NEAR(double(spent), 2000.0, 5.0);
  EXPECT_EQ(count(s, ImageKind::Intermediate) - before, 4u);
}

TEST(AutoHook, DisabledMeansNoIntermediateImages) {
  auto s = session(loop_program(3000), 0);
  s.execute("run");
  EXPECT_EQ(count(s, ImageKind::Intermediate), 0u);
}

TEST(AutoHook, StoreFullDisablesHookWithoutFailing) {
  dbg::SessionOptions o;
  o.auto_ckpt = 10;
  o.store_cap = 3;
  dbg::Session s(loop_program(200), o);
  EXPECT_NO_THROW(s.execute("run"));
  EXPECT_EQ(s.store().size(), 3u);
  EXPECT_TRUE(s.vm().exited);
}
