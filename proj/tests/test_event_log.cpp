#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>

#include "fred/vm/machine.hpp"

using namespace fred;
using log::EventKind;

namespace {

log::EventLog record(const std::string& src, uint64_t seed = 7, vm::VmState* out = nullptr) {
  auto p = std::make_shared<const vm::Program>(vm::compile(src, "t.fr"));
  log::EventLog lg;
  vm::RecordSources rs;
  vm::LogPort port(lg, 0, rs);
  auto s = vm::vm_new(p, seed);
  while (!s.stopped()) vm::vm_step(s, vm::StepMode::free(), port);
  if (out) *out = s;
  return lg;
}

// Three workers, each alternating between two mutexes.
std::string lock_heavy(int iters) {
  return R"(global a = 0;
global b = 0;
global n = 0;
fn w(k) {
  let i = 0;
  while (i < k) {
    lock(a);
    n = n + 1;
    unlock(a);
    lock(b);
    n = n - 1;
    unlock(b);
    i = i + 1;
  }
}
fn main() {
  a = alloc(8);
  b = alloc(8);
  let t1 = spawn w()" + std::to_string(iters) + R"();
  let t2 = spawn w()" + std::to_string(iters) + R"();
  w()" + std::to_string(iters) + R"();
  join(t1);
  join(t2);
}
)";
}

std::filesystem::path tmp_file(const std::string& name) {
  auto d = std::filesystem::temp_directory_path() / "fred_event_log_test";
  std::filesystem::create_directories(d);
  return d / name;
}

}  // namespace

TEST(Reserve, FirstSeqnoIsZero) {
  log::EventLog lg;
  EXPECT_EQ(lg.reserve(0, EventKind::LockAcquire).seqno, 0u);
}

TEST(Reserve, SeqnosAreDense) {
  log::EventLog lg;
  auto a = lg.reserve(0, EventKind::LockAcquire);
  auto b = lg.reserve(1, EventKind::LockRelease);
  EXPECT_EQ(a.seqno, 0u);
  EXPECT_EQ(b.seqno, 1u);
}

TEST(Reserve, UnfilledSlotHidesLaterEntries) {
  log::EventLog lg;
  auto a = lg.reserve(0, EventKind::Alloc);
  auto b = lg.reserve(1, EventKind::Alloc);
  lg.fill(b, 1, {});
  EXPECT_EQ(lg.committed(), 0u);
  lg.fill(a, 0, {});
  EXPECT_EQ(lg.committed(), 2u);
}

TEST(Reserve, ForeignAndDoubleFill) {
  log::EventLog lg;
  auto a = lg.reserve(3, EventKind::Free);
  try {
    lg.fill(a, 2, {});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::FillOfForeignSlot);
  }
  lg.fill(a, 3, {});
  try {
    lg.fill(a, 3, {});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::DoubleFill);
  }
}

TEST(Reserve, LockEntriesFollowPerThreadProgramOrder) {
  auto lg = record(lock_heavy(17));
  auto st = log::stats(lg);
  // 3 threads x 17 iterations x 2 acquire/release pairs
  EXPECT_EQ(st.of(EventKind::LockAcquire) + st.of(EventKind::LockRelease), 3u * 17 * 4);
  std::map<uint16_t, std::vector<const log::Event*>> per;
  for (const auto& e : lg.committed_events())
    if (e.kind == EventKind::LockAcquire || e.kind == EventKind::LockRelease) per[e.tid].push_back(&e);
  ASSERT_EQ(per.size(), 3u);
  for (const auto& [tid, evs] : per) {
    ASSERT_EQ(evs.size(), 17u * 4);
    uint64_t first = evs[0]->a, second = evs[2]->a;
    EXPECT_NE(first, second);
    for (size_t i = 0; i < evs.size(); ++i) {
      EXPECT_EQ(evs[i]->kind, i % 2 == 0 ? EventKind::LockAcquire : EventKind::LockRelease) << "tid " << tid;
      EXPECT_EQ(evs[i]->a, (i / 2) % 2 == 0 ? first : second) << "tid " << tid;
    }
  }
}

TEST(Gate, PermitOnMatchingHead) {
  log::EventLog lg;
  log::Event payload;
  payload.a = 42;
  lg.append(2, EventKind::LockAcquire, payload);
  log::ReplayCursor c;
  auto p = c.gate(lg, {2, EventKind::LockAcquire, 42, 0});
  ASSERT_TRUE(p.has_value());
  c.consume(lg, *p);
  EXPECT_EQ(c.position(), 1u);
}

TEST(Gate, OtherThreadIsDescheduled) {
  log::EventLog lg;
  log::Event payload;
  payload.a = 42;
  lg.append(2, EventKind::LockAcquire, payload);
  log::ReplayCursor c;
  EXPECT_FALSE(c.gate(lg, {1, EventKind::LockAcquire, 42, 0}).has_value());
  EXPECT_FALSE(c.gate(lg, {2, EventKind::LockAcquire, 43, 0}).has_value());
  EXPECT_EQ(c.position(), 0u);
}

TEST(Gate, FullReplayEndsAtRecordHead) {
  auto src = lock_heavy(10);
  vm::VmState rec;
  auto lg = record(src, 7, &rec);
  auto p = rec.program;
  vm::RecordSources rs;
  vm::LogPort port(lg, 0, rs);
  auto s = vm::vm_new(p, 7);
  while (!s.stopped()) vm::vm_step(s, vm::StepMode::free(), port);
  EXPECT_EQ(port.cursor(), lg.committed());
  EXPECT_EQ(lg.committed(), lg.head());
  EXPECT_EQ(vm::state_hash(s), vm::state_hash(rec));
}

TEST(SaveLoad, EmptyRoundTrip) {
  log::EventLog lg;
  auto f = tmp_file("empty.log");
  log::save(lg, f.string());
  EXPECT_EQ(log::load(f.string()), lg);
  EXPECT_EQ(std::filesystem::file_size(f), log::kLogHeaderSize);
}

TEST(SaveLoad, LargeRoundTripAndSize) {
  auto lg = record(lock_heavy(8400));
  ASSERT_GE(lg.committed(), 100000u);
  auto f = tmp_file("big.log");
  log::save(lg, f.string());
  EXPECT_EQ(log::load(f.string()), lg);
  size_t want = log::kLogHeaderSize;
  for (const auto& e : lg.committed_events()) want += log::entry_size(e);
  EXPECT_EQ(std::filesystem::file_size(f), want);
}

TEST(SaveLoad, FlippedMagic) {
  auto bytes = log::encode(record(lock_heavy(2)));
  bytes[0] ^= 0xff;
  try {
    log::decode(bytes);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::BadMagic);
  }
}

TEST(SaveLoad, WrongVersion) {
  auto bytes = log::encode(record(lock_heavy(2)));
  bytes[8] ^= 0x7f;
  try {
    log::decode(bytes);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::VersionMismatch);
  }
}

TEST(SaveLoad, TruncatedNamesLastIntactEntry) {
  auto lg = record(lock_heavy(2));
  auto bytes = log::encode(lg);
  bytes.resize(bytes.size() - 3);
  try {
    log::decode(bytes);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::TruncatedEntry);
    EXPECT_NE(e.message().find(std::to_string(lg.committed() - 2)), std::string::npos) << e.message();
  }
}

TEST(Stats, LockHeavyProgram) {
  auto st = log::stats(record(lock_heavy(50)));
  double locks = st.fraction(EventKind::LockAcquire) + st.fraction(EventKind::LockRelease);
  EXPECT_GE(locks, 0.80);
  EXPECT_GT(st.mean_entry_size(), 0.0);
}

TEST(Stats, EmptyLog) {
  auto st = log::stats(log::EventLog{});
  EXPECT_EQ(st.total_entries, 0u);
  EXPECT_EQ(st.total_bytes, 0u);
  for (auto c : st.count) EXPECT_EQ(c, 0u);
}

TEST(Stats, AllocOnlyProgram) {
  auto st = log::stats(record("fn main() {\n  let i = 0;\n  while (i < 37) {\n    alloc(8);\n    i = i + 1;\n  }\n}\n"));
  EXPECT_EQ(st.of(EventKind::Alloc), 37u);
  EXPECT_EQ(st.total_entries, 37u);
}
