#pragma once

// The deterministic-replay trace: one global, totally ordered log of
// synchronization, allocation, clock, random and input events.
//
// Record side is two-phase: `reserve` hands out the next seqno, `fill`
// completes the entry. Only the filled prefix is visible to replay and to
// `save`. Replay side is a `ReplayCursor` that grants a permit when the
// entry at its head matches the (tid, kind, key) a thread intends to perform.
//
// On-disk format, little-endian:
//   header: "FREDLOG1" | u32 version | u64 entry count
//   entry:  u32 total length | u64 seqno | u16 tid | u8 kind | payload

#include <array>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "fred/support.hpp"

namespace fred::log {

enum class EventKind : uint8_t {
  LockAcquire = 1,
  LockRelease,
  ThreadCreate,
  ThreadExit,
  Join,
  Alloc,
  Free,
  Realloc,
  ClockRead,
  RandRead,
  InputRead,
};

inline constexpr size_t kEventKinds = 11;
inline constexpr uint32_t kLogVersion = 1;
inline constexpr char kLogMagic[8] = {'F', 'R', 'E', 'D', 'L', 'O', 'G', '1'};
inline constexpr size_t kLogHeaderSize = 8 + 4 + 8;
inline constexpr size_t kEntryHeaderSize = 4 + 8 + 2 + 1;

inline const char* kind_name(EventKind k) {
  switch (k) {
    case EventKind::LockAcquire: return "LOCK_ACQUIRE";
    case EventKind::LockRelease: return "LOCK_RELEASE";
    case EventKind::ThreadCreate: return "THREAD_CREATE";
    case EventKind::ThreadExit: return "THREAD_EXIT";
    case EventKind::Join: return "JOIN";
    case EventKind::Alloc: return "ALLOC";
    case EventKind::Free: return "FREE";
    case EventKind::Realloc: return "REALLOC";
    case EventKind::ClockRead: return "CLOCK_READ";
    case EventKind::RandRead: return "RAND_READ";
    case EventKind::InputRead: return "INPUT_READ";
  }
  return "?";
}

// Payload fields by kind:
//   LockAcquire/LockRelease: a = lock id
//   ThreadCreate: a = child tid      Join: a = target tid
//   Alloc: a = size, b = address     Free: a = address
//   Realloc: a = old, b = size, c = new address
//   ClockRead/RandRead: a = value    InputRead: bytes
struct Event {
  uint64_t seqno = 0;
  uint16_t tid = 0;
  EventKind kind = EventKind::ThreadExit;
  uint64_t a = 0, b = 0, c = 0;
  std::string bytes;

  friend bool operator==(const Event&, const Event&) = default;
};

inline size_t payload_size(const Event& e) {
  switch (e.kind) {
    case EventKind::LockAcquire:
    case EventKind::LockRelease:
    case EventKind::Free:
    case EventKind::ClockRead:
    case EventKind::RandRead: return 8;
    case EventKind::ThreadCreate:
    case EventKind::Join: return 4;
    case EventKind::ThreadExit: return 0;
    case EventKind::Alloc: return 16;
    case EventKind::Realloc: return 24;
    case EventKind::InputRead: return 4 + e.bytes.size();
  }
  return 0;
}

inline size_t entry_size(const Event& e) { return kEntryHeaderSize + payload_size(e); }

// What a thread is about to do; `a`/`b` carry the payload key that must
// match the log head (lock id, child tid, size, address).
struct Intent {
  uint16_t tid = 0;
  EventKind kind = EventKind::ThreadExit;
  uint64_t a = 0, b = 0;
};

inline bool key_matches(const Event& e, const Intent& in) {
  if (e.tid != in.tid || e.kind != in.kind) return false;
  switch (e.kind) {
    case EventKind::LockAcquire:
    case EventKind::LockRelease:
    case EventKind::ThreadCreate:
    case EventKind::Join:
    case EventKind::Alloc:
    case EventKind::Free: return e.a == in.a;
    case EventKind::Realloc: return e.a == in.a && e.b == in.b;
    default: return true;
  }
}

inline std::string describe(const Event& e) {
  std::ostringstream out;
  out << e.seqno << " " << e.tid << " " << kind_name(e.kind);
  switch (e.kind) {
    case EventKind::LockAcquire:
    case EventKind::LockRelease:
    case EventKind::Free: out << " " << hex(e.a); break;
    case EventKind::ThreadCreate:
    case EventKind::Join: out << " " << e.a; break;
    case EventKind::ThreadExit: break;
    case EventKind::Alloc: out << " " << e.a << " " << hex(e.b); break;
    case EventKind::Realloc: out << " " << hex(e.a) << " " << e.b << " " << hex(e.c); break;
    case EventKind::ClockRead: out << " " << static_cast<int64_t>(e.a); break;
    case EventKind::RandRead: out << " " << e.a; break;
    case EventKind::InputRead: {
      out << " " << e.bytes.size() << " \"";
      for (char ch : e.bytes) {
        if (ch == '"' || ch == '\\') out << '\\' << ch;
        else if (ch == '\n') out << "\\n";
        else out << ch;
      }
      out << "\"";
      break;
    }
  }
  return out.str();
}

inline std::string describe(const Intent& in) {
  Event e;
  e.tid = in.tid;
  e.kind = in.kind;
  e.a = in.a;
  e.b = in.b;
  std::string s = describe(e);
  return s.substr(s.find(' ') + 1);
}

struct SlotHandle {
  uint64_t seqno = 0;
  uint16_t tid = 0;
};

class EventLog {
 public:
  // Assigns the next seqno. The returned slot stays invisible until filled.
  SlotHandle reserve(uint16_t tid, EventKind kind) {
    Event e;
    e.seqno = events_.size();
    e.tid = tid;
    e.kind = kind;
    events_.push_back(std::move(e));
    filled_.push_back(false);
    return {events_.size() - 1, tid};
  }

  // `payload` supplies the kind-specific fields; seqno/tid/kind come from
  // the reservation.
  void fill(const SlotHandle& slot, uint16_t filler_tid, const Event& payload) {
    if (slot.seqno >= events_.size())
      throw Error(ErrorCode::FillOfForeignSlot, "no reservation with seqno " + std::to_string(slot.seqno));
    Event& e = events_[slot.seqno];
    if (filler_tid != e.tid || slot.tid != e.tid)
      throw Error(ErrorCode::FillOfForeignSlot, "slot " + std::to_string(slot.seqno) +
                                                     " belongs to thread " + std::to_string(e.tid));
    if (filled_[slot.seqno])
      throw Error(ErrorCode::DoubleFill, "slot " + std::to_string(slot.seqno) + " already filled");
    e.a = payload.a;
    e.b = payload.b;
    e.c = payload.c;
    e.bytes = payload.bytes;
    filled_[slot.seqno] = true;
    while (committed_ < events_.size() && filled_[committed_]) ++committed_;
  }

  // Convenience for the common reserve-then-fill-immediately case.
  const Event& append(uint16_t tid, EventKind kind, const Event& payload) {
    auto slot = reserve(tid, kind);
    fill(slot, tid, payload);
    return events_[slot.seqno];
  }

  uint64_t head() const { return events_.size(); }
  uint64_t committed() const { return committed_; }
  const Event& at(uint64_t seqno) const { return events_.at(seqno); }
  std::span<const Event> committed_events() const { return {events_.data(), committed_}; }

  // Copy of the committed prefix [0, n).
  EventLog prefix(uint64_t n) const {
    EventLog out;
    n = std::min<uint64_t>(n, committed_);
    out.events_.assign(events_.begin(), events_.begin() + static_cast<std::ptrdiff_t>(n));
    out.filled_.assign(n, true);
    out.committed_ = n;
    return out;
  }

  friend bool operator==(const EventLog& x, const EventLog& y) {
    if (x.committed_ != y.committed_) return false;
    for (uint64_t i = 0; i < x.committed_; ++i)
      if (!(x.events_[i] == y.events_[i])) return false;
    return true;
  }

 private:
  std::vector<Event> events_;
  std::vector<bool> filled_;
  uint64_t committed_ = 0;
};

// A permit names the head entry that matched; consuming it advances the cursor.
struct Permit {
  uint64_t seqno;
};

// Replay-side view of a log. The cursor lives outside the log so that many
// restored sessions can share one immutable recording.
class ReplayCursor {
 public:
  ReplayCursor() = default;
  explicit ReplayCursor(uint64_t pos) : pos_(pos) {}

  uint64_t position() const { return pos_; }
  void set_position(uint64_t p) { pos_ = p; }
  bool exhausted(const EventLog& log) const { return pos_ >= log.committed(); }

  std::optional<Permit> gate(const EventLog& log, const Intent& intent) const {
    if (exhausted(log)) return std::nullopt;
    if (!key_matches(log.at(pos_), intent)) return std::nullopt;
    return Permit{pos_};
  }

  const Event& consume(const EventLog& log, Permit p) {
    if (p.seqno != pos_)
      throw Error(ErrorCode::ReplayDivergence, "stale permit for seqno " + std::to_string(p.seqno));
    return log.at(pos_++);
  }

 private:
  uint64_t pos_ = 0;
};

inline std::vector<uint8_t> encode(const EventLog& log) {
  ByteWriter w;
  for (char c : kLogMagic) w.u8(static_cast<uint8_t>(c));
  w.u32(kLogVersion);
  w.u64(log.committed());
  for (const Event& e : log.committed_events()) {
    w.u32(static_cast<uint32_t>(entry_size(e)));
    w.u64(e.seqno);
    w.u16(e.tid);
    w.u8(static_cast<uint8_t>(e.kind));
    switch (e.kind) {
      case EventKind::LockAcquire:
      case EventKind::LockRelease:
      case EventKind::Free:
      case EventKind::ClockRead:
      case EventKind::RandRead: w.u64(e.a); break;
      case EventKind::ThreadCreate:
      case EventKind::Join: w.u32(static_cast<uint32_t>(e.a)); break;
      case EventKind::ThreadExit: break;
      case EventKind::Alloc:
        w.u64(e.a);
        w.u64(e.b);
        break;
      case EventKind::Realloc:
        w.u64(e.a);
        w.u64(e.b);
        w.u64(e.c);
        break;
      case EventKind::InputRead: w.str(e.bytes); break;
    }
  }
  return std::move(w).take();
}

inline EventLog decode(std::span<const uint8_t> bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kLogMagic, 8) != 0)
    throw Error(ErrorCode::BadMagic, "not an event log");
  ByteReader hdr(bytes.subspan(8), ErrorCode::TruncatedEntry);
  uint32_t version = 0;
  uint64_t count = 0;
  try {
    version = hdr.u32();
    count = hdr.u64();
  } catch (const Error&) {
    throw Error(ErrorCode::TruncatedEntry, "header truncated; no intact entries");
  }
  if (version != kLogVersion)
    throw Error(ErrorCode::VersionMismatch, "log version " + std::to_string(version) +
                                                ", expected " + std::to_string(kLogVersion));
  EventLog log;
  size_t pos = kLogHeaderSize;
  auto truncated = [&](uint64_t i) {
    std::string last = i == 0 ? "none" : std::to_string(i - 1);
    return Error(ErrorCode::TruncatedEntry,
                 "entry " + std::to_string(i) + " truncated; last intact seqno " + last);
  };
  for (uint64_t i = 0; i < count; ++i) {
    if (bytes.size() - pos < 4) throw truncated(i);
    ByteReader lenr(bytes.subspan(pos, 4));
    uint32_t len = lenr.u32();
    if (len < kEntryHeaderSize || bytes.size() - pos < len) throw truncated(i);
    ByteReader r(bytes.subspan(pos + 4, len - 4), ErrorCode::TruncatedEntry);
    Event e;
    try {
      e.seqno = r.u64();
      e.tid = r.u16();
      uint8_t k = r.u8();
      if (k < 1 || k > kEventKinds) throw truncated(i);
      e.kind = static_cast<EventKind>(k);
      switch (e.kind) {
        case EventKind::LockAcquire:
        case EventKind::LockRelease:
        case EventKind::Free:
        case EventKind::ClockRead:
        case EventKind::RandRead: e.a = r.u64(); break;
        case EventKind::ThreadCreate:
        case EventKind::Join: e.a = r.u32(); break;
        case EventKind::ThreadExit: break;
        case EventKind::Alloc:
          e.a = r.u64();
          e.b = r.u64();
          break;
        case EventKind::Realloc:
          e.a = r.u64();
          e.b = r.u64();
          e.c = r.u64();
          break;
        case EventKind::InputRead: e.bytes = r.str(); break;
      }
    } catch (const Error&) {
      throw truncated(i);
    }
    if (!r.done() || e.seqno != i) throw truncated(i);
    log.append(e.tid, e.kind, e);
    pos += len;
  }
  if (pos != bytes.size()) throw truncated(count);
  return log;
}

inline void save(const EventLog& log, const std::string& path) {
  auto bytes = encode(log);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::IoError, "short write to " + path);
}

inline EventLog load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot read " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode(bytes);
}

struct LogStats {
  std::array<uint64_t, kEventKinds + 1> count{};  // indexed by EventKind
  std::array<uint64_t, kEventKinds + 1> bytes{};
  uint64_t total_entries = 0;
  uint64_t total_bytes = 0;

  double mean_entry_size() const {
    return total_entries ? static_cast<double>(total_bytes) / static_cast<double>(total_entries) : 0.0;
  }
  uint64_t of(EventKind k) const { return count[static_cast<size_t>(k)]; }
  double fraction(EventKind k) const {
    return total_entries ? static_cast<double>(of(k)) / static_cast<double>(total_entries) : 0.0;
  }
};

inline LogStats stats(const EventLog& log) {
  LogStats s;
  for (const Event& e : log.committed_events()) {
    size_t k = static_cast<size_t>(e.kind);
    size_t sz = entry_size(e);
    ++s.count[k];
    s.bytes[k] += sz;
    ++s.total_entries;
    s.total_bytes += sz;
  }
  return s;
}

inline std::string dump(const EventLog& log) {
  std::string out;
  for (const Event& e : log.committed_events()) out += describe(e) + "\n";
  return out;
}

}  // namespace fred::log
