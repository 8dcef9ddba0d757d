#pragma once

// Shared plumbing: the error type, little-endian byte streams, content
// hashing and the scheduler PRNG.

#include <cstdint>
#include <cstring>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace fred {

enum class ErrorCode {
  SyntaxError,
  UnknownSymbol,
  ReplayDivergence,
  FillOfForeignSlot,
  DoubleFill,
  BadMagic,
  VersionMismatch,
  TruncatedEntry,
  IoError,
  StoreFull,
  MissingImage,
  CorruptImage,
  NoSuchBreakpointLocation,
  CommandInterruptedUnsupported,
  TargetBeyondHistory,
  AtSessionStart,
  NotRunning,
  ProgramStopped,
  SwitchThreadRejected,
  BadCommand,
  EvalError,
  NoGoodAnchor,
  StabilityViolation,
  NoCulpritFound,
  PreconditionNotBad,
  EndpointInUse,
  ProtocolError,
  Busy,
};

inline const char* to_string(ErrorCode c) {
  switch (c) {
    case ErrorCode::SyntaxError: return "SyntaxError";
    case ErrorCode::UnknownSymbol: return "UnknownSymbol";
    case ErrorCode::ReplayDivergence: return "ReplayDivergence";
    case ErrorCode::FillOfForeignSlot: return "FillOfForeignSlot";
    case ErrorCode::DoubleFill: return "DoubleFill";
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::VersionMismatch: return "VersionMismatch";
    case ErrorCode::TruncatedEntry: return "TruncatedEntry";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::StoreFull: return "StoreFull";
    case ErrorCode::MissingImage: return "MissingImage";
    case ErrorCode::CorruptImage: return "CorruptImage";
    case ErrorCode::NoSuchBreakpointLocation: return "NoSuchBreakpointLocation";
    case ErrorCode::CommandInterruptedUnsupported: return "CommandInterruptedUnsupported";
    case ErrorCode::TargetBeyondHistory: return "TargetBeyondHistory";
    case ErrorCode::AtSessionStart: return "AtSessionStart";
    case ErrorCode::NotRunning: return "NotRunning";
    case ErrorCode::ProgramStopped: return "ProgramStopped";
    case ErrorCode::SwitchThreadRejected: return "SwitchThreadRejected";
    case ErrorCode::BadCommand: return "BadCommand";
    case ErrorCode::EvalError: return "EvalError";
    case ErrorCode::NoGoodAnchor: return "NoGoodAnchor";
    case ErrorCode::StabilityViolation: return "StabilityViolation";
    case ErrorCode::NoCulpritFound: return "NoCulpritFound";
    case ErrorCode::PreconditionNotBad: return "PreconditionNotBad";
    case ErrorCode::EndpointInUse: return "EndpointInUse";
    case ErrorCode::ProtocolError: return "ProtocolError";
    case ErrorCode::Busy: return "Busy";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& msg)
      : std::runtime_error(std::string(to_string(code)) + ": " + msg), code_(code), message_(msg) {}
  ErrorCode code() const noexcept { return code_; }
  const std::string& message() const noexcept { return message_; }

 private:
  ErrorCode code_;
  std::string message_;
};

// 64-bit FNV-1a. Stable across runs and platforms, which std::hash is not.
class Fnv1a {
 public:
  void update(std::span<const uint8_t> bytes) {
    for (uint8_t b : bytes) {
      h_ ^= b;
      h_ *= 0x100000001b3ULL;
    }
  }
  void update(std::string_view s) {
    update(std::span(reinterpret_cast<const uint8_t*>(s.data()), s.size()));
  }
  uint64_t digest() const { return h_; }

 private:
  uint64_t h_ = 0xcbf29ce484222325ULL;
};

inline uint64_t fnv1a(std::span<const uint8_t> bytes) {
  Fnv1a h;
  h.update(bytes);
  return h.digest();
}

class ByteWriter {
 public:
  void u8(uint8_t v) { buf_.push_back(v); }
  void u16(uint16_t v) { put(v, 2); }
  void u32(uint32_t v) { put(v, 4); }
  void u64(uint64_t v) { put(v, 8); }
  void i64(int64_t v) { put(static_cast<uint64_t>(v), 8); }
  void str(std::string_view s) {
    u32(static_cast<uint32_t>(s.size()));
    buf_.insert(buf_.end(), s.begin(), s.end());
  }
  void raw(std::span<const uint8_t> b) { buf_.insert(buf_.end(), b.begin(), b.end()); }

  // Patches a previously written u32 at `offset`.
  void patch_u32(size_t offset, uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_[offset + i] = static_cast<uint8_t>(v >> (8 * i));
  }

  size_t size() const { return buf_.size(); }
  const std::vector<uint8_t>& bytes() const& { return buf_; }
  std::vector<uint8_t> take() && { return std::move(buf_); }

 private:
  void put(uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf_.push_back(static_cast<uint8_t>(v >> (8 * i)));
  }
  std::vector<uint8_t> buf_;
};

// Reader over a byte span. Running past the end throws `Error(code)` so
// callers can map truncation onto their own error kind.
class ByteReader {
 public:
  explicit ByteReader(std::span<const uint8_t> b, ErrorCode on_short = ErrorCode::CorruptImage)
      : b_(b), on_short_(on_short) {}

  uint8_t u8() { return static_cast<uint8_t>(get(1)); }
  uint16_t u16() { return static_cast<uint16_t>(get(2)); }
  uint32_t u32() { return static_cast<uint32_t>(get(4)); }
  uint64_t u64() { return get(8); }
  int64_t i64() { return static_cast<int64_t>(get(8)); }
  std::string str() {
    uint32_t n = u32();
    need(n);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::span<const uint8_t> raw(size_t n) {
    need(n);
    auto s = b_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

  size_t pos() const { return pos_; }
  size_t remaining() const { return b_.size() - pos_; }
  bool done() const { return pos_ == b_.size(); }

 private:
  void need(size_t n) {
    if (b_.size() - pos_ < n) throw Error(on_short_, "unexpected end of data");
  }
  uint64_t get(int n) {
    need(static_cast<size_t>(n));
    uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<uint64_t>(b_[pos_ + i]) << (8 * i);
    pos_ += static_cast<size_t>(n);
    return v;
  }

  std::span<const uint8_t> b_;
  size_t pos_ = 0;
  ErrorCode on_short_;
};

// SplitMix64. The whole generator is one word, so it serializes trivially
// into a VM image and `split()` yields an independent stream.
class SplitMix64 {
 public:
  explicit SplitMix64(uint64_t seed = 0) : state_(seed) {}

  uint64_t next() {
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, n) by Lemire's multiply-shift; n > 0.
  uint64_t below(uint64_t n) {
    return static_cast<uint64_t>((static_cast<unsigned __int128>(next()) * n) >> 64);
  }

  SplitMix64 split() { return SplitMix64(next()); }

  uint64_t state() const { return state_; }
  void set_state(uint64_t s) { state_ = s; }

 private:
  uint64_t state_;
};

inline std::string hex(uint64_t v) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "0x%llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace fred
