#pragma once

#include <cstdint>

namespace fred::vm {

enum class ValueKind : uint8_t { Nil, Int, Bool, Addr, List, Str };

// Trivially copyable tagged word. Lists and strings are handles into
// per-VM tables so the operand stack never owns heap memory.
struct Value {
  ValueKind kind = ValueKind::Nil;
  int64_t v = 0;

  static Value nil() { return {}; }
  static Value integer(int64_t i) { return {ValueKind::Int, i}; }
  static Value boolean(bool b) { return {ValueKind::Bool, b ? 1 : 0}; }
  static Value addr(uint64_t a) { return {ValueKind::Addr, static_cast<int64_t>(a)}; }
  static Value list(uint32_t h) { return {ValueKind::List, h}; }
  static Value str(uint32_t h) { return {ValueKind::Str, h}; }

  bool is_numeric() const {
    return kind == ValueKind::Int || kind == ValueKind::Addr || kind == ValueKind::Nil ||
           kind == ValueKind::Bool;
  }
  // nil reads as 0, which lets `*(addr) == 0` test a cleared pointer cell.
  int64_t as_number() const { return kind == ValueKind::Nil ? 0 : v; }
  bool truthy() const {
    switch (kind) {
      case ValueKind::Nil: return false;
      case ValueKind::List:
      case ValueKind::Str: return true;
      default: return v != 0;
    }
  }

  friend bool operator==(const Value&, const Value&) = default;
};

}  // namespace fred::vm
