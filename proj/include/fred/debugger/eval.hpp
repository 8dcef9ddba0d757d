#pragma once

// Side-effect-free evaluation of watched and printed expressions.
// Names bind in the chosen thread's innermost frame, then globals.
// Reads of unmapped or freed memory are evaluation errors, never faults.

#include <optional>
#include <string>
#include <variant>

#include "fred/lang/parser.hpp"
#include "fred/vm/machine.hpp"

namespace fred::dbg {

struct EvalResult {
  std::optional<vm::Value> value;  // empty on error
  std::string error;
  std::string text;  // printable form

  bool ok() const { return value.has_value(); }
  bool truthy() const { return value && value->truthy(); }
};

enum class Verdict : uint8_t { Good, Bad, EvalError };

inline const char* to_string(Verdict v) {
  switch (v) {
    case Verdict::Good: return "good";
    case Verdict::Bad: return "bad";
    default: return "eval-error";
  }
}

class Evaluator {
 public:
  Evaluator(const vm::VmState& s, uint16_t tid) : s_(s), tid_(tid) {}

  EvalResult eval(const lang::Expr& e) {
    EvalResult r;
    try {
      vm::Value v = ev(e);
      r.value = v;
      r.text = vm::format_value(s_, v);
    } catch (const Failure& f) {
      r.error = f.msg;
      r.text = "<error: " + f.msg + ">";
    }
    return r;
  }

 private:
  struct Failure {
    std::string msg;
  };
  [[noreturn]] static void fail(std::string m) { throw Failure{std::move(m)}; }

  vm::Value lookup(const std::string& name) const {
    const vm::Program& p = *s_.program;
    if (const vm::Thread* t = s_.thread(tid_); t && !t->frames.empty()) {
      const vm::Frame& f = t->frames.back();
      const vm::Function& fn = p.functions[f.func];
      for (size_t i = 0; i < fn.local_names.size(); ++i)
        if (fn.local_names[i] == name) return f.locals[i];
    }
    if (auto g = p.find_global(name)) return s_.globals[*g];
    fail("no symbol \"" + name + "\" in current context");
  }

  vm::Value load(uint64_t addr) const {
    auto r = vm::read_mem(s_, addr);
    switch (r.status) {
      case vm::MemStatus::Ok: return r.value;
      case vm::MemStatus::Null: fail("cannot access memory at address 0x0");
      case vm::MemStatus::Freed: fail("cannot access memory at address " + hex(addr) + " (freed)");
      case vm::MemStatus::Unmapped: fail("cannot access memory at address " + hex(addr) + " (unmapped)");
    }
    fail("bad read");
  }

  static uint64_t pointer(vm::Value v, const char* what) {
    if (v.kind == vm::ValueKind::Addr || v.kind == vm::ValueKind::Int) return static_cast<uint64_t>(v.v);
    if (v.kind == vm::ValueKind::Nil) return 0;
    fail(std::string(what) + " of a non-pointer");
  }

  uint64_t field_offset(const std::string& f) const {
    auto it = s_.program->field_offsets.find(f);
    if (it == s_.program->field_offsets.end()) fail("there is no member named " + f);
    return it->second;
  }

  // Address denoted by an lvalue-ish expression (operand of &).
  uint64_t address_of(const lang::Expr& e) {
    if (e.kind == lang::ExprKind::Field) {
      uint64_t base = pointer(ev(*e.args[0]), "field access");
      if (base == 0) fail("field access through nil pointer");
      return base + field_offset(e.name);
    }
    if (e.kind == lang::ExprKind::Deref) return pointer(ev(*e.args[0]), "dereference");
    fail("cannot take the address of this expression");
  }

  std::string str_of(vm::Value v) const {
    if (v.kind != vm::ValueKind::Str) fail("expected a string");
    return s_.strings.at(static_cast<size_t>(v.v));
  }

  vm::Value ev(const lang::Expr& e) {
    using K = lang::ExprKind;
    using vm::Value;
    using vm::ValueKind;
    switch (e.kind) {
      case K::Int: return Value::integer(e.ival);
      case K::Bool: return Value::boolean(e.ival != 0);
      case K::Nil: return Value::nil();
      case K::Str: {
        // Only comparisons consume string literals; match against the VM table.
        for (size_t i = 0; i < s_.strings.size(); ++i)
          if (s_.strings[i] == e.name) return Value::str(static_cast<uint32_t>(i));
        fail("string literal does not occur in the target");
      }
      case K::Var: return lookup(e.name);
      case K::Unary: {
        Value v = ev(*e.args[0]);
        if (e.name == "!") return Value::boolean(!v.truthy());
        if (v.kind != ValueKind::Int) fail("negation of a non-integer");
        return Value::integer(-v.v);
      }
      case K::Binary: return binary(e);
      case K::Call: {
        if (e.name != "len" || e.args.size() != 1) fail("only len() may be called in an expression");
        Value v = ev(*e.args[0]);
        if (v.kind == ValueKind::List)
          return Value::integer(static_cast<int64_t>(s_.lists.at(static_cast<size_t>(v.v)).size()));
        if (v.kind == ValueKind::Str) return Value::integer(static_cast<int64_t>(str_of(v).size()));
        fail("len of a non-list");
      }
      case K::Index: {
        Value l = ev(*e.args[0]);
        Value i = ev(*e.args[1]);
        if (l.kind != ValueKind::List || i.kind != ValueKind::Int) fail("indexing requires a list and an integer");
        const auto& items = s_.lists.at(static_cast<size_t>(l.v));
        if (i.v < 0 || static_cast<size_t>(i.v) >= items.size()) fail("index out of range");
        return items[static_cast<size_t>(i.v)];
      }
      case K::Field: return load(address_of(e));
      case K::Deref: return load(pointer(ev(*e.args[0]), "dereference"));
      case K::AddrOf: return Value::addr(address_of(*e.args[0]));
      case K::List:
      case K::Spawn:
      case K::New: fail("expression has side effects");
    }
    fail("unsupported expression");
  }

  vm::Value binary(const lang::Expr& e) {
    using vm::Value;
    using vm::ValueKind;
    const std::string& op = e.name;
    if (op == "&&") {
      if (!ev(*e.args[0]).truthy()) return Value::boolean(false);
      return Value::boolean(ev(*e.args[1]).truthy());
    }
    if (op == "||") {
      if (ev(*e.args[0]).truthy()) return Value::boolean(true);
      return Value::boolean(ev(*e.args[1]).truthy());
    }
    Value a = ev(*e.args[0]);
    Value b = ev(*e.args[1]);
    if (op == "==" || op == "!=") {
      bool eq;
      if (a.is_numeric() && b.is_numeric()) eq = a.as_number() == b.as_number();
      else if (a.kind == ValueKind::Str && b.kind == ValueKind::Str) eq = str_of(a) == str_of(b);
      else eq = a == b;
      return Value::boolean(op == "==" ? eq : !eq);
    }
    if (!a.is_numeric() || !b.is_numeric()) fail("bad operands to " + op);
    int64_t x = a.as_number(), y = b.as_number();
    bool addr = a.kind == ValueKind::Addr || b.kind == ValueKind::Addr;
    if (op == "<") return Value::boolean(x < y);
    if (op == "<=") return Value::boolean(x <= y);
    if (op == ">") return Value::boolean(x > y);
    if (op == ">=") return Value::boolean(x >= y);
    if (op == "+") return addr ? Value::addr(static_cast<uint64_t>(x + y)) : Value::integer(x + y);
    if (op == "-") return addr && a.kind == ValueKind::Addr && b.kind != ValueKind::Addr
                              ? Value::addr(static_cast<uint64_t>(x - y))
                              : Value::integer(x - y);
    if (op == "*") return Value::integer(x * y);
    if (op == "/" || op == "%") {
      if (y == 0) fail("division by zero");
      return Value::integer(op == "/" ? x / y : x % y);
    }
    fail("unknown operator " + op);
  }

  const vm::VmState& s_;
  uint16_t tid_;
};

// A parsed watched expression with its polarity. `Observed` polarity treats
// whatever truth value the expression has at the moment the search starts as
// "bad"; `TrueIsGood` reads the expression as an assertion.
enum class Polarity : uint8_t { TrueIsGood, Observed };

struct WatchExpr {
  std::string text;
  std::shared_ptr<lang::Expr> ast;

  static WatchExpr parse(const std::string& src) {
    WatchExpr w;
    w.text = src;
    try {
      w.ast = std::shared_ptr<lang::Expr>(lang::parse_expression(src).release());
    } catch (const lang::SyntaxError& e) {
      throw Error(ErrorCode::EvalError, "cannot parse expression: " + e.detail());
    }
    return w;
  }
};

inline EvalResult evaluate(const vm::VmState& s, const lang::Expr& e, uint16_t tid = 0) {
  return Evaluator(s, tid).eval(e);
}

// Classifies a result. `bad_truth` is the truth value that counts as bad.
inline Verdict classify(const EvalResult& r, bool bad_truth) {
  if (!r.ok()) return Verdict::EvalError;
  return r.truthy() == bad_truth ? Verdict::Bad : Verdict::Good;
}

}  // namespace fred::dbg
