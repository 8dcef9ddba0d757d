#pragma once

// Bytecode, the compiler from `lang::Module`, and the disassembler behind
// `--dump-bytecode`.

#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "fred/lang/parser.hpp"
#include "fred/vm/value.hpp"

namespace fred::vm {

enum class Op : uint8_t {
  Stmt,
  PushInt,
  PushStr,
  PushNil,
  PushBool,
  LoadLocal,
  StoreLocal,
  LoadGlobal,
  StoreGlobal,
  LoadMem,
  StoreMem,
  FieldAddr,
  LoadIndex,
  StoreIndex,
  MakeList,
  Append,
  Len,
  Neg,
  Not,
  Add,
  Sub,
  Mul,
  Div,
  Mod,
  Eq,
  Ne,
  Lt,
  Le,
  Gt,
  Ge,
  Dup,
  Pop,
  Jmp,
  JmpIfFalse,
  Call,
  Ret,
  Spawn,
  Join,
  Lock,
  Unlock,
  Alloc,
  New,
  Free,
  Realloc,
  Rand,
  Clock,
  Input,
  Print,
  Assert,
};

inline const char* op_name(Op op) {
  static const char* names[] = {
      "STMT",  "PUSH_INT", "PUSH_STR", "PUSH_NIL",    "PUSH_BOOL", "LOAD_LOCAL", "STORE_LOCAL",
      "LOAD_GLOBAL", "STORE_GLOBAL", "LOAD_MEM", "STORE_MEM", "FIELD_ADDR", "LOAD_INDEX",
      "STORE_INDEX", "MAKE_LIST", "APPEND", "LEN", "NEG", "NOT", "ADD", "SUB", "MUL", "DIV",
      "MOD", "EQ", "NE", "LT", "LE", "GT", "GE", "DUP", "POP", "JMP", "JMP_IF_FALSE", "CALL",
      "RET", "SPAWN", "JOIN", "LOCK", "UNLOCK", "ALLOC", "NEW", "FREE", "REALLOC", "RAND",
      "CLOCK", "INPUT", "PRINT", "ASSERT"};
  return names[static_cast<size_t>(op)];
}

struct Instr {
  Op op;
  int64_t a = 0;
  int32_t b = 0;
  uint32_t stmt = 0;
};

struct SourceLoc {
  std::string file;
  uint32_t line = 0;
  uint32_t stmt = 0;

  std::string str() const { return file + ":" + std::to_string(line); }
  friend bool operator==(const SourceLoc&, const SourceLoc&) = default;
};

struct StatementInfo {
  uint32_t line = 0;
  uint32_t col = 0;
  uint32_t func = 0;
  uint32_t first_instr = 0;
};

struct Function {
  std::string name;
  uint32_t params = 0;
  uint32_t locals = 0;
  uint32_t entry = 0;
  uint32_t line = 0;
  bool nosym = false;
  std::vector<std::string> local_names;
};

struct Constant {
  ValueKind kind = ValueKind::Nil;
  int64_t v = 0;
  std::vector<Constant> items;  // List constants
};

struct Program {
  std::string file;
  std::string source;
  std::vector<Instr> code;
  std::vector<Function> functions;
  std::vector<StatementInfo> statements;
  std::vector<std::string> strings;
  std::vector<std::string> global_names;
  std::vector<Constant> global_inits;
  std::map<std::string, int64_t> field_offsets;
  std::map<std::string, int64_t> struct_sizes;
  uint32_t main_func = 0;

  SourceLoc loc_of_stmt(uint32_t stmt) const { return {file, statements.at(stmt).line, stmt}; }
  SourceLoc loc_of_instr(uint32_t ip) const { return loc_of_stmt(code.at(ip).stmt); }

  std::optional<uint32_t> find_function(const std::string& name) const {
    for (uint32_t i = 0; i < functions.size(); ++i)
      if (functions[i].name == name) return i;
    return std::nullopt;
  }
  std::optional<uint32_t> find_global(const std::string& name) const {
    for (uint32_t i = 0; i < global_names.size(); ++i)
      if (global_names[i] == name) return i;
    return std::nullopt;
  }
  // Statements whose first line is `line`, in id order.
  std::vector<uint32_t> statements_at_line(uint32_t line) const {
    std::vector<uint32_t> out;
    for (uint32_t i = 0; i < statements.size(); ++i)
      if (statements[i].line == line) out.push_back(i);
    return out;
  }
  std::string source_line(uint32_t line) const {
    std::istringstream in(source);
    std::string s;
    for (uint32_t i = 1; std::getline(in, s); ++i)
      if (i == line) return s;
    return {};
  }
};

namespace detail {

struct Builtin {
  const char* name;
  int argc;  // -1: variadic
  bool statement_only;
  bool effect;
};

inline const Builtin* find_builtin(const std::string& name) {
  static const Builtin table[] = {
      {"print", -1, true, false}, {"assert", 1, true, false}, {"push", 2, true, false},
      {"len", 1, false, false},   {"alloc", 1, false, true},  {"realloc", 2, false, true},
      {"free", 1, true, true},    {"lock", 1, true, true},    {"unlock", 1, true, true},
      {"join", 1, true, true},    {"rand", 0, false, true},   {"clock", 0, false, true},
      {"input", 0, false, true},
  };
  for (const auto& b : table)
    if (name == b.name) return &b;
  return nullptr;
}

class Compiler {
 public:
  Compiler(const lang::Module& m, std::string file, std::string source) : m_(m) {
    p_.file = std::move(file);
    p_.source = std::move(source);
  }

  Program run() {
    for (const auto& s : m_.structs) {
      if (p_.struct_sizes.count(s.name)) throw lang::SyntaxError(s.pos, "duplicate struct " + s.name);
      p_.struct_sizes[s.name] = static_cast<int64_t>(s.fields.size()) * 8;
      for (size_t i = 0; i < s.fields.size(); ++i) {
        int64_t off = static_cast<int64_t>(i) * 8;
        auto [it, fresh] = p_.field_offsets.emplace(s.fields[i], off);
        if (!fresh && it->second != off)
          throw lang::SyntaxError(s.pos, "field '" + s.fields[i] +
                                             "' has conflicting offsets across structs");
      }
    }
    for (const auto& g : m_.globals) {
      if (p_.find_global(g.name)) throw lang::SyntaxError(g.pos, "duplicate global " + g.name);
      p_.global_names.push_back(g.name);
      p_.global_inits.push_back(constant(*g.init));
    }
    for (const auto& f : m_.functions) {
      if (p_.find_function(f.name)) throw lang::SyntaxError(f.pos, "duplicate function " + f.name);
      if (find_builtin(f.name)) throw lang::SyntaxError(f.pos, "'" + f.name + "' is a builtin");
      Function fn;
      fn.name = f.name;
      fn.params = static_cast<uint32_t>(f.params.size());
      fn.line = f.pos.line;
      fn.nosym = f.nosym;
      p_.functions.push_back(fn);
    }
    auto main = p_.find_function("main");
    if (!main) throw lang::SyntaxError({1, 1}, "program has no 'main' function");
    if (p_.functions[*main].params != 0)
      throw lang::SyntaxError(m_.functions[*main].pos, "'main' takes no parameters");
    p_.main_func = *main;
    for (uint32_t i = 0; i < m_.functions.size(); ++i) function(i, m_.functions[i]);
    return std::move(p_);
  }

 private:
  Constant constant(const lang::Expr& e) {
    using lang::ExprKind;
    Constant c;
    switch (e.kind) {
      case ExprKind::Int: c.kind = ValueKind::Int; c.v = e.ival; return c;
      case ExprKind::Bool: c.kind = ValueKind::Bool; c.v = e.ival; return c;
      case ExprKind::Nil: return c;
      case ExprKind::Str: c.kind = ValueKind::Str; c.v = intern(e.name); return c;
      case ExprKind::Unary:
        if (e.name == "-" && e.args[0]->kind == ExprKind::Int) {
          c.kind = ValueKind::Int;
          c.v = -e.args[0]->ival;
          return c;
        }
        break;
      case ExprKind::List:
        c.kind = ValueKind::List;
        for (const auto& a : e.args) c.items.push_back(constant(*a));
        return c;
      default: break;
    }
    throw lang::SyntaxError(e.pos, "global initializer must be a constant");
  }

  int64_t intern(const std::string& s) {
    for (size_t i = 0; i < p_.strings.size(); ++i)
      if (p_.strings[i] == s) return static_cast<int64_t>(i);
    p_.strings.push_back(s);
    return static_cast<int64_t>(p_.strings.size() - 1);
  }

  void function(uint32_t index, const lang::FunctionDecl& f) {
    func_ = index;
    locals_.clear();
    for (const auto& pname : f.params) {
      if (locals_.count(pname)) throw lang::SyntaxError(f.pos, "duplicate parameter " + pname);
      local_slot(pname);
    }
    p_.functions[index].entry = static_cast<uint32_t>(p_.code.size());
    for (const auto& s : f.body) statement(*s);
    begin_stmt(f.end_pos);
    emit(Op::PushNil);
    emit(Op::Ret);
    Function& fn = p_.functions[index];
    fn.locals = static_cast<uint32_t>(locals_.size());
    fn.local_names.resize(locals_.size());
    for (const auto& [name, slot] : locals_) fn.local_names[slot] = name;
  }

  uint32_t local_slot(const std::string& name) {
    auto it = locals_.find(name);
    if (it != locals_.end()) return it->second;
    uint32_t slot = static_cast<uint32_t>(locals_.size());
    locals_[name] = slot;
    return slot;
  }

  void begin_stmt(lang::SourcePos pos) {
    stmt_ = static_cast<uint32_t>(p_.statements.size());
    p_.statements.push_back({pos.line, pos.col, func_, static_cast<uint32_t>(p_.code.size())});
    emit(Op::Stmt, stmt_);
  }

  size_t emit(Op op, int64_t a = 0, int32_t b = 0) {
    p_.code.push_back({op, a, b, stmt_});
    return p_.code.size() - 1;
  }
  void patch(size_t at) { p_.code[at].a = static_cast<int64_t>(p_.code.size()); }

  int count_effects(const lang::Expr& e) {
    using lang::ExprKind;
    int n = 0;
    if (e.kind == ExprKind::Spawn || e.kind == ExprKind::New) n = 1;
    if (e.kind == ExprKind::Call) {
      const Builtin* b = find_builtin(e.name);
      n = (!b || b->effect) ? 1 : 0;
    }
    for (const auto& a : e.args) n += count_effects(*a);
    return n;
  }

  void check_effects(const lang::Stmt& s) {
    int n = 0;
    if (s.target) n += count_effects(*s.target);
    if (s.value) n += count_effects(*s.value);
    if (n > 1)
      throw lang::SyntaxError(s.pos, "at most one call or runtime operation per statement");
  }

  void statement(const lang::Stmt& s) {
    using lang::StmtKind;
    check_effects(s);
    switch (s.kind) {
      case StmtKind::Let: {
        begin_stmt(s.pos);
        expr(*s.value);
        emit(Op::StoreLocal, local_slot(s.name));
        break;
      }
      case StmtKind::Assign: {
        begin_stmt(s.pos);
        assign(*s.target, *s.value);
        break;
      }
      case StmtKind::ExprStmt: {
        begin_stmt(s.pos);
        const lang::Expr& e = *s.value;
        const Builtin* b = e.kind == lang::ExprKind::Call ? find_builtin(e.name) : nullptr;
        if (b && b->statement_only) {
          builtin(e, *b, true);
        } else {
          expr(e);
          emit(Op::Pop);
        }
        break;
      }
      case StmtKind::If: {
        begin_stmt(s.pos);
        expr(*s.value);
        size_t jf = emit(Op::JmpIfFalse);
        for (const auto& b : s.body) statement(*b);
        if (s.else_body.empty()) {
          patch(jf);
        } else {
          size_t j = emit(Op::Jmp);
          patch(jf);
          for (const auto& b : s.else_body) statement(*b);
          patch(j);
        }
        break;
      }
      case StmtKind::While: {
        begin_stmt(s.pos);
        size_t top = p_.code.size() - 1;  // the STMT itself: each test is a statement
        expr(*s.value);
        size_t jf = emit(Op::JmpIfFalse);
        for (const auto& b : s.body) statement(*b);
        emit(Op::Jmp, static_cast<int64_t>(top));
        patch(jf);
        break;
      }
      case StmtKind::Return: {
        begin_stmt(s.pos);
        if (s.value) expr(*s.value);
        else emit(Op::PushNil);
        emit(Op::Ret);
        break;
      }
    }
  }

  void assign(const lang::Expr& target, const lang::Expr& value) {
    using lang::ExprKind;
    switch (target.kind) {
      case ExprKind::Var: {
        expr(value);
        auto it = locals_.find(target.name);
        if (it != locals_.end()) {
          emit(Op::StoreLocal, it->second);
        } else if (auto g = p_.find_global(target.name)) {
          emit(Op::StoreGlobal, *g);
        } else {
          throw lang::SyntaxError(target.pos, "unknown variable '" + target.name + "'");
        }
        return;
      }
      case ExprKind::Index:
        expr(*target.args[0]);
        expr(*target.args[1]);
        expr(value);
        emit(Op::StoreIndex);
        return;
      case ExprKind::Field:
        expr(*target.args[0]);
        emit(Op::FieldAddr, field_offset(target));
        expr(value);
        emit(Op::StoreMem);
        return;
      case ExprKind::Deref:
        expr(*target.args[0]);
        expr(value);
        emit(Op::StoreMem);
        return;
      default: throw lang::SyntaxError(target.pos, "invalid assignment target");
    }
  }

  int64_t field_offset(const lang::Expr& field) {
    auto it = p_.field_offsets.find(field.name);
    if (it == p_.field_offsets.end())
      throw lang::SyntaxError(field.pos, "unknown field '" + field.name + "'");
    return it->second;
  }

  void builtin(const lang::Expr& e, const Builtin& b, bool as_statement) {
    if (b.statement_only && !as_statement)
      throw lang::SyntaxError(e.pos, "'" + e.name + "' can only be used as a statement");
    if (b.argc >= 0 && static_cast<int>(e.args.size()) != b.argc)
      throw lang::SyntaxError(e.pos, "'" + e.name + "' takes " + std::to_string(b.argc) +
                                         " argument(s)");
    for (const auto& a : e.args) expr(*a);
    std::string n = e.name;
    if (n == "print") emit(Op::Print, static_cast<int64_t>(e.args.size()));
    else if (n == "assert") emit(Op::Assert);
    else if (n == "push") emit(Op::Append);
    else if (n == "len") emit(Op::Len);
    else if (n == "alloc") emit(Op::Alloc);
    else if (n == "realloc") emit(Op::Realloc);
    else if (n == "free") emit(Op::Free);
    else if (n == "lock") emit(Op::Lock);
    else if (n == "unlock") emit(Op::Unlock);
    else if (n == "join") emit(Op::Join);
    else if (n == "rand") emit(Op::Rand);
    else if (n == "clock") emit(Op::Clock);
    else if (n == "input") emit(Op::Input);
  }

  void expr(const lang::Expr& e) {
    using lang::ExprKind;
    switch (e.kind) {
      case ExprKind::Int: emit(Op::PushInt, e.ival); return;
      case ExprKind::Str: emit(Op::PushStr, intern(e.name)); return;
      case ExprKind::Bool: emit(Op::PushBool, e.ival); return;
      case ExprKind::Nil: emit(Op::PushNil); return;
      case ExprKind::Var: {
        auto it = locals_.find(e.name);
        if (it != locals_.end()) emit(Op::LoadLocal, it->second);
        else if (auto g = p_.find_global(e.name)) emit(Op::LoadGlobal, *g);
        else throw lang::SyntaxError(e.pos, "unknown variable '" + e.name + "'");
        return;
      }
      case ExprKind::Unary:
        expr(*e.args[0]);
        emit(e.name == "-" ? Op::Neg : Op::Not);
        return;
      case ExprKind::Binary: {
        if (e.name == "&&" || e.name == "||") {
          expr(*e.args[0]);
          emit(Op::Dup);
          if (e.name == "||") emit(Op::Not);
          size_t jf = emit(Op::JmpIfFalse);
          emit(Op::Pop);
          expr(*e.args[1]);
          patch(jf);
          emit(Op::Not);  // normalize to bool
          emit(Op::Not);
          return;
        }
        expr(*e.args[0]);
        expr(*e.args[1]);
        static const std::pair<const char*, Op> ops[] = {
            {"+", Op::Add}, {"-", Op::Sub}, {"*", Op::Mul}, {"/", Op::Div}, {"%", Op::Mod},
            {"==", Op::Eq}, {"!=", Op::Ne}, {"<", Op::Lt},  {"<=", Op::Le}, {">", Op::Gt},
            {">=", Op::Ge}};
        for (auto [s, op] : ops)
          if (e.name == s) {
            emit(op);
            return;
          }
        throw lang::SyntaxError(e.pos, "unknown operator " + e.name);
      }
      case ExprKind::Call: {
        if (const Builtin* b = find_builtin(e.name)) {
          builtin(e, *b, false);
          return;
        }
        auto f = p_.find_function(e.name);
        if (!f) throw lang::SyntaxError(e.pos, "unknown function '" + e.name + "'");
        if (p_.functions[*f].params != e.args.size())
          throw lang::SyntaxError(e.pos, "wrong number of arguments to '" + e.name + "'");
        for (const auto& a : e.args) expr(*a);
        emit(Op::Call, *f, static_cast<int32_t>(e.args.size()));
        return;
      }
      case ExprKind::Spawn: {
        auto f = p_.find_function(e.name);
        if (!f) throw lang::SyntaxError(e.pos, "unknown function '" + e.name + "'");
        if (p_.functions[*f].params != e.args.size())
          throw lang::SyntaxError(e.pos, "wrong number of arguments to '" + e.name + "'");
        for (const auto& a : e.args) expr(*a);
        emit(Op::Spawn, *f, static_cast<int32_t>(e.args.size()));
        return;
      }
      case ExprKind::Index:
        expr(*e.args[0]);
        expr(*e.args[1]);
        emit(Op::LoadIndex);
        return;
      case ExprKind::Field:
        expr(*e.args[0]);
        emit(Op::FieldAddr, field_offset(e));
        emit(Op::LoadMem);
        return;
      case ExprKind::Deref:
        expr(*e.args[0]);
        emit(Op::LoadMem);
        return;
      case ExprKind::AddrOf: {
        const lang::Expr& inner = *e.args[0];
        expr(*inner.args[0]);
        if (inner.kind == ExprKind::Field) emit(Op::FieldAddr, field_offset(inner));
        return;
      }
      case ExprKind::List:
        for (const auto& a : e.args) expr(*a);
        emit(Op::MakeList, static_cast<int64_t>(e.args.size()));
        return;
      case ExprKind::New: {
        auto it = p_.struct_sizes.find(e.name);
        if (it == p_.struct_sizes.end())
          throw lang::SyntaxError(e.pos, "unknown struct '" + e.name + "'");
        emit(Op::New, std::max<int64_t>(it->second, 8));
        return;
      }
    }
  }

  const lang::Module& m_;
  Program p_;
  uint32_t func_ = 0;
  uint32_t stmt_ = 0;
  std::unordered_map<std::string, uint32_t> locals_;
};

}  // namespace detail

// Parses and compiles; throws lang::SyntaxError.
inline Program compile(std::string_view source, std::string file = "<input>") {
  auto module = lang::parse_module(source);
  return detail::Compiler(module, std::move(file), std::string(source)).run();
}

inline std::string disassemble(const Program& p) {
  std::ostringstream out;
  for (size_t i = 0; i < p.code.size(); ++i) {
    const Instr& in = p.code[i];
    std::string operands;
    switch (in.op) {
      case Op::Stmt: operands = "#" + std::to_string(in.a); break;
      case Op::PushStr: operands = "\"" + p.strings.at(static_cast<size_t>(in.a)) + "\""; break;
      case Op::Call:
      case Op::Spawn:
        operands = p.functions.at(static_cast<size_t>(in.a)).name + " " + std::to_string(in.b);
        break;
      case Op::LoadGlobal:
      case Op::StoreGlobal: operands = p.global_names.at(static_cast<size_t>(in.a)); break;
      case Op::PushInt:
      case Op::PushBool:
      case Op::LoadLocal:
      case Op::StoreLocal:
      case Op::FieldAddr:
      case Op::MakeList:
      case Op::Jmp:
      case Op::JmpIfFalse:
      case Op::New:
      case Op::Print: operands = std::to_string(in.a); break;
      default: break;
    }
    char head[64];
    std::snprintf(head, sizeof head, "%5zu  %-13s", i, op_name(in.op));
    std::string line = std::string(head) + " " + operands;
    if (line.size() < 40) line.resize(40, ' ');
    out << line << " ; " << p.loc_of_instr(static_cast<uint32_t>(i)).str() << "\n";
  }
  return out.str();
}

}  // namespace fred::vm
