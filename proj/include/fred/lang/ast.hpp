#pragma once

// Syntax tree for `.fr` programs. Watched expressions share `Expr`.

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

namespace fred::lang {

struct SourcePos {
  uint32_t line = 0;
  uint32_t col = 0;
};

enum class ExprKind {
  Int,
  Str,
  Bool,
  Nil,
  Var,
  Unary,   // op: "-", "!"
  Binary,  // op: arithmetic, comparison, "&&", "||"
  Call,    // name(args)
  Index,   // args[0][args[1]]
  Field,   // args[0]->name, also spelled args[0].name
  Deref,   // *(args[0])
  AddrOf,  // &(args[0]); operand must be Field or Deref
  List,    // [args...]
  Spawn,   // spawn name(args)
  New,     // new Name
};

struct Expr {
  ExprKind kind;
  SourcePos pos;
  int64_t ival = 0;
  std::string name;  // variable, callee, field, struct, operator or string text
  std::vector<std::unique_ptr<Expr>> args;

  Expr(ExprKind k, SourcePos p) : kind(k), pos(p) {}
};

using ExprPtr = std::unique_ptr<Expr>;

enum class StmtKind { Let, Assign, ExprStmt, If, While, Return };

struct Stmt {
  StmtKind kind;
  SourcePos pos;
  std::string name;  // Let
  ExprPtr target;    // Assign lvalue
  ExprPtr value;     // Let/Assign value, ExprStmt, If/While condition, Return value (may be null)
  std::vector<std::unique_ptr<Stmt>> body;
  std::vector<std::unique_ptr<Stmt>> else_body;

  Stmt(StmtKind k, SourcePos p) : kind(k), pos(p) {}
};

using StmtPtr = std::unique_ptr<Stmt>;

struct FunctionDecl {
  std::string name;
  SourcePos pos;
  SourcePos end_pos;  // closing brace; hosts the implicit return
  bool nosym = false;
  std::vector<std::string> params;
  std::vector<StmtPtr> body;
};

struct GlobalDecl {
  std::string name;
  SourcePos pos;
  ExprPtr init;
};

struct StructDecl {
  std::string name;
  SourcePos pos;
  std::vector<std::string> fields;
};

struct Module {
  std::vector<GlobalDecl> globals;
  std::vector<StructDecl> structs;
  std::vector<FunctionDecl> functions;
};

}  // namespace fred::lang
