#pragma once

// Lexer and recursive-descent parser for `.fr` sources and for watched
// expressions typed at the debugger prompt.

#include <cctype>
#include <string>
#include <string_view>
#include <vector>

#include "fred/lang/ast.hpp"
#include "fred/support.hpp"

namespace fred::lang {

class SyntaxError : public Error {
 public:
  SyntaxError(SourcePos pos, const std::string& msg)
      : Error(ErrorCode::SyntaxError, "line " + std::to_string(pos.line) + ", column " +
                                          std::to_string(pos.col) + ": " + msg),
        pos_(pos), detail_(msg) {}
  SourcePos pos() const { return pos_; }
  const std::string& detail() const { return detail_; }

 private:
  SourcePos pos_;
  std::string detail_;
};

enum class Tok { Ident, Int, Str, Punct, End };

struct Token {
  Tok kind;
  std::string text;
  int64_t ival = 0;
  SourcePos pos;
};

inline std::vector<Token> lex(std::string_view src) {
  std::vector<Token> out;
  uint32_t line = 1, col = 1;
  size_t i = 0;
  auto advance = [&](size_t n) {
    for (size_t k = 0; k < n && i < src.size(); ++k, ++i) {
      if (src[i] == '\n') {
        ++line;
        col = 1;
      } else {
        ++col;
      }
    }
  };
  static constexpr std::string_view kTwo[] = {"==", "!=", "<=", ">=", "&&", "||", "->"};
  while (i < src.size()) {
    char c = src[i];
    if (std::isspace(static_cast<unsigned char>(c))) {
      advance(1);
      continue;
    }
    if (c == '/' && i + 1 < src.size() && src[i + 1] == '/') {
      while (i < src.size() && src[i] != '\n') advance(1);
      continue;
    }
    SourcePos pos{line, col};
    if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
      size_t j = i;
      while (j < src.size() && (std::isalnum(static_cast<unsigned char>(src[j])) || src[j] == '_')) ++j;
      out.push_back({Tok::Ident, std::string(src.substr(i, j - i)), 0, pos});
      advance(j - i);
      continue;
    }
    if (std::isdigit(static_cast<unsigned char>(c))) {
      size_t j = i;
      int base = 10;
      if (c == '0' && i + 1 < src.size() && (src[i + 1] == 'x' || src[i + 1] == 'X')) {
        base = 16;
        j += 2;
      }
      size_t start = j;
      while (j < src.size() && std::isxdigit(static_cast<unsigned char>(src[j])) &&
             (base == 16 || std::isdigit(static_cast<unsigned char>(src[j]))))
        ++j;
      if (j == start) throw SyntaxError(pos, "malformed number");
      std::string digits(src.substr(start, j - start));
      int64_t v = 0;
      try {
        v = static_cast<int64_t>(std::stoull(digits, nullptr, base));
      } catch (const std::exception&) {
        throw SyntaxError(pos, "number out of range");
      }
      out.push_back({Tok::Int, std::string(src.substr(i, j - i)), v, pos});
      advance(j - i);
      continue;
    }
    if (c == '"') {
      std::string s;
      size_t j = i + 1;
      while (j < src.size() && src[j] != '"') {
        if (src[j] == '\n') throw SyntaxError(pos, "unterminated string");
        if (src[j] == '\\' && j + 1 < src.size()) {
          char e = src[j + 1];
          s += e == 'n' ? '\n' : e == 't' ? '\t' : e;
          j += 2;
          continue;
        }
        s += src[j++];
      }
      if (j >= src.size()) throw SyntaxError(pos, "unterminated string");
      out.push_back({Tok::Str, s, 0, pos});
      advance(j + 1 - i);
      continue;
    }
    bool two = false;
    for (auto t : kTwo) {
      if (src.substr(i, 2) == t) {
        out.push_back({Tok::Punct, std::string(t), 0, pos});
        advance(2);
        two = true;
        break;
      }
    }
    if (two) continue;
    if (std::string_view("(){}[],;.=<>+-*/%!&").find(c) != std::string_view::npos) {
      out.push_back({Tok::Punct, std::string(1, c), 0, pos});
      advance(1);
      continue;
    }
    throw SyntaxError(pos, std::string("unexpected character '") + c + "'");
  }
  out.push_back({Tok::End, "", 0, {line, col}});
  return out;
}

class Parser {
 public:
  explicit Parser(std::string_view src) : toks_(lex(src)) {}

  Module parse_module() {
    Module m;
    while (!at_end()) {
      if (accept_kw("global")) {
        GlobalDecl g;
        g.pos = prev().pos;
        g.name = expect_ident();
        expect("=");
        g.init = expression();
        expect(";");
        m.globals.push_back(std::move(g));
      } else if (accept_kw("struct")) {
        StructDecl s;
        s.pos = prev().pos;
        s.name = expect_ident();
        expect("{");
        if (!check("}")) {
          do {
            s.fields.push_back(expect_ident());
          } while (accept(","));
        }
        expect("}");
        m.structs.push_back(std::move(s));
      } else if (check_kw("fn") || check_kw("nosym")) {
        FunctionDecl f;
        f.nosym = accept_kw("nosym");
        expect_kw("fn");
        f.pos = prev().pos;
        f.name = expect_ident();
        expect("(");
        if (!check(")")) {
          do {
            f.params.push_back(expect_ident());
          } while (accept(","));
        }
        expect(")");
        f.body = block(&f.end_pos);
        m.functions.push_back(std::move(f));
      } else {
        throw SyntaxError(peek().pos, "expected 'fn', 'global' or 'struct'");
      }
    }
    return m;
  }

  // A standalone expression consuming the whole input.
  ExprPtr parse_standalone_expression() {
    auto e = expression();
    if (!at_end()) throw SyntaxError(peek().pos, "unexpected '" + peek().text + "' after expression");
    return e;
  }

 private:
  std::vector<StmtPtr> block(SourcePos* close = nullptr) {
    expect("{");
    std::vector<StmtPtr> out;
    while (!check("}")) {
      if (at_end()) throw SyntaxError(peek().pos, "unterminated block");
      out.push_back(statement());
    }
    if (close) *close = peek().pos;
    expect("}");
    return out;
  }

  StmtPtr statement() {
    SourcePos pos = peek().pos;
    if (accept_kw("let")) {
      auto s = std::make_unique<Stmt>(StmtKind::Let, pos);
      s->name = expect_ident();
      expect("=");
      s->value = expression();
      expect(";");
      return s;
    }
    if (accept_kw("if")) return if_tail(pos);
    if (accept_kw("while")) {
      auto s = std::make_unique<Stmt>(StmtKind::While, pos);
      s->value = expression();
      s->body = block();
      return s;
    }
    if (accept_kw("return")) {
      auto s = std::make_unique<Stmt>(StmtKind::Return, pos);
      if (!check(";")) s->value = expression();
      expect(";");
      return s;
    }
    auto e = expression();
    if (accept("=")) {
      if (e->kind != ExprKind::Var && e->kind != ExprKind::Index && e->kind != ExprKind::Field &&
          e->kind != ExprKind::Deref)
        throw SyntaxError(e->pos, "invalid assignment target");
      auto s = std::make_unique<Stmt>(StmtKind::Assign, pos);
      s->target = std::move(e);
      s->value = expression();
      expect(";");
      return s;
    }
    if (e->kind != ExprKind::Call && e->kind != ExprKind::Spawn)
      throw SyntaxError(e->pos, "expression statement must be a call");
    auto s = std::make_unique<Stmt>(StmtKind::ExprStmt, pos);
    s->value = std::move(e);
    expect(";");
    return s;
  }

  StmtPtr if_tail(SourcePos pos) {
    auto s = std::make_unique<Stmt>(StmtKind::If, pos);
    s->value = expression();
    s->body = block();
    if (accept_kw("else")) {
      if (check_kw("if")) {
        SourcePos p2 = peek().pos;
        ++i_;
        s->else_body.push_back(if_tail(p2));
      } else {
        s->else_body = block();
      }
    }
    return s;
  }

  ExprPtr expression() { return binary(0); }

  static int precedence(const std::string& op) {
    if (op == "||") return 1;
    if (op == "&&") return 2;
    if (op == "==" || op == "!=") return 3;
    if (op == "<" || op == "<=" || op == ">" || op == ">=") return 4;
    if (op == "+" || op == "-") return 5;
    if (op == "*" || op == "/" || op == "%") return 6;
    return -1;
  }

  ExprPtr binary(int min_prec) {
    auto lhs = unary();
    for (;;) {
      const Token& t = peek();
      if (t.kind != Tok::Punct) break;
      int p = precedence(t.text);
      if (p < 0 || p <= min_prec) break;
      ++i_;
      auto e = std::make_unique<Expr>(ExprKind::Binary, t.pos);
      e->name = t.text;
      e->args.push_back(std::move(lhs));
      e->args.push_back(binary(p));
      lhs = std::move(e);
    }
    return lhs;
  }

  ExprPtr unary() {
    SourcePos pos = peek().pos;
    if (accept("-") || accept("!")) {
      auto e = std::make_unique<Expr>(ExprKind::Unary, pos);
      e->name = prev().text;
      e->args.push_back(unary());
      return e;
    }
    if (accept("*")) {
      auto e = std::make_unique<Expr>(ExprKind::Deref, pos);
      e->args.push_back(unary());
      return e;
    }
    if (accept("&")) {
      auto e = std::make_unique<Expr>(ExprKind::AddrOf, pos);
      e->args.push_back(unary());
      auto k = e->args[0]->kind;
      if (k != ExprKind::Field && k != ExprKind::Deref)
        throw SyntaxError(pos, "'&' applies only to a field access or a dereference");
      return e;
    }
    return postfix(primary());
  }

  ExprPtr postfix(ExprPtr e) {
    for (;;) {
      SourcePos pos = peek().pos;
      if (accept("[")) {
        auto ix = std::make_unique<Expr>(ExprKind::Index, pos);
        ix->args.push_back(std::move(e));
        ix->args.push_back(expression());
        expect("]");
        e = std::move(ix);
      } else if (accept("->") || accept(".")) {
        auto f = std::make_unique<Expr>(ExprKind::Field, pos);
        f->args.push_back(std::move(e));
        f->name = expect_ident();
        e = std::move(f);
      } else {
        return e;
      }
    }
  }

  std::vector<ExprPtr> call_args() {
    std::vector<ExprPtr> args;
    expect("(");
    if (!check(")")) {
      do {
        args.push_back(expression());
      } while (accept(","));
    }
    expect(")");
    return args;
  }

  ExprPtr primary() {
    const Token& t = peek();
    SourcePos pos = t.pos;
    if (t.kind == Tok::Int) {
      ++i_;
      auto e = std::make_unique<Expr>(ExprKind::Int, pos);
      e->ival = t.ival;
      return e;
    }
    if (t.kind == Tok::Str) {
      ++i_;
      auto e = std::make_unique<Expr>(ExprKind::Str, pos);
      e->name = t.text;
      return e;
    }
    if (accept("(")) {
      auto e = expression();
      expect(")");
      return e;
    }
    if (accept("[")) {
      auto e = std::make_unique<Expr>(ExprKind::List, pos);
      if (!check("]")) {
        do {
          e->args.push_back(expression());
        } while (accept(","));
      }
      expect("]");
      return e;
    }
    if (t.kind == Tok::Ident) {
      if (accept_kw("true") || accept_kw("false")) {
        auto e = std::make_unique<Expr>(ExprKind::Bool, pos);
        e->ival = prev().text == "true";
        return e;
      }
      if (accept_kw("nil")) return std::make_unique<Expr>(ExprKind::Nil, pos);
      if (accept_kw("spawn")) {
        auto e = std::make_unique<Expr>(ExprKind::Spawn, pos);
        e->name = expect_ident();
        e->args = call_args();
        return e;
      }
      if (accept_kw("new")) {
        auto e = std::make_unique<Expr>(ExprKind::New, pos);
        e->name = expect_ident();
        return e;
      }
      if (is_keyword(t.text)) throw SyntaxError(pos, "unexpected keyword '" + t.text + "'");
      ++i_;
      if (check("(")) {
        auto e = std::make_unique<Expr>(ExprKind::Call, pos);
        e->name = t.text;
        e->args = call_args();
        return e;
      }
      auto e = std::make_unique<Expr>(ExprKind::Var, pos);
      e->name = t.text;
      return e;
    }
    if (t.kind == Tok::End) throw SyntaxError(pos, "unexpected end of input");
    throw SyntaxError(pos, "unexpected '" + t.text + "'");
  }

  static bool is_keyword(const std::string& s) {
    static const char* kw[] = {"fn", "global", "struct", "let", "if", "else", "while", "return",
                               "true", "false", "nil", "spawn", "new", "nosym"};
    for (auto k : kw)
      if (s == k) return true;
    return false;
  }

  const Token& peek() const { return toks_[i_]; }
  const Token& prev() const { return toks_[i_ - 1]; }
  bool at_end() const { return peek().kind == Tok::End; }
  bool check(std::string_view p) const { return peek().kind == Tok::Punct && peek().text == p; }
  bool check_kw(std::string_view k) const { return peek().kind == Tok::Ident && peek().text == k; }
  bool accept(std::string_view p) {
    if (!check(p)) return false;
    ++i_;
    return true;
  }
  bool accept_kw(std::string_view k) {
    if (!check_kw(k)) return false;
    ++i_;
    return true;
  }
  void expect(std::string_view p) {
    if (!accept(p)) {
      std::string got = at_end() ? "end of input" : "'" + peek().text + "'";
      throw SyntaxError(peek().pos, "expected '" + std::string(p) + "', found " + got);
    }
  }
  void expect_kw(std::string_view k) {
    if (!accept_kw(k)) throw SyntaxError(peek().pos, "expected '" + std::string(k) + "'");
  }
  std::string expect_ident() {
    if (peek().kind != Tok::Ident || is_keyword(peek().text))
      throw SyntaxError(peek().pos, "expected identifier");
    return toks_[i_++].text;
  }

  std::vector<Token> toks_;
  size_t i_ = 0;
};

inline Module parse_module(std::string_view src) { return Parser(src).parse_module(); }

inline ExprPtr parse_expression(std::string_view src) {
  return Parser(src).parse_standalone_expression();
}

}  // namespace fred::lang
