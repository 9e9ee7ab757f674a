#pragma once

// Arithmetic expressions over x, y, z used for external field components.
//
//   expr   := term (('+' | '-') term)*
//   term   := unary (('*' | '/') unary)*
//   unary  := '-' unary | '+' unary | atom
//   atom   := number | 'x' | 'y' | 'z' | '(' expr ')'
//
// Division by a value with magnitude below 1e-9 uses +-1e-9 instead.

#include "msc/types.hpp"

#include <charconv>
#include <memory>
#include <string>
#include <string_view>

namespace msc {

class Expression {
 public:
  Expression() = default;

  static Expression parse(std::string_view text) {
    Parser p{text, 0};
    Expression e;
    e.root_ = p.expr();
    p.skip();
    if (p.pos != text.size()) p.fail("unexpected '" + std::string(1, text[p.pos]) + "'");
    e.source_ = std::string(text);
    return e;
  }

  double operator()(const Vec3& p) const { return root_ ? eval(*root_, p) : 0.0; }
  const std::string& source() const { return source_; }

  static constexpr double kMinDenominator = 1e-9;

 private:
  struct Node {
    char op;  // 'n' number, 'x'/'y'/'z' variable, '~' negate, else binary operator
    double value = 0.0;
    std::shared_ptr<Node> a, b;
  };
  using NodePtr = std::shared_ptr<Node>;

  static double eval(const Node& n, const Vec3& p) {
    switch (n.op) {
      case 'n': return n.value;
      case 'x': return p.x();
      case 'y': return p.y();
      case 'z': return p.z();
      case '~': return -eval(*n.a, p);
      case '+': return eval(*n.a, p) + eval(*n.b, p);
      case '-': return eval(*n.a, p) - eval(*n.b, p);
      case '*': return eval(*n.a, p) * eval(*n.b, p);
      default: {
        double d = eval(*n.b, p);
        if (std::abs(d) < kMinDenominator) d = d < 0.0 ? -kMinDenominator : kMinDenominator;
        return eval(*n.a, p) / d;
      }
    }
  }

  struct Parser {
    std::string_view s;
    std::size_t pos;

    [[noreturn]] void fail(const std::string& msg) const {
      throw ConfigError("expression '" + std::string(s) + "' at column " + std::to_string(pos + 1) + ": " + msg);
    }
    void skip() {
      while (pos < s.size() && (s[pos] == ' ' || s[pos] == '\t')) ++pos;
    }
    bool eat(char c) {
      skip();
      if (pos < s.size() && s[pos] == c) {
        ++pos;
        return true;
      }
      return false;
    }
    static NodePtr bin(char op, NodePtr a, NodePtr b) {
      auto n = std::make_shared<Node>();
      n->op = op;
      n->a = std::move(a);
      n->b = std::move(b);
      return n;
    }

    NodePtr expr() {
      NodePtr lhs = term();
      for (;;) {
        if (eat('+')) lhs = bin('+', lhs, term());
        else if (eat('-')) lhs = bin('-', lhs, term());
        else return lhs;
      }
    }
    NodePtr term() {
      NodePtr lhs = unary();
      for (;;) {
        if (eat('*')) lhs = bin('*', lhs, unary());
        else if (eat('/')) lhs = bin('/', lhs, unary());
        else return lhs;
      }
    }
    NodePtr unary() {
      if (eat('-')) return bin('~', unary(), nullptr);
      if (eat('+')) return unary();
      return atom();
    }
    NodePtr atom() {
      skip();
      if (pos >= s.size()) fail("unexpected end of input");
      const char c = s[pos];
      if (c == '(') {
        ++pos;
        NodePtr e = expr();
        if (!eat(')')) fail("expected ')'");
        return e;
      }
      if (c == 'x' || c == 'y' || c == 'z') {
        ++pos;
        auto n = std::make_shared<Node>();
        n->op = c;
        return n;
      }
      if ((c >= '0' && c <= '9') || c == '.') {
        double v = 0.0;
        auto [ptr, ec] = std::from_chars(s.data() + pos, s.data() + s.size(), v);
        if (ec != std::errc()) fail("malformed number");
        pos = static_cast<std::size_t>(ptr - s.data());
        auto n = std::make_shared<Node>();
        n->op = 'n';
        n->value = v;
        return n;
      }
      fail("unexpected '" + std::string(1, c) + "'");
    }
  };

  NodePtr root_;
  std::string source_;
};

/// Vector field from three component expressions.
inline VectorField make_field(const std::string& ex, const std::string& ey, const std::string& ez) {
  const Expression fx = Expression::parse(ex), fy = Expression::parse(ey), fz = Expression::parse(ez);
  return [fx, fy, fz](const Vec3& p) { return Vec3(fx(p), fy(p), fz(p)); };
}

}  // namespace msc
