#include "kgscat/expr.hpp"

#include <cctype>
#include <cmath>
#include <stdexcept>
#include <vector>

namespace kgscat {

struct Expr::Node {
  enum class Kind { Number, VarT, VarX, Add, Sub, Mul, Div, Pow, Neg, Call };
  Kind kind;
  Real value = 0.0;          // Number
  std::string name;          // Call
  std::shared_ptr<const Node> lhs, rhs;

  Real eval(Real t, Real x) const {
    switch (kind) {
      case Kind::Number: return value;
      case Kind::VarT: return t;
      case Kind::VarX: return x;
      case Kind::Add: return lhs->eval(t, x) + rhs->eval(t, x);
      case Kind::Sub: return lhs->eval(t, x) - rhs->eval(t, x);
      case Kind::Mul: return lhs->eval(t, x) * rhs->eval(t, x);
      case Kind::Div: return lhs->eval(t, x) / rhs->eval(t, x);
      case Kind::Pow: return std::pow(lhs->eval(t, x), rhs->eval(t, x));
      case Kind::Neg: return -lhs->eval(t, x);
      case Kind::Call: {
        const Real a = lhs->eval(t, x);
        if (name == "exp") return std::exp(a);
        if (name == "sin") return std::sin(a);
        if (name == "cos") return std::cos(a);
        if (name == "sqrt") return std::sqrt(a);
        if (name == "tanh") return std::tanh(a);
        return 0.0;  // unreachable: names validated at parse time
      }
    }
    return 0.0;
  }
};

namespace {

using NodePtr = std::shared_ptr<const Expr::Node>;
using Kind = Expr::Node::Kind;

NodePtr make(Kind k, NodePtr l = nullptr, NodePtr r = nullptr) {
  auto n = std::make_shared<Expr::Node>();
  n->kind = k;
  n->lhs = std::move(l);
  n->rhs = std::move(r);
  return n;
}

class Parser {
 public:
  explicit Parser(const std::string& s) : src_(s) {}

  NodePtr parse() {
    NodePtr e = sum();
    skip_ws();
    if (pos_ != src_.size()) fail("trailing input");
    return e;
  }

 private:
  const std::string& src_;
  size_t pos_ = 0;

  [[noreturn]] void fail(const std::string& what) const {
    throw std::invalid_argument("expression error at position " +
                                std::to_string(pos_) + ": " + what + " in '" +
                                src_ + "'");
  }

  void skip_ws() {
    while (pos_ < src_.size() && std::isspace(static_cast<unsigned char>(src_[pos_]))) ++pos_;
  }

  bool consume(char c) {
    skip_ws();
    if (pos_ < src_.size() && src_[pos_] == c) {
      ++pos_;
      return true;
    }
    return false;
  }

  char peek() {
    skip_ws();
    return pos_ < src_.size() ? src_[pos_] : '\0';
  }

  NodePtr sum() {
    NodePtr e = product();
    while (true) {
      if (consume('+')) {
        e = make(Kind::Add, e, product());
      } else if (consume('-')) {
        e = make(Kind::Sub, e, product());
      } else {
        return e;
      }
    }
  }

  NodePtr product() {
    NodePtr e = unary();
    while (true) {
      if (consume('*')) {
        e = make(Kind::Mul, e, unary());
      } else if (consume('/')) {
        e = make(Kind::Div, e, unary());
      } else {
        return e;
      }
    }
  }

  NodePtr unary() {
    if (consume('-')) return make(Kind::Neg, unary());
    if (consume('+')) return unary();
    return power();
  }

  NodePtr power() {
    NodePtr base = atom();
    if (consume('^')) {
      // Right-associative; the exponent may itself be signed.
      return make(Kind::Pow, base, unary());
    }
    return base;
  }

  NodePtr atom() {
    const char c = peek();
    if (c == '(') {
      consume('(');
      NodePtr e = sum();
      if (!consume(')')) fail("expected ')'");
      return e;
    }
    if (std::isdigit(static_cast<unsigned char>(c)) || c == '.') return number();
    if (std::isalpha(static_cast<unsigned char>(c))) return identifier();
    fail("expected number, variable, function, or '('");
  }

  NodePtr number() {
    skip_ws();
    size_t end = pos_;
    auto digits = [&] {
      while (end < src_.size() && std::isdigit(static_cast<unsigned char>(src_[end]))) ++end;
    };
    digits();
    if (end < src_.size() && src_[end] == '.') {
      ++end;
      digits();
    }
    if (end < src_.size() && (src_[end] == 'e' || src_[end] == 'E')) {
      size_t mark = end + 1;
      if (mark < src_.size() && (src_[mark] == '+' || src_[mark] == '-')) ++mark;
      size_t digs = mark;
      while (digs < src_.size() && std::isdigit(static_cast<unsigned char>(src_[digs]))) ++digs;
      if (digs > mark) end = digs;
    }
    auto n = std::make_shared<Expr::Node>();
    n->kind = Kind::Number;
    n->value = std::stod(src_.substr(pos_, end - pos_));
    pos_ = end;
    return n;
  }

  NodePtr identifier() {
    skip_ws();
    size_t end = pos_;
    while (end < src_.size() && std::isalnum(static_cast<unsigned char>(src_[end]))) ++end;
    const std::string name = src_.substr(pos_, end - pos_);
    pos_ = end;
    if (name == "t") return make(Kind::VarT);
    if (name == "x") return make(Kind::VarX);
    if (name == "pi") {
      auto n = std::make_shared<Expr::Node>();
      n->kind = Kind::Number;
      n->value = kPi;
      return n;
    }
    static const std::vector<std::string> funcs = {"exp", "sin", "cos", "sqrt", "tanh"};
    for (const auto& f : funcs) {
      if (name == f) {
        if (!consume('(')) fail("expected '(' after " + name);
        NodePtr arg = sum();
        if (!consume(')')) fail("expected ')'");
        auto n = std::make_shared<Expr::Node>();
        n->kind = Kind::Call;
        n->name = name;
        n->lhs = std::move(arg);
        return n;
      }
    }
    fail("unknown identifier '" + name + "'");
  }
};

}  // namespace

Expr Expr::parse(const std::string& source) {
  Expr e;
  e.source_ = source;
  e.root_ = Parser(source).parse();
  return e;
}

Real Expr::operator()(Real t, Real x) const { return root_->eval(t, x); }

}  // namespace kgscat
