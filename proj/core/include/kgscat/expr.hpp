#pragma once

#include <memory>
#include <string>

#include "kgscat/types.hpp"

namespace kgscat {

// Compiled real-valued coefficient expression in the variables t and x.
// Grammar (whitelisted): numbers, t, x, + - * / ^, parentheses, unary minus,
// and the functions exp, sin, cos, sqrt, tanh. Powers accept any real
// exponent when the base is positive, integer exponents otherwise.
class Expr {
 public:
  // Throws std::invalid_argument with a position-annotated message on
  // syntax errors or non-whitelisted identifiers.
  static Expr parse(const std::string& source);

  Real operator()(Real t, Real x) const;
  const std::string& source() const { return source_; }

  struct Node;

 private:
  std::string source_;
  std::shared_ptr<const Node> root_;
};

}  // namespace kgscat
