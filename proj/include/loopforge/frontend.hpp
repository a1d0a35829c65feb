#pragma once

// Parser and lowering for the supported Fortran subset.

#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include "loopforge/expr.hpp"
#include "loopforge/kernel.hpp"

namespace loopforge {

/// Expressions in the AST use source conventions: 1-based subscripts on
/// Subscript nodes, loop variables and scalars as Variable nodes.
struct Declaration {
  std::string name;
  DType dtype = DType::f32;
  std::vector<Expr> dims;  // empty for scalars
  int line = 0;
};

struct Assignment {
  std::string target;
  std::vector<Expr> indices;
  Expr value;
  std::vector<std::string> tags;
  int line = 0;
};

struct Statement;

struct DoLoop {
  std::string var;
  Expr upper;
  std::vector<Statement> body;
  int line = 0;
};

struct Statement {
  std::variant<Assignment, DoLoop> node;
};

struct Subroutine {
  std::string name;
  std::vector<std::string> params;
  std::vector<Declaration> decls;
  std::vector<Statement> body;
  int line = 0;

  const Declaration* find_decl(std::string_view name) const;
};

struct LineRange {
  int begin = 0;
  int end = 0;
};

struct SourceUnit {
  std::vector<Subroutine> subroutines;
  std::optional<std::string> transform_block;
  std::map<std::string, std::vector<LineRange>> tagged_regions;
};

SourceUnit parse_source(std::string_view text);

std::vector<Kernel> lower_to_kernels(const SourceUnit& unit);
Kernel lower_subroutine(const Subroutine& sub);

}  // namespace loopforge
