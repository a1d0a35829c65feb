#pragma once

// Side-effect-free expression trees, substitution rules and the rewriting
// primitives every transformation is built from.

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace loopforge {

enum class DType { f32, i32 };

std::string_view to_string(DType t);

enum class BinaryOpKind { add, sub, mul, div, pow };

struct ExprNode;

/// Immutable, shared expression handle. Copies are cheap; equality is
/// structural.
class Expr {
 public:
  /// The i32 literal 0.
  Expr();

  static Expr literal(double value, DType dtype);
  static Expr f32(double value) { return literal(value, DType::f32); }
  static Expr i32(int64_t value) { return literal(static_cast<double>(value), DType::i32); }
  static Expr var(std::string name);
  static Expr subscript(std::string array, std::vector<Expr> indices);
  static Expr neg(Expr operand);
  static Expr binary(BinaryOpKind op, Expr lhs, Expr rhs);
  static Expr call(std::string function, std::vector<Expr> args);
  static Expr rule(std::string rule, std::vector<Expr> args);

  const ExprNode& node() const { return *node_; }

  template <class T>
  const T* as() const;

  friend bool operator==(const Expr& a, const Expr& b);

 private:
  explicit Expr(std::shared_ptr<const ExprNode> node) : node_(std::move(node)) {}
  std::shared_ptr<const ExprNode> node_;
};

struct Literal {
  double value;
  DType dtype;
};

struct Variable {
  std::string name;
};

/// Array (or zero-dimensional temporary) access.
struct Subscript {
  std::string array;
  std::vector<Expr> indices;
};

struct Negate {
  Expr operand;
};

struct BinaryOp {
  BinaryOpKind op;
  Expr lhs;
  Expr rhs;
};

/// Intrinsic function call (pow, exp, sqrt, fma, mod, floordiv, ...).
struct Call {
  std::string function;
  std::vector<Expr> args;
};

struct RuleInvocation {
  std::string rule;
  std::vector<Expr> args;
};

struct ExprNode {
  std::variant<Literal, Variable, Subscript, Negate, BinaryOp, Call, RuleInvocation> data;
};

template <class T>
const T* Expr::as() const {
  return std::get_if<T>(&node_->data);
}

Expr operator+(const Expr& a, const Expr& b);
Expr operator-(const Expr& a, const Expr& b);
Expr operator*(const Expr& a, const Expr& b);
Expr operator/(const Expr& a, const Expr& b);
Expr operator-(const Expr& a);

bool is_intrinsic(std::string_view name);

/// Text form used in dumps and diagnostics; parse_expr reads it back.
std::string to_string(const Expr& e);
Expr parse_expr(std::string_view text);

std::optional<int64_t> as_integer(const Expr& e);

/// Pre-order traversal.
void visit(const Expr& e, const std::function<void(const Expr&)>& fn);

/// Rebuilds the tree top-down. When `fn` returns a replacement the
/// replacement is used as-is and its children are not visited.
Expr rewrite(const Expr& e, const std::function<std::optional<Expr>(const Expr&)>& fn);

/// Names referenced as plain variables (inames, parameters, scalars).
std::set<std::string> free_variables(const Expr& e);
/// Variables in order of first pre-order appearance.
std::vector<std::string> variables_in_order(const Expr& e);
/// Arrays accessed through Subscript nodes.
std::set<std::string> accessed_arrays(const Expr& e);

/// Simultaneous replacement of variables.
Expr substitute(const Expr& e, const std::map<std::string, Expr>& replacements);

/// Normalizes an integer index expression: affine combinations of
/// variables are collected, literal arithmetic is folded.
Expr simplify_index(const Expr& e);

struct SubstitutionRule {
  std::string name;
  std::vector<std::string> params;
  Expr body;

  friend bool operator==(const SubstitutionRule&, const SubstitutionRule&) = default;
};

class RuleRegistry {
 public:
  using Map = std::map<std::string, SubstitutionRule>;

  const SubstitutionRule* find(const std::string& name) const;
  const SubstitutionRule& at(const std::string& name) const;
  bool contains(const std::string& name) const { return rules_.count(name) != 0; }
  void insert(SubstitutionRule rule);
  void erase(const std::string& name) { rules_.erase(name); }
  std::size_t size() const { return rules_.size(); }
  bool empty() const { return rules_.empty(); }

  Map::const_iterator begin() const { return rules_.begin(); }
  Map::const_iterator end() const { return rules_.end(); }

  /// Throws RuleCycle if a rule transitively invokes itself, ArityMismatch
  /// or UnknownRule for bad invocations inside bodies.
  void validate() const;

  friend bool operator==(const RuleRegistry&, const RuleRegistry&) = default;

 private:
  Map rules_;
};

/// A typed scalar value. f32 values always hold a float-representable
/// double; i32 values hold an integer.
struct Value {
  DType dtype = DType::i32;
  double v = 0.0;

  static Value f32(float x) { return {DType::f32, static_cast<double>(x)}; }
  static Value i32(int64_t x) { return {DType::i32, static_cast<double>(x)}; }
  int64_t as_int() const { return static_cast<int64_t>(v); }
  float as_float() const { return static_cast<float>(v); }
};

Value apply_binary(BinaryOpKind op, Value a, Value b);
Value apply_negate(Value a);
Value apply_call(const std::string& function, std::span<const Value> args);

/// Column-major dense array used by simple bindings and test oracles.
struct DenseArray {
  std::vector<int64_t> shape;
  std::vector<double> data;
  DType dtype = DType::f32;

  int64_t offset(std::span<const int64_t> index) const;
};

class Bindings {
 public:
  virtual ~Bindings() = default;
  virtual std::optional<Value> lookup(const std::string& name) const = 0;
  virtual Value load(const std::string& array, std::span<const int64_t> index) const = 0;
};

class MapBindings : public Bindings {
 public:
  std::map<std::string, Value> scalars;
  std::map<std::string, DenseArray> arrays;

  std::optional<Value> lookup(const std::string& name) const override;
  Value load(const std::string& array, std::span<const int64_t> index) const override;
};

/// Evaluates `e`; rule invocations are expanded on the fly.
Value evaluate(const Expr& e, const Bindings& bindings, const RuleRegistry& registry);

/// Expands invocations of the rules in `which` (all rules when nullopt).
Expr expand_rules(const Expr& e, const RuleRegistry& registry,
                  const std::optional<std::set<std::string>>& which = std::nullopt);

/// Rules whose bodies agree after positional parameter renaming (and
/// flattening of add/mul chains) are collapsed onto the shortest name (ties
/// broken lexicographically); bodies and surviving rules are rewritten
/// accordingly.
struct UnifyResult {
  RuleRegistry registry;
  std::vector<Expr> bodies;
  std::map<std::string, std::string> renamed;
};
UnifyResult unify_identical_rules(const RuleRegistry& registry, std::vector<Expr> bodies);

/// Canonical structural key of a rule body (positional parameters).
std::string canonical_rule_key(const SubstitutionRule& rule);

/// Multiplicative factors of a product chain. `a / b` contributes the
/// factors of `a` followed by the reciprocal factor `1 / b`.
std::vector<Expr> product_factors(const Expr& e);
/// Inverse of product_factors: reciprocal factors become divisions.
Expr build_product(const std::vector<Expr>& factors);

struct FactorResult {
  bool factored = false;
  std::vector<Expr> terms;
};
FactorResult collect_common_factors_expr(const std::vector<Expr>& terms, const Expr& candidate);

}  // namespace loopforge
