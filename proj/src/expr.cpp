#include "loopforge/expr.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "loopforge/error.hpp"

namespace loopforge {

std::string_view to_string(DType t) { return t == DType::f32 ? "f32" : "i32"; }

// ---------------------------------------------------------------------------
// construction

Expr::Expr() : node_(std::make_shared<const ExprNode>(ExprNode{Literal{0.0, DType::i32}})) {}

Expr Expr::literal(double value, DType dtype) {
  if (dtype == DType::f32) value = static_cast<double>(static_cast<float>(value));
  return Expr(std::make_shared<const ExprNode>(ExprNode{Literal{value, dtype}}));
}

Expr Expr::var(std::string name) {
  return Expr(std::make_shared<const ExprNode>(ExprNode{Variable{std::move(name)}}));
}

Expr Expr::subscript(std::string array, std::vector<Expr> indices) {
  return Expr(std::make_shared<const ExprNode>(
      ExprNode{Subscript{std::move(array), std::move(indices)}}));
}

Expr Expr::neg(Expr operand) {
  return Expr(std::make_shared<const ExprNode>(ExprNode{Negate{std::move(operand)}}));
}

Expr Expr::binary(BinaryOpKind op, Expr lhs, Expr rhs) {
  return Expr(std::make_shared<const ExprNode>(ExprNode{BinaryOp{op, std::move(lhs), std::move(rhs)}}));
}

Expr Expr::call(std::string function, std::vector<Expr> args) {
  return Expr(std::make_shared<const ExprNode>(ExprNode{Call{std::move(function), std::move(args)}}));
}

Expr Expr::rule(std::string rule, std::vector<Expr> args) {
  return Expr(
      std::make_shared<const ExprNode>(ExprNode{RuleInvocation{std::move(rule), std::move(args)}}));
}

bool operator==(const Expr& a, const Expr& b) {
  if (a.node_ == b.node_) return true;
  const auto& x = a.node_->data;
  const auto& y = b.node_->data;
  if (x.index() != y.index()) return false;
  return std::visit(
      [&](const auto& lhs) -> bool {
        using T = std::decay_t<decltype(lhs)>;
        const T& rhs = std::get<T>(y);
        if constexpr (std::is_same_v<T, Literal>) {
          return lhs.dtype == rhs.dtype && lhs.value == rhs.value;
        } else if constexpr (std::is_same_v<T, Variable>) {
          return lhs.name == rhs.name;
        } else if constexpr (std::is_same_v<T, Subscript>) {
          return lhs.array == rhs.array && lhs.indices == rhs.indices;
        } else if constexpr (std::is_same_v<T, Negate>) {
          return lhs.operand == rhs.operand;
        } else if constexpr (std::is_same_v<T, BinaryOp>) {
          return lhs.op == rhs.op && lhs.lhs == rhs.lhs && lhs.rhs == rhs.rhs;
        } else if constexpr (std::is_same_v<T, Call>) {
          return lhs.function == rhs.function && lhs.args == rhs.args;
        } else {
          return lhs.rule == rhs.rule && lhs.args == rhs.args;
        }
      },
      x);
}

Expr operator+(const Expr& a, const Expr& b) { return Expr::binary(BinaryOpKind::add, a, b); }
Expr operator-(const Expr& a, const Expr& b) { return Expr::binary(BinaryOpKind::sub, a, b); }
Expr operator*(const Expr& a, const Expr& b) { return Expr::binary(BinaryOpKind::mul, a, b); }
Expr operator/(const Expr& a, const Expr& b) { return Expr::binary(BinaryOpKind::div, a, b); }
Expr operator-(const Expr& a) { return Expr::neg(a); }

bool is_intrinsic(std::string_view name) {
  static const std::set<std::string_view> names = {"pow", "exp",   "log", "sqrt", "abs",
                                                   "min", "max",   "fma", "sin",  "cos",
                                                   "mod", "floordiv"};
  return names.count(name) != 0;
}

std::optional<int64_t> as_integer(const Expr& e) {
  if (const auto* lit = e.as<Literal>(); lit && lit->dtype == DType::i32) {
    return static_cast<int64_t>(lit->value);
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// printing

namespace {

int precedence(const Expr& e) {
  if (const auto* b = e.as<BinaryOp>()) {
    switch (b->op) {
      case BinaryOpKind::add:
      case BinaryOpKind::sub: return 1;
      case BinaryOpKind::mul:
      case BinaryOpKind::div: return 2;
      case BinaryOpKind::pow: return 4;
    }
  }
  if (e.as<Negate>()) return 3;
  if (const auto* lit = e.as<Literal>(); lit && lit->value < 0) return 3;
  return 5;
}

std::string format_literal(const Literal& lit) {
  if (lit.dtype == DType::i32) {
    return std::to_string(static_cast<int64_t>(lit.value));
  }
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", lit.value);
  std::string s = buf;
  if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
  return s;
}

std::string_view op_symbol(BinaryOpKind op) {
  switch (op) {
    case BinaryOpKind::add: return " + ";
    case BinaryOpKind::sub: return " - ";
    case BinaryOpKind::mul: return "*";
    case BinaryOpKind::div: return "/";
    case BinaryOpKind::pow: return "**";
  }
  return "?";
}

void print(std::ostream& os, const Expr& e);

void print_list(std::ostream& os, const std::vector<Expr>& items) {
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i) os << ", ";
    print(os, items[i]);
  }
}

void print_wrapped(std::ostream& os, const Expr& e, bool wrap) {
  if (wrap) os << '(';
  print(os, e);
  if (wrap) os << ')';
}

void print(std::ostream& os, const Expr& e) {
  std::visit(
      [&](const auto& n) {
        using T = std::decay_t<decltype(n)>;
        if constexpr (std::is_same_v<T, Literal>) {
          os << format_literal(n);
        } else if constexpr (std::is_same_v<T, Variable>) {
          os << n.name;
        } else if constexpr (std::is_same_v<T, Subscript>) {
          os << n.array << '[';
          print_list(os, n.indices);
          os << ']';
        } else if constexpr (std::is_same_v<T, Negate>) {
          os << '-';
          // a bare literal after '-' would read back as a negative literal
          print_wrapped(os, n.operand, precedence(n.operand) < 3 || n.operand.template as<Literal>());
        } else if constexpr (std::is_same_v<T, BinaryOp>) {
          const int p = precedence(e);
          if (n.op == BinaryOpKind::pow) {
            print_wrapped(os, n.lhs, precedence(n.lhs) <= p);
            os << op_symbol(n.op);
            print_wrapped(os, n.rhs, precedence(n.rhs) < 3);
          } else {
            print_wrapped(os, n.lhs, precedence(n.lhs) < p);
            os << op_symbol(n.op);
            print_wrapped(os, n.rhs, precedence(n.rhs) <= p);
          }
        } else if constexpr (std::is_same_v<T, Call>) {
          os << n.function << '(';
          print_list(os, n.args);
          os << ')';
        } else {
          os << n.rule << '(';
          print_list(os, n.args);
          os << ')';
        }
      },
      e.node().data);
}

}  // namespace

std::string to_string(const Expr& e) {
  std::ostringstream os;
  print(os, e);
  return os.str();
}

// ---------------------------------------------------------------------------
// parsing

namespace {

class ExprParser {
 public:
  explicit ExprParser(std::string_view text) : text_(text) {}

  Expr parse_all() {
    Expr e = parse_sum();
    skip_ws();
    if (pos_ != text_.size()) error("unexpected trailing input");
    return e;
  }

 private:
  [[noreturn]] void error(const std::string& what) const {
    fail(ErrorCode::SyntaxError,
         what + " at column " + std::to_string(pos_ + 1) + " in '" + std::string(text_) + "'");
  }

  void skip_ws() {
    while (pos_ < text_.size() && std::isspace(static_cast<unsigned char>(text_[pos_]))) ++pos_;
  }

  bool peek(std::string_view s) {
    skip_ws();
    return text_.substr(pos_, s.size()) == s;
  }

  bool accept(std::string_view s) {
    if (!peek(s)) return false;
    pos_ += s.size();
    return true;
  }

  void expect(std::string_view s) {
    if (!accept(s)) error("expected '" + std::string(s) + "'");
  }

  Expr parse_sum() {
    Expr lhs = parse_product();
    for (;;) {
      if (accept("+")) {
        lhs = lhs + parse_product();
      } else if (peek("-")) {
        ++pos_;
        lhs = lhs - parse_product();
      } else {
        return lhs;
      }
    }
  }

  Expr parse_product() {
    Expr lhs = parse_unary();
    for (;;) {
      if (peek("**")) return lhs;
      if (accept("*")) {
        lhs = lhs * parse_unary();
      } else if (accept("/")) {
        lhs = lhs / parse_unary();
      } else {
        return lhs;
      }
    }
  }

  bool number_follows() {
    skip_ws();
    return pos_ < text_.size() &&
           (std::isdigit(static_cast<unsigned char>(text_[pos_])) || text_[pos_] == '.');
  }

  Expr parse_unary() {
    if (accept("-")) {
      if (number_follows()) {
        const std::size_t save = pos_;
        Expr lit = parse_number(true);
        if (!peek("**")) return lit;
        pos_ = save;
      }
      return Expr::neg(parse_unary());
    }
    return parse_power();
  }

  Expr parse_power() {
    Expr base = parse_atom();
    if (accept("**")) return Expr::binary(BinaryOpKind::pow, base, parse_unary());
    return base;
  }

  Expr parse_number(bool negative) {
    skip_ws();
    const std::size_t start = pos_;
    bool is_float = false;
    while (pos_ < text_.size()) {
      const char c = text_[pos_];
      if (std::isdigit(static_cast<unsigned char>(c))) {
        ++pos_;
      } else if (c == '.') {
        is_float = true;
        ++pos_;
      } else if ((c == 'e' || c == 'E') && pos_ + 1 < text_.size()) {
        is_float = true;
        ++pos_;
        if (text_[pos_] == '+' || text_[pos_] == '-') ++pos_;
      } else {
        break;
      }
    }
    const std::string tok(text_.substr(start, pos_ - start));
    if (tok.empty()) error("expected number");
    double v = std::stod(tok);
    if (negative) v = -v;
    return is_float ? Expr::f32(v) : Expr::i32(static_cast<int64_t>(v));
  }

  std::string parse_identifier() {
    skip_ws();
    const std::size_t start = pos_;
    while (pos_ < text_.size() &&
           (std::isalnum(static_cast<unsigned char>(text_[pos_])) || text_[pos_] == '_')) {
      ++pos_;
    }
    if (start == pos_) error("expected identifier");
    return std::string(text_.substr(start, pos_ - start));
  }

  std::vector<Expr> parse_args(std::string_view close) {
    std::vector<Expr> args;
    if (accept(close)) return args;
    for (;;) {
      args.push_back(parse_sum());
      if (accept(close)) return args;
      expect(",");
    }
  }

  Expr parse_atom() {
    skip_ws();
    if (pos_ >= text_.size()) error("unexpected end of expression");
    if (accept("(")) {
      Expr inner = parse_sum();
      expect(")");
      return inner;
    }
    if (number_follows()) return parse_number(false);
    std::string name = parse_identifier();
    if (accept("[")) return Expr::subscript(name, parse_args("]"));
    if (accept("(")) {
      auto args = parse_args(")");
      if (is_intrinsic(name)) return Expr::call(name, std::move(args));
      return Expr::rule(name, std::move(args));
    }
    return Expr::var(name);
  }

  std::string_view text_;
  std::size_t pos_ = 0;
};

}  // namespace

Expr parse_expr(std::string_view text) { return ExprParser(text).parse_all(); }

// ---------------------------------------------------------------------------
// traversal

void visit(const Expr& e, const std::function<void(const Expr&)>& fn) {
  fn(e);
  std::visit(
      [&](const auto& n) {
        using T = std::decay_t<decltype(n)>;
        if constexpr (std::is_same_v<T, Subscript>) {
          for (const auto& i : n.indices) visit(i, fn);
        } else if constexpr (std::is_same_v<T, Negate>) {
          visit(n.operand, fn);
        } else if constexpr (std::is_same_v<T, BinaryOp>) {
          visit(n.lhs, fn);
          visit(n.rhs, fn);
        } else if constexpr (std::is_same_v<T, Call> || std::is_same_v<T, RuleInvocation>) {
          for (const auto& a : n.args) visit(a, fn);
        }
      },
      e.node().data);
}

Expr rewrite(const Expr& e, const std::function<std::optional<Expr>(const Expr&)>& fn) {
  if (auto replaced = fn(e)) return *replaced;
  auto map_all = [&](const std::vector<Expr>& items) {
    std::vector<Expr> out;
    out.reserve(items.size());
    for (const auto& item : items) out.push_back(rewrite(item, fn));
    return out;
  };
  return std::visit(
      [&](const auto& n) -> Expr {
        using T = std::decay_t<decltype(n)>;
        if constexpr (std::is_same_v<T, Subscript>) {
          return Expr::subscript(n.array, map_all(n.indices));
        } else if constexpr (std::is_same_v<T, Negate>) {
          return Expr::neg(rewrite(n.operand, fn));
        } else if constexpr (std::is_same_v<T, BinaryOp>) {
          return Expr::binary(n.op, rewrite(n.lhs, fn), rewrite(n.rhs, fn));
        } else if constexpr (std::is_same_v<T, Call>) {
          return Expr::call(n.function, map_all(n.args));
        } else if constexpr (std::is_same_v<T, RuleInvocation>) {
          return Expr::rule(n.rule, map_all(n.args));
        } else {
          return e;
        }
      },
      e.node().data);
}

std::set<std::string> free_variables(const Expr& e) {
  std::set<std::string> out;
  visit(e, [&](const Expr& x) {
    if (const auto* v = x.as<Variable>()) out.insert(v->name);
  });
  return out;
}

std::vector<std::string> variables_in_order(const Expr& e) {
  std::vector<std::string> out;
  visit(e, [&](const Expr& x) {
    if (const auto* v = x.as<Variable>()) {
      if (std::find(out.begin(), out.end(), v->name) == out.end()) out.push_back(v->name);
    }
  });
  return out;
}

std::set<std::string> accessed_arrays(const Expr& e) {
  std::set<std::string> out;
  visit(e, [&](const Expr& x) {
    if (const auto* s = x.as<Subscript>()) out.insert(s->array);
  });
  return out;
}

Expr substitute(const Expr& e, const std::map<std::string, Expr>& replacements) {
  if (replacements.empty()) return e;
  return rewrite(e, [&](const Expr& x) -> std::optional<Expr> {
    if (const auto* v = x.as<Variable>()) {
      if (auto it = replacements.find(v->name); it != replacements.end()) return it->second;
    }
    return std::nullopt;
  });
}

// ---------------------------------------------------------------------------
// index simplification

namespace {

struct Affine {
  std::vector<std::pair<std::string, int64_t>> terms;  // first-appearance order
  int64_t constant = 0;

  void add(const std::string& name, int64_t coeff) {
    for (auto& [n, c] : terms) {
      if (n == name) {
        c += coeff;
        return;
      }
    }
    terms.emplace_back(name, coeff);
  }
  void add(const Affine& other, int64_t scale) {
    for (const auto& [n, c] : other.terms) add(n, c * scale);
    constant += other.constant * scale;
  }
  bool is_constant() const {
    return std::all_of(terms.begin(), terms.end(), [](const auto& t) { return t.second == 0; });
  }
};

std::optional<Affine> to_affine(const Expr& e) {
  if (const auto* lit = e.as<Literal>()) {
    if (lit->dtype != DType::i32) return std::nullopt;
    Affine a;
    a.constant = static_cast<int64_t>(lit->value);
    return a;
  }
  if (const auto* v = e.as<Variable>()) {
    Affine a;
    a.add(v->name, 1);
    return a;
  }
  if (const auto* n = e.as<Negate>()) {
    auto inner = to_affine(n->operand);
    if (!inner) return std::nullopt;
    Affine a;
    a.add(*inner, -1);
    return a;
  }
  if (const auto* b = e.as<BinaryOp>()) {
    auto l = to_affine(b->lhs);
    auto r = to_affine(b->rhs);
    if (!l || !r) return std::nullopt;
    Affine a;
    switch (b->op) {
      case BinaryOpKind::add:
        a.add(*l, 1);
        a.add(*r, 1);
        return a;
      case BinaryOpKind::sub:
        a.add(*l, 1);
        a.add(*r, -1);
        return a;
      case BinaryOpKind::mul:
        if (l->is_constant()) {
          a.add(*r, l->constant);
          return a;
        }
        if (r->is_constant()) {
          a.add(*l, r->constant);
          return a;
        }
        return std::nullopt;
      default:
        return std::nullopt;
    }
  }
  return std::nullopt;
}

Expr from_affine(const Affine& a) {
  std::optional<Expr> out;
  for (const auto& [name, coeff] : a.terms) {
    if (coeff == 0) continue;
    const int64_t mag = coeff < 0 ? -coeff : coeff;
    Expr term = mag == 1 ? Expr::var(name) : Expr::i32(mag) * Expr::var(name);
    if (!out) {
      out = coeff < 0 ? Expr::neg(term) : term;
    } else {
      out = coeff < 0 ? *out - term : *out + term;
    }
  }
  if (!out) return Expr::i32(a.constant);
  if (a.constant > 0) return *out + Expr::i32(a.constant);
  if (a.constant < 0) return *out - Expr::i32(-a.constant);
  return *out;
}

}  // namespace

Expr simplify_index(const Expr& e) {
  if (auto a = to_affine(e)) return from_affine(*a);
  return rewrite(e, [](const Expr& x) -> std::optional<Expr> {
    if (x.as<Literal>() || x.as<Variable>()) return x;
    if (const auto* s = x.as<Subscript>()) {
      std::vector<Expr> idx;
      for (const auto& i : s->indices) idx.push_back(simplify_index(i));
      return Expr::subscript(s->array, std::move(idx));
    }
    if (const auto* b = x.as<BinaryOp>()) {
      Expr l = simplify_index(b->lhs);
      Expr r = simplify_index(b->rhs);
      auto li = as_integer(l);
      auto ri = as_integer(r);
      if (li && ri && b->op != BinaryOpKind::pow) {
        return Expr::literal(apply_binary(b->op, Value::i32(*li), Value::i32(*ri)).v, DType::i32);
      }
      return Expr::binary(b->op, l, r);
    }
    if (const auto* c = x.as<Call>()) {
      std::vector<Expr> args;
      for (const auto& a : c->args) args.push_back(simplify_index(a));
      if (args.size() == 2) {
        auto li = as_integer(args[0]);
        auto ri = as_integer(args[1]);
        if (li && ri && (c->function == "mod" || c->function == "floordiv")) {
          std::vector<Value> vals = {Value::i32(*li), Value::i32(*ri)};
          return Expr::literal(apply_call(c->function, vals).v, DType::i32);
        }
      }
      return Expr::call(c->function, std::move(args));
    }
    return std::nullopt;
  });
}

// ---------------------------------------------------------------------------
// registry

const SubstitutionRule* RuleRegistry::find(const std::string& name) const {
  auto it = rules_.find(name);
  return it == rules_.end() ? nullptr : &it->second;
}

const SubstitutionRule& RuleRegistry::at(const std::string& name) const {
  if (const auto* r = find(name)) return *r;
  fail(ErrorCode::UnknownRule, "no substitution rule named '" + name + "'");
}

void RuleRegistry::insert(SubstitutionRule rule) {
  std::string name = rule.name;
  rules_.insert_or_assign(std::move(name), std::move(rule));
}

void RuleRegistry::validate() const {
  std::map<std::string, int> state;  // 1 = on stack, 2 = done
  std::function<void(const std::string&)> dfs = [&](const std::string& name) {
    state[name] = 1;
    visit(at(name).body, [&](const Expr& x) {
      const auto* inv = x.as<RuleInvocation>();
      if (!inv) return;
      const auto& callee = at(inv->rule);
      if (callee.params.size() != inv->args.size()) {
        fail(ErrorCode::ArityMismatch, "rule '" + inv->rule + "' invoked with " +
                                           std::to_string(inv->args.size()) + " arguments");
      }
      const int s = state[inv->rule];
      if (s == 1) fail(ErrorCode::RuleCycle, "rule '" + inv->rule + "' is recursive");
      if (s == 0) dfs(inv->rule);
    });
    state[name] = 2;
  };
  for (const auto& [name, rule] : rules_) {
    if (state[name] == 0) dfs(name);
  }
}

// ---------------------------------------------------------------------------
// arithmetic

Value apply_binary(BinaryOpKind op, Value a, Value b) {
  if (a.dtype == DType::i32 && b.dtype == DType::i32 && op != BinaryOpKind::pow) {
    const int64_t x = a.as_int();
    const int64_t y = b.as_int();
    switch (op) {
      case BinaryOpKind::add: return Value::i32(x + y);
      case BinaryOpKind::sub: return Value::i32(x - y);
      case BinaryOpKind::mul: return Value::i32(x * y);
      case BinaryOpKind::div:
        if (y == 0) fail(ErrorCode::DivisionByZero, "integer division by zero");
        return Value::i32(x / y);
      default: break;
    }
  }
  const float x = a.as_float();
  const float y = b.as_float();
  switch (op) {
    case BinaryOpKind::add: return Value::f32(x + y);
    case BinaryOpKind::sub: return Value::f32(x - y);
    case BinaryOpKind::mul: return Value::f32(x * y);
    case BinaryOpKind::div:
      if (y == 0.0f) fail(ErrorCode::DivisionByZero, "division by zero");
      return Value::f32(x / y);
    case BinaryOpKind::pow:
      if (a.dtype == DType::i32 && b.dtype == DType::i32 && b.as_int() >= 0) {
        int64_t r = 1;
        for (int64_t k = 0; k < b.as_int(); ++k) r *= a.as_int();
        return Value::i32(r);
      }
      return Value::f32(std::pow(x, y));
  }
  return {};
}

Value apply_negate(Value a) {
  if (a.dtype == DType::i32) return Value::i32(-a.as_int());
  return Value::f32(-a.as_float());
}

Value apply_call(const std::string& function, std::span<const Value> args) {
  auto need = [&](std::size_t n) {
    if (args.size() != n) {
      fail(ErrorCode::ArityMismatch, function + " expects " + std::to_string(n) + " arguments");
    }
  };
  auto all_int = [&] {
    return std::all_of(args.begin(), args.end(), [](const Value& v) { return v.dtype == DType::i32; });
  };
  if (function == "mod" || function == "floordiv") {
    need(2);
    const int64_t x = args[0].as_int();
    const int64_t y = args[1].as_int();
    if (y == 0) fail(ErrorCode::DivisionByZero, function + " by zero");
    int64_t q = x / y;
    if ((x % y != 0) && ((x < 0) != (y < 0))) --q;
    return Value::i32(function == "floordiv" ? q : x - q * y);
  }
  if (function == "min" || function == "max") {
    need(2);
    if (all_int()) {
      return Value::i32(function == "min" ? std::min(args[0].as_int(), args[1].as_int())
                                          : std::max(args[0].as_int(), args[1].as_int()));
    }
    return Value::f32(function == "min" ? std::min(args[0].as_float(), args[1].as_float())
                                        : std::max(args[0].as_float(), args[1].as_float()));
  }
  if (function == "abs") {
    need(1);
    if (all_int()) return Value::i32(std::llabs(args[0].as_int()));
    return Value::f32(std::fabs(args[0].as_float()));
  }
  if (function == "pow") {
    need(2);
    return Value::f32(std::pow(args[0].as_float(), args[1].as_float()));
  }
  if (function == "fma") {
    need(3);
    return Value::f32(std::fma(args[0].as_float(), args[1].as_float(), args[2].as_float()));
  }
  need(1);
  const float x = args[0].as_float();
  if (function == "exp") return Value::f32(std::exp(x));
  if (function == "log") return Value::f32(std::log(x));
  if (function == "sqrt") return Value::f32(std::sqrt(x));
  if (function == "sin") return Value::f32(std::sin(x));
  if (function == "cos") return Value::f32(std::cos(x));
  fail(ErrorCode::UnknownRule, "unknown function '" + function + "'");
}

// ---------------------------------------------------------------------------
// evaluation

int64_t DenseArray::offset(std::span<const int64_t> index) const {
  if (index.size() != shape.size()) {
    fail(ErrorCode::IndexOutOfBounds, "rank mismatch in array access");
  }
  int64_t off = 0;
  int64_t stride = 1;
  for (std::size_t a = 0; a < shape.size(); ++a) {
    if (index[a] < 0 || index[a] >= shape[a]) {
      fail(ErrorCode::IndexOutOfBounds,
           "index " + std::to_string(index[a]) + " outside [0, " + std::to_string(shape[a]) + ")");
    }
    off += index[a] * stride;
    stride *= shape[a];
  }
  return off;
}

std::optional<Value> MapBindings::lookup(const std::string& name) const {
  if (auto it = scalars.find(name); it != scalars.end()) return it->second;
  return std::nullopt;
}

Value MapBindings::load(const std::string& array, std::span<const int64_t> index) const {
  auto it = arrays.find(array);
  if (it == arrays.end()) fail(ErrorCode::UnboundVariable, "array '" + array + "' is not bound");
  const double v = it->second.data[static_cast<std::size_t>(it->second.offset(index))];
  return it->second.dtype == DType::f32 ? Value::f32(static_cast<float>(v))
                                        : Value::i32(static_cast<int64_t>(v));
}

namespace {

class ScopedBindings : public Bindings {
 public:
  ScopedBindings(const Bindings& parent, std::map<std::string, Value> locals)
      : parent_(parent), locals_(std::move(locals)) {}

  std::optional<Value> lookup(const std::string& name) const override {
    if (auto it = locals_.find(name); it != locals_.end()) return it->second;
    return parent_.lookup(name);
  }
  Value load(const std::string& array, std::span<const int64_t> index) const override {
    return parent_.load(array, index);
  }

 private:
  const Bindings& parent_;
  std::map<std::string, Value> locals_;
};

}  // namespace

Value evaluate(const Expr& e, const Bindings& bindings, const RuleRegistry& registry) {
  return std::visit(
      [&](const auto& n) -> Value {
        using T = std::decay_t<decltype(n)>;
        if constexpr (std::is_same_v<T, Literal>) {
          return n.dtype == DType::f32 ? Value::f32(static_cast<float>(n.value))
                                       : Value::i32(static_cast<int64_t>(n.value));
        } else if constexpr (std::is_same_v<T, Variable>) {
          if (auto v = bindings.lookup(n.name)) return *v;
          fail(ErrorCode::UnboundVariable, "variable '" + n.name + "' is not bound");
        } else if constexpr (std::is_same_v<T, Subscript>) {
          std::vector<int64_t> idx;
          idx.reserve(n.indices.size());
          for (const auto& i : n.indices) {
            const Value v = evaluate(i, bindings, registry);
            if (v.dtype != DType::i32) {
              fail(ErrorCode::IndexOutOfBounds, "non-integer index into '" + n.array + "'");
            }
            idx.push_back(v.as_int());
          }
          return bindings.load(n.array, idx);
        } else if constexpr (std::is_same_v<T, Negate>) {
          return apply_negate(evaluate(n.operand, bindings, registry));
        } else if constexpr (std::is_same_v<T, BinaryOp>) {
          return apply_binary(n.op, evaluate(n.lhs, bindings, registry),
                              evaluate(n.rhs, bindings, registry));
        } else if constexpr (std::is_same_v<T, Call>) {
          std::vector<Value> args;
          for (const auto& a : n.args) args.push_back(evaluate(a, bindings, registry));
          return apply_call(n.function, args);
        } else {
          const auto& rule = registry.at(n.rule);
          if (rule.params.size() != n.args.size()) {
            fail(ErrorCode::ArityMismatch, "rule '" + n.rule + "' expects " +
                                               std::to_string(rule.params.size()) + " arguments");
          }
          std::map<std::string, Value> locals;
          for (std::size_t i = 0; i < n.args.size(); ++i) {
            locals[rule.params[i]] = evaluate(n.args[i], bindings, registry);
          }
          return evaluate(rule.body, ScopedBindings(bindings, std::move(locals)), registry);
        }
      },
      e.node().data);
}

// ---------------------------------------------------------------------------
// rule expansion

namespace {

Expr expand_impl(const Expr& e, const RuleRegistry& registry,
                 const std::optional<std::set<std::string>>& which, int depth) {
  if (depth > 256) fail(ErrorCode::RuleCycle, "rule expansion does not terminate");
  return rewrite(e, [&](const Expr& x) -> std::optional<Expr> {
    const auto* inv = x.as<RuleInvocation>();
    if (!inv) return std::nullopt;
    std::vector<Expr> args;
    for (const auto& a : inv->args) args.push_back(expand_impl(a, registry, which, depth));
    if (which && !which->count(inv->rule)) return Expr::rule(inv->rule, std::move(args));
    const auto& rule = registry.at(inv->rule);
    if (rule.params.size() != args.size()) {
      fail(ErrorCode::ArityMismatch, "rule '" + inv->rule + "' expects " +
                                         std::to_string(rule.params.size()) + " arguments, got " +
                                         std::to_string(args.size()));
    }
    std::map<std::string, Expr> binding;
    for (std::size_t i = 0; i < args.size(); ++i) binding[rule.params[i]] = args[i];
    return expand_impl(substitute(rule.body, binding), registry, which, depth + 1);
  });
}

}  // namespace

Expr expand_rules(const Expr& e, const RuleRegistry& registry,
                  const std::optional<std::set<std::string>>& which) {
  if (which) {
    for (const auto& name : *which) registry.at(name);
    if (which->empty()) return e;
  }
  return expand_impl(e, registry, which, 0);
}

// ---------------------------------------------------------------------------
// rule unification

namespace {

void flatten_chain(const Expr& e, BinaryOpKind op, std::vector<Expr>& out) {
  if (const auto* b = e.as<BinaryOp>(); b && b->op == op) {
    flatten_chain(b->lhs, op, out);
    flatten_chain(b->rhs, op, out);
  } else {
    out.push_back(e);
  }
}

void canonical_text(std::ostream& os, const Expr& e) {
  if (const auto* b = e.as<BinaryOp>();
      b && (b->op == BinaryOpKind::add || b->op == BinaryOpKind::mul)) {
    std::vector<Expr> items;
    flatten_chain(e, b->op, items);
    os << (b->op == BinaryOpKind::add ? "(+" : "(*");
    for (const auto& item : items) {
      os << ' ';
      canonical_text(os, item);
    }
    os << ')';
    return;
  }
  std::visit(
      [&](const auto& n) {
        using T = std::decay_t<decltype(n)>;
        if constexpr (std::is_same_v<T, Literal>) {
          os << to_string(n.dtype) << ':' << format_literal(n);
        } else if constexpr (std::is_same_v<T, Variable>) {
          os << n.name;
        } else if constexpr (std::is_same_v<T, Subscript>) {
          os << "([] " << n.array;
          for (const auto& i : n.indices) {
            os << ' ';
            canonical_text(os, i);
          }
          os << ')';
        } else if constexpr (std::is_same_v<T, Negate>) {
          os << "(neg ";
          canonical_text(os, n.operand);
          os << ')';
        } else if constexpr (std::is_same_v<T, BinaryOp>) {
          os << '(' << op_symbol(n.op) << ' ';
          canonical_text(os, n.lhs);
          os << ' ';
          canonical_text(os, n.rhs);
          os << ')';
        } else {
          if constexpr (std::is_same_v<T, Call>) {
            os << "(call " << n.function;
          } else {
            os << "(rule " << n.rule;
          }
          for (const auto& a : n.args) {
            os << ' ';
            canonical_text(os, a);
          }
          os << ')';
        }
      },
      e.node().data);
}

Expr rename_rule_calls(const Expr& e, const std::map<std::string, std::string>& renamed) {
  if (renamed.empty()) return e;
  return rewrite(e, [&](const Expr& x) -> std::optional<Expr> {
    const auto* inv = x.as<RuleInvocation>();
    if (!inv) return std::nullopt;
    std::vector<Expr> args;
    for (const auto& a : inv->args) args.push_back(rename_rule_calls(a, renamed));
    auto it = renamed.find(inv->rule);
    return Expr::rule(it == renamed.end() ? inv->rule : it->second, std::move(args));
  });
}

}  // namespace

std::string canonical_rule_key(const SubstitutionRule& rule) {
  std::map<std::string, Expr> positional;
  for (std::size_t i = 0; i < rule.params.size(); ++i) {
    positional[rule.params[i]] = Expr::var("#" + std::to_string(i));
  }
  std::ostringstream os;
  os << rule.params.size() << '|';
  canonical_text(os, substitute(rule.body, positional));
  return os.str();
}

UnifyResult unify_identical_rules(const RuleRegistry& registry, std::vector<Expr> bodies) {
  UnifyResult result{registry, std::move(bodies), {}};
  for (;;) {
    std::map<std::string, std::vector<std::string>> by_key;
    for (const auto& [name, rule] : result.registry) by_key[canonical_rule_key(rule)].push_back(name);
    std::map<std::string, std::string> renamed;
    for (auto& [key, names] : by_key) {
      const auto survivor = *std::min_element(
          names.begin(), names.end(), [](const std::string& a, const std::string& b) {
            return a.size() != b.size() ? a.size() < b.size() : a < b;
          });
      for (const auto& n : names) {
        if (n != survivor) renamed[n] = survivor;
      }
    }
    if (renamed.empty()) break;
    RuleRegistry next;
    for (const auto& [name, rule] : result.registry) {
      if (renamed.count(name)) continue;
      next.insert({rule.name, rule.params, rename_rule_calls(rule.body, renamed)});
    }
    for (auto& body : result.bodies) body = rename_rule_calls(body, renamed);
    for (auto& [from, to] : result.renamed) {
      if (auto it = renamed.find(to); it != renamed.end()) to = it->second;
    }
    for (const auto& [from, to] : renamed) result.renamed[from] = to;
    result.registry = std::move(next);
  }
  return result;
}

// ---------------------------------------------------------------------------
// common factors

std::vector<Expr> product_factors(const Expr& e) {
  std::vector<Expr> out;
  if (const auto* b = e.as<BinaryOp>()) {
    if (b->op == BinaryOpKind::mul) {
      auto l = product_factors(b->lhs);
      auto r = product_factors(b->rhs);
      out.insert(out.end(), l.begin(), l.end());
      out.insert(out.end(), r.begin(), r.end());
      return out;
    }
    if (b->op == BinaryOpKind::div) {
      const auto* one = b->lhs.as<Literal>();
      if (one && one->value == 1.0) {
        out.push_back(e);
        return out;
      }
      out = product_factors(b->lhs);
      out.push_back(Expr::f32(1.0) / b->rhs);
      return out;
    }
  }
  out.push_back(e);
  return out;
}

namespace {

const Expr* reciprocal_denominator(const Expr& e) {
  const auto* b = e.as<BinaryOp>();
  if (!b || b->op != BinaryOpKind::div) return nullptr;
  const auto* one = b->lhs.as<Literal>();
  return one && one->value == 1.0 ? &b->rhs : nullptr;
}

}  // namespace

Expr build_product(const std::vector<Expr>& factors) {
  std::optional<Expr> numerator;
  std::vector<Expr> denominators;
  for (const auto& f : factors) {
    if (const Expr* d = reciprocal_denominator(f)) {
      denominators.push_back(*d);
    } else {
      numerator = numerator ? *numerator * f : f;
    }
  }
  if (!numerator) {
    if (denominators.empty()) return Expr::f32(1.0);
    numerator = Expr::f32(1.0);
  }
  Expr out = *numerator;
  for (const auto& d : denominators) out = out / d;
  return out;
}

FactorResult collect_common_factors_expr(const std::vector<Expr>& terms, const Expr& candidate) {
  FactorResult unchanged{false, terms};
  if (terms.empty()) return unchanged;
  std::vector<Expr> residual;
  residual.reserve(terms.size());
  for (const auto& term : terms) {
    auto factors = product_factors(term);
    auto it = std::find(factors.begin(), factors.end(), candidate);
    if (it == factors.end()) return unchanged;
    factors.erase(it);
    residual.push_back(build_product(factors));
  }
  return {true, std::move(residual)};
}

}  // namespace loopforge
