#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "loopforge/expr.hpp"
#include "test_util.hpp"

using namespace loopforge;
using loopforge::test::error_of;

namespace {

MapBindings scalars(std::map<std::string, double> values) {
  MapBindings b;
  for (auto& [name, v] : values) b.scalars[name] = Value::f32(static_cast<float>(v));
  return b;
}

float eval_f(const Expr& e, const Bindings& b, const RuleRegistry& rules = {}) {
  return evaluate(e, b, rules).as_float();
}

RuleRegistry make_rules(std::initializer_list<std::pair<std::string, std::string>> defs) {
  RuleRegistry r;
  for (auto& [head, body] : defs) {
    const Expr h = parse_expr(head);
    const auto* inv = h.as<RuleInvocation>();
    SubstitutionRule rule{inv->rule, {}, parse_expr(body)};
    for (const auto& a : inv->args) rule.params.push_back(a.as<Variable>()->name);
    r.insert(rule);
  }
  return r;
}

// Random f32 trees over the given variables, optionally invoking rules.
class TreeGen {
 public:
  TreeGen(uint64_t seed, std::vector<std::string> vars) : rng_(seed), vars_(std::move(vars)) {}

  std::vector<std::pair<std::string, std::size_t>> rules;

  Expr make(int depth) {
    std::uniform_int_distribution<int> pick(0, depth > 0 ? 7 : 1);
    switch (pick(rng_)) {
      case 0: return Expr::f32(std::uniform_int_distribution<int>(1, 9)(rng_) * 0.5);
      case 1: return Expr::var(vars_[std::uniform_int_distribution<std::size_t>(0, vars_.size() - 1)(rng_)]);
      case 2: return make(depth - 1) + make(depth - 1);
      case 3: return make(depth - 1) - make(depth - 1);
      case 4: return make(depth - 1) * make(depth - 1);
      case 5: return -make(depth - 1);
      case 6: return Expr::call("sqrt", {Expr::call("abs", {make(depth - 1)})});
      default: {
        if (rules.empty()) return make(depth - 1) * Expr::f32(0.25);
        const auto& [name, arity] =
            rules[std::uniform_int_distribution<std::size_t>(0, rules.size() - 1)(rng_)];
        std::vector<Expr> args;
        for (std::size_t i = 0; i < arity; ++i) args.push_back(make(depth - 1));
        return Expr::rule(name, args);
      }
    }
  }

 private:
  std::mt19937_64 rng_;
  std::vector<std::string> vars_;
};

}  // namespace

TEST(expr, evaluate_pressure_with_unit_base) {
  const Expr p = parse_expr("p0*(R*th/p0)**gamma");
  const float got = eval_f(p, scalars({{"p0", 1e5}, {"R", 287.0}, {"th", 1e5 / 287.0}, {"gamma", 1.4}}));
  EXPECT_NEAR(got, 1e5f, 1e5f * 1e-6f);
}

TEST(expr, evaluate_subscript_plus_literal) {
  MapBindings b;
  b.arrays["a"] = DenseArray{{2}, {5.0, 7.0}, DType::f32};
  b.scalars["i"] = Value::i32(1);
  EXPECT_EQ(eval_f(parse_expr("a[i] + 2.0"), b), 9.0f);
}

TEST(expr, flux_column_at_rest_is_pressure_only) {
  // First-direction flux with metric (1, 0, 0): only the momentum row
  // along that direction carries the pressure.
  const RuleRegistry rules = make_rules({
      {"p(th)", "p0*(R*th/p0)**gamma"},
      {"uc(u1, u2, u3)", "g1*u1 + g2*u2 + g3*u3"},
  });
  const std::vector<Expr> flux = {
      parse_expr("uc(u1, u2, u3)"),
      parse_expr("uc(u1, u2, u3)*u1/rho + g1*p(th)"),
      parse_expr("uc(u1, u2, u3)*u2/rho + g2*p(th)"),
      parse_expr("uc(u1, u2, u3)*u3/rho + g3*p(th)"),
      parse_expr("uc(u1, u2, u3)*th/rho"),
      parse_expr("uc(u1, u2, u3)*c1/rho"),
      parse_expr("uc(u1, u2, u3)*c2/rho"),
      parse_expr("uc(u1, u2, u3)*c3/rho"),
  };
  // R*th = p0 makes the base 1, so p = p0 = 3.
  const MapBindings b = scalars({{"rho", 1}, {"u1", 0}, {"u2", 0}, {"u3", 0}, {"th", 3},
                                 {"c1", 0.3}, {"c2", 0.6}, {"c3", 0.9}, {"p0", 3}, {"R", 1},
                                 {"gamma", 1.4}, {"g1", 1}, {"g2", 0}, {"g3", 0}});
  const std::vector<float> want = {0, 3, 0, 0, 0, 0, 0, 0};
  for (std::size_t r = 0; r < flux.size(); ++r) {
    EXPECT_FLOAT_EQ(eval_f(flux[r], b, rules), want[r]) << "row " << r;
  }
}

TEST(expr, evaluate_errors) {
  MapBindings b;
  b.arrays["a"] = DenseArray{{2}, {5.0, 7.0}, DType::f32};
  b.scalars["i"] = Value::i32(2);
  b.scalars["z"] = Value::f32(0.0f);
  b.scalars["x"] = Value::f32(1.0f);
  EXPECT_EQ(error_of([&] { evaluate(parse_expr("y + 1.0"), b, {}); }), ErrorCode::UnboundVariable);
  EXPECT_EQ(error_of([&] { evaluate(parse_expr("a[i]"), b, {}); }), ErrorCode::IndexOutOfBounds);
  EXPECT_EQ(error_of([&] { evaluate(parse_expr("x/z"), b, {}); }), ErrorCode::DivisionByZero);
  EXPECT_EQ(error_of([&] { evaluate(parse_expr("i/0"), b, {}); }), ErrorCode::DivisionByZero);
}

TEST(expr, parse_print_examples) {
  EXPECT_EQ(to_string(parse_expr("a[i, j]*(b + c)")), "a[i, j]*(b + c)");
  EXPECT_EQ(to_string(parse_expr("a - (b - c)")), "a - (b - c)");
  EXPECT_EQ(to_string(parse_expr("x**2.5")), "x**2.5");
  EXPECT_EQ(to_string(parse_expr("-(2.0)")), "-(2.0)");
  EXPECT_EQ(to_string(parse_expr("f(x, 1)")), "f(x, 1)");
  EXPECT_TRUE(parse_expr("sqrt(x)").as<Call>());
  EXPECT_TRUE(parse_expr("f(x)").as<RuleInvocation>());
}

TEST(expr, expand_square_rule) {
  const RuleRegistry rules = make_rules({{"f(x)", "x*x"}});
  EXPECT_EQ(expand_rules(parse_expr("f(a[i])"), rules), parse_expr("a[i]*a[i]"));
}

TEST(expr, expand_with_empty_selection_is_identity) {
  const RuleRegistry rules = make_rules({{"f(x)", "x*x"}});
  const Expr e = parse_expr("f(a[i]) + 1.0");
  EXPECT_EQ(expand_rules(e, rules, std::set<std::string>{}), e);
}

TEST(expr, expand_nested_rules_matches_evaluation) {
  const RuleRegistry rules = make_rules({{"g(x)", "f(x) + 1.0"}, {"f(x)", "x*x"}});
  const Expr e = parse_expr("g(y)");
  const Expr expanded = expand_rules(e, rules);
  EXPECT_EQ(expanded, parse_expr("y*y + 1.0"));
  for (double y : {0.0, 1.0, 2.0}) {
    const MapBindings b = scalars({{"y", y}});
    const float oracle = static_cast<float>(y * y + 1.0);
    EXPECT_EQ(eval_f(expanded, b), oracle);
    EXPECT_EQ(eval_f(e, b, rules), oracle);
  }
}

TEST(expr, expand_is_capture_avoiding) {
  // The argument mentions the formal parameter name of the rule.
  const RuleRegistry rules = make_rules({{"f(x, y)", "x - y"}});
  EXPECT_EQ(expand_rules(parse_expr("f(y, x)"), rules), parse_expr("y - x"));
}

TEST(expr, expand_errors) {
  const RuleRegistry rules = make_rules({{"f(x)", "x*x"}});
  EXPECT_EQ(error_of([&] { expand_rules(parse_expr("h(a)"), rules); }), ErrorCode::UnknownRule);
  EXPECT_EQ(error_of([&] { expand_rules(parse_expr("f(a, b)"), rules); }), ErrorCode::ArityMismatch);
}

TEST(expr, registry_rejects_cycles) {
  const RuleRegistry rules = make_rules({{"f(x)", "g(x) + 1.0"}, {"g(x)", "f(x)*2.0"}});
  EXPECT_EQ(error_of([&] { rules.validate(); }), ErrorCode::RuleCycle);
}

TEST(expr, unify_identical_bodies) {
  const RuleRegistry rules = make_rules({{"u1(i, j)", "q[i, j, 1]"}, {"u2(a, b)", "q[a, b, 1]"}});
  const std::vector<Expr> bodies = {parse_expr("u1(i, j) + u2(j, i)")};
  const UnifyResult r = unify_identical_rules(rules, bodies);
  EXPECT_EQ(r.registry.size(), 1u);
  EXPECT_TRUE(r.registry.contains("u1"));
  EXPECT_EQ(r.renamed.at("u2"), "u1");
  EXPECT_EQ(r.bodies.front(), parse_expr("u1(i, j) + u1(j, i)"));
}

TEST(expr, unify_keeps_distinct_bodies) {
  const RuleRegistry rules = make_rules({{"u1(i, j)", "q[i, j, 1]"}, {"u2(i, j)", "q[j, i, 1]"}});
  const std::vector<Expr> bodies = {parse_expr("u1(i, j) + u2(i, j)")};
  const UnifyResult r = unify_identical_rules(rules, bodies);
  EXPECT_EQ(r.registry, rules);
  EXPECT_EQ(r.bodies, bodies);
  EXPECT_TRUE(r.renamed.empty());
}

TEST(expr, unify_single_rule_is_identity) {
  const RuleRegistry rules = make_rules({{"u1(i)", "q[i]"}});
  const std::vector<Expr> bodies = {parse_expr("u1(k)")};
  const UnifyResult r = unify_identical_rules(rules, bodies);
  EXPECT_EQ(r.registry, rules);
  EXPECT_EQ(r.bodies, bodies);
}

TEST(expr, unify_flattens_associative_chains) {
  const RuleRegistry rules = make_rules({{"s1(a)", "(a + b) + c"}, {"s2(a)", "a + (b + c)"}});
  EXPECT_EQ(unify_identical_rules(rules, {}).registry.size(), 1u);
}

TEST(expr, unify_preserves_values) {
  const RuleRegistry rules =
      make_rules({{"ra(x)", "x*w + 1.0"}, {"rb(y)", "y*w + 1.0"}, {"rc(x)", "ra(x)*rb(x)"}});
  const std::vector<Expr> bodies = {parse_expr("rc(v) - rb(v*2.0)"), parse_expr("ra(w) + rb(v)")};
  const UnifyResult r = unify_identical_rules(rules, bodies);
  EXPECT_EQ(r.registry.size(), 2u);
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> dist(-2.0, 2.0);
  for (int trial = 0; trial < 20; ++trial) {
    const MapBindings b = scalars({{"v", dist(rng)}, {"w", dist(rng)}});
    for (std::size_t i = 0; i < bodies.size(); ++i) {
      EXPECT_EQ(eval_f(r.bodies[i], b, r.registry), eval_f(bodies[i], b, rules));
    }
  }
}

TEST(expr, collect_factor_examples) {
  const Expr inv_j = parse_expr("1.0/J");
  const auto r = collect_common_factors_expr({parse_expr("(1.0/J)*x"), parse_expr("(1.0/J)*y")}, inv_j);
  EXPECT_TRUE(r.factored);
  ASSERT_EQ(r.terms.size(), 2u);
  EXPECT_EQ(r.terms[0], parse_expr("x"));
  EXPECT_EQ(r.terms[1], parse_expr("y"));

  const std::vector<Expr> single = {parse_expr("x")};
  const auto absent = collect_common_factors_expr(single, inv_j);
  EXPECT_FALSE(absent.factored);
  EXPECT_EQ(absent.terms, single);

  const auto empty = collect_common_factors_expr({}, inv_j);
  EXPECT_FALSE(empty.factored);
  EXPECT_TRUE(empty.terms.empty());
}

TEST(expr, collect_factor_soundness) {
  const Expr cand = parse_expr("ji");
  const std::vector<Expr> terms = {parse_expr("ji*d[n]*a"), parse_expr("b*(ji*d[n])*c"),
                                   parse_expr("a/b*(d[n]*ji)"), parse_expr("ji/c")};
  const auto r = collect_common_factors_expr(terms, cand);
  ASSERT_TRUE(r.factored);
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> dist(0.5, 2.0);
  for (int trial = 0; trial < 50; ++trial) {
    MapBindings b = scalars({{"ji", dist(rng)}, {"a", dist(rng)}, {"b", dist(rng)}, {"c", dist(rng)}});
    b.scalars["n"] = Value::i32(0);
    b.arrays["d"] = DenseArray{{1}, {static_cast<float>(dist(rng))}, DType::f32};
    double original = 0.0, residual = 0.0;
    for (const auto& t : terms) original += eval_f(t, b);
    for (const auto& t : r.terms) residual += eval_f(t, b);
    const double factored = eval_f(cand, b) * residual;
    EXPECT_NEAR(factored, original, 1e-6 * std::abs(original) + 1e-30);
  }
}

TEST(expr, collect_factor_partial_presence_leaves_terms) {
  const std::vector<Expr> terms = {parse_expr("k*x"), parse_expr("y")};
  const auto r = collect_common_factors_expr(terms, parse_expr("k"));
  EXPECT_FALSE(r.factored);
  EXPECT_EQ(r.terms, terms);
}

TEST(expr, simplify_index_folds_affine_terms) {
  EXPECT_EQ(simplify_index(parse_expr("i + 1 - 1")), parse_expr("i"));
  EXPECT_EQ(simplify_index(parse_expr("2*3 + j")), simplify_index(parse_expr("j + 6")));
  EXPECT_EQ(simplify_index(parse_expr("(i + j) - j")), parse_expr("i"));
}

TEST(expr, free_variables_and_order) {
  const Expr e = parse_expr("q[n, j] + a*f(b, n)");
  EXPECT_EQ(free_variables(e), (std::set<std::string>{"a", "b", "j", "n"}));
  EXPECT_EQ(variables_in_order(e), (std::vector<std::string>{"n", "j", "a", "b"}));
  EXPECT_EQ(accessed_arrays(e), std::set<std::string>{"q"});
}

TEST(expr, property_expansion_is_bit_exact) {
  for (uint64_t seed = 1; seed <= 40; ++seed) {
    TreeGen leaf(seed, {"x", "y"});
    RuleRegistry rules;
    rules.insert({"r0", {"x", "y"}, leaf.make(3)});
    TreeGen mid(seed + 1000, {"x", "a"});
    mid.rules = {{"r0", 2}};
    rules.insert({"r1", {"x"}, mid.make(3)});
    TreeGen top(seed + 2000, {"a", "b"});
    top.rules = {{"r0", 2}, {"r1", 1}};
    const Expr e = top.make(4);
    const Expr expanded = expand_rules(e, rules);
    bool has_rule = false;
    visit(expanded, [&](const Expr& n) { has_rule |= n.as<RuleInvocation>() != nullptr; });
    EXPECT_FALSE(has_rule);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> dist(-3.0, 3.0);
    for (int trial = 0; trial < 5; ++trial) {
      const MapBindings b = scalars({{"a", dist(rng)}, {"b", dist(rng)}});
      const float want = eval_f(e, b, rules);
      const float got = eval_f(expanded, b);
      if (std::isnan(want)) {
        EXPECT_TRUE(std::isnan(got));
      } else {
        EXPECT_EQ(got, want) << to_string(e);
      }
    }
  }
}

TEST(expr, property_print_parse_round_trip) {
  for (uint64_t seed = 1; seed <= 200; ++seed) {
    TreeGen gen(seed, {"x", "y", "z"});
    gen.rules = {{"f", 2}, {"g", 1}};
    const Expr e = gen.make(5);
    EXPECT_EQ(parse_expr(to_string(e)), e) << to_string(e);
  }
}
