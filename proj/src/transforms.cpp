#include "loopforge/transforms.hpp"

#include <algorithm>
#include <map>
#include <set>

namespace loopforge {

namespace {

void note(Diagnostics* diags, std::string code, std::string message) {
  if (diags) diags->push_back({std::move(code), std::move(message)});
}

bool contains(const std::vector<std::string>& v, const std::string& x) {
  return std::find(v.begin(), v.end(), x) != v.end();
}

std::string join(const std::vector<std::string>& items, std::string_view sep = ", ") {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i) out += sep;
    out += items[i];
  }
  return out;
}

const ArrayDescriptor* find_global(const Kernel& k, std::string_view name) {
  for (const auto& a : k.args) {
    if (const auto* d = std::get_if<ArrayDescriptor>(&a); d && d->name == name) return d;
  }
  return nullptr;
}

ArrayDescriptor& require_array(Kernel& k, const std::string& name) {
  if (auto* a = k.find_array(name)) return *a;
  fail(ErrorCode::UnknownVariable, "no array named '" + name + "'");
}

/// Applies `fn` to every expression of the kernel: instruction indices and
/// right-hand sides, then rule bodies.
void map_exprs(Kernel& k, const std::function<Expr(const Expr&)>& fn) {
  for (auto& insn : k.instructions) {
    for (auto& i : insn.indices) i = fn(i);
    insn.rhs = fn(insn.rhs);
  }
  RuleRegistry rules;
  for (const auto& [name, rule] : k.rules) rules.insert({rule.name, rule.params, fn(rule.body)});
  k.rules = std::move(rules);
}

Expr rename_variables(const Expr& e, const std::map<std::string, std::string>& names) {
  return rewrite(e, [&](const Expr& x) -> std::optional<Expr> {
    if (const auto* v = x.as<Variable>()) {
      if (auto it = names.find(v->name); it != names.end()) return Expr::var(it->second);
    }
    return std::nullopt;
  });
}

/// Renames array/temporary accesses and rule invocations, recursing through
/// their arguments.
Expr rename_refs(const Expr& e, const std::map<std::string, std::string>& arrays,
                 const std::map<std::string, std::string>& rules) {
  return rewrite(e, [&](const Expr& x) -> std::optional<Expr> {
    if (const auto* s = x.as<Subscript>()) {
      auto it = arrays.find(s->array);
      if (it == arrays.end()) return std::nullopt;
      std::vector<Expr> idx;
      for (const auto& i : s->indices) idx.push_back(rename_refs(i, arrays, rules));
      return Expr::subscript(it->second, std::move(idx));
    }
    if (const auto* r = x.as<RuleInvocation>()) {
      auto it = rules.find(r->rule);
      if (it == rules.end()) return std::nullopt;
      std::vector<Expr> args;
      for (const auto& a : r->args) args.push_back(rename_refs(a, arrays, rules));
      return Expr::rule(it->second, std::move(args));
    }
    return std::nullopt;
  });
}

struct AffineIndex {
  std::optional<std::string> iname;
  int64_t offset = 0;
};

/// `iname + c` or a literal `c`.
std::optional<AffineIndex> affine_index(const Expr& e, const LoopDomain& domain) {
  const Expr s = simplify_index(e);
  if (auto v = as_integer(s)) return AffineIndex{std::nullopt, *v};
  if (const auto* var = s.as<Variable>()) {
    if (domain.contains(var->name)) return AffineIndex{var->name, 0};
    return std::nullopt;
  }
  if (const auto* b = s.as<BinaryOp>()) {
    const auto* var = b->lhs.as<Variable>();
    auto c = as_integer(b->rhs);
    if (!var || !c || !domain.contains(var->name)) return std::nullopt;
    if (b->op == BinaryOpKind::add) return AffineIndex{var->name, *c};
    if (b->op == BinaryOpKind::sub) return AffineIndex{var->name, -*c};
  }
  return std::nullopt;
}

int64_t literal_extent(const Kernel& k, const std::string& iname) {
  auto v = as_integer(simplify_index(k.domain.extent(iname)));
  if (!v) {
    fail(ErrorCode::NonLiteralExtent,
         "extent of '" + iname + "' is not a literal; fix its parameters first");
  }
  return *v;
}

/// Closed integer range covered by an affine index.
std::pair<int64_t, int64_t> index_range(const Kernel& k, const AffineIndex& a) {
  if (!a.iname) return {a.offset, a.offset};
  return {a.offset, a.offset + literal_extent(k, *a.iname) - 1};
}

struct Access {
  std::string array;
  std::vector<Expr> indices;
};

bool may_overlap(const Access& a, const Access& b) {
  if (a.array != b.array) return false;
  if (a.indices.size() != b.indices.size()) return true;
  for (std::size_t i = 0; i < a.indices.size(); ++i) {
    auto x = as_integer(simplify_index(a.indices[i]));
    auto y = as_integer(simplify_index(b.indices[i]));
    if (x && y && *x != *y) return false;
  }
  return true;
}

std::vector<Access> read_accesses(const Instruction& insn, const RuleRegistry& rules) {
  std::vector<Access> out;
  visit(expand_rules(insn.rhs, rules), [&](const Expr& x) {
    if (const auto* s = x.as<Subscript>()) out.push_back({s->array, s->indices});
  });
  if (insn.is_update) out.push_back({insn.assignee, insn.indices});
  return out;
}

bool conflicts(const Instruction& a, const Instruction& b, const RuleRegistry& ra,
               const RuleRegistry& rb) {
  const Access wa{a.assignee, a.indices};
  const Access wb{b.assignee, b.indices};
  if (may_overlap(wa, wb)) return true;
  for (const auto& r : read_accesses(b, rb)) {
    if (may_overlap(wa, r)) return true;
  }
  for (const auto& r : read_accesses(a, ra)) {
    if (may_overlap(r, wb)) return true;
  }
  return false;
}

std::string unique_id(const Kernel& k, const std::string& base) {
  if (!k.find_instruction(base)) return base;
  for (int n = 1;; ++n) {
    std::string id = base + "_" + std::to_string(n);
    if (!k.find_instruction(id)) return id;
  }
}

void require_fresh_name(const Kernel& k, const std::string& name, std::string_view what) {
  const auto names = k.declared_names();
  if (names.count(name)) {
    fail(ErrorCode::BadArgument, std::string(what) + " '" + name + "' is already declared");
  }
}

/// Adds an iname with the given extent, or checks an existing one agrees.
void ensure_iname(Kernel& k, const std::string& name, int64_t extent) {
  if (const auto* i = k.domain.find(name)) {
    auto v = as_integer(simplify_index(i->extent));
    if (!v || *v != extent) {
      fail(ErrorCode::ExtentMismatch, "iname '" + name + "' has extent " + to_string(i->extent) +
                                          ", need " + std::to_string(extent));
    }
    return;
  }
  const auto names = k.declared_names();
  if (names.count(name)) {
    fail(ErrorCode::BadArgument, "iname '" + name + "' clashes with an existing name");
  }
  k.domain.add({name, Expr::i32(extent)});
}

bool uses_iname(const Kernel& k, const std::string& iname) {
  return std::any_of(k.instructions.begin(), k.instructions.end(),
                     [&](const Instruction& insn) { return insn.within.count(iname) != 0; });
}

void drop_iname(Kernel& k, const std::string& iname) {
  k.domain.remove(iname);
  k.iname_tags.erase(iname);
  k.loop_priority.erase(std::remove(k.loop_priority.begin(), k.loop_priority.end(), iname),
                        k.loop_priority.end());
}

std::set<std::string> inames_in(const Kernel& k, const Expr& e) {
  std::set<std::string> out;
  for (const auto& v : free_variables(e)) {
    if (k.domain.contains(v)) out.insert(v);
  }
  return out;
}

Kernel finish(Kernel k, std::string_view context) {
  k = normalize_rules(std::move(k));
  require_consistent(k, context);
  return k;
}

}  // namespace

Kernel normalize_rules(Kernel k) {
  std::vector<Expr> bodies;
  for (const auto& insn : k.instructions) bodies.push_back(insn.rhs);
  auto unified = unify_identical_rules(k.rules, std::move(bodies));
  for (std::size_t i = 0; i < k.instructions.size(); ++i) {
    k.instructions[i].rhs = unified.bodies[i];
  }
  std::set<std::string> reachable;
  std::vector<std::string> work;
  auto scan = [&](const Expr& e) {
    visit(e, [&](const Expr& x) {
      if (const auto* r = x.as<RuleInvocation>()) {
        if (reachable.insert(r->rule).second) work.push_back(r->rule);
      }
    });
  };
  for (const auto& insn : k.instructions) scan(insn.rhs);
  while (!work.empty()) {
    const std::string name = work.back();
    work.pop_back();
    if (const auto* rule = unified.registry.find(name)) scan(rule->body);
  }
  RuleRegistry kept;
  for (const auto& [name, rule] : unified.registry) {
    if (reachable.count(name)) kept.insert(rule);
  }
  k.rules = std::move(kept);
  return k;
}

// ---------------------------------------------------------------------------
// fuse

Kernel fuse_kernels(const std::vector<Kernel>& kernels, const std::vector<std::string>& suffixes,
                    const std::optional<std::string>& name) {
  if (kernels.empty()) fail(ErrorCode::BadArgument, "fuse needs at least one kernel");
  if (suffixes.size() != kernels.size()) {
    fail(ErrorCode::BadArgument, "fuse got " + std::to_string(suffixes.size()) +
                                     " suffixes for " + std::to_string(kernels.size()) +
                                     " kernels");
  }
  Kernel out;
  out.name = name.value_or(kernels.front().name);
  std::vector<std::size_t> first_insn;
  std::vector<RuleRegistry> origin_rules;
  for (std::size_t n = 0; n < kernels.size(); ++n) {
    const Kernel& k = kernels[n];
    const std::string& suffix = suffixes[n];
    for (const auto& i : k.domain.inames) {
      if (const auto* existing = out.domain.find(i.name)) {
        if (!(simplify_index(existing->extent) == simplify_index(i.extent))) {
          fail(ErrorCode::DomainMismatch, "iname '" + i.name + "' has extent " +
                                              to_string(existing->extent) + " in one kernel and " +
                                              to_string(i.extent) + " in another");
        }
      } else {
        out.domain.inames.push_back(i);
      }
    }
    out.domain.parameters.insert(k.domain.parameters.begin(), k.domain.parameters.end());
    for (const auto& arg : k.args) {
      const std::string an(arg_name(arg));
      auto it = std::find_if(out.args.begin(), out.args.end(),
                             [&](const KernelArg& a) { return arg_name(a) == an; });
      if (it == out.args.end()) {
        out.args.push_back(arg);
      } else if (!(*it == arg)) {
        fail(ErrorCode::ArgumentConflict, "argument '" + an + "' is declared differently");
      }
    }
    std::map<std::string, std::string> temps, rules, ids;
    for (const auto& t : k.temporaries) temps[t.name] = t.name + suffix;
    for (const auto& [rn, rule] : k.rules) rules[rn] = rn + suffix;
    for (const auto& insn : k.instructions) ids[insn.id] = insn.id + suffix;
    for (const auto& t : k.temporaries) {
      ArrayDescriptor copy = t;
      copy.name = temps.at(t.name);
      out.temporaries.push_back(std::move(copy));
    }
    RuleRegistry renamed_rules;
    for (const auto& [rn, rule] : k.rules) {
      out.rules.insert({rules.at(rn), rule.params, rename_refs(rule.body, temps, rules)});
      renamed_rules.insert({rules.at(rn), rule.params, rename_refs(rule.body, temps, rules)});
    }
    first_insn.push_back(out.instructions.size());
    for (const auto& insn : k.instructions) {
      Instruction copy = insn;
      copy.id = ids.at(insn.id);
      if (auto it = temps.find(insn.assignee); it != temps.end()) copy.assignee = it->second;
      copy.rhs = rename_refs(insn.rhs, temps, rules);
      for (auto& i : copy.indices) i = rename_refs(i, temps, rules);
      copy.depends_on.clear();
      for (const auto& d : insn.depends_on) copy.depends_on.insert(ids.at(d));
      out.instructions.push_back(std::move(copy));
    }
    origin_rules.push_back(std::move(renamed_rules));
    for (const auto& [iname, tag] : k.iname_tags) {
      auto [it, inserted] = out.iname_tags.emplace(iname, tag);
      if (!inserted && !(it->second == tag)) {
        fail(ErrorCode::DomainMismatch, "iname '" + iname + "' is tagged differently");
      }
    }
    for (const auto& p : k.loop_priority) {
      if (!contains(out.loop_priority, p)) out.loop_priority.push_back(p);
    }
    for (const auto& a : k.assumptions) {
      if (std::find(out.assumptions.begin(), out.assumptions.end(), a) == out.assumptions.end()) {
        out.assumptions.push_back(a);
      }
    }
    for (const auto& group : k.aliases) {
      std::vector<std::string> g;
      for (const auto& t : group) g.push_back(temps.at(t));
      out.aliases.push_back(std::move(g));
    }
  }
  // Later kernels observe the global-memory effects of earlier ones.
  first_insn.push_back(out.instructions.size());
  for (std::size_t kb = 1; kb < kernels.size(); ++kb) {
    for (std::size_t b = first_insn[kb]; b < first_insn[kb + 1]; ++b) {
      for (std::size_t ka = 0; ka < kb; ++ka) {
        for (std::size_t a = first_insn[ka]; a < first_insn[ka + 1]; ++a) {
          if (conflicts(out.instructions[a], out.instructions[b], origin_rules[ka],
                        origin_rules[kb])) {
            out.instructions[b].depends_on.insert(out.instructions[a].id);
          }
        }
      }
    }
  }
  return finish(std::move(out), "fuse");
}

// ---------------------------------------------------------------------------
// parameters, assumptions, priorities, tags

Kernel fix_parameters(const Kernel& k, const std::vector<std::pair<std::string, int64_t>>& values) {
  Kernel out = k;
  std::map<std::string, Expr> repl;
  for (const auto& [name, value] : values) {
    if (k.find_array(name) || k.find_scalar(name)) {
      fail(ErrorCode::NonScalarParameter, "'" + name + "' is not an integer domain parameter");
    }
    if (!k.domain.parameters.count(name)) {
      fail(ErrorCode::UnknownParameter, "no parameter named '" + name + "'");
    }
    repl[name] = Expr::i32(value);
  }
  auto fix = [&](const Expr& e) { return simplify_index(substitute(e, repl)); };
  for (auto& i : out.domain.inames) i.extent = fix(i.extent);
  for (auto& arg : out.args) {
    if (auto* d = std::get_if<ArrayDescriptor>(&arg)) {
      for (auto& s : d->shape) s = fix(s);
    }
  }
  for (auto& t : out.temporaries) {
    for (auto& s : t.shape) s = fix(s);
  }
  for (auto& insn : out.instructions) {
    for (auto& i : insn.indices) i = fix(i);
    insn.rhs = substitute(insn.rhs, repl);
  }
  RuleRegistry rules;
  for (const auto& [rn, rule] : out.rules) {
    std::map<std::string, Expr> visible = repl;
    for (const auto& p : rule.params) visible.erase(p);
    rules.insert({rule.name, rule.params, substitute(rule.body, visible)});
  }
  out.rules = std::move(rules);
  for (const auto& [name, value] : values) out.domain.parameters.erase(name);
  out.assumptions.erase(std::remove_if(out.assumptions.begin(), out.assumptions.end(),
                                       [&](const Assumption& a) { return repl.count(a.param); }),
                        out.assumptions.end());
  return finish(std::move(out), "fix_parameters");
}

Kernel assume(const Kernel& k, std::string_view constraint) {
  const std::string text(constraint);
  static const std::vector<std::string> ops = {">=", "<=", "==", "!=", ">", "<"};
  for (const auto& op : ops) {
    const auto pos = text.find(op);
    if (pos == std::string::npos) continue;
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t");
      const auto e = s.find_last_not_of(" \t");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    const std::string param = trim(text.substr(0, pos));
    const std::string rhs = trim(text.substr(pos + op.size()));
    if (!k.domain.parameters.count(param)) {
      fail(ErrorCode::MalformedConstraint,
           "'" + text + "' does not constrain a domain parameter");
    }
    int64_t value = 0;
    try {
      std::size_t used = 0;
      value = std::stoll(rhs, &used);
      if (used != rhs.size()) throw std::invalid_argument(rhs);
    } catch (const std::exception&) {
      fail(ErrorCode::MalformedConstraint, "'" + text + "' needs an integer right-hand side");
    }
    Kernel out = k;
    out.assumptions.push_back({param, op, value});
    return finish(std::move(out), "assume");
  }
  fail(ErrorCode::MalformedConstraint, "'" + text + "' has no comparison operator");
}

Kernel prioritize_loops(const Kernel& k, const std::vector<std::string>& order) {
  for (const auto& iname : order) {
    if (!k.domain.contains(iname)) fail(ErrorCode::UnknownIname, "no iname named '" + iname + "'");
    const auto tag = k.tag_of(iname);
    if (tag.kind != InameTag::Kind::sequential) {
      fail(ErrorCode::TaggedNotSequential,
           "iname '" + iname + "' is tagged " + tag.str() + " and opens no loop");
    }
  }
  Kernel out = k;
  out.loop_priority = order;
  return finish(std::move(out), "prioritize_loops");
}

Kernel tag_inames(const Kernel& k, const std::vector<std::pair<std::string, InameTag>>& tags) {
  Kernel out = k;
  for (const auto& [iname, tag] : tags) {
    if (!k.domain.contains(iname)) fail(ErrorCode::UnknownIname, "no iname named '" + iname + "'");
    if (tag.kind == InameTag::Kind::vec) {
      auto v = as_integer(simplify_index(k.domain.extent(iname)));
      if (!v || *v != kVectorWidth) {
        fail(ErrorCode::VecExtentMismatch, "vec iname '" + iname + "' must have extent " +
                                               std::to_string(kVectorWidth));
      }
    }
    if (tag.kind == InameTag::Kind::sequential) {
      out.iname_tags.erase(iname);
    } else {
      out.iname_tags[iname] = tag;
    }
  }
  for (const auto& d : check_consistency(out)) {
    if (d.code == "AxisConflict") fail(ErrorCode::AxisConflict, d.message);
  }
  return finish(std::move(out), "tag_inames");
}

Kernel rename_iname(const Kernel& k, const RenameInameCommand& cmd, Diagnostics* diags) {
  if (!k.domain.contains(cmd.old_name)) {
    fail(ErrorCode::UnknownIname, "no iname named '" + cmd.old_name + "'");
  }
  const bool exists = k.domain.contains(cmd.new_name);
  if (exists) {
    if (!cmd.existing_ok) {
      fail(ErrorCode::BadArgument, "iname '" + cmd.new_name + "' exists; pass existing_ok=true");
    }
    if (!(simplify_index(k.domain.extent(cmd.new_name)) ==
          simplify_index(k.domain.extent(cmd.old_name)))) {
      fail(ErrorCode::ExtentMismatch,
           "'" + cmd.old_name + "' and '" + cmd.new_name + "' have different extents");
    }
  } else if (k.declared_names().count(cmd.new_name)) {
    fail(ErrorCode::BadArgument, "'" + cmd.new_name + "' is already declared");
  }
  Kernel out = k;
  const std::map<std::string, std::string> names = {{cmd.old_name, cmd.new_name}};
  std::size_t matched = 0;
  for (auto& insn : out.instructions) {
    if (!insn.within.count(cmd.old_name) || !cmd.within.matches(insn, k.rules)) continue;
    ++matched;
    insn.within.erase(cmd.old_name);
    insn.within.insert(cmd.new_name);
    for (auto& i : insn.indices) i = rename_variables(i, names);
    insn.rhs = rename_variables(insn.rhs, names);
  }
  if (matched == 0) {
    note(diags, "NoMatch", "rename_iname " + cmd.old_name + " within " + cmd.within.str() +
                               " matched no instruction");
    return k;
  }
  if (!exists) {
    out.domain.add({cmd.new_name, k.domain.extent(cmd.old_name)}, cmd.old_name);
    if (auto it = k.iname_tags.find(cmd.old_name); it != k.iname_tags.end()) {
      out.iname_tags[cmd.new_name] = it->second;
    }
    auto pos = std::find(out.loop_priority.begin(), out.loop_priority.end(), cmd.old_name);
    if (pos != out.loop_priority.end()) out.loop_priority.insert(pos + 1, cmd.new_name);
  }
  if (!uses_iname(out, cmd.old_name)) drop_iname(out, cmd.old_name);
  return finish(std::move(out), "rename_iname");
}

// ---------------------------------------------------------------------------
// array layout

Kernel set_array_axis_names(const Kernel& k, const std::string& array,
                            const std::vector<std::string>& names) {
  Kernel out = k;
  auto& desc = require_array(out, array);
  if (names.size() != desc.rank()) {
    fail(ErrorCode::RankMismatch, "'" + array + "' has rank " + std::to_string(desc.rank()) +
                                      ", got " + std::to_string(names.size()) + " axis names");
  }
  const std::set<std::string> distinct(names.begin(), names.end());
  if (distinct.size() != names.size()) {
    fail(ErrorCode::BadArgument, "axis names of '" + array + "' must be distinct");
  }
  desc.axis_names = names;
  return finish(std::move(out), "set_array_axis_names");
}

namespace {

std::size_t resolve_axis(const ArrayDescriptor& desc, const std::string& axis) {
  for (std::size_t a = 0; a < desc.axis_names.size(); ++a) {
    if (desc.axis_names[a] == axis) return a;
  }
  if (!axis.empty() && std::all_of(axis.begin(), axis.end(), ::isdigit)) {
    const auto a = static_cast<std::size_t>(std::stoul(axis));
    if (a < desc.rank()) return a;
  }
  fail(ErrorCode::BadArgument, "'" + desc.name + "' has no axis '" + axis + "'");
}

}  // namespace

Kernel split_array_axis(const Kernel& k, const std::string& array, const std::string& axis,
                        int64_t factor) {
  Kernel out = k;
  auto& desc = require_array(out, array);
  if (k.alias_group(array)) {
    fail(ErrorCode::BadArgument, "cannot split aliased temporary '" + array + "'");
  }
  const std::size_t a = resolve_axis(desc, axis);
  if (desc.dim_tags[a].is_vec) {
    fail(ErrorCode::BadArgument, "cannot split the vec axis of '" + array + "'");
  }
  auto extent = as_integer(simplify_index(desc.shape[a]));
  if (!extent) {
    fail(ErrorCode::NonLiteralExtent,
         "axis '" + axis + "' of '" + array + "' has extent " + to_string(desc.shape[a]));
  }
  if (factor <= 0 || *extent % factor != 0) {
    fail(ErrorCode::NotDivisible, "extent " + std::to_string(*extent) + " of '" + array +
                                      "' is not divisible by " + std::to_string(factor));
  }
  const int rank = desc.dim_tags[a].rank;
  for (auto& t : desc.dim_tags) {
    if (!t.is_vec && t.rank > rank) ++t.rank;
  }
  const std::string base = desc.axis_names[a];
  desc.shape[a] = Expr::i32(factor);
  desc.shape.insert(desc.shape.begin() + static_cast<std::ptrdiff_t>(a) + 1,
                    Expr::i32(*extent / factor));
  desc.axis_names[a] = base + "_inner";
  desc.axis_names.insert(desc.axis_names.begin() + static_cast<std::ptrdiff_t>(a) + 1,
                         base + "_outer");
  desc.dim_tags.insert(desc.dim_tags.begin() + static_cast<std::ptrdiff_t>(a) + 1,
                       DimTag::nest(rank + 1));
  desc.splits.push_back({a, factor});

  auto split_index = [&](const Expr& s) -> std::pair<Expr, Expr> {
    if (factor == 1) return {Expr::i32(0), s};
    return {simplify_index(Expr::call("mod", {s, Expr::i32(factor)})),
            simplify_index(Expr::call("floordiv", {s, Expr::i32(factor)}))};
  };
  std::function<Expr(const Expr&)> fix = [&](const Expr& e) {
    return rewrite(e, [&](const Expr& x) -> std::optional<Expr> {
      const auto* s = x.as<Subscript>();
      if (!s || s->array != array) return std::nullopt;
      std::vector<Expr> idx;
      for (std::size_t i = 0; i < s->indices.size(); ++i) {
        const Expr inner = fix(s->indices[i]);
        if (i == a) {
          auto [lo, hi] = split_index(inner);
          idx.push_back(lo);
          idx.push_back(hi);
        } else {
          idx.push_back(inner);
        }
      }
      return Expr::subscript(array, std::move(idx));
    });
  };
  map_exprs(out, fix);
  for (auto& insn : out.instructions) {
    if (insn.assignee != array || insn.indices.size() != desc.rank() - 1) continue;
    auto [lo, hi] = split_index(insn.indices[a]);
    insn.indices[a] = lo;
    insn.indices.insert(insn.indices.begin() + static_cast<std::ptrdiff_t>(a) + 1, hi);
  }
  return finish(std::move(out), "split_array_axis");
}

Kernel tag_array_axes(const Kernel& k, const std::string& array, const std::vector<DimTag>& tags) {
  Kernel out = k;
  auto& desc = require_array(out, array);
  if (tags.size() != desc.rank()) {
    fail(ErrorCode::RankMismatch, "'" + array + "' has rank " + std::to_string(desc.rank()) +
                                      ", got " + std::to_string(tags.size()) + " tags");
  }
  std::vector<int> ranks;
  std::size_t vecs = 0;
  for (const auto& t : tags) vecs += t.is_vec ? 1 : 0;
  if (vecs > 1) fail(ErrorCode::MultipleVecAxes, "'" + array + "' has more than one vec axis");
  for (std::size_t a = 0; a < tags.size(); ++a) {
    if (tags[a].is_vec) {
      auto v = as_integer(simplify_index(desc.shape[a]));
      if (!v || *v != kVectorWidth) {
        fail(ErrorCode::VecExtentMismatch, "vec axis of '" + array + "' must have extent " +
                                               std::to_string(kVectorWidth));
      }
    } else {
      ranks.push_back(tags[a].rank);
    }
  }
  std::sort(ranks.begin(), ranks.end());
  for (std::size_t r = 0; r < ranks.size(); ++r) {
    if (ranks[r] != static_cast<int>(r)) {
      fail(ErrorCode::BadPermutation,
           "nesting ranks of '" + array + "' must be a permutation of 0.." +
               std::to_string(static_cast<int>(ranks.size()) - 1));
    }
  }
  desc.dim_tags = tags;
  return finish(std::move(out), "tag_array_axes");
}

// ---------------------------------------------------------------------------
// assignment_to_subst

namespace {

void to_subst_one(Kernel& k, const std::string& var) {
  const auto* temp = k.find_temporary(var);
  if (!temp) {
    fail(ErrorCode::BadArgument, "'" + var + "' is not a temporary");
  }
  std::vector<std::size_t> writers;
  for (std::size_t i = 0; i < k.instructions.size(); ++i) {
    if (k.instructions[i].assignee == var) writers.push_back(i);
  }
  if (writers.empty()) fail(ErrorCode::BadArgument, "'" + var + "' is never written");
  if (writers.size() > 1) {
    fail(ErrorCode::MultipleWriters, "'" + var + "' is written by " +
                                         std::to_string(writers.size()) + " instructions");
  }
  const std::size_t w = writers.front();
  const Instruction writer = k.instructions[w];
  if (writer.is_update) {
    fail(ErrorCode::MultipleWriters, "'" + var + "' is accumulated by '" + writer.id + "'");
  }
  for (std::size_t i = 0; i <= w; ++i) {
    if (reads_array(k.instructions[i], k.rules, var)) {
      fail(ErrorCode::WriteAfterRead,
           "'" + k.instructions[i].id + "' reads '" + var + "' before it is written");
    }
  }
  std::vector<std::string> params;
  std::set<std::string> index_inames;
  for (const auto& idx : writer.indices) {
    const auto* v = idx.as<Variable>();
    if (!v || !k.domain.contains(v->name) || index_inames.count(v->name)) {
      fail(ErrorCode::BadArgument, "'" + writer.id + "' must index '" + var +
                                       "' with distinct plain inames");
    }
    params.push_back(v->name);
    index_inames.insert(v->name);
  }
  std::vector<std::string> extra;
  for (const auto& v : variables_in_order(writer.rhs)) {
    if (k.domain.contains(v) && !index_inames.count(v)) extra.push_back(v);
  }
  params.insert(params.end(), extra.begin(), extra.end());
  const std::string rule_name = var + "_subst";
  if (k.rules.contains(rule_name) || k.declared_names().count(rule_name)) {
    fail(ErrorCode::BadArgument, "rule '" + rule_name + "' already exists");
  }
  k.rules.insert({rule_name, params, writer.rhs});

  auto replace = [&](const Expr& e) {
    return rewrite(e, [&](const Expr& x) -> std::optional<Expr> {
      const auto* s = x.as<Subscript>();
      if (!s || s->array != var) return std::nullopt;
      std::vector<Expr> args = s->indices;
      for (const auto& p : extra) args.push_back(Expr::var(p));
      return Expr::rule(rule_name, std::move(args));
    });
  };
  for (auto& insn : k.instructions) {
    if (!reads_array(insn, k.rules, var)) continue;
    for (const auto& p : extra) {
      if (!insn.within.count(p)) {
        fail(ErrorCode::BadArgument, "'" + insn.id + "' reads '" + var + "' outside iname '" +
                                         p + "'");
      }
    }
    insn.rhs = replace(insn.rhs);
  }
  RuleRegistry rules;
  for (const auto& [rn, rule] : k.rules) {
    Expr body = replace(rule.body);
    for (const auto& p : extra) {
      if (rn != rule_name && !contains(rule.params, p) && !(body == rule.body)) {
        fail(ErrorCode::BadArgument,
             "rule '" + rn + "' reads '" + var + "' without binding iname '" + p + "'");
      }
    }
    rules.insert({rule.name, rule.params, body});
  }
  k.rules = std::move(rules);
  for (auto& insn : k.instructions) {
    if (insn.depends_on.erase(writer.id)) {
      insn.depends_on.insert(writer.depends_on.begin(), writer.depends_on.end());
    }
  }
  k.instructions.erase(k.instructions.begin() + static_cast<std::ptrdiff_t>(w));
  k.temporaries.erase(std::remove_if(k.temporaries.begin(), k.temporaries.end(),
                                     [&](const ArrayDescriptor& t) { return t.name == var; }),
                      k.temporaries.end());
  for (auto& group : k.aliases) {
    group.erase(std::remove(group.begin(), group.end(), var), group.end());
  }
  k.aliases.erase(std::remove_if(k.aliases.begin(), k.aliases.end(),
                                 [](const auto& g) { return g.size() < 2; }),
                  k.aliases.end());
}

}  // namespace

Kernel assignment_to_subst(const Kernel& k, const AssignmentToSubstCommand& cmd,
                           Diagnostics* diags) {
  std::vector<std::string> vars = cmd.vars;
  if (cmd.within) {
    for (const auto& insn : k.instructions) {
      if (!cmd.within->matches(insn, k.rules)) continue;
      if (!k.find_temporary(insn.assignee) || contains(vars, insn.assignee)) continue;
      vars.push_back(insn.assignee);
    }
  }
  if (vars.empty()) {
    note(diags, "NoMatch", "assignment_to_subst found no temporaries to substitute");
    return k;
  }
  // Earlier writers first, so rule bodies only ever reference existing rules.
  auto writer_pos = [&](const std::string& v) {
    for (std::size_t i = 0; i < k.instructions.size(); ++i) {
      if (k.instructions[i].assignee == v) return i;
    }
    return k.instructions.size();
  };
  std::stable_sort(vars.begin(), vars.end(), [&](const std::string& a, const std::string& b) {
    return writer_pos(a) < writer_pos(b);
  });
  Kernel out = k;
  for (const auto& v : vars) to_subst_one(out, v);
  return finish(std::move(out), "assignment_to_subst");
}

// ---------------------------------------------------------------------------
// precompute

namespace {

struct Site {
  std::size_t insn;
  std::vector<Expr> args;
};

struct Position {
  bool swept = false;
  bool stored = false;
  int64_t lo = 0;
  int64_t extent = 1;
  std::string compute_iname;
  Expr common;  // argument shared by every site when not swept
};

}  // namespace

Kernel precompute(const Kernel& k, const PrecomputeCommand& cmd, Diagnostics* diags) {
  const auto* rule = k.rules.find(cmd.rule);
  if (!rule) fail(ErrorCode::UnknownRule, "no rule named '" + cmd.rule + "'");
  for (const auto& s : cmd.sweep) {
    if (!k.domain.contains(s)) fail(ErrorCode::UnknownIname, "no iname named '" + s + "'");
  }
  std::vector<Site> sites;
  for (std::size_t i = 0; i < k.instructions.size(); ++i) {
    if (!cmd.within.matches(k.instructions[i], k.rules)) continue;
    visit(k.instructions[i].rhs, [&](const Expr& x) {
      if (const auto* r = x.as<RuleInvocation>(); r && r->rule == cmd.rule) {
        std::vector<Expr> args;
        for (const auto& a : r->args) args.push_back(simplify_index(a));
        sites.push_back({i, std::move(args)});
      }
    });
  }
  if (sites.empty()) {
    note(diags, "NoMatch", "precompute " + cmd.rule + " found no invocation");
    return k;
  }
  const std::size_t arity = rule->params.size();
  const std::set<std::string> sweep(cmd.sweep.begin(), cmd.sweep.end());
  std::vector<Position> pos(arity);
  std::vector<std::size_t> swept;
  for (std::size_t p = 0; p < arity; ++p) {
    bool mentions = false;
    bool differs = false;
    for (const auto& s : sites) {
      for (const auto& v : free_variables(s.args[p])) mentions = mentions || sweep.count(v);
      differs = differs || !(s.args[p] == sites.front().args[p]);
    }
    pos[p].swept = mentions || differs;
    if (!pos[p].swept) {
      pos[p].common = sites.front().args[p];
      continue;
    }
    swept.push_back(p);
    int64_t lo = 0, hi = -1;
    bool first = true;
    for (const auto& s : sites) {
      auto a = affine_index(s.args[p], k.domain);
      if (!a) {
        fail(ErrorCode::FootprintNotAffine, "argument " + std::to_string(p) + " of " + cmd.rule +
                                                " is " + to_string(s.args[p]) +
                                                ", not iname+constant");
      }
      auto [l, h] = index_range(k, *a);
      lo = first ? l : std::min(lo, l);
      hi = first ? h : std::max(hi, h);
      first = false;
    }
    pos[p].lo = lo;
    pos[p].extent = hi - lo + 1;
  }
  if (cmd.compute_inames.size() != swept.size()) {
    std::vector<std::string> names;
    for (auto p : swept) names.push_back(rule->params[p]);
    fail(ErrorCode::BadArgument, "precompute " + cmd.rule + " sweeps " +
                                     std::to_string(swept.size()) + " argument(s) (" +
                                     join(names) + ") but got " +
                                     std::to_string(cmd.compute_inames.size()) + " compute inames");
  }
  if (cmd.compute_tags.size() > cmd.compute_inames.size()) {
    fail(ErrorCode::BadArgument, "precompute " + cmd.rule + " got more tags than compute inames");
  }
  std::set<std::string> common_inames;
  for (std::size_t p = 0; p < arity; ++p) {
    if (!pos[p].swept) {
      auto in = inames_in(k, pos[p].common);
      common_inames.insert(in.begin(), in.end());
    }
  }
  for (std::size_t n = 0; n < swept.size(); ++n) {
    pos[swept[n]].compute_iname = cmd.compute_inames[n];
    if (common_inames.count(cmd.compute_inames[n])) {
      fail(ErrorCode::BadArgument, "compute iname '" + cmd.compute_inames[n] +
                                       "' is also used by an unswept argument");
    }
  }
  for (auto p : swept) pos[p].stored = true;
  if (cmd.storage_axes) {
    for (auto p : swept) {
      bool keep = false;
      for (const auto& s : sites) {
        for (const auto& v : free_variables(s.args[p])) keep = keep || contains(*cmd.storage_axes, v);
      }
      pos[p].stored = keep || contains(*cmd.storage_axes, pos[p].compute_iname);
    }
  }
  Kernel out = k;
  for (auto p : swept) ensure_iname(out, pos[p].compute_iname, pos[p].extent);
  for (auto p : swept) {
    const InameTag ctag = out.tag_of(pos[p].compute_iname);
    if (pos[p].stored) {
      if (cmd.space == AddressSpace::priv && ctag.kind == InameTag::Kind::lane) {
        fail(ErrorCode::BadArgument, "private storage cannot be indexed by lane iname '" +
                                         pos[p].compute_iname + "'");
      }
      continue;
    }
    // Unstored axes must be identified by the lane executing the compute.
    if (cmd.space != AddressSpace::priv || ctag.kind != InameTag::Kind::lane || pos[p].lo != 0) {
      fail(ErrorCode::BadArgument, "argument " + std::to_string(p) + " of " + cmd.rule +
                                       " must be stored unless a shared lane axis identifies it");
    }
    for (const auto& s : sites) {
      auto a = affine_index(s.args[p], k.domain);
      if (!a->iname || a->offset != 0 || !(out.tag_of(*a->iname) == ctag) ||
          literal_extent(out, *a->iname) != pos[p].extent) {
        fail(ErrorCode::BadArgument, "argument " + to_string(s.args[p]) + " of " + cmd.rule +
                                         " is not on lane axis " + ctag.str());
      }
    }
  }

  std::string temp_name = cmd.temp.value_or("");
  if (temp_name.empty()) {
    temp_name = cmd.rule;
    const std::string suffix = "_subst";
    if (temp_name.size() > suffix.size() &&
        temp_name.compare(temp_name.size() - suffix.size(), suffix.size(), suffix) == 0) {
      temp_name.resize(temp_name.size() - suffix.size());
    }
    temp_name += "_tmp";
  }
  require_fresh_name(out, temp_name, "temporary");

  std::map<std::string, Expr> param_values;
  std::vector<Expr> store_index;
  std::set<std::string> within = common_inames;
  ArrayDescriptor temp;
  temp.name = temp_name;
  temp.space = cmd.space;
  for (std::size_t p = 0; p < arity; ++p) {
    if (!pos[p].swept) {
      param_values[rule->params[p]] = pos[p].common;
      continue;
    }
    const Expr c = Expr::var(pos[p].compute_iname);
    param_values[rule->params[p]] = simplify_index(c + Expr::i32(pos[p].lo));
    within.insert(pos[p].compute_iname);
    if (pos[p].stored) {
      store_index.push_back(c);
      temp.shape.push_back(Expr::i32(pos[p].extent));
    }
  }
  const Expr body = substitute(rule->body, param_values);
  temp.dtype = infer_dtype(k, body);
  temp.set_default_layout();
  for (std::size_t n = 0, a = 0; n < arity; ++n) {
    if (pos[n].stored) temp.axis_names[a++] = pos[n].compute_iname;
  }

  Instruction compute;
  compute.id = unique_id(out, temp_name);
  compute.assignee = temp_name;
  compute.indices = store_index;
  compute.rhs = body;
  compute.within = within;
  const auto reads = accessed_arrays(expand_rules(body, k.rules));
  std::size_t first_consumer = sites.front().insn;
  for (const auto& insn : k.instructions) {
    if (reads.count(insn.assignee)) compute.depends_on.insert(insn.id);
  }

  std::set<std::size_t> consumers;
  for (const auto& s : sites) consumers.insert(s.insn);
  for (auto i : consumers) {
    auto& insn = out.instructions[i];
    insn.rhs = rewrite(insn.rhs, [&](const Expr& x) -> std::optional<Expr> {
      const auto* r = x.as<RuleInvocation>();
      if (!r || r->rule != cmd.rule) return std::nullopt;
      std::vector<Expr> idx;
      for (std::size_t p = 0; p < arity; ++p) {
        if (pos[p].stored) idx.push_back(simplify_index(r->args[p] - Expr::i32(pos[p].lo)));
      }
      return Expr::subscript(temp_name, std::move(idx));
    });
    insn.depends_on.insert(compute.id);
  }
  if (compute.depends_on.count(compute.id)) compute.depends_on.erase(compute.id);
  out.temporaries.push_back(std::move(temp));
  out.instructions.insert(out.instructions.begin() + static_cast<std::ptrdiff_t>(first_consumer),
                          std::move(compute));
  if (!cmd.compute_tags.empty()) {
    std::vector<std::pair<std::string, InameTag>> tags;
    for (std::size_t n = 0; n < cmd.compute_tags.size(); ++n) {
      tags.emplace_back(cmd.compute_inames[n], cmd.compute_tags[n]);
    }
    out = tag_inames(out, tags);
  }
  return finish(std::move(out), "precompute");
}

Kernel add_prefetch(const Kernel& k, const AddPrefetchCommand& cmd, Diagnostics* diags) {
  const auto* arr = find_global(k, cmd.var);
  if (!arr) {
    if (k.find_temporary(cmd.var)) {
      fail(ErrorCode::BadArgument, "'" + cmd.var + "' is a temporary, not a global argument");
    }
    fail(ErrorCode::UnknownVariable, "no global argument named '" + cmd.var + "'");
  }
  for (const auto& insn : k.instructions) {
    if (insn.assignee == cmd.var) {
      fail(ErrorCode::VarIsWritten, "'" + cmd.var + "' is written by '" + insn.id + "'");
    }
  }
  const std::string rule_name = cmd.var + "_fetch_rule";
  const std::string temp_name = cmd.var + "_fetch";
  require_fresh_name(k, rule_name, "rule");
  require_fresh_name(k, temp_name, "temporary");
  Kernel work = k;
  std::vector<std::string> params;
  std::vector<Expr> param_vars;
  for (std::size_t a = 0; a < arr->rank(); ++a) {
    params.push_back(cmd.var + "_p" + std::to_string(a));
    param_vars.push_back(Expr::var(params.back()));
  }
  work.rules.insert({rule_name, params, Expr::subscript(cmd.var, param_vars)});
  std::size_t replaced = 0;
  for (auto& insn : work.instructions) {
    if (!cmd.within.matches(insn, k.rules)) continue;
    insn.rhs = rewrite(insn.rhs, [&](const Expr& x) -> std::optional<Expr> {
      const auto* s = x.as<Subscript>();
      if (!s || s->array != cmd.var) return std::nullopt;
      ++replaced;
      return Expr::rule(rule_name, s->indices);
    });
  }
  if (replaced == 0) {
    note(diags, "NoMatch", "add_prefetch " + cmd.var + " found no direct read");
    return k;
  }
  // Positions the fetch sweeps, for default fetch iname names.
  std::vector<std::vector<Expr>> site_args;
  for (const auto& insn : work.instructions) {
    visit(insn.rhs, [&](const Expr& x) {
      if (const auto* r = x.as<RuleInvocation>(); r && r->rule == rule_name) {
        std::vector<Expr> args;
        for (const auto& a : r->args) args.push_back(simplify_index(a));
        site_args.push_back(std::move(args));
      }
    });
  }
  std::vector<std::string> sweep;
  if (cmd.sweep) sweep = *cmd.sweep;
  std::vector<std::string> fetch_inames = cmd.fetch_inames;
  if (fetch_inames.empty()) {
    for (std::size_t p = 0; p < arr->rank(); ++p) {
      bool swept = false;
      for (const auto& args : site_args) {
        swept = swept || !(args[p] == site_args.front()[p]);
        for (const auto& v : free_variables(args[p])) swept = swept || contains(sweep, v);
      }
      if (swept) fetch_inames.push_back(cmd.var + "_" + arr->axis_names[p]);
    }
  }
  PrecomputeCommand pc;
  pc.rule = rule_name;
  pc.sweep = sweep;
  pc.compute_inames = fetch_inames;
  pc.within = cmd.within;
  pc.space = cmd.space;
  pc.temp = temp_name;
  pc.compute_tags = cmd.fetch_tags;
  if (cmd.fetch_tags.size() > fetch_inames.size()) {
    fail(ErrorCode::BadArgument, "add_prefetch " + cmd.var + " got more tags than fetch inames");
  }
  work = normalize_rules(std::move(work));
  Kernel out = precompute(work, pc, diags);
  return finish(std::move(out), "add_prefetch");
}

// ---------------------------------------------------------------------------
// aliasing, buffering, factoring

Kernel alias_temporaries(const Kernel& k, const std::vector<std::string>& names) {
  const ArrayDescriptor* first = nullptr;
  for (const auto& n : names) {
    const auto* t = k.find_temporary(n);
    if (!t) fail(ErrorCode::UnknownVariable, "no temporary named '" + n + "'");
    if (k.alias_group(n)) fail(ErrorCode::BadArgument, "'" + n + "' is already aliased");
    if (!first) {
      first = t;
      continue;
    }
    if (t->space != first->space) {
      fail(ErrorCode::SpaceMismatch, "'" + n + "' is " + std::string(to_string(t->space)) +
                                         " but '" + first->name + "' is " +
                                         std::string(to_string(first->space)));
    }
    const auto fa = footprint_bytes(*t);
    const auto fb = footprint_bytes(*first);
    const bool same = fa && fb ? *fa == *fb : t->shape == first->shape;
    if (!same || t->dtype != first->dtype) {
      fail(ErrorCode::FootprintMismatch,
           "'" + n + "' and '" + first->name + "' have different footprints");
    }
  }
  const std::set<std::string> distinct(names.begin(), names.end());
  if (distinct.size() != names.size()) {
    fail(ErrorCode::BadArgument, "alias list repeats a temporary");
  }
  if (names.size() < 2) return k;
  Kernel out = k;
  out.aliases.push_back(names);
  return finish(std::move(out), "alias_temporaries");
}

Kernel buffer_array(const Kernel& k, const BufferArrayCommand& cmd, Diagnostics*) {
  const auto* arr = find_global(k, cmd.var);
  if (!arr) fail(ErrorCode::BadArgument, "'" + cmd.var + "' is not a global argument");
  if (cmd.init == BufferInit::zero && cmd.store == BufferStore::assign) {
    fail(ErrorCode::BadArgument, "init=zero needs store=accumulate");
  }
  if (cmd.init == BufferInit::load && cmd.store == BufferStore::accumulate) {
    fail(ErrorCode::BadArgument, "init=load needs store=assign");
  }
  for (const auto& b : cmd.buffer_inames) {
    if (!k.domain.contains(b)) fail(ErrorCode::UnknownIname, "no iname named '" + b + "'");
  }
  std::vector<std::size_t> touching;
  std::vector<std::vector<Expr>> accesses;
  for (std::size_t i = 0; i < k.instructions.size(); ++i) {
    const auto& insn = k.instructions[i];
    if (!cmd.within.matches(insn, k.rules)) continue;
    bool touches = false;
    if (insn.assignee == cmd.var) {
      touches = true;
      accesses.push_back(insn.indices);
    }
    bool direct_read = false;
    visit(insn.rhs, [&](const Expr& x) {
      if (const auto* s = x.as<Subscript>(); s && s->array == cmd.var) {
        direct_read = true;
        accesses.push_back(s->indices);
      }
    });
    if (!direct_read && accessed_arrays(expand_rules(insn.rhs, k.rules)).count(cmd.var)) {
      fail(ErrorCode::BadArgument,
           "'" + insn.id + "' reads '" + cmd.var + "' through a rule; precompute it first");
    }
    touches = touches || direct_read;
    if (!touches) continue;
    if (cmd.store == BufferStore::accumulate && (direct_read || !insn.is_update)) {
      fail(ErrorCode::MixedAccess,
           "'" + insn.id + "' does not only accumulate into '" + cmd.var + "'");
    }
    touching.push_back(i);
  }
  const std::size_t rank = arr->rank();
  struct Axis {
    bool buffered = false;
    int64_t lo = 0;
    int64_t extent = 1;
    Expr context;
  };
  std::vector<Axis> axes(rank);
  std::set<std::string> context_inames;
  for (std::size_t p = 0; p < rank && accesses.empty(); ++p) {
    // Nothing to redirect: the buffer covers the whole array.
    auto extent = as_integer(simplify_index(arr->shape[p]));
    if (!extent) {
      fail(ErrorCode::NonLiteralExtent, "'" + cmd.var + "' has no matching access and axis " +
                                            std::to_string(p) + " has no literal extent");
    }
    axes[p].buffered = true;
    axes[p].extent = *extent;
  }
  for (std::size_t p = 0; p < rank && !accesses.empty(); ++p) {
    bool mentions = false, differs = false;
    for (const auto& idx : accesses) {
      for (const auto& v : free_variables(idx[p])) mentions = mentions || contains(cmd.buffer_inames, v);
      differs = differs || !(simplify_index(idx[p]) == simplify_index(accesses.front()[p]));
    }
    axes[p].buffered = mentions || differs;
    if (!axes[p].buffered) {
      axes[p].context = simplify_index(accesses.front()[p]);
      auto in = inames_in(k, axes[p].context);
      context_inames.insert(in.begin(), in.end());
      continue;
    }
    int64_t lo = 0, hi = -1;
    bool first = true;
    for (const auto& idx : accesses) {
      auto a = affine_index(idx[p], k.domain);
      if (!a) {
        fail(ErrorCode::FootprintNotAffine, "index " + to_string(idx[p]) + " of '" + cmd.var +
                                                "' is not iname+constant");
      }
      auto [l, h] = index_range(k, *a);
      lo = first ? l : std::min(lo, l);
      hi = first ? h : std::max(hi, h);
      first = false;
    }
    axes[p].lo = lo;
    axes[p].extent = hi - lo + 1;
  }
  const std::string buf = cmd.var + "_buf";
  require_fresh_name(k, buf, "temporary");
  Kernel out = k;
  ArrayDescriptor temp;
  temp.name = buf;
  temp.dtype = arr->dtype;
  temp.space = AddressSpace::priv;
  std::vector<std::string> names;
  for (std::size_t p = 0; p < rank; ++p) {
    if (!axes[p].buffered) continue;
    temp.shape.push_back(Expr::i32(axes[p].extent));
    names.push_back(arr->axis_names[p]);
  }
  temp.set_default_layout();
  temp.axis_names = names;

  auto buffer_index = [&](const std::vector<Expr>& idx) {
    std::vector<Expr> out_idx;
    for (std::size_t p = 0; p < rank; ++p) {
      if (axes[p].buffered) out_idx.push_back(simplify_index(idx[p] - Expr::i32(axes[p].lo)));
    }
    return out_idx;
  };
  for (auto i : touching) {
    auto& insn = out.instructions[i];
    insn.rhs = rewrite(insn.rhs, [&](const Expr& x) -> std::optional<Expr> {
      const auto* s = x.as<Subscript>();
      if (!s || s->array != cmd.var) return std::nullopt;
      return Expr::subscript(buf, buffer_index(s->indices));
    });
    if (insn.assignee == cmd.var) {
      insn.assignee = buf;
      insn.indices = buffer_index(insn.indices);
    }
  }

  auto make_loop = [&](const std::string& suffix, std::vector<Expr>& buf_idx,
                       std::vector<Expr>& arr_idx, std::set<std::string>& within) {
    within = context_inames;
    for (std::size_t p = 0; p < rank; ++p) {
      if (!axes[p].buffered) {
        arr_idx.push_back(axes[p].context);
        continue;
      }
      const std::string iname = cmd.var + "_" + arr->axis_names[p] + suffix;
      ensure_iname(out, iname, axes[p].extent);
      within.insert(iname);
      buf_idx.push_back(Expr::var(iname));
      arr_idx.push_back(simplify_index(Expr::var(iname) + Expr::i32(axes[p].lo)));
    }
  };
  Instruction init;
  init.id = unique_id(out, buf + "_init");
  init.assignee = buf;
  {
    std::vector<Expr> arr_idx;
    make_loop("_init", init.indices, arr_idx, init.within);
    init.rhs = cmd.init == BufferInit::zero
                   ? Expr::literal(0.0, arr->dtype)
                   : Expr::subscript(cmd.var, std::move(arr_idx));
  }
  Instruction store;
  store.id = unique_id(out, buf + "_store");
  store.assignee = cmd.var;
  {
    std::vector<Expr> buf_idx;
    make_loop("_store", buf_idx, store.indices, store.within);
    store.rhs = Expr::subscript(buf, std::move(buf_idx));
    store.is_update = cmd.store == BufferStore::accumulate;
  }
  std::set<std::string> touched_ids;
  for (auto i : touching) {
    out.instructions[i].depends_on.insert(init.id);
    touched_ids.insert(out.instructions[i].id);
    store.depends_on.insert(out.instructions[i].id);
  }
  for (auto& insn : out.instructions) {
    if (touched_ids.count(insn.id)) continue;
    for (const auto& d : insn.depends_on) {
      if (touched_ids.count(d)) {
        insn.depends_on.insert(store.id);
        break;
      }
    }
  }
  // Earlier writers of the array outside the buffered region precede the load.
  for (auto i : touching) {
    for (const auto& d : k.instructions[i].depends_on) {
      const auto* dep = k.find_instruction(d);
      if (!touched_ids.count(d) && dep && dep->assignee == cmd.var) init.depends_on.insert(d);
    }
  }
  const std::size_t first = touching.empty() ? k.instructions.size() : touching.front();
  const std::size_t after = touching.empty() ? k.instructions.size() : touching.back() + 1;
  out.temporaries.push_back(std::move(temp));
  store.depends_on.insert(init.id);
  out.instructions.insert(out.instructions.begin() + static_cast<std::ptrdiff_t>(after),
                          std::move(store));
  out.instructions.insert(out.instructions.begin() + static_cast<std::ptrdiff_t>(first),
                          std::move(init));
  return finish(std::move(out), "buffer_array");
}

Kernel collect_common_factors(const Kernel& k, const std::string& var, Diagnostics* diags) {
  const auto* temp = k.find_temporary(var);
  if (!temp) fail(ErrorCode::BadArgument, "'" + var + "' is not a temporary");
  std::vector<std::size_t> updates;
  std::vector<std::size_t> readers;
  for (std::size_t i = 0; i < k.instructions.size(); ++i) {
    const auto& insn = k.instructions[i];
    if (insn.assignee == var) {
      if (insn.is_update) {
        updates.push_back(i);
      } else {
        auto v = as_integer(insn.rhs);
        const auto* lit = insn.rhs.as<Literal>();
        if (!(lit && lit->value == 0.0) && !(v && *v == 0)) {
          fail(ErrorCode::BadArgument,
               "'" + var + "' must start from zero; '" + insn.id + "' stores another value");
        }
      }
    }
    visit(expand_rules(insn.rhs, k.rules), [&](const Expr& x) {
      if (const auto* s = x.as<Subscript>(); s && s->array == var) {
        if (readers.empty() || readers.back() != i) readers.push_back(i);
      }
    });
  }
  if (readers.size() != 1) {
    fail(ErrorCode::BadArgument, "'" + var + "' must have exactly one reader, found " +
                                     std::to_string(readers.size()));
  }
  if (updates.empty()) {
    note(diags, "NoMatch", "collect_common_factors " + var + " found no accumulation");
    return k;
  }
  Kernel out = k;
  auto& consumer = out.instructions[readers.front()];
  const Subscript* read = nullptr;
  visit(consumer.rhs, [&](const Expr& x) {
    if (const auto* s = x.as<Subscript>(); s && s->array == var && !read) read = s;
  });
  if (!read || !(consumer.rhs == Expr::subscript(var, read->indices))) {
    fail(ErrorCode::BadArgument, "the reader of '" + var + "' must copy it out unchanged");
  }
  const std::vector<Expr> consumer_idx = read->indices;
  const std::size_t rank = consumer_idx.size();

  auto placeholder = [](std::size_t p) { return "B_" + std::to_string(p); };
  // Per update: iname -> placeholder, and its inverse.
  std::vector<std::map<std::string, Expr>> to_ph(updates.size()), from_ph(updates.size());
  for (std::size_t u = 0; u < updates.size(); ++u) {
    const auto& insn = out.instructions[updates[u]];
    for (std::size_t p = 0; p < rank && p < insn.indices.size(); ++p) {
      if (const auto* v = insn.indices[p].as<Variable>()) {
        to_ph[u][v->name] = Expr::var(placeholder(p));
        from_ph[u][placeholder(p)] = Expr::var(v->name);
      }
    }
  }
  std::map<std::string, Expr> ph_to_consumer;
  for (std::size_t p = 0; p < rank; ++p) ph_to_consumer[placeholder(p)] = consumer_idx[p];

  std::set<std::string> written;
  for (const auto& insn : out.instructions) written.insert(insn.assignee);

  auto admissible = [&](const Expr& c) {
    if (c.as<Literal>()) return false;
    for (const auto& a : accessed_arrays(expand_rules(c, out.rules))) {
      if (written.count(a)) return false;
    }
    for (const auto& v : free_variables(c)) {
      if (v.rfind("B_", 0) == 0) continue;
      if (!out.domain.contains(v)) continue;
      // The factor must be fixed for one life of the buffer: every writer
      // and the consumer run inside the same iteration of `v`.
      if (!consumer.within.count(v)) return false;
      for (const auto& insn : out.instructions) {
        if (insn.assignee == var && !insn.within.count(v)) return false;
      }
    }
    return true;
  };

  std::size_t hoisted = 0;
  for (;;) {
    const auto candidates =
        product_factors(substitute(out.instructions[updates.front()].rhs, to_ph[0]));
    std::optional<Expr> chosen;
    for (const auto& c : candidates) {
      if (!admissible(c)) continue;
      bool everywhere = true;
      for (std::size_t u = 0; u < updates.size() && everywhere; ++u) {
        const auto factors = product_factors(substitute(out.instructions[updates[u]].rhs, to_ph[u]));
        everywhere = std::find(factors.begin(), factors.end(), c) != factors.end();
      }
      if (everywhere) {
        chosen = c;
        break;
      }
    }
    if (!chosen) break;
    for (std::size_t u = 0; u < updates.size(); ++u) {
      auto& insn = out.instructions[updates[u]];
      auto res = collect_common_factors_expr({insn.rhs}, substitute(*chosen, from_ph[u]));
      insn.rhs = res.terms.front();
    }
    consumer.rhs = consumer.rhs * substitute(*chosen, ph_to_consumer);
    ++hoisted;
  }
  if (hoisted == 0) {
    note(diags, "NoMatch", "collect_common_factors " + var + " found no common factor");
    return k;
  }
  return finish(std::move(out), "collect_common_factors");
}

// ---------------------------------------------------------------------------
// dispatch

std::vector<Kernel> apply_command(const std::vector<Kernel>& kernels, const TransformCommand& cmd,
                                  Diagnostics* diags) {
  if (const auto* f = std::get_if<FuseCommand>(&cmd)) {
    return {fuse_kernels(kernels, f->suffixes, f->name)};
  }
  if (kernels.size() != 1) {
    fail(ErrorCode::BadArgument, std::string(command_name(cmd)) + " needs exactly one kernel, have " +
                                     std::to_string(kernels.size()) + "; fuse first");
  }
  const Kernel& k = kernels.front();
  Kernel out = std::visit(
      [&](const auto& c) -> Kernel {
        using T = std::decay_t<decltype(c)>;
        if constexpr (std::is_same_v<T, FuseCommand>) {
          return k;
        } else if constexpr (std::is_same_v<T, FixParametersCommand>) {
          return fix_parameters(k, c.values);
        } else if constexpr (std::is_same_v<T, AssumeCommand>) {
          return assume(k, c.constraint);
        } else if constexpr (std::is_same_v<T, PrioritizeLoopsCommand>) {
          return prioritize_loops(k, c.order);
        } else if constexpr (std::is_same_v<T, TagInamesCommand>) {
          return tag_inames(k, c.tags);
        } else if constexpr (std::is_same_v<T, RenameInameCommand>) {
          return rename_iname(k, c, diags);
        } else if constexpr (std::is_same_v<T, SetArrayAxisNamesCommand>) {
          return set_array_axis_names(k, c.array, c.names);
        } else if constexpr (std::is_same_v<T, SplitArrayAxisCommand>) {
          return split_array_axis(k, c.array, c.axis, c.factor);
        } else if constexpr (std::is_same_v<T, TagArrayAxesCommand>) {
          return tag_array_axes(k, c.array, c.tags);
        } else if constexpr (std::is_same_v<T, AssignmentToSubstCommand>) {
          return assignment_to_subst(k, c, diags);
        } else if constexpr (std::is_same_v<T, PrecomputeCommand>) {
          return precompute(k, c, diags);
        } else if constexpr (std::is_same_v<T, AddPrefetchCommand>) {
          return add_prefetch(k, c, diags);
        } else if constexpr (std::is_same_v<T, AliasTemporariesCommand>) {
          return alias_temporaries(k, c.names);
        } else if constexpr (std::is_same_v<T, BufferArrayCommand>) {
          return buffer_array(k, c, diags);
        } else {
          return collect_common_factors(k, c.var, diags);
        }
      },
      cmd);
  return {std::move(out)};
}

std::vector<Kernel> apply_script(std::vector<Kernel> kernels,
                                 const std::vector<TransformCommand>& script, Diagnostics* diags,
                                 const StepObserver& observer) {
  for (std::size_t n = 0; n < script.size(); ++n) {
    kernels = apply_command(kernels, script[n], diags);
    if (observer) observer(n, script[n], kernels);
  }
  return kernels;
}

}  // namespace loopforge
