#include "loopforge/kernel.hpp"

#include <algorithm>
#include <functional>
#include <numeric>
#include <sstream>

namespace loopforge {

// ---------------------------------------------------------------------------
// small types

const Iname* LoopDomain::find(std::string_view name) const {
  for (const auto& i : inames) {
    if (i.name == name) return &i;
  }
  return nullptr;
}

const Expr& LoopDomain::extent(std::string_view name) const {
  if (const auto* i = find(name)) return i->extent;
  fail(ErrorCode::UnknownIname, "no iname named '" + std::string(name) + "'");
}

void LoopDomain::add(Iname iname, const std::optional<std::string>& after) {
  if (after) {
    for (auto it = inames.begin(); it != inames.end(); ++it) {
      if (it->name == *after) {
        inames.insert(it + 1, std::move(iname));
        return;
      }
    }
  }
  inames.push_back(std::move(iname));
}

void LoopDomain::remove(std::string_view name) {
  inames.erase(std::remove_if(inames.begin(), inames.end(),
                              [&](const Iname& i) { return i.name == name; }),
               inames.end());
}

std::string_view to_string(AddressSpace s) {
  switch (s) {
    case AddressSpace::global: return "global";
    case AddressSpace::scratchpad: return "scratchpad";
    case AddressSpace::priv: return "private";
  }
  return "?";
}

namespace {

AddressSpace parse_space(std::string_view s) {
  if (s == "global") return AddressSpace::global;
  if (s == "scratchpad") return AddressSpace::scratchpad;
  if (s == "private") return AddressSpace::priv;
  fail(ErrorCode::BadArgument, "unknown address space '" + std::string(s) + "'");
}

DType parse_dtype(std::string_view s) {
  if (s == "f32") return DType::f32;
  if (s == "i32") return DType::i32;
  fail(ErrorCode::BadArgument, "unknown dtype '" + std::string(s) + "'");
}

}  // namespace

std::string DimTag::str() const { return is_vec ? "vec" : "N" + std::to_string(rank); }

void ArrayDescriptor::set_default_layout() {
  axis_names.clear();
  dim_tags.clear();
  for (std::size_t a = 0; a < shape.size(); ++a) {
    axis_names.push_back("dim" + std::to_string(a));
    dim_tags.push_back(DimTag::nest(static_cast<int>(a)));
  }
}

std::optional<std::size_t> ArrayDescriptor::vec_axis() const {
  for (std::size_t a = 0; a < dim_tags.size(); ++a) {
    if (dim_tags[a].is_vec) return a;
  }
  return std::nullopt;
}

std::string_view arg_name(const KernelArg& arg) {
  return std::visit([](const auto& a) -> std::string_view { return a.name; }, arg);
}

std::string InameTag::str() const {
  switch (kind) {
    case Kind::sequential: return "seq";
    case Kind::core: return "core." + std::to_string(axis);
    case Kind::lane: return "lane." + std::to_string(axis);
    case Kind::vec: return "vec";
    case Kind::unroll: return "unroll";
  }
  return "?";
}

InameTag InameTag::parse(std::string_view text) {
  if (text == "seq" || text == "sequential") return sequential();
  if (text == "vec") return vec();
  if (text == "unroll") return unroll();
  auto axis_of = [&](std::size_t prefix) {
    const std::string digits(text.substr(prefix));
    if (digits.empty() || !std::all_of(digits.begin(), digits.end(), ::isdigit)) {
      fail(ErrorCode::BadArgument, "bad iname tag '" + std::string(text) + "'");
    }
    return std::stoi(digits);
  };
  if (text.rfind("core.", 0) == 0) return core(axis_of(5));
  if (text.rfind("lane.", 0) == 0) return lane(axis_of(5));
  fail(ErrorCode::BadArgument, "bad iname tag '" + std::string(text) + "'");
}

std::string Assumption::str() const { return param + " " + op + " " + std::to_string(value); }

bool Assumption::implies_positive() const {
  if (op == ">") return value >= 0;
  if (op == ">=") return value >= 1;
  if (op == "==") return value >= 1;
  return false;
}

// ---------------------------------------------------------------------------
// kernel lookups

const ArrayDescriptor* Kernel::find_array(std::string_view name) const {
  for (const auto& a : args) {
    if (const auto* d = std::get_if<ArrayDescriptor>(&a); d && d->name == name) return d;
  }
  return find_temporary(name);
}

ArrayDescriptor* Kernel::find_array(std::string_view name) {
  return const_cast<ArrayDescriptor*>(std::as_const(*this).find_array(name));
}

const ArrayDescriptor* Kernel::find_temporary(std::string_view name) const {
  for (const auto& t : temporaries) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

const ScalarParam* Kernel::find_scalar(std::string_view name) const {
  for (const auto& a : args) {
    if (const auto* s = std::get_if<ScalarParam>(&a); s && s->name == name) return s;
  }
  return nullptr;
}

const Instruction* Kernel::find_instruction(std::string_view id) const {
  for (const auto& insn : instructions) {
    if (insn.id == id) return &insn;
  }
  return nullptr;
}

std::optional<std::size_t> Kernel::instruction_index(std::string_view id) const {
  for (std::size_t i = 0; i < instructions.size(); ++i) {
    if (instructions[i].id == id) return i;
  }
  return std::nullopt;
}

InameTag Kernel::tag_of(std::string_view iname) const {
  auto it = iname_tags.find(std::string(iname));
  return it == iname_tags.end() ? InameTag::sequential() : it->second;
}

bool Kernel::is_param_positive(std::string_view param) const {
  return std::any_of(assumptions.begin(), assumptions.end(), [&](const Assumption& a) {
    return a.param == param && a.implies_positive();
  });
}

const std::vector<std::string>* Kernel::alias_group(std::string_view temp) const {
  for (const auto& group : aliases) {
    if (std::find(group.begin(), group.end(), temp) != group.end()) return &group;
  }
  return nullptr;
}

std::set<std::string> Kernel::declared_names() const {
  std::set<std::string> out(domain.parameters.begin(), domain.parameters.end());
  for (const auto& i : domain.inames) out.insert(i.name);
  for (const auto& a : args) out.insert(std::string(arg_name(a)));
  for (const auto& t : temporaries) out.insert(t.name);
  for (const auto& [name, rule] : rules) out.insert(name);
  for (const auto& insn : instructions) out.insert(insn.id);
  return out;
}

std::set<std::string> arrays_read(const Instruction& insn, const RuleRegistry& rules) {
  auto out = accessed_arrays(expand_rules(insn.rhs, rules));
  if (insn.is_update) out.insert(insn.assignee);
  return out;
}

bool reads_array(const Instruction& insn, const RuleRegistry& rules, std::string_view array) {
  return arrays_read(insn, rules).count(std::string(array)) != 0;
}

DType infer_dtype(const Kernel& k, const Expr& e, const std::map<std::string, DType>& locals) {
  return std::visit(
      [&](const auto& n) -> DType {
        using T = std::decay_t<decltype(n)>;
        if constexpr (std::is_same_v<T, Literal>) {
          return n.dtype;
        } else if constexpr (std::is_same_v<T, Variable>) {
          if (auto it = locals.find(n.name); it != locals.end()) return it->second;
          if (const auto* s = k.find_scalar(n.name)) return s->dtype;
          return DType::i32;
        } else if constexpr (std::is_same_v<T, Subscript>) {
          const auto* a = k.find_array(n.array);
          return a ? a->dtype : DType::f32;
        } else if constexpr (std::is_same_v<T, Negate>) {
          return infer_dtype(k, n.operand, locals);
        } else if constexpr (std::is_same_v<T, BinaryOp>) {
          const bool f = infer_dtype(k, n.lhs, locals) == DType::f32 ||
                         infer_dtype(k, n.rhs, locals) == DType::f32;
          return f ? DType::f32 : DType::i32;
        } else if constexpr (std::is_same_v<T, Call>) {
          if (n.function == "mod" || n.function == "floordiv") return DType::i32;
          if (n.function == "min" || n.function == "max" || n.function == "abs") {
            for (const auto& a : n.args) {
              if (infer_dtype(k, a, locals) == DType::f32) return DType::f32;
            }
            return DType::i32;
          }
          return DType::f32;
        } else {
          const auto& rule = k.rules.at(n.rule);
          std::map<std::string, DType> inner;
          for (std::size_t i = 0; i < rule.params.size() && i < n.args.size(); ++i) {
            inner[rule.params[i]] = infer_dtype(k, n.args[i], locals);
          }
          return infer_dtype(k, rule.body, inner);
        }
      },
      e.node().data);
}

std::optional<int64_t> footprint_bytes(const ArrayDescriptor& desc) {
  int64_t n = 4;
  for (const auto& s : desc.shape) {
    auto v = as_integer(simplify_index(s));
    if (!v) return std::nullopt;
    n *= *v;
  }
  return n;
}

// ---------------------------------------------------------------------------
// layout

std::vector<int64_t> layout_strides(const ArrayDescriptor& desc, const std::vector<int64_t>& shape) {
  const std::size_t r = shape.size();
  std::vector<int64_t> strides(r, 0);
  std::vector<std::size_t> order;
  if (auto v = desc.vec_axis()) order.push_back(*v);
  std::vector<std::size_t> nested;
  for (std::size_t a = 0; a < r; ++a) {
    if (a >= desc.dim_tags.size() || !desc.dim_tags[a].is_vec) nested.push_back(a);
  }
  std::stable_sort(nested.begin(), nested.end(), [&](std::size_t x, std::size_t y) {
    const int rx = x < desc.dim_tags.size() ? desc.dim_tags[x].rank : static_cast<int>(x);
    const int ry = y < desc.dim_tags.size() ? desc.dim_tags[y].rank : static_cast<int>(y);
    return rx < ry;
  });
  order.insert(order.end(), nested.begin(), nested.end());
  int64_t stride = 1;
  for (std::size_t a : order) {
    strides[a] = stride;
    stride *= shape[a];
  }
  return strides;
}

std::vector<Expr> logical_shape(const ArrayDescriptor& desc) {
  std::vector<Expr> shape = desc.shape;
  for (auto it = desc.splits.rbegin(); it != desc.splits.rend(); ++it) {
    const Expr merged = simplify_index(Expr::i32(it->factor) * shape[it->axis + 1]);
    shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(it->axis));
    shape[it->axis] = merged;
  }
  return shape;
}

std::vector<int64_t> to_current_index(const ArrayDescriptor& desc, std::vector<int64_t> idx) {
  for (const auto& s : desc.splits) {
    const int64_t v = idx[s.axis];
    idx[s.axis] = v % s.factor;
    idx.insert(idx.begin() + static_cast<std::ptrdiff_t>(s.axis) + 1, v / s.factor);
  }
  return idx;
}

std::vector<int64_t> to_logical_index(const ArrayDescriptor& desc, std::vector<int64_t> idx) {
  for (auto it = desc.splits.rbegin(); it != desc.splits.rend(); ++it) {
    const int64_t merged = idx[it->axis] + it->factor * idx[it->axis + 1];
    idx.erase(idx.begin() + static_cast<std::ptrdiff_t>(it->axis) + 1);
    idx[it->axis] = merged;
  }
  return idx;
}

// ---------------------------------------------------------------------------
// consistency

namespace {

class Checker {
 public:
  explicit Checker(const Kernel& k) : k_(k) {}

  Diagnostics run() {
    check_names();
    check_domain();
    check_arrays();
    check_rules();
    check_instructions();
    check_dependencies();
    check_tags();
    check_priority_and_aliases();
    return std::move(out_);
  }

 private:
  void report(std::string code, std::string message) {
    out_.push_back({std::move(code), std::move(message)});
  }

  void check_names() {
    std::map<std::string, int> count;
    for (const auto& p : k_.domain.parameters) ++count[p];
    for (const auto& i : k_.domain.inames) ++count[i.name];
    for (const auto& a : k_.args) ++count[std::string(arg_name(a))];
    for (const auto& t : k_.temporaries) ++count[t.name];
    for (const auto& [name, n] : count) {
      if (n > 1) report("DuplicateName", "'" + name + "' is declared " + std::to_string(n) + " times");
    }
    std::set<std::string> ids;
    for (const auto& insn : k_.instructions) {
      if (!ids.insert(insn.id).second) {
        report("DuplicateName", "instruction id '" + insn.id + "' is not unique");
      }
    }
  }

  void check_extent(const Expr& extent, const std::string& what) {
    for (const auto& v : free_variables(extent)) {
      if (!k_.domain.parameters.count(v)) {
        report("UnknownVariable", what + " extent references '" + v + "', which is not a parameter");
      }
    }
    visit(extent, [&](const Expr& x) {
      if (x.as<Subscript>() || x.as<RuleInvocation>()) {
        report("BadExtent", what + " extent must be an integer expression over parameters");
      }
    });
  }

  void check_domain() {
    for (const auto& i : k_.domain.inames) check_extent(i.extent, "iname '" + i.name + "'");
  }

  void check_array(const ArrayDescriptor& d) {
    for (const auto& s : d.shape) check_extent(s, "array '" + d.name + "'");
    if (d.axis_names.size() != d.rank()) {
      report("RankMismatch", "array '" + d.name + "' has " + std::to_string(d.axis_names.size()) +
                                 " axis names for rank " + std::to_string(d.rank()));
    }
    if (d.dim_tags.size() != d.rank()) {
      report("RankMismatch", "array '" + d.name + "' has " + std::to_string(d.dim_tags.size()) +
                                 " dim tags for rank " + std::to_string(d.rank()));
      return;
    }
    std::vector<int> ranks;
    int vecs = 0;
    for (std::size_t a = 0; a < d.rank(); ++a) {
      if (d.dim_tags[a].is_vec) {
        ++vecs;
        auto w = as_integer(d.shape[a]);
        if (!w || *w != kVectorWidth) {
          report("VecExtentMismatch", "vec axis of '" + d.name + "' must have extent " +
                                          std::to_string(kVectorWidth));
        }
      } else {
        ranks.push_back(d.dim_tags[a].rank);
      }
    }
    if (vecs > 1) report("MultipleVecAxes", "array '" + d.name + "' has more than one vec axis");
    std::sort(ranks.begin(), ranks.end());
    for (std::size_t r = 0; r < ranks.size(); ++r) {
      if (ranks[r] != static_cast<int>(r)) {
        report("BadPermutation", "nesting ranks of '" + d.name + "' are not a permutation");
        break;
      }
    }
  }

  void check_arrays() {
    for (const auto& a : k_.args) {
      if (const auto* d = std::get_if<ArrayDescriptor>(&a)) {
        if (d->space != AddressSpace::global) {
          report("BadSpace", "argument '" + d->name + "' must live in global memory");
        }
        check_array(*d);
      }
    }
    for (const auto& t : k_.temporaries) {
      if (t.space == AddressSpace::global) {
        report("BadSpace", "temporary '" + t.name + "' cannot live in global memory");
      }
      check_array(t);
    }
  }

  bool visible_scalar(const std::string& name) const {
    return k_.domain.contains(name) || k_.domain.parameters.count(name) || k_.find_scalar(name);
  }

  void check_accesses(const Expr& e, const std::string& where) {
    visit(e, [&](const Expr& x) {
      if (const auto* s = x.as<Subscript>()) {
        const auto* d = k_.find_array(s->array);
        if (!d) {
          report("UnknownVariable", where + " accesses undeclared array '" + s->array + "'");
        } else if (d->rank() != s->indices.size()) {
          report("RankMismatch", where + " accesses '" + s->array + "' with " +
                                     std::to_string(s->indices.size()) + " indices, rank is " +
                                     std::to_string(d->rank()));
        }
      } else if (const auto* inv = x.as<RuleInvocation>()) {
        const auto* r = k_.rules.find(inv->rule);
        if (!r) {
          report("UnknownRule", where + " invokes undeclared rule '" + inv->rule + "'");
        } else if (r->params.size() != inv->args.size()) {
          report("ArityMismatch", where + " invokes '" + inv->rule + "' with wrong arity");
        }
      }
    });
  }

  void check_rules() {
    try {
      k_.rules.validate();
    } catch (const Error& err) {
      report(std::string(to_string(err.code())), err.what());
    }
    for (const auto& [name, rule] : k_.rules) {
      const std::set<std::string> params(rule.params.begin(), rule.params.end());
      if (params.size() != rule.params.size()) {
        report("DuplicateName", "rule '" + name + "' repeats a parameter");
      }
      for (const auto& v : free_variables(rule.body)) {
        if (!params.count(v) && !visible_scalar(v)) {
          report("UnknownVariable", "rule '" + name + "' references undeclared '" + v + "'");
        }
      }
      check_accesses(rule.body, "rule '" + name + "'");
    }
  }

  void check_instructions() {
    for (const auto& insn : k_.instructions) {
      const std::string where = "instruction '" + insn.id + "'";
      for (const auto& i : insn.within) {
        if (!k_.domain.contains(i)) report("UnknownIname", where + " is within unknown iname '" + i + "'");
      }
      const auto* target = k_.find_array(insn.assignee);
      if (!target) {
        if (k_.find_scalar(insn.assignee) || k_.domain.parameters.count(insn.assignee)) {
          report("ReadOnlyTarget", where + " assigns to scalar argument '" + insn.assignee + "'");
        } else {
          report("UnknownVariable", where + " assigns to undeclared '" + insn.assignee + "'");
        }
      } else if (target->rank() != insn.indices.size()) {
        report("RankMismatch", where + " assigns '" + insn.assignee + "' with " +
                                   std::to_string(insn.indices.size()) + " indices");
      }
      std::set<std::string> used = free_variables(insn.rhs);
      for (const auto& idx : insn.indices) {
        for (const auto& v : free_variables(idx)) used.insert(v);
      }
      for (const auto& v : used) {
        if (insn.within.count(v)) continue;
        if (k_.domain.contains(v)) {
          report("UnknownIname", where + " uses iname '" + v + "' outside its within set");
        } else if (!k_.domain.parameters.count(v) && !k_.find_scalar(v)) {
          report("UnknownIname", where + " references undeclared '" + v + "'");
        }
      }
      check_accesses(insn.rhs, where);
    }
  }

  void check_dependencies() {
    std::map<std::string, const Instruction*> by_id;
    for (const auto& insn : k_.instructions) by_id[insn.id] = &insn;
    for (const auto& insn : k_.instructions) {
      for (const auto& d : insn.depends_on) {
        if (!by_id.count(d)) {
          report("UnknownDependency", "instruction '" + insn.id + "' depends on unknown '" + d + "'");
        }
      }
    }
    std::map<std::string, int> state;
    std::vector<std::string> stack;
    bool cycle_found = false;
    std::function<void(const std::string&)> dfs = [&](const std::string& id) {
      state[id] = 1;
      stack.push_back(id);
      for (const auto& d : by_id[id]->depends_on) {
        if (!by_id.count(d) || cycle_found) continue;
        if (state[d] == 1) {
          auto from = std::find(stack.begin(), stack.end(), d);
          std::string path;
          for (auto it = from; it != stack.end(); ++it) path += *it + " -> ";
          report("DependencyCycle", "dependency cycle " + path + d);
          cycle_found = true;
        } else if (state[d] == 0) {
          dfs(d);
        }
      }
      stack.pop_back();
      state[id] = 2;
    };
    for (const auto& insn : k_.instructions) {
      if (state[insn.id] == 0 && !cycle_found) dfs(insn.id);
    }
  }

  void check_tags() {
    std::map<std::pair<int, int>, std::optional<Expr>> axis_extent;
    for (const auto& [iname, tag] : k_.iname_tags) {
      const auto* i = k_.domain.find(iname);
      if (!i) {
        report("UnknownIname", "tag on unknown iname '" + iname + "'");
        continue;
      }
      if (tag.kind == InameTag::Kind::vec) {
        auto w = as_integer(i->extent);
        if (!w || *w != kVectorWidth) {
          report("VecExtentMismatch", "vec iname '" + iname + "' must have extent " +
                                          std::to_string(kVectorWidth));
        }
      }
      if (tag.is_hardware()) {
        auto key = std::make_pair(static_cast<int>(tag.kind), tag.axis);
        auto [it, inserted] = axis_extent.emplace(key, i->extent);
        if (!inserted && !(*it->second == i->extent)) {
          report("AxisConflict", "inames on " + tag.str() + " have different extents");
        }
      }
    }
    for (const auto& insn : k_.instructions) {
      std::map<std::pair<int, int>, std::string> seen;
      for (const auto& i : insn.within) {
        const auto tag = k_.tag_of(i);
        if (!tag.is_hardware()) continue;
        auto [it, inserted] = seen.emplace(std::make_pair(static_cast<int>(tag.kind), tag.axis), i);
        if (!inserted) {
          report("AxisConflict", "instruction '" + insn.id + "' is within '" + it->second +
                                     "' and '" + i + "', both on " + tag.str());
        }
      }
    }
  }

  void check_priority_and_aliases() {
    for (const auto& p : k_.loop_priority) {
      if (!k_.domain.contains(p)) report("UnknownIname", "loop priority names unknown iname '" + p + "'");
    }
    for (const auto& a : k_.assumptions) {
      if (!k_.domain.parameters.count(a.param)) {
        report("UnknownParameter", "assumption on unknown parameter '" + a.param + "'");
      }
    }
    std::set<std::string> grouped;
    for (const auto& group : k_.aliases) {
      const ArrayDescriptor* first = nullptr;
      for (const auto& name : group) {
        if (!grouped.insert(name).second) {
          report("AliasConflict", "'" + name + "' belongs to more than one alias group");
        }
        const auto* t = k_.find_temporary(name);
        if (!t) {
          report("UnknownVariable", "alias group names unknown temporary '" + name + "'");
          continue;
        }
        if (!first) {
          first = t;
          continue;
        }
        if (t->space != first->space) {
          report("SpaceMismatch", "aliased '" + name + "' and '" + first->name + "' differ in space");
        }
        const auto fa = footprint_bytes(*t);
        const auto fb = footprint_bytes(*first);
        const bool same = fa && fb ? *fa == *fb : t->shape == first->shape;
        if (!same || t->dtype != first->dtype) {
          report("FootprintMismatch",
                 "aliased '" + name + "' and '" + first->name + "' differ in footprint");
        }
      }
    }
  }

  const Kernel& k_;
  Diagnostics out_;
};

}  // namespace

Diagnostics check_consistency(const Kernel& k) { return Checker(k).run(); }

void require_consistent(const Kernel& k, std::string_view context) {
  const auto diags = check_consistency(k);
  if (diags.empty()) return;
  std::string msg = std::string(context) + " produced an inconsistent kernel:";
  for (const auto& d : diags) msg += "\n  " + d.code + ": " + d.message;
  fail(ErrorCode::InconsistentKernel, msg);
}

std::map<std::string, Expr> domain_projection(const Kernel& k, const std::set<std::string>& subset) {
  std::map<std::string, Expr> out;
  for (const auto& name : subset) out.emplace(name, k.domain.extent(name));
  return out;
}

// ---------------------------------------------------------------------------
// dump format

namespace {

template <class Range, class Fn>
std::string join(const Range& items, std::string_view sep, Fn fn) {
  std::string out;
  bool first = true;
  for (const auto& item : items) {
    if (!first) out += sep;
    first = false;
    out += fn(item);
  }
  return out;
}

std::string join_names(const auto& items, std::string_view sep = ", ") {
  return join(items, sep, [](const std::string& s) { return s; });
}

std::string dump_array_fields(const ArrayDescriptor& d) {
  std::string out = d.name + " " + std::string(to_string(d.dtype)) + " " +
                    std::string(to_string(d.space));
  out += " | shape " + join(d.shape, ", ", [](const Expr& e) { return to_string(e); });
  out += " | axes " + join_names(d.axis_names);
  out += " | layout " + join(d.dim_tags, ", ", [](const DimTag& t) { return t.str(); });
  out += " | splits " + join(d.splits, ", ", [](const AxisSplit& s) {
           return std::to_string(s.axis) + ":" + std::to_string(s.factor);
         });
  return out;
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (;;) {
    const auto pos = s.find(sep, start);
    out.push_back(trim(s.substr(start, pos == std::string_view::npos ? pos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

std::vector<std::string> split_list(std::string_view s, char sep = ',') {
  if (trim(s).empty()) return {};
  return split(s, sep);
}

/// Splits on top-level commas (not inside brackets or parentheses).
std::vector<std::string> split_exprs(std::string_view s) {
  std::vector<std::string> out;
  if (trim(s).empty()) return out;
  int depth = 0;
  std::size_t start = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '(' || s[i] == '[') ++depth;
    if (s[i] == ')' || s[i] == ']') --depth;
    if (s[i] == ',' && depth == 0) {
      out.push_back(trim(s.substr(start, i - start)));
      start = i + 1;
    }
  }
  out.push_back(trim(s.substr(start)));
  return out;
}

[[noreturn]] void dump_error(std::size_t line, const std::string& what) {
  fail(ErrorCode::SyntaxError, "kernel dump line " + std::to_string(line) + ": " + what);
}

ArrayDescriptor parse_array_fields(std::string_view text, std::size_t line) {
  const auto parts = split(text, '|');
  if (parts.size() != 5) dump_error(line, "array declaration needs 5 fields");
  std::istringstream head(parts[0]);
  std::string name, dtype, space;
  head >> name >> dtype >> space;
  ArrayDescriptor d;
  d.name = name;
  d.dtype = parse_dtype(dtype);
  d.space = parse_space(space);
  auto field = [&](std::size_t i, std::string_view key) {
    const std::string& p = parts[i];
    if (p.rfind(key, 0) != 0) dump_error(line, "expected '" + std::string(key) + "'");
    return trim(std::string_view(p).substr(key.size()));
  };
  for (const auto& s : split_exprs(field(1, "shape"))) d.shape.push_back(parse_expr(s));
  d.axis_names = split_list(field(2, "axes"));
  for (const auto& t : split_list(field(3, "layout"))) {
    if (t == "vec") {
      d.dim_tags.push_back(DimTag::vec());
    } else if (t.size() > 1 && t[0] == 'N') {
      d.dim_tags.push_back(DimTag::nest(std::stoi(t.substr(1))));
    } else {
      dump_error(line, "bad layout tag '" + t + "'");
    }
  }
  for (const auto& s : split_list(field(4, "splits"))) {
    const auto colon = s.find(':');
    if (colon == std::string::npos) dump_error(line, "bad split '" + s + "'");
    d.splits.push_back({static_cast<std::size_t>(std::stoul(s.substr(0, colon))),
                        std::stoll(s.substr(colon + 1))});
  }
  return d;
}

}  // namespace

std::string dump_kernel(const Kernel& k) {
  std::ostringstream os;
  os << "kernel " << k.name << '\n';
  os << "params";
  for (const auto& p : k.domain.parameters) os << ' ' << p;
  os << '\n';
  for (const auto& i : k.domain.inames) os << "iname " << i.name << ' ' << to_string(i.extent) << '\n';
  for (const auto& a : k.args) {
    if (const auto* d = std::get_if<ArrayDescriptor>(&a)) {
      os << "arg array " << dump_array_fields(*d) << '\n';
    } else {
      const auto& s = std::get<ScalarParam>(a);
      os << "arg scalar " << s.name << ' ' << to_string(s.dtype) << '\n';
    }
  }
  for (const auto& t : k.temporaries) os << "temp " << dump_array_fields(t) << '\n';
  for (const auto& [name, rule] : k.rules) {
    os << "rule " << name << '(' << join_names(rule.params) << ") := " << to_string(rule.body) << '\n';
  }
  for (const auto& [iname, tag] : k.iname_tags) os << "tag " << iname << ' ' << tag.str() << '\n';
  if (!k.loop_priority.empty()) os << "priority " << join_names(k.loop_priority) << '\n';
  for (const auto& a : k.assumptions) os << "assume " << a.str() << '\n';
  for (const auto& group : k.aliases) os << "alias " << join_names(group) << '\n';
  for (const auto& insn : k.instructions) {
    os << "insn " << insn.id << ": " << to_string(insn.assignee_expr())
       << (insn.is_update ? " <+- " : " <- ") << to_string(insn.rhs) << "  {"
       << join_names(insn.within) << "} deps=" << join_names(insn.depends_on, ",")
       << " tags=" << join_names(insn.tags, ",") << '\n';
  }
  os << "end\n";
  return os.str();
}

Kernel parse_kernel_dump(std::string_view text) {
  Kernel k;
  std::istringstream in{std::string(text)};
  std::string raw;
  std::size_t line_no = 0;
  bool ended = false;
  while (std::getline(in, raw)) {
    ++line_no;
    const std::string line = trim(raw);
    if (line.empty()) continue;
    if (ended) dump_error(line_no, "content after 'end'");
    const auto space = line.find(' ');
    const std::string key = line.substr(0, space);
    const std::string rest = space == std::string::npos ? "" : trim(line.substr(space + 1));
    if (key == "kernel") {
      k.name = rest;
    } else if (key == "params") {
      for (const auto& p : split_list(rest, ' ')) {
        if (!p.empty()) k.domain.parameters.insert(p);
      }
    } else if (key == "iname") {
      const auto sp = rest.find(' ');
      if (sp == std::string::npos) dump_error(line_no, "iname needs an extent");
      k.domain.inames.push_back({rest.substr(0, sp), parse_expr(rest.substr(sp + 1))});
    } else if (key == "arg") {
      if (rest.rfind("array ", 0) == 0) {
        k.args.emplace_back(parse_array_fields(rest.substr(6), line_no));
      } else if (rest.rfind("scalar ", 0) == 0) {
        std::istringstream fields(rest.substr(7));
        std::string name, dtype;
        fields >> name >> dtype;
        k.args.emplace_back(ScalarParam{name, parse_dtype(dtype)});
      } else {
        dump_error(line_no, "bad argument declaration");
      }
    } else if (key == "temp") {
      k.temporaries.push_back(parse_array_fields(rest, line_no));
    } else if (key == "rule") {
      const auto open = rest.find('(');
      const auto close = rest.find(") := ");
      if (open == std::string::npos || close == std::string::npos) dump_error(line_no, "bad rule");
      SubstitutionRule r;
      r.name = rest.substr(0, open);
      r.params = split_list(rest.substr(open + 1, close - open - 1));
      r.body = parse_expr(rest.substr(close + 5));
      k.rules.insert(std::move(r));
    } else if (key == "tag") {
      const auto parts = split_list(rest, ' ');
      if (parts.size() != 2) dump_error(line_no, "bad tag line");
      k.iname_tags[parts[0]] = InameTag::parse(parts[1]);
    } else if (key == "priority") {
      k.loop_priority = split_list(rest);
    } else if (key == "assume") {
      const auto parts = split_list(rest, ' ');
      if (parts.size() != 3) dump_error(line_no, "bad assumption");
      k.assumptions.push_back({parts[0], parts[1], std::stoll(parts[2])});
    } else if (key == "alias") {
      k.aliases.push_back(split_list(rest));
    } else if (key == "insn") {
      const auto colon = rest.find(": ");
      if (colon == std::string::npos) dump_error(line_no, "bad instruction");
      Instruction insn;
      insn.id = rest.substr(0, colon);
      std::string body = rest.substr(colon + 2);
      auto arrow = body.find(" <+- ");
      std::size_t arrow_len = 5;
      insn.is_update = arrow != std::string::npos;
      if (!insn.is_update) {
        arrow = body.find(" <- ");
        arrow_len = 4;
      }
      const auto brace = body.rfind("  {");
      const auto close = body.rfind("} deps=");
      const auto tags = body.rfind(" tags=");
      if (arrow == std::string::npos || brace == std::string::npos || close == std::string::npos ||
          tags == std::string::npos || brace < arrow) {
        dump_error(line_no, "bad instruction");
      }
      const Expr target = parse_expr(body.substr(0, arrow));
      const auto* sub = target.as<Subscript>();
      if (!sub) dump_error(line_no, "assignee must be a subscript");
      insn.assignee = sub->array;
      insn.indices = sub->indices;
      insn.rhs = parse_expr(body.substr(arrow + arrow_len, brace - arrow - arrow_len));
      for (const auto& i : split_list(body.substr(brace + 3, close - brace - 3))) insn.within.insert(i);
      for (const auto& d : split_list(body.substr(close + 7, tags - close - 7))) insn.depends_on.insert(d);
      for (const auto& t : split_list(body.substr(tags + 6))) insn.tags.insert(t);
      k.instructions.push_back(std::move(insn));
    } else if (key == "end") {
      ended = true;
    } else {
      dump_error(line_no, "unknown line kind '" + key + "'");
    }
  }
  if (!ended) dump_error(line_no, "missing 'end'");
  return k;
}

}  // namespace loopforge
