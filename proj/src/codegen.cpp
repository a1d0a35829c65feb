#include "loopforge/codegen.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>

namespace loopforge {

std::string CostReport::text() const {
  std::ostringstream os;
  os << "flops=" << flops << "\n"
     << "bytes_read=" << global_bytes_read << "\n"
     << "bytes_written=" << global_bytes_written << "\n"
     << "bytes_total=" << global_bytes() << "\n"
     << "instances=" << instances << "\n"
     << "barriers=" << barriers << "\n";
  for (const auto& [name, a] : arrays) {
    os << "array." << name << ".bytes_read=" << a.bytes_read << "\n"
       << "array." << name << ".bytes_written=" << a.bytes_written << "\n";
  }
  for (const auto& [name, n] : multiplies_by) os << "multiplies_by." << name << "=" << n << "\n";
  return os.str();
}

namespace {

int64_t resolve(const Expr& e, const std::map<std::string, int64_t>& params) {
  const Expr s = simplify_index(substitute(e, [&] {
    std::map<std::string, Expr> m;
    for (const auto& [name, v] : params) m[name] = Expr::i32(v);
    return m;
  }()));
  if (auto v = as_integer(s)) return *v;
  fail(ErrorCode::UnresolvedExtent, "cannot resolve extent " + to_string(e));
}

struct ExprCost {
  int64_t flops = 0;
  std::map<std::string, int64_t> global_loads;
  std::map<std::string, int64_t> multiplies_by;
};

class CostCounter {
 public:
  explicit CostCounter(const Kernel& k) : k_(k) {}

  DType count(const Expr& e, ExprCost& out) const {
    if (const auto* lit = e.as<Literal>()) return lit->dtype;
    if (const auto* v = e.as<Variable>()) {
      if (const auto* sp = k_.find_scalar(v->name)) return sp->dtype;
      return DType::i32;
    }
    if (const auto* sub = e.as<Subscript>()) {
      for (const auto& i : sub->indices) count(i, out);
      const ArrayDescriptor* d = k_.find_array(sub->array);
      if (!d) fail(ErrorCode::UnknownVariable, "unknown array '" + sub->array + "'");
      if (d->space == AddressSpace::global) ++out.global_loads[sub->array];
      return d->dtype;
    }
    if (const auto* n = e.as<Negate>()) return count(n->operand, out);
    if (const auto* b = e.as<BinaryOp>()) {
      const DType l = count(b->lhs, out);
      const DType r = count(b->rhs, out);
      if (l == DType::i32 && r == DType::i32) return DType::i32;
      ++out.flops;
      if (b->op == BinaryOpKind::mul || b->op == BinaryOpKind::div) {
        for (const Expr* side : {&b->lhs, &b->rhs}) {
          if (const auto* s = side->as<Subscript>()) ++out.multiplies_by[s->array];
        }
      }
      return DType::f32;
    }
    if (const auto* c = e.as<Call>()) {
      bool ints = true;
      for (const auto& a : c->args) ints = count(a, out) == DType::i32 && ints;
      if (ints) return DType::i32;
      ++out.flops;
      return DType::f32;
    }
    fail(ErrorCode::UnknownRule, "unexpanded rule invocation " + to_string(e));
  }

 private:
  const Kernel& k_;
};

// Grid extent per hardware axis: the largest extent among its inames.
std::map<std::pair<InameTag::Kind, int>, int64_t> grid_extents(
    const Kernel& k, const std::map<std::string, int64_t>& params) {
  std::map<std::pair<InameTag::Kind, int>, int64_t> grid;
  for (const auto& in : k.domain.inames) {
    const InameTag t = k.tag_of(in.name);
    if (!t.is_hardware()) continue;
    auto& g = grid[{t.kind, t.axis}];
    g = std::max(g, resolve(in.extent, params));
  }
  return grid;
}

}  // namespace

CostReport count_cost(const Kernel& k, const Schedule& s,
                      const std::map<std::string, int64_t>& params) {
  CostReport rep;
  const auto grid = grid_extents(k, params);
  int64_t groups = 1;
  for (const auto& [key, ext] : grid) {
    if (key.first == InameTag::Kind::core) groups *= ext;
  }
  const CostCounter counter(k);
  for (const auto& insn : k.instructions) {
    int64_t instances = 1;
    std::set<std::pair<InameTag::Kind, int>> covered;
    for (const auto& name : insn.within) {
      instances *= resolve(k.domain.extent(name), params);
      const InameTag t = k.tag_of(name);
      if (t.is_hardware()) covered.insert({t.kind, t.axis});
    }
    for (const auto& [key, ext] : grid) {
      if (!covered.count(key)) instances *= ext;
    }
    ExprCost c;
    counter.count(expand_rules(insn.rhs, k.rules), c);
    for (const auto& idx : insn.indices) counter.count(idx, c);
    const ArrayDescriptor* target = k.find_array(insn.assignee);
    if (!target) fail(ErrorCode::UnknownVariable, "unknown assignee '" + insn.assignee + "'");
    if (insn.is_update && target->dtype == DType::f32) ++c.flops;
    rep.instances += instances;
    rep.flops += c.flops * instances;
    for (const auto& [name, n] : c.global_loads) rep.arrays[name].bytes_read += 4 * n * instances;
    for (const auto& [name, n] : c.multiplies_by) rep.multiplies_by[name] += n * instances;
    if (target->space == AddressSpace::global) {
      rep.arrays[insn.assignee].bytes_written += 4 * instances;
      if (insn.is_update) rep.arrays[insn.assignee].bytes_read += 4 * instances;
    }
  }
  for (const auto& [_, a] : rep.arrays) {
    rep.global_bytes_read += a.bytes_read;
    rep.global_bytes_written += a.bytes_written;
  }
  std::vector<int64_t> trips = {1};
  for (const auto& item : s.items) {
    switch (item.kind) {
      case ScheduleItem::Kind::enter_loop:
        trips.push_back(trips.back() * resolve(k.domain.extent(item.name), params));
        break;
      case ScheduleItem::Kind::leave_loop:
        if (trips.size() > 1) trips.pop_back();
        break;
      case ScheduleItem::Kind::barrier: rep.barriers += trips.back() * groups; break;
      case ScheduleItem::Kind::run: break;
    }
  }
  return rep;
}

// ---------------------------------------------------------------------------
// emission

namespace {

std::string float_literal(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(static_cast<float>(v)));
  std::string s = buf;
  if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
  return s + "f";
}

class Emitter {
 public:
  Emitter(const Kernel& k, const Schedule& s, const TargetConfig& cfg) : k_(k), s_(s), cfg_(cfg) {}

  std::string run() {
    compute_grid();
    os_ << "#ifndef LOOPFORGE_PRELUDE\n"
        << "#define LOOPFORGE_PRELUDE\n"
        << "#define GROUP_ID(n) get_group_id(n)\n"
        << "#define LOCAL_ID(n) get_local_id(n)\n"
        << "#define BARRIER() barrier(CLK_LOCAL_MEM_FENCE)\n"
        << "#define VLANE(v, c) (((const float *)&(v))[c])\n"
        << "typedef float" << cfg_.vector_width << " vec4f;\n"
        << "#endif\n\n";
    signature();
    os_ << "{\n";
    declarations();
    hardware_indices();
    body(schedule_tree(s_), 1);
    os_ << "}\n";
    return os_.str();
  }

 private:
  // -- declarations ---------------------------------------------------------

  void compute_grid() {
    for (const auto& in : k_.domain.inames) {
      const InameTag t = k_.tag_of(in.name);
      if (!t.is_hardware()) continue;
      const auto key = std::make_pair(t.kind, t.axis);
      auto it = grid_.find(key);
      if (it == grid_.end()) {
        grid_[key] = in.extent;
        continue;
      }
      auto a = as_integer(it->second);
      auto b = as_integer(in.extent);
      if (a && b && *b > *a) it->second = in.extent;
    }
  }

  std::string element_type(const ArrayDescriptor& d) const {
    const std::string base = d.dtype == DType::f32 ? "float" : "int";
    return d.vec_axis() ? (d.dtype == DType::f32 ? "vec4f" : "int4") : base;
  }

  void signature() {
    std::set<std::string> written;
    for (const auto& insn : k_.instructions) written.insert(insn.assignee);
    std::vector<std::string> params;
    for (const auto& arg : k_.args) {
      if (const auto* d = std::get_if<ArrayDescriptor>(&arg)) {
        const bool ro = !written.count(d->name);
        params.push_back(std::string("global ") + (ro ? "const " : "") + element_type(*d) +
                         " *restrict " + d->name);
      } else {
        const auto& sp = std::get<ScalarParam>(arg);
        params.push_back(std::string("const ") + (sp.dtype == DType::f32 ? "float " : "int ") + sp.name);
      }
    }
    for (const auto& p : k_.domain.parameters) params.push_back("const int " + p);
    os_ << "kernel void " << k_.name << "(";
    for (std::size_t i = 0; i < params.size(); ++i) {
      os_ << (i ? ",\n    " : "") << params[i];
    }
    os_ << ")\n";
  }

  void declarations() {
    for (const auto& t : k_.temporaries) {
      const auto* group = k_.alias_group(t.name);
      if (group && group->front() != t.name) {
        os_ << "  // " << t.name << " shares storage with " << group->front() << "\n";
        continue;
      }
      int64_t size = 1;
      for (const auto& e : t.shape) {
        auto v = as_integer(simplify_index(e));
        if (!v) {
          fail(ErrorCode::UnfixedParameterInShape,
               "temporary '" + t.name + "' has non-literal shape " + to_string(e));
        }
        size *= *v;
      }
      if (t.vec_axis()) size /= cfg_.vector_width;
      if (group) {
        for (const auto& other : *group) {
          const auto* d = k_.find_temporary(other);
          if (!d) continue;
          auto bytes = footprint_bytes(*d);
          if (bytes) size = std::max<int64_t>(size, *bytes / 4 / (t.vec_axis() ? cfg_.vector_width : 1));
        }
      }
      os_ << "  " << (t.space == AddressSpace::scratchpad ? "local " : "") << element_type(t) << " "
          << t.name << "[" << size << "];\n";
    }
  }

  void hardware_indices() {
    for (const auto& in : k_.domain.inames) {
      const InameTag t = k_.tag_of(in.name);
      if (!t.is_hardware()) continue;
      os_ << "  const int " << in.name << " = "
          << (t.kind == InameTag::Kind::core ? "GROUP_ID(" : "LOCAL_ID(") << t.axis << ");\n";
    }
  }

  // -- statements -----------------------------------------------------------

  void indent(int depth) { os_ << std::string(static_cast<std::size_t>(2 * depth), ' '); }

  void body(const std::vector<ScheduleNode>& nodes, int depth) {
    for (const auto& n : nodes) {
      switch (n.kind) {
        case ScheduleItem::Kind::enter_loop: {
          const Expr& ext = k_.domain.extent(n.name);
          bool guard = false;
          if (!as_integer(ext)) {
            guard = std::any_of(k_.domain.parameters.begin(), k_.domain.parameters.end(),
                                [&](const std::string& p) {
                                  return free_variables(ext).count(p) && !k_.is_param_positive(p);
                                });
          }
          if (guard) {
            indent(depth);
            os_ << "if (" << expr(ext) << " > 0)\n";
          }
          indent(depth);
          os_ << "for (int " << n.name << " = 0; " << n.name << " < " << expr(ext) << "; ++"
              << n.name << ")\n";
          indent(depth);
          os_ << "{\n";
          body(n.body, depth + 1);
          indent(depth);
          os_ << "}\n";
          break;
        }
        case ScheduleItem::Kind::barrier:
          indent(depth);
          os_ << "BARRIER();\n";
          break;
        case ScheduleItem::Kind::run: instruction(*k_.find_instruction(n.name), depth); break;
        case ScheduleItem::Kind::leave_loop: break;
      }
    }
  }

  void instruction(const Instruction& insn, int depth) {
    std::vector<std::string> guards;
    std::vector<std::string> vec_inames;
    for (const auto& name : insn.within) {
      const InameTag t = k_.tag_of(name);
      if (t.is_hardware()) {
        const Expr& ext = k_.domain.extent(name);
        if (!(ext == grid_.at({t.kind, t.axis}))) guards.push_back(name + " < " + expr(ext));
      }
      if (t.kind == InameTag::Kind::vec) vec_inames.push_back(name);
    }
    const Expr rhs = expand_rules(insn.rhs, k_.rules);
    int d = depth;
    indent(d);
    os_ << "// " << insn.id << "\n";
    if (!guards.empty()) {
      indent(d);
      os_ << "if (";
      for (std::size_t i = 0; i < guards.size(); ++i) os_ << (i ? " && " : "") << guards[i];
      os_ << ")\n";
      indent(d);
      os_ << "{\n";
      ++d;
    }
    if (vec_inames.size() == 1 && vectorizable(insn, rhs, vec_inames.front())) {
      vec_ = vec_inames.front();
      statement(insn.assignee, insn.indices, rhs, insn.is_update, d);
      vec_.clear();
    } else {
      unrolled(insn, rhs, vec_inames, 0, {}, d);
    }
    if (!guards.empty()) {
      indent(depth);
      os_ << "}\n";
    }
  }

  void unrolled(const Instruction& insn, const Expr& rhs, const std::vector<std::string>& vecs,
                std::size_t at, std::map<std::string, Expr> values, int depth) {
    if (at == vecs.size()) {
      std::vector<Expr> idx;
      for (const auto& i : insn.indices) idx.push_back(simplify_index(substitute(i, values)));
      statement(insn.assignee, idx, values.empty() ? rhs : substitute(rhs, values), insn.is_update,
                depth);
      return;
    }
    const auto ext = as_integer(k_.domain.extent(vecs[at]));
    for (int64_t c = 0; c < ext.value_or(0); ++c) {
      values[vecs[at]] = Expr::i32(c);
      unrolled(insn, rhs, vecs, at + 1, values, depth);
    }
  }

  void statement(const std::string& target, const std::vector<Expr>& indices, const Expr& rhs,
                 bool update, int depth) {
    indent(depth);
    os_ << access(target, indices) << (update ? " += " : " = ") << expr(rhs) << ";\n";
  }

  // True when every use of `v` is the vec-axis subscript of a vec-layout
  // array, the assignee included.
  bool vectorizable(const Instruction& insn, const Expr& rhs, const std::string& v) const {
    auto is_lane_access = [&](const std::string& array, const std::vector<Expr>& idx) {
      const ArrayDescriptor* d = k_.find_array(array);
      if (!d || !d->vec_axis()) return false;
      const std::size_t va = *d->vec_axis();
      for (std::size_t a = 0; a < idx.size(); ++a) {
        const bool mentions = free_variables(idx[a]).count(v) != 0;
        if (a == va) {
          const auto* var = idx[a].as<Variable>();
          if (!var || var->name != v) return false;
        } else if (mentions) {
          return false;
        }
      }
      return true;
    };
    if (!is_lane_access(insn.assignee, insn.indices)) return false;
    bool ok = true;
    std::function<void(const Expr&)> walk = [&](const Expr& e) {
      if (!ok) return;
      if (const auto* s = e.as<Subscript>()) {
        bool mentions = false;
        for (const auto& i : s->indices) mentions = mentions || free_variables(i).count(v);
        if (mentions && !is_lane_access(s->array, s->indices)) ok = false;
        return;
      }
      if (const auto* var = e.as<Variable>(); var && var->name == v) {
        ok = false;
        return;
      }
      std::visit(
          [&](const auto& n) {
            using T = std::decay_t<decltype(n)>;
            if constexpr (std::is_same_v<T, Negate>) {
              walk(n.operand);
            } else if constexpr (std::is_same_v<T, BinaryOp>) {
              walk(n.lhs);
              walk(n.rhs);
            } else if constexpr (std::is_same_v<T, Call>) {
              for (const auto& a : n.args) walk(a);
            }
          },
          e.node().data);
    };
    walk(rhs);
    return ok;
  }

  // Symbolic element strides honoring dim tags; vec axes get stride 0.
  std::vector<Expr> strides(const ArrayDescriptor& d) const {
    const std::size_t r = d.rank();
    std::vector<std::size_t> order;
    for (std::size_t a = 0; a < r; ++a) {
      if (a >= d.dim_tags.size() || !d.dim_tags[a].is_vec) order.push_back(a);
    }
    std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
      const int rx = x < d.dim_tags.size() ? d.dim_tags[x].rank : static_cast<int>(x);
      const int ry = y < d.dim_tags.size() ? d.dim_tags[y].rank : static_cast<int>(y);
      return rx < ry;
    });
    std::vector<Expr> out(r, Expr::i32(0));
    Expr stride = Expr::i32(1);
    for (std::size_t a : order) {
      out[a] = stride;
      stride = simplify_index(stride * d.shape[a]);
    }
    return out;
  }

  std::string access(const std::string& array, const std::vector<Expr>& indices) {
    const ArrayDescriptor* d = k_.find_array(array);
    if (!d) fail(ErrorCode::UnknownVariable, "unknown array '" + array + "'");
    std::string storage = array;
    if (const auto* group = k_.alias_group(array)) storage = group->front();
    const auto st = strides(*d);
    Expr off = Expr::i32(0);
    const auto va = d->vec_axis();
    for (std::size_t a = 0; a < indices.size(); ++a) {
      if (va && a == *va) continue;
      off = off + indices[a] * st[a];
    }
    std::string text = storage + "[" + expr(simplify_index(off)) + "]";
    if (!va) return text;
    const Expr lane = simplify_index(indices[*va]);
    if (const auto* var = lane.as<Variable>(); var && var->name == vec_) return text;
    if (auto c = as_integer(lane)) return text + ".s" + std::to_string(*c);
    if (const auto* var = lane.as<Variable>(); var && k_.domain.contains(var->name) &&
                                               opens_loop(k_, var->name)) {
      return "VLANE(" + text + ", " + var->name + ")";
    }
    fail(ErrorCode::VecAccessMisaligned, "access " + array + " with vector lane " + to_string(lane) +
                                             " cannot be resolved to a component");
  }

  static int precedence(const Expr& e) {
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

  std::string wrap(const Expr& e, int min_prec) {
    const std::string s = expr(e);
    return precedence(e) < min_prec ? "(" + s + ")" : s;
  }

  std::string expr(const Expr& e) {
    if (const auto* lit = e.as<Literal>()) {
      return lit->dtype == DType::f32 ? float_literal(lit->value)
                                      : std::to_string(static_cast<int64_t>(lit->value));
    }
    if (const auto* v = e.as<Variable>()) return v->name;
    if (const auto* s = e.as<Subscript>()) return access(s->array, s->indices);
    if (const auto* n = e.as<Negate>()) return "-" + wrap(n->operand, 4);
    if (const auto* b = e.as<BinaryOp>()) {
      if (b->op == BinaryOpKind::pow) {
        if (auto p = as_integer(b->rhs); p && *p >= 1 && *p <= 4) {
          const std::string base = wrap(b->lhs, 5);
          std::string out = base;
          for (int64_t i = 1; i < *p; ++i) out += " * " + base;
          return "(" + out + ")";
        }
        return "pow(" + expr(b->lhs) + ", " + expr(b->rhs) + ")";
      }
      const int p = precedence(e);
      const char* op = b->op == BinaryOpKind::add   ? " + "
                       : b->op == BinaryOpKind::sub ? " - "
                       : b->op == BinaryOpKind::mul ? " * "
                                                    : " / ";
      return wrap(b->lhs, p) + op + wrap(b->rhs, p + 1);
    }
    if (const auto* c = e.as<Call>()) {
      if (c->function == "mod" && c->args.size() == 2) {
        return wrap(c->args[0], 3) + " % " + wrap(c->args[1], 3);
      }
      if (c->function == "floordiv" && c->args.size() == 2) {
        return wrap(c->args[0], 3) + " / " + wrap(c->args[1], 3);
      }
      std::string name = c->function;
      if (name == "min") name = "fmin";
      if (name == "max") name = "fmax";
      if (name == "abs") name = "fabs";
      std::string out = name + "(";
      for (std::size_t i = 0; i < c->args.size(); ++i) out += (i ? ", " : "") + expr(c->args[i]);
      return out + ")";
    }
    fail(ErrorCode::UnknownRule, "unexpanded rule invocation " + to_string(e));
  }

  const Kernel& k_;
  const Schedule& s_;
  const TargetConfig& cfg_;
  std::ostringstream os_;
  std::map<std::pair<InameTag::Kind, int>, Expr> grid_;
  std::string vec_;
};

}  // namespace

std::string emit_source(const Kernel& k, const Schedule& s, const TargetConfig& cfg) {
  return Emitter(k, s, cfg).run();
}

}  // namespace loopforge
