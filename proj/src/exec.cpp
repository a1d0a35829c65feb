#include "loopforge/exec.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

namespace loopforge {

int64_t ExecCounters::bytes_read() const {
  int64_t n = 0;
  for (const auto& [_, t] : traffic) n += t.loads;
  return 4 * n;
}

int64_t ExecCounters::bytes_written() const {
  int64_t n = 0;
  for (const auto& [_, t] : traffic) n += t.stores;
  return 4 * n;
}

int64_t evaluate_extent(const Expr& e, const std::map<std::string, int64_t>& params) {
  MapBindings b;
  for (const auto& [name, v] : params) b.scalars[name] = Value::i32(v);
  try {
    const Value v = evaluate(e, b, RuleRegistry{});
    if (v.dtype != DType::i32) fail(ErrorCode::UnresolvedExtent, "non-integer extent");
    return v.as_int();
  } catch (const Error& err) {
    if (err.code() == ErrorCode::UnresolvedExtent) throw;
    fail(ErrorCode::UnresolvedExtent, "cannot resolve extent " + to_string(e) + ": " + err.what());
  }
}

std::vector<int64_t> concrete_shape(const std::vector<Expr>& shape,
                                    const std::map<std::string, int64_t>& params) {
  std::vector<int64_t> out;
  out.reserve(shape.size());
  for (const auto& e : shape) out.push_back(evaluate_extent(e, params));
  return out;
}

namespace {

int64_t product(const std::vector<int64_t>& v) {
  return std::accumulate(v.begin(), v.end(), int64_t{1}, std::multiplies<>());
}

// Calls fn(logical_flat, physical_offset) for every element.
template <class Fn>
void for_each_element(const ArrayDescriptor& desc, const std::map<std::string, int64_t>& params,
                      Fn&& fn) {
  const auto lshape = concrete_shape(logical_shape(desc), params);
  const auto cshape = concrete_shape(desc.shape, params);
  const auto strides = layout_strides(desc, cshape);
  const int64_t n = product(lshape);
  std::vector<int64_t> idx(lshape.size(), 0);
  for (int64_t flat = 0; flat < n; ++flat) {
    const auto cur = to_current_index(desc, idx);
    int64_t off = 0;
    for (std::size_t a = 0; a < cur.size(); ++a) off += cur[a] * strides[a];
    fn(flat, off);
    for (std::size_t a = 0; a < idx.size(); ++a) {
      if (++idx[a] < lshape[a]) break;
      idx[a] = 0;
    }
  }
}

void check_size(const ArrayDescriptor& desc, std::size_t have, int64_t want) {
  if (static_cast<int64_t>(have) != want) {
    fail(ErrorCode::InvalidConfig, "array '" + desc.name + "' has " + std::to_string(have) +
                                       " elements, expected " + std::to_string(want));
  }
}

}  // namespace

std::vector<float> to_physical(const ArrayDescriptor& desc, const std::vector<float>& logical,
                               const std::map<std::string, int64_t>& params) {
  const int64_t n = product(concrete_shape(desc.shape, params));
  check_size(desc, logical.size(), n);
  std::vector<float> out(static_cast<std::size_t>(n), 0.0f);
  for_each_element(desc, params, [&](int64_t flat, int64_t off) { out[off] = logical[flat]; });
  return out;
}

std::vector<float> to_logical(const ArrayDescriptor& desc, const std::vector<float>& physical,
                              const std::map<std::string, int64_t>& params) {
  const int64_t n = product(concrete_shape(desc.shape, params));
  check_size(desc, physical.size(), n);
  std::vector<float> out(static_cast<std::size_t>(n), 0.0f);
  for_each_element(desc, params, [&](int64_t flat, int64_t off) { out[flat] = physical[off]; });
  return out;
}

namespace {

// -- compiled expressions ---------------------------------------------------

struct Node {
  enum class Op { lit, ivar, load, neg, bin, call };
  Op op = Op::lit;
  DType dtype = DType::f32;
  BinaryOpKind bop = BinaryOpKind::add;
  double value = 0.0;
  int slot = -1;   // ivar: iname slot; load: array id
  int first = 0;   // into kids
  int count = 0;
  std::string function;
};

struct ArrayInfo {
  std::string name;
  AddressSpace space = AddressSpace::global;
  DType dtype = DType::f32;
  std::vector<int64_t> shape;
  std::vector<int64_t> strides;
  int storage = -1;
};

struct StorageInfo {
  std::string name;
  AddressSpace space = AddressSpace::global;
  int64_t size = 0;  // per lane for private storage
  bool tracked = false;
};

struct CompiledInsn {
  const Instruction* insn = nullptr;
  int root = -1;
  int target = -1;  // array id
  std::vector<int> target_indices;
  std::vector<std::pair<int, int64_t>> hw_guards;  // (slot, extent)
  std::vector<std::pair<int, int64_t>> vec_loops;  // (slot, extent)
  int64_t flops = 0;
  std::vector<int> global_loads;  // array ids, one per load site
};

struct Event {
  int insn = -1;  // -1 marks a barrier
  int first = 0;  // into trace bindings
  int count = 0;
};

struct Access {
  int writer = -1;       // -1 none, -2 several
  int accessor = -1;     // -1 none, -2 several distinct
  std::string writer_id;
};

class Interpreter {
 public:
  Interpreter(const Kernel& k, const Schedule& s, ArgValues& values, const ExecOptions& opts)
      : k_(k), s_(s), values_(values), opts_(opts) {}

  ExecReport run() {
    bind_params();
    setup_inames();
    setup_arrays();
    for (const auto& insn : k_.instructions) compile_insn(insn);
    build_trace();
    execute();
    write_back();
    return std::move(report_);
  }

 private:
  // -- setup ----------------------------------------------------------------

  void bind_params() {
    for (const auto& p : k_.domain.parameters) {
      auto it = values_.params.find(p);
      if (it == values_.params.end()) {
        fail(ErrorCode::MissingArgument, "parameter '" + p + "' is not bound");
      }
      params_[p] = it->second;
    }
    for (const auto& arg : k_.args) {
      if (const auto* sp = std::get_if<ScalarParam>(&arg)) {
        auto it = values_.scalars.find(sp->name);
        if (it == values_.scalars.end()) {
          fail(ErrorCode::MissingArgument, "scalar '" + sp->name + "' is not bound");
        }
        scalars_[sp->name] = sp->dtype == DType::f32
                                 ? Value::f32(static_cast<float>(it->second))
                                 : Value::i32(static_cast<int64_t>(it->second));
      }
    }
  }

  void setup_inames() {
    for (const auto& in : k_.domain.inames) {
      const int slot = static_cast<int>(iname_names_.size());
      slots_[in.name] = slot;
      iname_names_.push_back(in.name);
      const int64_t ext = evaluate_extent(in.extent, params_);
      extents_.push_back(ext);
      const InameTag tag = k_.tag_of(in.name);
      if (tag.kind == InameTag::Kind::core) grow(core_dims_, tag.axis, ext);
      if (tag.kind == InameTag::Kind::lane) grow(lane_dims_, tag.axis, ext);
    }
    for (auto& d : core_dims_) d = std::max<int64_t>(d, 1);
    for (auto& d : lane_dims_) d = std::max<int64_t>(d, 1);
    for (const auto& in : k_.domain.inames) {
      const InameTag tag = k_.tag_of(in.name);
      if (tag.kind == InameTag::Kind::core) core_slots_.emplace_back(slots_[in.name], tag.axis);
      if (tag.kind == InameTag::Kind::lane) lane_slots_.emplace_back(slots_[in.name], tag.axis);
    }
    lane_count_ = product(lane_dims_);
    group_count_ = product(core_dims_);
    ivals_.assign(iname_names_.size(), 0);
  }

  static void grow(std::vector<int64_t>& dims, int axis, int64_t ext) {
    if (static_cast<int>(dims.size()) <= axis) dims.resize(static_cast<std::size_t>(axis) + 1, 0);
    dims[static_cast<std::size_t>(axis)] = std::max(dims[static_cast<std::size_t>(axis)], ext);
  }

  void setup_arrays() {
    std::set<std::string> written;
    for (const auto& insn : k_.instructions) written.insert(insn.assignee);
    auto add_array = [&](const ArrayDescriptor& d) {
      ArrayInfo info;
      info.name = d.name;
      info.space = d.space;
      info.dtype = d.dtype;
      info.shape = concrete_shape(d.shape, params_);
      info.strides = layout_strides(d, info.shape);
      const int64_t size = product(info.shape);
      std::string storage_name = d.name;
      if (const auto* group = k_.alias_group(d.name)) storage_name = group->front();
      auto it = storage_ids_.find(storage_name);
      if (it == storage_ids_.end()) {
        StorageInfo st{storage_name, d.space, size, false};
        it = storage_ids_.emplace(storage_name, static_cast<int>(storages_.size())).first;
        storages_.push_back(st);
      }
      auto& st = storages_[static_cast<std::size_t>(it->second)];
      st.size = std::max(st.size, size);
      if (written.count(d.name) && d.space != AddressSpace::priv) st.tracked = true;
      if (d.space == AddressSpace::scratchpad) st.tracked = true;
      info.storage = it->second;
      array_ids_[d.name] = static_cast<int>(arrays_.size());
      arrays_.push_back(std::move(info));
    };
    for (const auto& arg : k_.args) {
      if (const auto* d = std::get_if<ArrayDescriptor>(&arg)) add_array(*d);
    }
    for (const auto& t : k_.temporaries) add_array(t);

    data_.resize(storages_.size());
    for (const auto& arg : k_.args) {
      const auto* d = std::get_if<ArrayDescriptor>(&arg);
      if (!d) continue;
      auto it = values_.arrays.find(d->name);
      if (it == values_.arrays.end()) {
        fail(ErrorCode::MissingArgument, "array '" + d->name + "' is not bound");
      }
      data_[static_cast<std::size_t>(arrays_[array_ids_[d->name]].storage)] =
          to_physical(*d, it->second, params_);
    }
    if (opts_.check_hazards) {
      access_.resize(storages_.size());
      group_access_.resize(storages_.size());
      for (std::size_t i = 0; i < storages_.size(); ++i) {
        if (!storages_[i].tracked) continue;
        access_[i].resize(static_cast<std::size_t>(storages_[i].size));
        if (storages_[i].space == AddressSpace::global) {
          group_access_[i].resize(static_cast<std::size_t>(storages_[i].size));
        }
      }
    }
  }

  // -- compilation ----------------------------------------------------------

  int add_node(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  int compile(const Expr& e, CompiledInsn& ci) {
    Node n;
    if (const auto* lit = e.as<Literal>()) {
      n.op = Node::Op::lit;
      n.dtype = lit->dtype;
      n.value = lit->dtype == DType::f32 ? static_cast<double>(static_cast<float>(lit->value))
                                         : lit->value;
      return add_node(n);
    }
    if (const auto* v = e.as<Variable>()) {
      if (auto it = slots_.find(v->name); it != slots_.end()) {
        n.op = Node::Op::ivar;
        n.dtype = DType::i32;
        n.slot = it->second;
        return add_node(n);
      }
      n.op = Node::Op::lit;
      if (auto it = params_.find(v->name); it != params_.end()) {
        n.dtype = DType::i32;
        n.value = static_cast<double>(it->second);
        return add_node(n);
      }
      if (auto it = scalars_.find(v->name); it != scalars_.end()) {
        n.dtype = it->second.dtype;
        n.value = it->second.v;
        return add_node(n);
      }
      fail(ErrorCode::UnboundVariable, "unbound variable '" + v->name + "'");
    }
    if (const auto* sub = e.as<Subscript>()) {
      auto it = array_ids_.find(sub->array);
      if (it == array_ids_.end()) {
        fail(ErrorCode::UnknownVariable, "unknown array '" + sub->array + "'");
      }
      std::vector<int> kids;
      for (const auto& i : sub->indices) kids.push_back(compile(i, ci));
      n.op = Node::Op::load;
      n.slot = it->second;
      n.dtype = arrays_[static_cast<std::size_t>(it->second)].dtype;
      set_kids(n, kids);
      if (arrays_[static_cast<std::size_t>(it->second)].space == AddressSpace::global) {
        ci.global_loads.push_back(it->second);
      }
      return add_node(n);
    }
    if (const auto* neg = e.as<Negate>()) {
      const int kid = compile(neg->operand, ci);
      n.op = Node::Op::neg;
      n.dtype = nodes_[static_cast<std::size_t>(kid)].dtype;
      set_kids(n, {kid});
      return add_node(n);
    }
    if (const auto* b = e.as<BinaryOp>()) {
      const int l = compile(b->lhs, ci);
      const int r = compile(b->rhs, ci);
      n.op = Node::Op::bin;
      n.bop = b->op;
      const bool ints = nodes_[static_cast<std::size_t>(l)].dtype == DType::i32 &&
                        nodes_[static_cast<std::size_t>(r)].dtype == DType::i32;
      n.dtype = ints ? DType::i32 : DType::f32;
      if (!ints) ++ci.flops;
      set_kids(n, {l, r});
      return add_node(n);
    }
    if (const auto* c = e.as<Call>()) {
      std::vector<int> kids;
      bool ints = true;
      for (const auto& a : c->args) {
        kids.push_back(compile(a, ci));
        ints = ints && nodes_[static_cast<std::size_t>(kids.back())].dtype == DType::i32;
      }
      n.op = Node::Op::call;
      n.function = c->function;
      n.dtype = ints ? DType::i32 : DType::f32;
      if (!ints) ++ci.flops;
      set_kids(n, kids);
      return add_node(n);
    }
    fail(ErrorCode::UnknownRule, "unexpanded rule invocation " + to_string(e));
  }

  void set_kids(Node& n, const std::vector<int>& kids) {
    n.first = static_cast<int>(kids_.size());
    n.count = static_cast<int>(kids.size());
    kids_.insert(kids_.end(), kids.begin(), kids.end());
  }

  void compile_insn(const Instruction& insn) {
    CompiledInsn ci;
    ci.insn = &insn;
    ci.root = compile(expand_rules(insn.rhs, k_.rules), ci);
    auto it = array_ids_.find(insn.assignee);
    if (it == array_ids_.end()) {
      fail(ErrorCode::UnknownVariable, "unknown assignee '" + insn.assignee + "'");
    }
    ci.target = it->second;
    for (const auto& idx : insn.indices) ci.target_indices.push_back(compile(idx, ci));
    if (insn.is_update && arrays_[static_cast<std::size_t>(ci.target)].dtype == DType::f32) {
      ++ci.flops;
    }
    for (const auto& name : insn.within) {
      const int slot = slots_.at(name);
      const InameTag tag = k_.tag_of(name);
      if (tag.is_hardware()) ci.hw_guards.emplace_back(slot, extents_[static_cast<std::size_t>(slot)]);
      if (tag.kind == InameTag::Kind::vec) {
        ci.vec_loops.emplace_back(slot, extents_[static_cast<std::size_t>(slot)]);
      }
    }
    insn_ids_[insn.id] = static_cast<int>(insns_.size());
    insns_.push_back(std::move(ci));
  }

  // -- trace ----------------------------------------------------------------

  void build_trace() {
    std::vector<std::pair<int, int64_t>> open;
    walk(schedule_tree(s_), open);
  }

  void walk(const std::vector<ScheduleNode>& nodes, std::vector<std::pair<int, int64_t>>& open) {
    for (const auto& n : nodes) {
      switch (n.kind) {
        case ScheduleItem::Kind::enter_loop: {
          const int slot = slots_.at(n.name);
          open.emplace_back(slot, 0);
          for (int64_t v = 0; v < extents_[static_cast<std::size_t>(slot)]; ++v) {
            open.back().second = v;
            walk(n.body, open);
          }
          open.pop_back();
          break;
        }
        case ScheduleItem::Kind::run: {
          auto it = insn_ids_.find(n.name);
          if (it == insn_ids_.end()) {
            fail(ErrorCode::SchedulingImpossible, "schedule runs unknown instruction '" + n.name + "'");
          }
          Event ev{it->second, static_cast<int>(bindings_.size()), static_cast<int>(open.size())};
          bindings_.insert(bindings_.end(), open.begin(), open.end());
          trace_.push_back(ev);
          break;
        }
        case ScheduleItem::Kind::barrier:
          trace_.push_back(Event{});
          break;
        case ScheduleItem::Kind::leave_loop: break;
      }
    }
  }

  // -- execution ------------------------------------------------------------

  void execute() {
    std::vector<std::pair<std::size_t, std::size_t>> phases;
    std::size_t start = 0;
    for (std::size_t i = 0; i <= trace_.size(); ++i) {
      if (i == trace_.size() || trace_[i].insn < 0) {
        phases.emplace_back(start, i);
        start = i + 1;
      }
    }
    const int64_t barriers_per_group = static_cast<int64_t>(phases.size()) - 1;

    std::vector<int64_t> order(static_cast<std::size_t>(lane_count_));
    std::mt19937_64 rng(opts_.seed);
    for (int64_t g = 0; g < group_count_; ++g) {
      group_ = static_cast<int>(g);
      set_coords(g, core_dims_, core_slots_);
      reset_local_storage();
      for (std::size_t p = 0; p < phases.size(); ++p) {
        std::iota(order.begin(), order.end(), 0);
        if (opts_.lane_order == LaneOrder::reverse) std::reverse(order.begin(), order.end());
        if (opts_.lane_order == LaneOrder::shuffled) std::shuffle(order.begin(), order.end(), rng);
        for (int64_t lane : order) {
          lane_ = static_cast<int>(lane);
          set_coords(lane, lane_dims_, lane_slots_);
          for (std::size_t e = phases[p].first; e < phases[p].second; ++e) run_event(trace_[e]);
        }
        if (opts_.check_hazards) close_phase(g, p);
      }
      report_.counters.barriers += barriers_per_group;
    }
    if (opts_.check_hazards) check_groups();
  }

  void set_coords(int64_t linear, const std::vector<int64_t>& dims,
                  const std::vector<std::pair<int, int>>& slots) {
    std::vector<int64_t> coord(dims.size(), 0);
    for (std::size_t a = 0; a < dims.size(); ++a) {
      coord[a] = linear % dims[a];
      linear /= dims[a];
    }
    for (const auto& [slot, axis] : slots) ivals_[static_cast<std::size_t>(slot)] = coord[static_cast<std::size_t>(axis)];
  }

  void reset_local_storage() {
    const float nan = std::numeric_limits<float>::quiet_NaN();
    for (std::size_t i = 0; i < storages_.size(); ++i) {
      const auto& st = storages_[i];
      if (st.space == AddressSpace::global) continue;
      const int64_t copies = st.space == AddressSpace::priv ? lane_count_ : 1;
      data_[i].assign(static_cast<std::size_t>(st.size * copies), nan);
    }
  }

  void run_event(const Event& ev) {
    const CompiledInsn& ci = insns_[static_cast<std::size_t>(ev.insn)];
    for (const auto& [slot, ext] : ci.hw_guards) {
      if (ivals_[static_cast<std::size_t>(slot)] >= ext) return;
    }
    for (int b = 0; b < ev.count; ++b) {
      const auto& [slot, v] = bindings_[static_cast<std::size_t>(ev.first + b)];
      ivals_[static_cast<std::size_t>(slot)] = v;
    }
    try {
      run_vec(ci, 0);
    } catch (const Error& err) {
      fail(err.code(), std::string(err.what()) + " (in " + ci.insn->id + context(ci) + ")");
    }
  }

  std::string context(const CompiledInsn& ci) const {
    std::ostringstream os;
    for (const auto& name : ci.insn->within) {
      os << ", " << name << "=" << ivals_[static_cast<std::size_t>(slots_.at(name))];
    }
    return os.str();
  }

  void run_vec(const CompiledInsn& ci, std::size_t depth) {
    if (depth < ci.vec_loops.size()) {
      const auto [slot, ext] = ci.vec_loops[depth];
      for (int64_t v = 0; v < ext; ++v) {
        ivals_[static_cast<std::size_t>(slot)] = v;
        run_vec(ci, depth + 1);
      }
      return;
    }
    run_instance(ci);
  }

  void run_instance(const CompiledInsn& ci) {
    const double value = eval(ci.root);
    const ArrayInfo& a = arrays_[static_cast<std::size_t>(ci.target)];
    const int64_t off = offset(a, ci.target_indices.data(), ci.target_indices.size());
    float* slot = element(a, off);
    const float v = static_cast<float>(value);
    if (ci.insn->is_update) {
      record(a, off, false);
      *slot = *slot + v;
    } else {
      *slot = v;
    }
    record(a, off, true, ci.insn);
    auto& c = report_.counters;
    c.flops += ci.flops;
    ++c.instances;
    for (int id : ci.global_loads) ++c.traffic[arrays_[static_cast<std::size_t>(id)].name].loads;
    if (a.space == AddressSpace::global) {
      auto& t = c.traffic[a.name];
      ++t.stores;
      if (ci.insn->is_update) ++t.loads;
    }
  }

  int64_t offset(const ArrayInfo& a, const int* idx, std::size_t n) {
    if (n != a.shape.size()) {
      fail(ErrorCode::IndexOutOfBounds, "rank mismatch accessing '" + a.name + "'");
    }
    int64_t off = 0;
    for (std::size_t d = 0; d < n; ++d) {
      const auto v = static_cast<int64_t>(eval(idx[d]));
      if (v < 0 || v >= a.shape[d]) {
        fail(ErrorCode::IndexOutOfBounds, "index " + std::to_string(v) + " out of bounds for axis " +
                                              std::to_string(d) + " of '" + a.name + "'");
      }
      off += v * a.strides[d];
    }
    return off;
  }

  float* element(const ArrayInfo& a, int64_t off) {
    auto& buf = data_[static_cast<std::size_t>(a.storage)];
    if (a.space == AddressSpace::priv) {
      off += static_cast<int64_t>(lane_) * storages_[static_cast<std::size_t>(a.storage)].size;
    }
    return &buf[static_cast<std::size_t>(off)];
  }

  void record(const ArrayInfo& a, int64_t off, bool write, const Instruction* insn = nullptr) {
    if (!opts_.check_hazards) return;
    const auto sid = static_cast<std::size_t>(a.storage);
    if (!storages_[sid].tracked) return;
    Access& acc = access_[sid][static_cast<std::size_t>(off)];
    if (acc.writer == -1 && acc.accessor == -1) touched_.emplace_back(a.storage, off);
    merge(acc.accessor, lane_);
    if (write) {
      merge(acc.writer, lane_);
      if (acc.writer_id.empty()) acc.writer_id = insn->id;
    }
    if (storages_[sid].space == AddressSpace::global) {
      Access& g = group_access_[sid][static_cast<std::size_t>(off)];
      merge(g.accessor, group_);
      if (write) merge(g.writer, group_);
    }
  }

  static void merge(int& who, int id) {
    if (who == -1) {
      who = id;
    } else if (who != id) {
      who = -2;
    }
  }

  void close_phase(int64_t group, std::size_t phase) {
    std::set<int> reported;
    for (const auto& [sid, off] : touched_) {
      Access& acc = access_[static_cast<std::size_t>(sid)][static_cast<std::size_t>(off)];
      if (acc.writer != -1 && acc.accessor == -2 && !reported.count(sid)) {
        reported.insert(sid);
        std::ostringstream os;
        os << "lanes race on " << storages_[static_cast<std::size_t>(sid)].name << "[" << off
           << "] in group " << group << ", phase " << phase << " (written by " << acc.writer_id
           << ")";
        report_.hazards.push_back({"LaneHazard", os.str()});
      }
      acc = Access{};
    }
    touched_.clear();
  }

  void check_groups() {
    for (std::size_t sid = 0; sid < group_access_.size(); ++sid) {
      for (std::size_t off = 0; off < group_access_[sid].size(); ++off) {
        const Access& g = group_access_[sid][off];
        if (g.writer != -1 && g.accessor == -2) {
          report_.hazards.push_back({"GroupHazard", "core groups race on " + storages_[sid].name +
                                                        "[" + std::to_string(off) + "]"});
          break;
        }
      }
    }
  }

  double eval(int id) {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    switch (n.op) {
      case Node::Op::lit: return n.value;
      case Node::Op::ivar: return static_cast<double>(ivals_[static_cast<std::size_t>(n.slot)]);
      case Node::Op::load: {
        const ArrayInfo& a = arrays_[static_cast<std::size_t>(n.slot)];
        const int64_t off = offset(a, &kids_[static_cast<std::size_t>(n.first)],
                                   static_cast<std::size_t>(n.count));
        record(a, off, false);
        return static_cast<double>(*element(a, off));
      }
      case Node::Op::neg: {
        const double v = eval(kids_[static_cast<std::size_t>(n.first)]);
        return n.dtype == DType::f32 ? static_cast<double>(-static_cast<float>(v)) : -v;
      }
      case Node::Op::bin: {
        const int l = kids_[static_cast<std::size_t>(n.first)];
        const int r = kids_[static_cast<std::size_t>(n.first) + 1];
        const double x = eval(l);
        const double y = eval(r);
        if (n.dtype == DType::f32 && n.bop != BinaryOpKind::pow) {
          const auto fx = static_cast<float>(x);
          const auto fy = static_cast<float>(y);
          switch (n.bop) {
            case BinaryOpKind::add: return fx + fy;
            case BinaryOpKind::sub: return fx - fy;
            case BinaryOpKind::mul: return fx * fy;
            case BinaryOpKind::div:
              if (fy == 0.0f) fail(ErrorCode::DivisionByZero, "division by zero");
              return fx / fy;
            default: break;
          }
        }
        return apply_binary(n.bop, {nodes_[static_cast<std::size_t>(l)].dtype, x},
                            {nodes_[static_cast<std::size_t>(r)].dtype, y})
            .v;
      }
      case Node::Op::call: {
        Value args[4];
        std::vector<Value> many;
        Value* argv = args;
        if (n.count > 4) {
          many.resize(static_cast<std::size_t>(n.count));
          argv = many.data();
        }
        for (int i = 0; i < n.count; ++i) {
          const int kid = kids_[static_cast<std::size_t>(n.first + i)];
          argv[i] = Value{nodes_[static_cast<std::size_t>(kid)].dtype, eval(kid)};
        }
        return apply_call(n.function, std::span<const Value>(argv, static_cast<std::size_t>(n.count))).v;
      }
    }
    return 0.0;
  }

  void write_back() {
    for (const auto& arg : k_.args) {
      const auto* d = std::get_if<ArrayDescriptor>(&arg);
      if (!d) continue;
      const auto& buf = data_[static_cast<std::size_t>(arrays_[array_ids_[d->name]].storage)];
      values_.arrays[d->name] = to_logical(*d, buf, params_);
    }
  }

  const Kernel& k_;
  const Schedule& s_;
  ArgValues& values_;
  const ExecOptions& opts_;
  ExecReport report_;

  std::map<std::string, int64_t> params_;
  std::map<std::string, Value> scalars_;

  std::map<std::string, int> slots_;
  std::vector<std::string> iname_names_;
  std::vector<int64_t> extents_;
  std::vector<int64_t> ivals_;
  std::vector<int64_t> core_dims_, lane_dims_;
  std::vector<std::pair<int, int>> core_slots_, lane_slots_;
  int64_t lane_count_ = 1;
  int64_t group_count_ = 1;
  int lane_ = 0;
  int group_ = 0;

  std::vector<ArrayInfo> arrays_;
  std::map<std::string, int> array_ids_;
  std::vector<StorageInfo> storages_;
  std::map<std::string, int> storage_ids_;
  std::vector<std::vector<float>> data_;

  std::vector<Node> nodes_;
  std::vector<int> kids_;
  std::vector<CompiledInsn> insns_;
  std::map<std::string, int> insn_ids_;

  std::vector<Event> trace_;
  std::vector<std::pair<int, int64_t>> bindings_;

  std::vector<std::vector<Access>> access_;
  std::vector<std::vector<Access>> group_access_;
  std::vector<std::pair<int, int64_t>> touched_;
};

}  // namespace

ExecReport run_kernel(const Kernel& k, const Schedule& s, ArgValues& values,
                      const ExecOptions& opts) {
  return Interpreter(k, s, values, opts).run();
}

ExecReport run_kernel(const Kernel& k, ArgValues& values, const ExecOptions& opts) {
  return run_kernel(k, linearize(k), values, opts);
}

Diagnostics hazard_check(const Kernel& k, const Schedule& s, const ArgValues& values) {
  ArgValues copy = values;
  ExecOptions opts;
  opts.check_hazards = true;
  return run_kernel(k, s, copy, opts).hazards;
}

}  // namespace loopforge
