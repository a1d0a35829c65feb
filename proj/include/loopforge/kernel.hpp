#pragma once

// Kernel IR: a parametric-box loop domain plus a partially ordered set of
// instructions, with argument/temporary declarations, iname tags and array
// layouts.

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "loopforge/error.hpp"
#include "loopforge/expr.hpp"

namespace loopforge {

struct Iname {
  std::string name;
  Expr extent;

  friend bool operator==(const Iname&, const Iname&) = default;
};

/// Every iname ranges over [0, extent); extents mention parameters only.
struct LoopDomain {
  std::vector<Iname> inames;
  std::set<std::string> parameters;

  const Iname* find(std::string_view name) const;
  bool contains(std::string_view name) const { return find(name) != nullptr; }
  /// Throws UnknownIname.
  const Expr& extent(std::string_view name) const;
  /// Inserts after `after` when given (and present), else appends.
  void add(Iname iname, const std::optional<std::string>& after = std::nullopt);
  void remove(std::string_view name);

  friend bool operator==(const LoopDomain&, const LoopDomain&) = default;
};

enum class AddressSpace { global, scratchpad, priv };

std::string_view to_string(AddressSpace s);

/// NestingOrder(rank) or Vec. N0 is the fastest-varying non-vec axis.
struct DimTag {
  bool is_vec = false;
  int rank = 0;

  static DimTag nest(int rank) { return {false, rank}; }
  static DimTag vec() { return {true, 0}; }
  std::string str() const;

  friend bool operator==(const DimTag&, const DimTag&) = default;
};

/// One split_array_axis step, in the axis numbering current at the time.
struct AxisSplit {
  std::size_t axis = 0;
  int64_t factor = 1;

  friend bool operator==(const AxisSplit&, const AxisSplit&) = default;
};

struct ArrayDescriptor {
  std::string name;
  std::vector<Expr> shape;
  DType dtype = DType::f32;
  AddressSpace space = AddressSpace::global;
  std::vector<std::string> axis_names;
  std::vector<DimTag> dim_tags;
  std::vector<AxisSplit> splits;

  std::size_t rank() const { return shape.size(); }
  /// Fills axis names dim<k> and column-major nesting tags.
  void set_default_layout();
  std::optional<std::size_t> vec_axis() const;

  friend bool operator==(const ArrayDescriptor&, const ArrayDescriptor&) = default;
};

/// Runtime scalar argument (floating point constants such as p0).
struct ScalarParam {
  std::string name;
  DType dtype = DType::f32;

  friend bool operator==(const ScalarParam&, const ScalarParam&) = default;
};

using KernelArg = std::variant<ArrayDescriptor, ScalarParam>;

std::string_view arg_name(const KernelArg& arg);

struct Instruction {
  std::string id;
  std::string assignee;
  std::vector<Expr> indices;
  /// The assigned value, or the increment when is_update.
  Expr rhs;
  bool is_update = false;
  std::set<std::string> within;
  std::set<std::string> depends_on;
  std::set<std::string> tags;

  Expr assignee_expr() const { return Expr::subscript(assignee, indices); }

  friend bool operator==(const Instruction&, const Instruction&) = default;
};

struct InameTag {
  enum class Kind { sequential, core, lane, vec, unroll };
  Kind kind = Kind::sequential;
  int axis = 0;

  static InameTag sequential() { return {Kind::sequential, 0}; }
  static InameTag core(int axis) { return {Kind::core, axis}; }
  static InameTag lane(int axis) { return {Kind::lane, axis}; }
  static InameTag vec() { return {Kind::vec, 0}; }
  static InameTag unroll() { return {Kind::unroll, 0}; }

  bool is_hardware() const { return kind == Kind::core || kind == Kind::lane; }
  bool opens_loop() const { return kind == Kind::sequential; }
  std::string str() const;
  /// Accepts seq, core.N, lane.N, vec, unroll.
  static InameTag parse(std::string_view text);

  friend bool operator==(const InameTag&, const InameTag&) = default;
};

struct Assumption {
  std::string param;
  std::string op;
  int64_t value = 0;

  std::string str() const;
  bool implies_positive() const;

  friend bool operator==(const Assumption&, const Assumption&) = default;
};

constexpr int64_t kVectorWidth = 4;

struct Kernel {
  std::string name;
  LoopDomain domain;
  std::vector<Instruction> instructions;
  std::vector<KernelArg> args;
  std::vector<ArrayDescriptor> temporaries;
  RuleRegistry rules;
  std::map<std::string, InameTag> iname_tags;
  std::vector<std::string> loop_priority;
  std::vector<Assumption> assumptions;
  std::vector<std::vector<std::string>> aliases;

  const ArrayDescriptor* find_array(std::string_view name) const;
  ArrayDescriptor* find_array(std::string_view name);
  const ArrayDescriptor* find_temporary(std::string_view name) const;
  const ScalarParam* find_scalar(std::string_view name) const;
  const Instruction* find_instruction(std::string_view id) const;
  std::optional<std::size_t> instruction_index(std::string_view id) const;

  InameTag tag_of(std::string_view iname) const;
  bool is_param_positive(std::string_view param) const;
  /// The alias group containing `temp`, if any.
  const std::vector<std::string>* alias_group(std::string_view temp) const;

  /// Every name currently declared (inames, parameters, arrays, scalars,
  /// temporaries, rules, instruction ids).
  std::set<std::string> declared_names() const;

  friend bool operator==(const Kernel&, const Kernel&) = default;
};

/// Reads of arrays in the instruction's fully expanded right-hand side.
/// An update also reads its assignee.
std::set<std::string> arrays_read(const Instruction& insn, const RuleRegistry& rules);
bool reads_array(const Instruction& insn, const RuleRegistry& rules, std::string_view array);

/// Result type of `e` inside `k`; rule invocations are typed through their
/// bodies. `locals` types names bound by an enclosing rule.
DType infer_dtype(const Kernel& k, const Expr& e, const std::map<std::string, DType>& locals = {});

/// Bytes of storage when the shape is literal.
std::optional<int64_t> footprint_bytes(const ArrayDescriptor& desc);

/// Element strides of an array with concrete shape, honoring dim tags.
std::vector<int64_t> layout_strides(const ArrayDescriptor& desc, const std::vector<int64_t>& shape);

/// The pre-split shape and the logical→current index map.
std::vector<Expr> logical_shape(const ArrayDescriptor& desc);
std::vector<int64_t> to_current_index(const ArrayDescriptor& desc, std::vector<int64_t> logical);
std::vector<int64_t> to_logical_index(const ArrayDescriptor& desc, std::vector<int64_t> current);

Diagnostics check_consistency(const Kernel& k);
/// Throws InconsistentKernel listing every diagnostic.
void require_consistent(const Kernel& k, std::string_view context);

std::map<std::string, Expr> domain_projection(const Kernel& k, const std::set<std::string>& subset);

/// Text form documented in the README; parse_kernel_dump reads it back.
std::string dump_kernel(const Kernel& k);
Kernel parse_kernel_dump(std::string_view text);

}  // namespace loopforge
