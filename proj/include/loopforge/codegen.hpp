#pragma once

// Device-dialect source emission and the static cost model.

#include <cstdint>
#include <map>
#include <string>

#include "loopforge/kernel.hpp"
#include "loopforge/schedule.hpp"

namespace loopforge {

struct TargetConfig {
  int64_t vector_width = kVectorWidth;
};

struct ArrayCost {
  int64_t bytes_read = 0;
  int64_t bytes_written = 0;

  friend bool operator==(const ArrayCost&, const ArrayCost&) = default;
};

struct CostReport {
  int64_t flops = 0;
  int64_t global_bytes_read = 0;
  int64_t global_bytes_written = 0;
  /// Global arrays only.
  std::map<std::string, ArrayCost> arrays;
  /// f32 multiplications and divisions with a direct operand loaded from
  /// the named array.
  std::map<std::string, int64_t> multiplies_by;
  int64_t instances = 0;
  int64_t barriers = 0;

  int64_t global_bytes() const { return global_bytes_read + global_bytes_written; }
  /// key=value lines.
  std::string text() const;
};

/// Static counts for one launch. Every instruction runs once per point of
/// its loop and vec inames times the full core and lane grid it is not
/// restricted by. Arithmetic on f32 values counts one FLOP per operation or
/// intrinsic call (negation is free, an update adds one); every global
/// subscript counts 4 bytes, an update's target counting as read and write.
/// Throws UnresolvedExtent.
CostReport count_cost(const Kernel& k, const Schedule& s,
                      const std::map<std::string, int64_t>& params = {});

/// Deterministic C-like source. Throws UnfixedParameterInShape for
/// non-literal scratchpad or private shapes and VecAccessMisaligned for
/// vector-lane accesses that cannot be resolved to a component.
std::string emit_source(const Kernel& k, const Schedule& s, const TargetConfig& cfg = {});

}  // namespace loopforge
