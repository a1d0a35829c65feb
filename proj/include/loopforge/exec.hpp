#pragma once

// Reference interpreter. Core axes become independent groups executed one
// after another; inside a group the events between two barriers run to
// completion for every lane tuple before the barrier is crossed. Vec inames
// iterate their lanes inside a single instruction instance.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "loopforge/kernel.hpp"
#include "loopforge/schedule.hpp"

namespace loopforge {

/// Inputs and outputs of one launch. Arrays are stored in logical
/// (pre-split) column-major order regardless of their device layout.
struct ArgValues {
  std::map<std::string, int64_t> params;
  std::map<std::string, double> scalars;
  std::map<std::string, std::vector<float>> arrays;
};

enum class LaneOrder { forward, reverse, shuffled };

struct ExecOptions {
  bool check_hazards = true;
  LaneOrder lane_order = LaneOrder::forward;
  uint64_t seed = 0;
};

struct ArrayTraffic {
  int64_t loads = 0;   // elements
  int64_t stores = 0;  // elements

  friend bool operator==(const ArrayTraffic&, const ArrayTraffic&) = default;
};

struct ExecCounters {
  int64_t flops = 0;
  /// Instruction instances, one per vec lane.
  int64_t instances = 0;
  /// Barriers crossed, summed over groups.
  int64_t barriers = 0;
  /// Global arrays only.
  std::map<std::string, ArrayTraffic> traffic;

  int64_t bytes_read() const;
  int64_t bytes_written() const;
};

struct ExecReport {
  ExecCounters counters;
  /// Lane or group races found while running (empty unless requested).
  Diagnostics hazards;
};

/// Runs `k` under schedule `s`, updating `values.arrays` in place. Every
/// global array must be bound with its logical size; every parameter not
/// fixed in the kernel must be bound in `values.params`.
ExecReport run_kernel(const Kernel& k, const Schedule& s, ArgValues& values,
                      const ExecOptions& opts = {});

/// Linearizes first.
ExecReport run_kernel(const Kernel& k, ArgValues& values, const ExecOptions& opts = {});

/// Only the hazard diagnostics of a run on copies of `values`.
Diagnostics hazard_check(const Kernel& k, const Schedule& s, const ArgValues& values);

/// Concrete shapes under parameter bindings; throws UnresolvedExtent.
int64_t evaluate_extent(const Expr& e, const std::map<std::string, int64_t>& params);
std::vector<int64_t> concrete_shape(const std::vector<Expr>& shape,
                                    const std::map<std::string, int64_t>& params);

/// Logical column-major data to the array's device layout and back.
std::vector<float> to_physical(const ArrayDescriptor& desc, const std::vector<float>& logical,
                               const std::map<std::string, int64_t>& params);
std::vector<float> to_logical(const ArrayDescriptor& desc, const std::vector<float>& physical,
                              const std::map<std::string, int64_t>& params);

}  // namespace loopforge
