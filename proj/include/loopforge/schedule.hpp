#pragma once

// Linearized schedules: loop entries and exits, instruction runs and
// lane barriers, in program order.

#include <string>
#include <vector>

#include "loopforge/kernel.hpp"

namespace loopforge {

struct ScheduleItem {
  enum class Kind { enter_loop, leave_loop, run, barrier };
  Kind kind = Kind::run;
  /// Iname for loop items, instruction id for runs, empty for barriers.
  std::string name;

  friend bool operator==(const ScheduleItem&, const ScheduleItem&) = default;
};

struct Schedule {
  std::vector<ScheduleItem> items;

  std::size_t barrier_count() const;
  friend bool operator==(const Schedule&, const Schedule&) = default;
};

/// Structured view of a schedule.
struct ScheduleNode {
  ScheduleItem::Kind kind = ScheduleItem::Kind::run;  // never leave_loop
  std::string name;
  std::vector<ScheduleNode> body;
};

std::vector<ScheduleNode> schedule_tree(const Schedule& s);

/// Inames that open loops: sequential and unrolled ones.
bool opens_loop(const Kernel& k, const std::string& iname);

/// Greedy linearization honoring dependencies, loop priorities and alias
/// lifetimes, followed by barrier placement. Throws SchedulingImpossible.
Schedule linearize(const Kernel& k);

/// Inserts the lane barriers a schedule needs (existing ones are kept).
Schedule place_barriers(const Kernel& k, Schedule s);

/// Every problem found: missing or repeated instructions, dependency or
/// loop nesting violations, overlapping alias lifetimes, missing barriers.
Diagnostics validate_schedule(const Kernel& k, const Schedule& s);

/// Indented text, one item per line.
std::string dump_schedule(const Schedule& s);

}  // namespace loopforge
