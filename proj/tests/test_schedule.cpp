#include <gtest/gtest.h>

#include <algorithm>
#include <random>
#include <sstream>

#include "loopforge/schedule.hpp"
#include "loopforge/script.hpp"
#include "test_util.hpp"

using namespace loopforge;
using namespace loopforge::test;

namespace {

using Kind = ScheduleItem::Kind;

const char* kSingle = R"(
subroutine one(Ne, Nq, a, out)
  integer :: Ne, Nq
  real(kind=4), dimension(Nq, Ne) :: a, out
  integer :: e, i
  do e = 1, Ne
    do i = 1, Nq
      out(i, e) = a(i, e)*2.0
    end do
  end do
end subroutine one
)";

const char* kPair = R"(
subroutine pair(N, a, b, out)
  integer :: N
  real(kind=4), dimension(N) :: a, b, out
  integer :: i
  real(kind=4) :: t1, t2
  do i = 1, N
    t1 = a(i)*2.0
    t2 = b(i) + 1.0
    out(i) = t1 + t2
  end do
end subroutine pair
)";

bool has_code(const Diagnostics& d, const std::string& code) {
  return std::any_of(d.begin(), d.end(), [&](const Diagnostic& x) { return x.code == code; });
}

std::size_t position_of(const Schedule& s, const std::string& id) {
  for (std::size_t p = 0; p < s.items.size(); ++p) {
    if (s.items[p].kind == Kind::run && s.items[p].name == id) return p;
  }
  return s.items.size();
}

// Independent live range of a temporary: first run writing it to last run
// reading it (rules expanded).
std::pair<std::size_t, std::size_t> live_range(const Kernel& k, const Schedule& s,
                                               const std::string& temp) {
  std::size_t first = s.items.size(), last = 0;
  for (std::size_t p = 0; p < s.items.size(); ++p) {
    if (s.items[p].kind != Kind::run) continue;
    const Instruction* insn = k.find_instruction(s.items[p].name);
    if (insn->assignee == temp) first = std::min(first, p);
    if (accessed_arrays(expand_rules(insn->rhs, k.rules)).count(temp)) last = std::max(last, p);
  }
  return {first, last};
}

// Random straight-line bodies over a few scalar temporaries inside one or
// two sequential loops.
std::string random_source(std::mt19937_64& rng) {
  const int n_temps = 2 + static_cast<int>(rng() % 3);
  std::ostringstream src;
  src << "subroutine r(N, a, b)\n  integer :: N\n  real(kind=4), dimension(N) :: a, b\n";
  src << "  integer :: i, j\n  real(kind=4) :: ";
  for (int t = 0; t < n_temps; ++t) src << (t ? ", " : "") << "t" << t;
  src << "\n";
  auto operand = [&](int defined) {
    const int pick = static_cast<int>(rng() % (defined + 2));
    if (pick == 0) return std::string("a(i)");
    if (pick == 1) return std::string("2.0");
    return "t" + std::to_string(pick - 2);
  };
  const bool two_loops = rng() % 2;
  src << "  do i = 1, N\n";
  if (two_loops) src << "    do j = 1, N\n";
  for (int t = 0; t < n_temps; ++t) {
    src << "      t" << t << " = " << operand(t) << (rng() % 2 ? " + " : "*") << operand(t) << "\n";
  }
  src << "      b(i) = b(i) + t" << n_temps - 1 << "\n";
  if (two_loops) src << "    end do\n";
  src << "  end do\nend subroutine r\n";
  return src.str();
}

}  // namespace

TEST(schedule, single_instruction_kernel) {
  const Kernel k = lower_one(kSingle);
  const Schedule s = linearize(k);
  const std::string id = k.instructions.at(0).id;
  const std::vector<ScheduleItem> want = {{Kind::enter_loop, "e"}, {Kind::enter_loop, "i"},
                                          {Kind::run, id},         {Kind::leave_loop, "i"},
                                          {Kind::leave_loop, "e"}};
  EXPECT_EQ(s.items, want);
  EXPECT_TRUE(validate_schedule(k, s).empty());
  EXPECT_EQ(s.barrier_count(), 0u);
}

TEST(schedule, tagged_inames_open_no_loops) {
  Kernel k = lower_one(kSingle);
  k = tag_inames(k, {{"e", InameTag::core(0)}, {"i", InameTag::lane(0)}});
  const Schedule s = linearize(k);
  ASSERT_EQ(s.items.size(), 1u);
  EXPECT_EQ(s.items[0].kind, Kind::run);
  EXPECT_TRUE(validate_schedule(k, s).empty());
}

TEST(schedule, run_before_dependency_is_reported) {
  const Kernel k = lower_one(kPair);
  Schedule s = linearize(k);
  ASSERT_TRUE(validate_schedule(k, s).empty());
  const Instruction& last = k.instructions.back();
  ASSERT_FALSE(last.depends_on.empty());
  const std::size_t a = position_of(s, last.id);
  const std::size_t b = position_of(s, *last.depends_on.begin());
  ASSERT_LT(b, a);
  std::swap(s.items[a], s.items[b]);
  const Diagnostics d = validate_schedule(k, s);
  ASSERT_FALSE(d.empty());
  EXPECT_TRUE(has_code(d, "DependencyViolation")) << d[0].code;
}

TEST(schedule, missing_and_repeated_runs_are_reported) {
  const Kernel k = lower_one(kPair);
  const Schedule good = linearize(k);
  Schedule s = good;
  s.items.erase(s.items.begin() + static_cast<long>(position_of(s, k.instructions[0].id)));
  EXPECT_FALSE(validate_schedule(k, s).empty());
  s = good;
  s.items.insert(s.items.begin() + 1, s.items[position_of(s, k.instructions[0].id)]);
  EXPECT_FALSE(validate_schedule(k, s).empty());
  s = good;
  s.items.pop_back();
  EXPECT_FALSE(validate_schedule(k, s).empty());
}

TEST(schedule, overlapping_alias_group_is_impossible) {
  Kernel k = lower_one(kPair);
  k = alias_temporaries(k, {"t1", "t2"});
  EXPECT_EQ(error_of([&] { linearize(k); }), ErrorCode::SchedulingImpossible);
  try {
    linearize(k);
  } catch (const Error& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("t1"), std::string::npos) << msg;
    EXPECT_NE(msg.find("t2"), std::string::npos) << msg;
  }
}

TEST(schedule, alias_overlap_is_a_validation_error) {
  const Kernel plain = lower_one(kPair);
  const Schedule s = linearize(plain);
  Kernel aliased = plain;
  aliased.aliases = {{"t1", "t2"}};
  EXPECT_FALSE(validate_schedule(aliased, s).empty());
}

TEST(schedule, every_level_is_valid_and_deterministic) {
  for (int level = 0; level <= kMaxLevel; ++level) {
    for (const Kernel& k : corpus_level(level, 3)) {
      const Schedule s = linearize(k);
      const Diagnostics d = validate_schedule(k, s);
      EXPECT_TRUE(d.empty()) << "level " << level << ": " << (d.empty() ? "" : d[0].message);
      const Kernel copy = parse_kernel_dump(dump_kernel(k));
      EXPECT_EQ(linearize(copy), s) << "level " << level;
      EXPECT_EQ(dump_schedule(linearize(copy)), dump_schedule(s));
    }
  }
}

TEST(schedule, loop_priority_orders_the_nest) {
  const Kernel& k = corpus_level(1, 3).at(0);
  const Schedule s = linearize(k);
  ASSERT_FALSE(k.loop_priority.empty());
  // Every time two prioritized loops are open together, the earlier one
  // in the priority list was entered first.
  std::vector<std::string> open;
  for (const auto& item : s.items) {
    if (item.kind == Kind::enter_loop) {
      open.push_back(item.name);
      for (std::size_t a = 0; a < open.size(); ++a) {
        for (std::size_t b = a + 1; b < open.size(); ++b) {
          const auto pa = std::find(k.loop_priority.begin(), k.loop_priority.end(), open[a]);
          const auto pb = std::find(k.loop_priority.begin(), k.loop_priority.end(), open[b]);
          if (pa != k.loop_priority.end() && pb != k.loop_priority.end()) EXPECT_LT(pa, pb);
        }
      }
    } else if (item.kind == Kind::leave_loop) {
      ASSERT_EQ(open.back(), item.name);
      open.pop_back();
    }
  }
  EXPECT_TRUE(open.empty());
}

TEST(schedule, flux_storage_areas_alternate) {
  const Kernel& k = corpus_level(5, 3).at(0);
  ASSERT_EQ(k.aliases.size(), 2u);
  const Schedule s = linearize(k);
  for (const auto& group : k.aliases) {
    std::vector<std::pair<std::size_t, std::size_t>> ranges;
    for (const auto& t : group) ranges.push_back(live_range(k, s, t));
    std::sort(ranges.begin(), ranges.end());
    for (std::size_t a = 0; a < ranges.size(); ++a) {
      EXPECT_LE(ranges[a].first, ranges[a].second);
      if (a + 1 < ranges.size()) EXPECT_LT(ranges[a].second, ranges[a + 1].first);
    }
  }
  // Each field's flux is consumed before the next field's flux is
  // computed, so at most one temporary per storage area is live.
  std::size_t peak = 0, total = 0;
  for (std::size_t p = 0; p < s.items.size(); ++p) {
    std::size_t live = 0;
    for (const auto& group : k.aliases) {
      for (const auto& t : group) {
        const auto [first, last] = live_range(k, s, t);
        live += first <= p && p <= last;
      }
    }
    peak = std::max(peak, live);
  }
  for (const auto& group : k.aliases) total += group.size();
  EXPECT_EQ(total, 2u * kFields);
  EXPECT_GE(peak, 1u);
  EXPECT_LE(peak, 2u);
}

TEST(schedule, deleting_a_barrier_is_reported) {
  for (int level = 3; level <= kMaxLevel; ++level) {
    const Kernel& k = corpus_level(level, 3).at(0);
    const Schedule s = linearize(k);
    ASSERT_GT(s.barrier_count(), 0u) << "level " << level;
    for (std::size_t p = 0; p < s.items.size(); ++p) {
      if (s.items[p].kind != Kind::barrier) continue;
      Schedule cut = s;
      cut.items.erase(cut.items.begin() + static_cast<long>(p));
      EXPECT_TRUE(has_code(validate_schedule(k, cut), "MissingBarrier"))
          << "level " << level << " barrier at " << p;
    }
  }
}

TEST(schedule, place_barriers_restores_deleted_barriers) {
  const Kernel& k = corpus_level(7, 3).at(0);
  const Schedule s = linearize(k);
  Schedule bare = s;
  std::erase_if(bare.items, [](const ScheduleItem& x) { return x.kind == Kind::barrier; });
  EXPECT_EQ(place_barriers(k, bare), s);
  EXPECT_EQ(place_barriers(k, s), s);
}

TEST(schedule, tree_mirrors_the_items) {
  const Kernel& k = corpus_level(3, 3).at(0);
  const Schedule s = linearize(k);
  const auto tree = schedule_tree(s);
  std::vector<ScheduleItem> flat;
  std::function<void(const std::vector<ScheduleNode>&)> walk = [&](const auto& nodes) {
    for (const auto& n : nodes) {
      flat.push_back({n.kind, n.name});
      if (n.kind == Kind::enter_loop) {
        walk(n.body);
        flat.push_back({Kind::leave_loop, n.name});
      }
    }
  };
  walk(tree);
  EXPECT_EQ(flat, s.items);
}

TEST(schedule, random_kernels_schedule_validly) {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 60; ++trial) {
    const std::string src = random_source(rng);
    const Kernel k = lower_one(src);
    const Schedule s = linearize(k);
    EXPECT_TRUE(validate_schedule(k, s).empty()) << src;
    EXPECT_EQ(linearize(k), s);
  }
}

TEST(schedule, every_recipe_step_is_valid) {
  std::size_t steps = 0;
  apply_script(lower(std::string(volume_source())), parse_transform_script(transform_recipe(kMaxLevel, 2)),
               nullptr, [&](std::size_t step, const TransformCommand& cmd, const std::vector<Kernel>& ks) {
                 ++steps;
                 for (const Kernel& k : ks) {
                   const Diagnostics d = validate_schedule(k, linearize(k));
                   EXPECT_TRUE(d.empty()) << "step " << step << " " << to_string(cmd) << ": "
                                          << (d.empty() ? "" : d[0].message);
                 }
               });
  EXPECT_GT(steps, 0u);
}
