#include "loopforge/schedule.hpp"

#include <algorithm>
#include <map>
#include <set>

namespace loopforge {

std::size_t Schedule::barrier_count() const {
  return static_cast<std::size_t>(std::count_if(items.begin(), items.end(), [](const auto& it) {
    return it.kind == ScheduleItem::Kind::barrier;
  }));
}

bool opens_loop(const Kernel& k, const std::string& iname) {
  const auto kind = k.tag_of(iname).kind;
  return kind == InameTag::Kind::sequential || kind == InameTag::Kind::unroll;
}

namespace {

using Kind = ScheduleItem::Kind;

std::set<std::string> loops_of(const Kernel& k, const Instruction& insn) {
  std::set<std::string> out;
  for (const auto& i : insn.within) {
    if (opens_loop(k, i)) out.insert(i);
  }
  return out;
}

bool includes(const std::set<std::string>& big, const std::set<std::string>& small) {
  return std::includes(big.begin(), big.end(), small.begin(), small.end());
}

// -- barrier analysis -------------------------------------------------------

struct MemAccess {
  std::string storage;
  std::string array;
  std::vector<Expr> indices;
  bool write = false;
};

std::string storage_of(const Kernel& k, const std::string& array) {
  if (const auto* g = k.alias_group(array)) return g->front();
  return array;
}

/// Accesses other lanes can observe: scratchpad temporaries and global
/// arrays the kernel writes.
std::vector<MemAccess> shared_accesses(const Kernel& k, const Instruction& insn,
                                       const std::set<std::string>& written_globals) {
  auto shared = [&](const std::string& a) {
    if (const auto* t = k.find_temporary(a)) return t->space == AddressSpace::scratchpad;
    return written_globals.count(a) != 0;
  };
  std::vector<MemAccess> out;
  visit(expand_rules(insn.rhs, k.rules), [&](const Expr& x) {
    if (const auto* s = x.as<Subscript>(); s && shared(s->array)) {
      out.push_back({storage_of(k, s->array), s->array, s->indices, false});
    }
  });
  if (shared(insn.assignee)) {
    if (insn.is_update) {
      out.push_back({storage_of(k, insn.assignee), insn.assignee, insn.indices, false});
    }
    out.push_back({storage_of(k, insn.assignee), insn.assignee, insn.indices, true});
  }
  return out;
}

class BarrierPlacer {
 public:
  explicit BarrierPlacer(const Kernel& k) : k_(k) {
    for (const auto& insn : k.instructions) {
      if (!k.find_temporary(insn.assignee)) written_.insert(insn.assignee);
    }
    for (const auto& [iname, tag] : k.iname_tags) {
      if (tag.kind == InameTag::Kind::lane) lane_axes_.insert(tag.axis);
    }
    for (const auto& insn : k.instructions) accesses_[insn.id] = shared_accesses(k, insn, written_);
  }

  std::vector<ScheduleNode> place(std::vector<ScheduleNode> block) {
    std::vector<MemAccess> pending;
    place_block(block, pending);
    return block;
  }

 private:
  /// Both accesses touch only elements owned by the accessing lane.
  bool lane_owned(const MemAccess& a, const MemAccess& b) const {
    if (a.array != b.array) return false;
    for (int axis : lane_axes_) {
      bool found = false;
      for (std::size_t p = 0; p < a.indices.size() && p < b.indices.size() && !found; ++p) {
        const auto* va = a.indices[p].as<Variable>();
        const auto* vb = b.indices[p].as<Variable>();
        if (!va || !vb) continue;
        const auto ta = k_.tag_of(va->name);
        const auto tb = k_.tag_of(vb->name);
        found = ta.kind == InameTag::Kind::lane && tb.kind == InameTag::Kind::lane &&
                ta.axis == axis && tb.axis == axis;
      }
      if (!found) return false;
    }
    return true;
  }

  bool conflicts(const std::vector<MemAccess>& pending, const std::vector<MemAccess>& acc) const {
    if (lane_axes_.empty()) return false;
    for (const auto& a : acc) {
      for (const auto& p : pending) {
        if (a.storage != p.storage || (!a.write && !p.write)) continue;
        if (!lane_owned(a, p)) return true;
      }
    }
    return false;
  }

  void place_block(std::vector<ScheduleNode>& block, std::vector<MemAccess>& pending) {
    std::vector<ScheduleNode> out;
    for (auto& node : block) {
      if (node.kind == Kind::barrier) {
        pending.clear();
        out.push_back(std::move(node));
        continue;
      }
      if (node.kind == Kind::run) {
        const auto& acc = accesses_.at(node.name);
        if (conflicts(pending, acc)) {
          out.push_back({Kind::barrier, "", {}});
          pending.clear();
        }
        pending.insert(pending.end(), acc.begin(), acc.end());
        out.push_back(std::move(node));
        continue;
      }
      // Barriers the body needs on its own, including loop-carried ones.
      std::vector<MemAccess> inner;
      place_block(node.body, inner);
      auto carried = inner;
      bool need = false;
      second_iteration(node.body, carried, need);
      if (need) {
        node.body.push_back({Kind::barrier, "", {}});
        inner.clear();
      }
      // A conflict with earlier accesses is resolved once, ahead of the loop.
      auto entry = pending;
      bool before = false;
      second_iteration(node.body, entry, before);
      if (before) {
        out.push_back({Kind::barrier, "", {}});
        pending.clear();
      }
      if (has_barrier(node.body)) pending.clear();
      pending.insert(pending.end(), inner.begin(), inner.end());
      out.push_back(std::move(node));
    }
    block = std::move(out);
  }

  static bool has_barrier(const std::vector<ScheduleNode>& block) {
    return std::any_of(block.begin(), block.end(), [](const ScheduleNode& n) {
      return n.kind == Kind::barrier || has_barrier(n.body);
    });
  }

  /// Returns true once a barrier is reached.
  bool second_iteration(const std::vector<ScheduleNode>& block, std::vector<MemAccess>& pending,
                        bool& need) const {
    for (const auto& node : block) {
      if (need) return true;
      if (node.kind == Kind::barrier) return true;
      if (node.kind == Kind::run) {
        const auto& acc = accesses_.at(node.name);
        if (conflicts(pending, acc)) {
          need = true;
          return true;
        }
        pending.insert(pending.end(), acc.begin(), acc.end());
        continue;
      }
      if (second_iteration(node.body, pending, need)) return true;
    }
    return false;
  }

  const Kernel& k_;
  std::set<std::string> written_;
  std::set<int> lane_axes_;
  std::map<std::string, std::vector<MemAccess>> accesses_;
};

void flatten_into(const std::vector<ScheduleNode>& nodes, std::vector<ScheduleItem>& out) {
  for (const auto& n : nodes) {
    out.push_back({n.kind, n.name});
    if (n.kind == Kind::enter_loop) {
      flatten_into(n.body, out);
      out.push_back({Kind::leave_loop, n.name});
    }
  }
}

}  // namespace

std::vector<ScheduleNode> schedule_tree(const Schedule& s) {
  std::vector<std::vector<ScheduleNode>> stack(1);
  std::vector<std::string> open;
  for (const auto& it : s.items) {
    switch (it.kind) {
      case Kind::enter_loop:
        stack.emplace_back();
        open.push_back(it.name);
        break;
      case Kind::leave_loop: {
        if (open.empty() || open.back() != it.name) {
          fail(ErrorCode::SchedulingImpossible, "unbalanced loop exit for '" + it.name + "'");
        }
        ScheduleNode loop{Kind::enter_loop, it.name, std::move(stack.back())};
        stack.pop_back();
        open.pop_back();
        stack.back().push_back(std::move(loop));
        break;
      }
      default:
        stack.back().push_back({it.kind, it.name, {}});
    }
  }
  if (!open.empty()) fail(ErrorCode::SchedulingImpossible, "loop '" + open.back() + "' never left");
  return std::move(stack.front());
}

Schedule place_barriers(const Kernel& k, Schedule s) {
  auto tree = BarrierPlacer(k).place(schedule_tree(s));
  Schedule out;
  flatten_into(tree, out.items);
  return out;
}

Schedule linearize(const Kernel& k) {
  const auto& insns = k.instructions;
  const std::size_t n = insns.size();
  std::vector<std::set<std::string>> loops(n);
  std::map<std::string, std::size_t> index_of;
  for (std::size_t i = 0; i < n; ++i) {
    loops[i] = loops_of(k, insns[i]);
    index_of[insns[i].id] = i;
  }
  std::map<std::string, int> rank;
  for (std::size_t p = 0; p < k.loop_priority.size(); ++p) {
    rank.emplace(k.loop_priority[p], static_cast<int>(p));
  }
  for (std::size_t p = 0; p < k.domain.inames.size(); ++p) {
    rank.emplace(k.domain.inames[p].name, 100000 + static_cast<int>(p));
  }

  std::map<std::string, std::vector<std::size_t>> readers, writers;
  for (const auto& group : k.aliases) {
    for (const auto& t : group) {
      for (std::size_t i = 0; i < n; ++i) {
        if (insns[i].assignee == t) writers[t].push_back(i);
        if (reads_array(insns[i], k.rules, t)) readers[t].push_back(i);
      }
    }
  }
  std::vector<bool> done(n, false);
  auto live = [&](const std::string& t) {
    const auto& w = writers[t];
    const auto& r = readers[t];
    return std::any_of(w.begin(), w.end(), [&](auto i) { return done[i]; }) &&
           std::any_of(r.begin(), r.end(), [&](auto i) { return !done[i]; });
  };
  auto ready = [&](std::size_t i) {
    if (done[i]) return false;
    for (const auto& d : insns[i].depends_on) {
      if (!done[index_of.at(d)]) return false;
    }
    if (const auto* g = k.alias_group(insns[i].assignee)) {
      for (const auto& m : *g) {
        if (m != insns[i].assignee && live(m)) return false;
      }
    }
    return true;
  };

  Schedule s;
  std::vector<std::string> active;
  std::set<std::string> active_set;
  auto next_loop = [&](std::size_t i) {
    std::string best;
    for (const auto& l : loops[i]) {
      if (active_set.count(l)) continue;
      if (best.empty() || rank.at(l) < rank.at(best)) best = l;
    }
    return best;
  };
  // Entering `x` must let every instruction that would live inside it run
  // within this one instance of the loop.
  auto enterable = [&](const std::string& x) {
    std::set<std::size_t> inside;
    for (std::size_t j = 0; j < n; ++j) {
      if (!done[j] && loops[j].count(x) && includes(loops[j], active_set)) inside.insert(j);
    }
    for (auto j : inside) {
      for (const auto& d : insns[j].depends_on) {
        const auto di = index_of.at(d);
        if (!done[di] && !inside.count(di)) return false;
      }
    }
    return true;
  };
  auto enter = [&](const std::string& x) {
    s.items.push_back({Kind::enter_loop, x});
    active.push_back(x);
    active_set.insert(x);
  };

  std::size_t remaining = n;
  while (remaining > 0) {
    bool progressed = false;
    for (std::size_t i = 0; i < n && !progressed; ++i) {
      if (loops[i] == active_set && ready(i)) {
        s.items.push_back({Kind::run, insns[i].id});
        done[i] = true;
        --remaining;
        progressed = true;
      }
    }
    if (progressed) continue;
    for (int relaxed = 0; relaxed < 2 && !progressed; ++relaxed) {
      if (relaxed && !active.empty()) break;
      for (std::size_t i = 0; i < n && !progressed; ++i) {
        if (!ready(i) || loops[i].size() <= active_set.size() || !includes(loops[i], active_set)) {
          continue;
        }
        const std::string x = next_loop(i);
        if (relaxed || enterable(x)) {
          enter(x);
          progressed = true;
        }
      }
    }
    if (progressed) continue;
    if (active.empty()) {
      std::vector<std::string> stuck;
      for (std::size_t i = 0; i < n; ++i) {
        if (!done[i]) stuck.push_back(insns[i].id);
      }
      std::string msg = "no schedulable instruction; stuck:";
      for (const auto& id : stuck) msg += " " + id;
      // Name the alias conflicts that keep stuck writers waiting.
      for (std::size_t i = 0; i < n; ++i) {
        const auto* g = done[i] ? nullptr : k.alias_group(insns[i].assignee);
        if (!g) continue;
        for (const auto& m : *g) {
          if (m != insns[i].assignee && live(m)) {
            msg += "; '" + insns[i].assignee + "' shares storage with live '" + m + "'";
          }
        }
      }
      fail(ErrorCode::SchedulingImpossible, msg);
    }
    s.items.push_back({Kind::leave_loop, active.back()});
    active_set.erase(active.back());
    active.pop_back();
  }
  while (!active.empty()) {
    s.items.push_back({Kind::leave_loop, active.back()});
    active.pop_back();
  }
  return place_barriers(k, std::move(s));
}

Diagnostics validate_schedule(const Kernel& k, const Schedule& s) {
  Diagnostics out;
  auto report = [&](std::string code, std::string msg) {
    out.push_back({std::move(code), std::move(msg)});
  };
  std::vector<std::string> active;
  std::vector<int> instance;
  int next_instance = 0;
  std::map<std::string, std::size_t> position;
  // iname -> loop instance, per run
  std::map<std::string, std::map<std::string, int>> instances_of;
  // Loop instance spans in item positions.
  std::map<int, std::pair<std::size_t, std::size_t>> span;
  std::vector<std::vector<int>> enclosing(s.items.size());
  bool structure_ok = true;
  for (std::size_t p = 0; p < s.items.size(); ++p) {
    const auto& it = s.items[p];
    enclosing[p] = instance;
    switch (it.kind) {
      case Kind::enter_loop:
        if (!k.domain.contains(it.name)) {
          report("LoopNesting", "loop over unknown iname '" + it.name + "'");
        } else if (!opens_loop(k, it.name)) {
          report("LoopNesting", "iname '" + it.name + "' is tagged " + k.tag_of(it.name).str() +
                                    " and cannot open a loop");
        }
        if (std::find(active.begin(), active.end(), it.name) != active.end()) {
          report("LoopNesting", "loop '" + it.name + "' entered while already open");
        }
        active.push_back(it.name);
        instance.push_back(next_instance);
        span[next_instance].first = p;
        ++next_instance;
        break;
      case Kind::leave_loop:
        if (active.empty() || active.back() != it.name) {
          report("ScheduleStructure", "loop exit for '" + it.name + "' does not match");
          structure_ok = false;
        } else {
          span[instance.back()].second = p;
          active.pop_back();
          instance.pop_back();
        }
        break;
      case Kind::run: {
        const auto* insn = k.find_instruction(it.name);
        if (!insn) {
          report("MissingInstruction", "schedule runs unknown instruction '" + it.name + "'");
          break;
        }
        if (position.count(it.name)) {
          report("DuplicateInstruction", "'" + it.name + "' is scheduled twice");
        }
        position[it.name] = p;
        const std::set<std::string> have(active.begin(), active.end());
        if (have != loops_of(k, *insn)) {
          report("LoopNesting", "'" + it.name + "' runs inside the wrong loops");
        }
        for (std::size_t a = 0; a < active.size(); ++a) instances_of[it.name][active[a]] = instance[a];
        break;
      }
      case Kind::barrier: break;
    }
  }
  if (!active.empty()) {
    report("ScheduleStructure", "loop '" + active.back() + "' is never left");
    structure_ok = false;
  }
  for (const auto& insn : k.instructions) {
    if (!position.count(insn.id)) report("MissingInstruction", "'" + insn.id + "' is not scheduled");
  }
  for (const auto& insn : k.instructions) {
    if (!position.count(insn.id)) continue;
    for (const auto& d : insn.depends_on) {
      if (!position.count(d)) continue;
      if (position[d] > position[insn.id]) {
        report("DependencyViolation", "'" + insn.id + "' runs before its dependency '" + d + "'");
        continue;
      }
      // Accumulations into the same array that never read it otherwise
      // commute, so they may run in separate instances of a shared loop.
      const Instruction* dep = k.find_instruction(d);
      const bool commuting = dep && insn.is_update && dep->is_update &&
                             insn.assignee == dep->assignee &&
                             !accessed_arrays(expand_rules(insn.rhs, k.rules)).count(insn.assignee) &&
                             !accessed_arrays(expand_rules(dep->rhs, k.rules)).count(dep->assignee);
      if (commuting) continue;
      for (const auto& [iname, inst] : instances_of[insn.id]) {
        auto it = instances_of[d].find(iname);
        if (it != instances_of[d].end() && it->second != inst) {
          report("DependencyViolation", "'" + insn.id + "' and '" + d +
                                            "' share loop '" + iname + "' but not its instance");
        }
      }
    }
  }
  // Alias lifetimes, widened to whole loop instances a value outlives.
  for (const auto& group : k.aliases) {
    std::vector<std::pair<std::size_t, std::size_t>> lifetimes;
    std::vector<std::string> names;
    for (const auto& t : group) {
      std::size_t first = s.items.size(), last = 0;
      bool any = false;
      for (const auto& insn : k.instructions) {
        if (!position.count(insn.id)) continue;
        const bool touches = insn.assignee == t || reads_array(insn, k.rules, t);
        if (!touches) continue;
        any = true;
        first = std::min(first, position[insn.id]);
        last = std::max(last, position[insn.id]);
      }
      if (!any) continue;
      const auto& outer_first = enclosing[first];
      const auto& outer_last = enclosing[last];
      for (int inst : outer_first) {
        if (std::find(outer_last.begin(), outer_last.end(), inst) == outer_last.end()) {
          first = std::min(first, span[inst].first);
          last = std::max(last, span[inst].second);
        }
      }
      for (int inst : outer_last) {
        if (std::find(outer_first.begin(), outer_first.end(), inst) == outer_first.end()) {
          first = std::min(first, span[inst].first);
          last = std::max(last, span[inst].second);
        }
      }
      lifetimes.emplace_back(first, last);
      names.push_back(t);
    }
    for (std::size_t a = 0; a < lifetimes.size(); ++a) {
      for (std::size_t b = a + 1; b < lifetimes.size(); ++b) {
        if (lifetimes[a].first <= lifetimes[b].second && lifetimes[b].first <= lifetimes[a].second) {
          report("AliasOverlap", "aliased temporaries '" + names[a] + "' and '" + names[b] +
                                     "' are live at the same time");
        }
      }
    }
  }
  if (structure_ok && out.empty()) {
    const auto placed = place_barriers(k, s);
    if (placed.barrier_count() != s.barrier_count()) {
      report("MissingBarrier", std::to_string(placed.barrier_count() - s.barrier_count()) +
                                   " lane barrier(s) missing");
    }
  }
  return out;
}

std::string dump_schedule(const Schedule& s) {
  std::string out;
  int depth = 0;
  for (const auto& it : s.items) {
    if (it.kind == Kind::leave_loop) --depth;
    out += std::string(static_cast<std::size_t>(std::max(depth, 0)) * 2, ' ');
    switch (it.kind) {
      case Kind::enter_loop: out += "for " + it.name; break;
      case Kind::leave_loop: out += "end " + it.name; break;
      case Kind::run: out += it.name; break;
      case Kind::barrier: out += "barrier"; break;
    }
    out += "\n";
    if (it.kind == Kind::enter_loop) ++depth;
  }
  return out;
}

}  // namespace loopforge
