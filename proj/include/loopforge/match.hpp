#pragma once

// Instruction match queries:
//   reads:<name> | writes:<name> | tag:<name> | id:<glob> | all
//   | not P | (P and P ...) | (P or P ...)

#include <string>
#include <string_view>
#include <vector>

#include "loopforge/kernel.hpp"

namespace loopforge {

struct MatchPredicate {
  enum class Kind { reads, writes, tagged, id_glob, all, all_of, any_of, negate };

  Kind kind = Kind::all;
  std::string name;
  std::vector<MatchPredicate> children;

  static MatchPredicate all() { return {}; }

  /// ReadsVar looks at the fully expanded right-hand side.
  bool matches(const Instruction& insn, const RuleRegistry& rules) const;
  std::string str() const;

  friend bool operator==(const MatchPredicate&, const MatchPredicate&) = default;
};

/// Throws QuerySyntaxError.
MatchPredicate parse_match(std::string_view text);

}  // namespace loopforge
