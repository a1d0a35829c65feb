#pragma once

// Declarative transform scripts: one `<command> key=value ...` per line,
// comma-separated lists, double-quoted values, `#` comments.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include "loopforge/kernel.hpp"
#include "loopforge/match.hpp"

namespace loopforge {

struct FuseCommand {
  std::vector<std::string> suffixes;
  std::optional<std::string> name;
};

struct FixParametersCommand {
  std::vector<std::pair<std::string, int64_t>> values;
};

struct AssumeCommand {
  std::string constraint;
};

struct PrioritizeLoopsCommand {
  std::vector<std::string> order;
};

struct TagInamesCommand {
  std::vector<std::pair<std::string, InameTag>> tags;
};

struct RenameInameCommand {
  std::string old_name;
  std::string new_name;
  MatchPredicate within;
  bool existing_ok = false;
};

struct SetArrayAxisNamesCommand {
  std::string array;
  std::vector<std::string> names;
};

struct SplitArrayAxisCommand {
  std::string array;
  std::string axis;  // axis name or index
  int64_t factor = 1;
};

struct TagArrayAxesCommand {
  std::string array;
  std::vector<DimTag> tags;
};

struct AssignmentToSubstCommand {
  std::vector<std::string> vars;
  std::optional<MatchPredicate> within;
};

struct PrecomputeCommand {
  std::string rule;
  std::vector<std::string> sweep;
  std::vector<std::string> compute_inames;
  std::optional<std::vector<std::string>> storage_axes;
  MatchPredicate within;
  AddressSpace space = AddressSpace::priv;
  std::optional<std::string> temp;
  /// Tags for the leading compute inames, applied once they exist.
  std::vector<InameTag> compute_tags;
};

struct AddPrefetchCommand {
  std::string var;
  std::optional<std::vector<std::string>> sweep;
  std::vector<std::string> fetch_inames;
  AddressSpace space = AddressSpace::priv;
  MatchPredicate within;
  std::vector<InameTag> fetch_tags;
};

struct AliasTemporariesCommand {
  std::vector<std::string> names;
};

enum class BufferInit { zero, load };
enum class BufferStore { assign, accumulate };

struct BufferArrayCommand {
  std::string var;
  std::vector<std::string> buffer_inames;
  BufferInit init = BufferInit::zero;
  BufferStore store = BufferStore::accumulate;
  MatchPredicate within;
};

struct CollectCommonFactorsCommand {
  std::string var;
};

using TransformCommand =
    std::variant<FuseCommand, FixParametersCommand, AssumeCommand, PrioritizeLoopsCommand,
                 TagInamesCommand, RenameInameCommand, SetArrayAxisNamesCommand,
                 SplitArrayAxisCommand, TagArrayAxesCommand, AssignmentToSubstCommand,
                 PrecomputeCommand, AddPrefetchCommand, AliasTemporariesCommand,
                 BufferArrayCommand, CollectCommonFactorsCommand>;

std::string_view command_name(const TransformCommand& cmd);
/// Script line that parses back to `cmd`.
std::string to_string(const TransformCommand& cmd);

/// Throws ScriptSyntaxError (with line), UnknownCommand or BadArgument.
std::vector<TransformCommand> parse_transform_script(std::string_view text);

}  // namespace loopforge
