#include "loopforge/script.hpp"

#include <algorithm>
#include <cctype>
#include <set>

#include "loopforge/error.hpp"

namespace loopforge {

namespace {

struct RawCommand {
  std::string name;
  std::vector<std::pair<std::string, std::string>> args;
  int line = 0;
};

RawCommand tokenize_line(std::string_view text, int line) {
  auto error = [&](const std::string& what) {
    fail(ErrorCode::ScriptSyntaxError, "script line " + std::to_string(line) + ": " + what);
  };
  std::vector<std::string> words;
  std::vector<bool> quoted_value;
  std::string cur;
  bool in_quotes = false;
  bool had_quotes = false;
  bool any = false;
  for (std::size_t i = 0; i <= text.size(); ++i) {
    const char c = i < text.size() ? text[i] : '\n';
    if (in_quotes) {
      if (c == '\n') error("unterminated quote");
      if (c == '"') {
        in_quotes = false;
      } else {
        cur += c;
      }
      continue;
    }
    if (c == '"') {
      in_quotes = true;
      had_quotes = true;
      any = true;
      continue;
    }
    if (c == '#' || c == '\n' || std::isspace(static_cast<unsigned char>(c))) {
      if (any) {
        words.push_back(cur);
        quoted_value.push_back(had_quotes);
      }
      cur.clear();
      any = had_quotes = false;
      if (c == '#') break;
      continue;
    }
    cur += c;
    any = true;
  }
  RawCommand raw;
  raw.line = line;
  if (words.empty()) return raw;
  raw.name = words.front();
  for (std::size_t i = 1; i < words.size(); ++i) {
    const auto eq = words[i].find('=');
    if (eq == std::string::npos || eq == 0) error("expected key=value, got '" + words[i] + "'");
    raw.args.emplace_back(words[i].substr(0, eq), words[i].substr(eq + 1));
  }
  return raw;
}

class Args {
 public:
  explicit Args(const RawCommand& raw) : raw_(raw) {
    std::set<std::string> seen;
    for (const auto& [k, v] : raw.args) {
      if (!seen.insert(k).second) bad("duplicate key '" + k + "'");
    }
  }

  [[noreturn]] void bad(const std::string& what) const {
    fail(ErrorCode::BadArgument,
         "script line " + std::to_string(raw_.line) + " (" + raw_.name + "): " + what);
  }

  void allow(std::initializer_list<std::string_view> keys) const {
    for (const auto& [k, v] : raw_.args) {
      if (std::find(keys.begin(), keys.end(), k) == keys.end()) bad("unknown key '" + k + "'");
    }
  }

  std::optional<std::string> get(std::string_view key) const {
    for (const auto& [k, v] : raw_.args) {
      if (k == key) return v;
    }
    return std::nullopt;
  }

  std::string required(std::string_view key) const {
    auto v = get(key);
    if (!v) bad("missing '" + std::string(key) + "'");
    if (v->empty()) bad("empty '" + std::string(key) + "'");
    return *v;
  }

  static std::vector<std::string> split_list(const std::string& v) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : v + ",") {
      if (c == ',') {
        if (!cur.empty()) out.push_back(cur);
        cur.clear();
      } else if (!std::isspace(static_cast<unsigned char>(c))) {
        cur += c;
      }
    }
    return out;
  }

  std::vector<std::string> list(std::string_view key, bool required_key) const {
    auto v = get(key);
    if (!v) {
      if (required_key) bad("missing '" + std::string(key) + "'");
      return {};
    }
    return split_list(*v);
  }

  int64_t integer(const std::string& text) const {
    if (text.empty() || !std::all_of(text.begin() + (text[0] == '-'), text.end(), ::isdigit) ||
        text == "-") {
      bad("expected an integer, got '" + text + "'");
    }
    return std::stoll(text);
  }

  MatchPredicate within() const {
    auto v = get("within");
    if (!v) return MatchPredicate::all();
    try {
      return parse_match(*v);
    } catch (const Error& err) {
      bad(err.what());
    }
  }

  AddressSpace space() const {
    const std::string s = required("space");
    if (s == "scratchpad" || s == "local") return AddressSpace::scratchpad;
    if (s == "private") return AddressSpace::priv;
    bad("space must be scratchpad or private, got '" + s + "'");
  }

  InameTag tag(const std::string& text) const {
    try {
      return InameTag::parse(text);
    } catch (const Error&) {
      bad("bad iname tag '" + text + "'");
    }
  }

  const RawCommand& raw() const { return raw_; }

 private:
  const RawCommand& raw_;
};

TransformCommand build(const RawCommand& raw) {
  const Args a(raw);
  const std::string& n = raw.name;
  if (n == "fuse") {
    a.allow({"suffixes", "name"});
    FuseCommand c;
    c.suffixes = a.list("suffixes", true);
    if (c.suffixes.empty()) a.bad("suffixes must not be empty");
    c.name = a.get("name");
    return c;
  }
  if (n == "fix_parameters") {
    FixParametersCommand c;
    for (const auto& [k, v] : raw.args) c.values.emplace_back(k, a.integer(v));
    return c;
  }
  if (n == "assume") {
    a.allow({"constraint"});
    return AssumeCommand{a.required("constraint")};
  }
  if (n == "prioritize_loops") {
    a.allow({"order"});
    return PrioritizeLoopsCommand{a.list("order", true)};
  }
  if (n == "tag_inames") {
    TagInamesCommand c;
    for (const auto& [k, v] : raw.args) c.tags.emplace_back(k, a.tag(v));
    return c;
  }
  if (n == "rename_iname") {
    a.allow({"old", "new", "within", "existing_ok"});
    RenameInameCommand c;
    c.old_name = a.required("old");
    c.new_name = a.required("new");
    c.within = a.within();
    if (auto e = a.get("existing_ok")) {
      if (*e != "true" && *e != "false") a.bad("existing_ok must be true or false");
      c.existing_ok = *e == "true";
    }
    return c;
  }
  if (n == "set_array_axis_names") {
    a.allow({"array", "names"});
    return SetArrayAxisNamesCommand{a.required("array"), a.list("names", true)};
  }
  if (n == "split_array_axis") {
    a.allow({"array", "axis", "factor"});
    SplitArrayAxisCommand c{a.required("array"), a.required("axis"), a.integer(a.required("factor"))};
    if (c.factor < 1) a.bad("factor must be positive");
    return c;
  }
  if (n == "tag_array_axes") {
    a.allow({"array", "tags"});
    TagArrayAxesCommand c;
    c.array = a.required("array");
    for (const auto& t : a.list("tags", true)) {
      if (t == "vec") {
        c.tags.push_back(DimTag::vec());
      } else if (t.size() > 1 && t[0] == 'N' &&
                 std::all_of(t.begin() + 1, t.end(), ::isdigit)) {
        c.tags.push_back(DimTag::nest(std::stoi(t.substr(1))));
      } else {
        a.bad("bad axis tag '" + t + "'");
      }
    }
    return c;
  }
  if (n == "assignment_to_subst") {
    a.allow({"var", "within"});
    AssignmentToSubstCommand c;
    c.vars = a.list("var", false);
    if (a.get("within")) c.within = a.within();
    if (c.vars.empty() && !c.within) a.bad("needs 'var' or 'within'");
    return c;
  }
  if (n == "precompute") {
    a.allow({"rule", "sweep", "compute_inames", "storage_axes", "within", "space", "temp", "tags"});
    PrecomputeCommand c;
    c.rule = a.required("rule");
    c.sweep = a.list("sweep", false);
    c.compute_inames = a.list("compute_inames", false);
    if (a.get("storage_axes")) c.storage_axes = a.list("storage_axes", false);
    c.within = a.within();
    c.space = a.space();
    c.temp = a.get("temp");
    for (const auto& t : a.list("tags", false)) c.compute_tags.push_back(a.tag(t));
    return c;
  }
  if (n == "add_prefetch") {
    a.allow({"var", "sweep", "fetch_inames", "space", "within", "tags"});
    AddPrefetchCommand c;
    c.var = a.required("var");
    if (a.get("sweep")) c.sweep = a.list("sweep", false);
    c.fetch_inames = a.list("fetch_inames", false);
    c.space = a.space();
    c.within = a.within();
    for (const auto& t : a.list("tags", false)) c.fetch_tags.push_back(a.tag(t));
    return c;
  }
  if (n == "alias_temporaries") {
    a.allow({"names"});
    AliasTemporariesCommand c{a.list("names", true)};
    if (c.names.empty()) a.bad("names must not be empty");
    return c;
  }
  if (n == "buffer_array") {
    a.allow({"var", "buffer_inames", "init", "store", "within"});
    BufferArrayCommand c;
    c.var = a.required("var");
    c.buffer_inames = a.list("buffer_inames", false);
    const std::string init = a.get("init").value_or("zero");
    const std::string store = a.get("store").value_or("accumulate");
    if (init == "zero") {
      c.init = BufferInit::zero;
    } else if (init == "load") {
      c.init = BufferInit::load;
    } else {
      a.bad("init must be zero or load");
    }
    if (store == "assign") {
      c.store = BufferStore::assign;
    } else if (store == "accumulate") {
      c.store = BufferStore::accumulate;
    } else {
      a.bad("store must be assign or accumulate");
    }
    c.within = a.within();
    return c;
  }
  if (n == "collect_common_factors") {
    a.allow({"var"});
    return CollectCommonFactorsCommand{a.required("var")};
  }
  fail(ErrorCode::UnknownCommand,
       "script line " + std::to_string(raw.line) + ": unknown command '" + n + "'");
}

std::string join(const std::vector<std::string>& items) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) out += (i ? "," : "") + items[i];
  return out;
}

std::string quoted(const std::string& s) {
  const bool plain = !s.empty() && std::none_of(s.begin(), s.end(), [](char c) {
    return std::isspace(static_cast<unsigned char>(c)) || c == '#' || c == '"';
  });
  return plain ? s : "\"" + s + "\"";
}

std::string space_name(AddressSpace s) { return s == AddressSpace::priv ? "private" : "scratchpad"; }

std::string within_arg(const MatchPredicate& p) {
  return p.kind == MatchPredicate::Kind::all ? "" : " within=" + quoted(p.str());
}

}  // namespace

std::string_view command_name(const TransformCommand& cmd) {
  static constexpr std::string_view names[] = {
      "fuse",           "fix_parameters",         "assume",       "prioritize_loops",
      "tag_inames",     "rename_iname",           "set_array_axis_names",
      "split_array_axis", "tag_array_axes",       "assignment_to_subst",
      "precompute",     "add_prefetch",           "alias_temporaries",
      "buffer_array",   "collect_common_factors"};
  return names[cmd.index()];
}

std::string to_string(const TransformCommand& cmd) {
  std::string out(command_name(cmd));
  std::visit(
      [&](const auto& c) {
        using T = std::decay_t<decltype(c)>;
        if constexpr (std::is_same_v<T, FuseCommand>) {
          out += " suffixes=" + join(c.suffixes);
          if (c.name) out += " name=" + *c.name;
        } else if constexpr (std::is_same_v<T, FixParametersCommand>) {
          for (const auto& [k, v] : c.values) out += " " + k + "=" + std::to_string(v);
        } else if constexpr (std::is_same_v<T, AssumeCommand>) {
          out += " constraint=" + quoted(c.constraint);
        } else if constexpr (std::is_same_v<T, PrioritizeLoopsCommand>) {
          out += " order=" + join(c.order);
        } else if constexpr (std::is_same_v<T, TagInamesCommand>) {
          for (const auto& [k, v] : c.tags) out += " " + k + "=" + v.str();
        } else if constexpr (std::is_same_v<T, RenameInameCommand>) {
          out += " old=" + c.old_name + " new=" + c.new_name + within_arg(c.within);
          if (c.existing_ok) out += " existing_ok=true";
        } else if constexpr (std::is_same_v<T, SetArrayAxisNamesCommand>) {
          out += " array=" + c.array + " names=" + join(c.names);
        } else if constexpr (std::is_same_v<T, SplitArrayAxisCommand>) {
          out += " array=" + c.array + " axis=" + c.axis + " factor=" + std::to_string(c.factor);
        } else if constexpr (std::is_same_v<T, TagArrayAxesCommand>) {
          std::vector<std::string> tags;
          for (const auto& t : c.tags) tags.push_back(t.str());
          out += " array=" + c.array + " tags=" + join(tags);
        } else if constexpr (std::is_same_v<T, AssignmentToSubstCommand>) {
          if (!c.vars.empty()) out += " var=" + join(c.vars);
          if (c.within) out += " within=" + quoted(c.within->str());
        } else if constexpr (std::is_same_v<T, PrecomputeCommand>) {
          out += " rule=" + c.rule;
          if (!c.sweep.empty()) out += " sweep=" + join(c.sweep);
          if (!c.compute_inames.empty()) out += " compute_inames=" + join(c.compute_inames);
          if (c.storage_axes) out += " storage_axes=" + join(*c.storage_axes);
          out += within_arg(c.within);
          out += " space=" + space_name(c.space);
          if (c.temp) out += " temp=" + *c.temp;
          if (!c.compute_tags.empty()) {
            std::vector<std::string> tags;
            for (const auto& t : c.compute_tags) tags.push_back(t.str());
            out += " tags=" + join(tags);
          }
        } else if constexpr (std::is_same_v<T, AddPrefetchCommand>) {
          out += " var=" + c.var;
          if (c.sweep) out += " sweep=" + join(*c.sweep);
          if (!c.fetch_inames.empty()) out += " fetch_inames=" + join(c.fetch_inames);
          out += " space=" + space_name(c.space) + within_arg(c.within);
          if (!c.fetch_tags.empty()) {
            std::vector<std::string> tags;
            for (const auto& t : c.fetch_tags) tags.push_back(t.str());
            out += " tags=" + join(tags);
          }
        } else if constexpr (std::is_same_v<T, AliasTemporariesCommand>) {
          out += " names=" + join(c.names);
        } else if constexpr (std::is_same_v<T, BufferArrayCommand>) {
          out += " var=" + c.var;
          if (!c.buffer_inames.empty()) out += " buffer_inames=" + join(c.buffer_inames);
          out += std::string(" init=") + (c.init == BufferInit::zero ? "zero" : "load");
          out += std::string(" store=") + (c.store == BufferStore::assign ? "assign" : "accumulate");
          out += within_arg(c.within);
        } else {
          out += " var=" + c.var;
        }
      },
      cmd);
  return out;
}

std::vector<TransformCommand> parse_transform_script(std::string_view text) {
  std::vector<TransformCommand> out;
  int line = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    auto nl = text.find('\n', start);
    if (nl == std::string_view::npos) nl = text.size();
    ++line;
    const RawCommand raw = tokenize_line(text.substr(start, nl - start), line);
    start = nl + 1;
    if (raw.name.empty()) continue;
    const bool ident = std::all_of(raw.name.begin(), raw.name.end(), [](char c) {
      return std::isalnum(static_cast<unsigned char>(c)) || c == '_';
    });
    if (!ident) {
      fail(ErrorCode::ScriptSyntaxError,
           "script line " + std::to_string(line) + ": bad command name '" + raw.name + "'");
    }
    out.push_back(build(raw));
  }
  return out;
}

}  // namespace loopforge
