#include "loopforge/match.hpp"

#include <fnmatch.h>

#include <algorithm>
#include <cctype>

#include "loopforge/error.hpp"

namespace loopforge {

bool MatchPredicate::matches(const Instruction& insn, const RuleRegistry& rules) const {
  switch (kind) {
    case Kind::all: return true;
    case Kind::writes: return insn.assignee == name;
    case Kind::tagged: return insn.tags.count(name) != 0;
    case Kind::id_glob: return fnmatch(name.c_str(), insn.id.c_str(), 0) == 0;
    case Kind::reads: {
      if (insn.is_update && insn.assignee == name) return true;
      const Expr expanded = expand_rules(insn.rhs, rules);
      return accessed_arrays(expanded).count(name) || free_variables(expanded).count(name);
    }
    case Kind::all_of:
      return std::all_of(children.begin(), children.end(),
                         [&](const MatchPredicate& c) { return c.matches(insn, rules); });
    case Kind::any_of:
      return std::any_of(children.begin(), children.end(),
                         [&](const MatchPredicate& c) { return c.matches(insn, rules); });
    case Kind::negate: return !children.front().matches(insn, rules);
  }
  return false;
}

std::string MatchPredicate::str() const {
  switch (kind) {
    case Kind::all: return "all";
    case Kind::reads: return "reads:" + name;
    case Kind::writes: return "writes:" + name;
    case Kind::tagged: return "tag:" + name;
    case Kind::id_glob: return "id:" + name;
    case Kind::negate: return "not " + children.front().str();
    case Kind::all_of:
    case Kind::any_of: {
      std::string out = "(";
      for (std::size_t i = 0; i < children.size(); ++i) {
        if (i) out += kind == Kind::all_of ? " and " : " or ";
        out += children[i].str();
      }
      return out + ")";
    }
  }
  return "?";
}

namespace {

class QueryParser {
 public:
  explicit QueryParser(std::string_view text) : text_(text) {}

  MatchPredicate run() {
    MatchPredicate p = parse_or();
    skip_ws();
    if (pos_ != text_.size()) error("unexpected trailing input");
    return p;
  }

 private:
  [[noreturn]] void error(const std::string& what) const {
    fail(ErrorCode::QuerySyntaxError, what + " at column " + std::to_string(pos_ + 1) + " in '" +
                                          std::string(text_) + "'");
  }

  void skip_ws() {
    while (pos_ < text_.size() && std::isspace(static_cast<unsigned char>(text_[pos_]))) ++pos_;
  }

  static bool word_char(char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '*' || c == '?' ||
           c == '[' || c == ']' || c == '.';
  }

  std::string peek_word() {
    skip_ws();
    std::size_t end = pos_;
    while (end < text_.size() && (word_char(text_[end]) || text_[end] == ':')) ++end;
    return std::string(text_.substr(pos_, end - pos_));
  }

  bool accept_keyword(std::string_view kw) {
    if (peek_word() != kw) return false;
    pos_ += kw.size();
    return true;
  }

  MatchPredicate combine(MatchPredicate::Kind kind, std::vector<MatchPredicate> parts) {
    if (parts.size() == 1) return std::move(parts.front());
    return {kind, "", std::move(parts)};
  }

  MatchPredicate parse_or() {
    std::vector<MatchPredicate> parts{parse_and()};
    while (accept_keyword("or")) parts.push_back(parse_and());
    return combine(MatchPredicate::Kind::any_of, std::move(parts));
  }

  MatchPredicate parse_and() {
    std::vector<MatchPredicate> parts{parse_unary()};
    while (accept_keyword("and")) parts.push_back(parse_unary());
    return combine(MatchPredicate::Kind::all_of, std::move(parts));
  }

  MatchPredicate parse_unary() {
    skip_ws();
    if (accept_keyword("not")) return {MatchPredicate::Kind::negate, "", {parse_unary()}};
    if (pos_ < text_.size() && text_[pos_] == '(') {
      ++pos_;
      MatchPredicate inner = parse_or();
      skip_ws();
      if (pos_ >= text_.size() || text_[pos_] != ')') error("expected ')'");
      ++pos_;
      return inner;
    }
    const std::string word = peek_word();
    if (word.empty()) error("expected query");
    pos_ += word.size();
    if (word == "all") return MatchPredicate::all();
    const auto colon = word.find(':');
    if (colon == std::string::npos) error("unknown query '" + word + "'");
    const std::string key = word.substr(0, colon);
    const std::string name = word.substr(colon + 1);
    if (name.empty()) error("missing name after '" + key + ":'");
    if (key == "reads") return {MatchPredicate::Kind::reads, name, {}};
    if (key == "writes") return {MatchPredicate::Kind::writes, name, {}};
    if (key == "tag") return {MatchPredicate::Kind::tagged, name, {}};
    if (key == "id") return {MatchPredicate::Kind::id_glob, name, {}};
    error("unknown query kind '" + key + "'");
  }

  std::string_view text_;
  std::size_t pos_ = 0;
};

}  // namespace

MatchPredicate parse_match(std::string_view text) { return QueryParser(text).run(); }

}  // namespace loopforge
