#include "loopforge/frontend.hpp"

#include <algorithm>
#include <cctype>
#include <functional>
#include <set>

#include "loopforge/error.hpp"

namespace loopforge {

const Declaration* Subroutine::find_decl(std::string_view name) const {
  for (const auto& d : decls) {
    if (d.name == name) return &d;
  }
  return nullptr;
}

namespace {

std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

// ---------------------------------------------------------------------------
// logical lines

struct LogicalLine {
  std::string text;
  int line = 0;
};

enum class DirectiveKind { none, begin_tagged, end_tagged, begin_transform, end_transform };

struct Directive {
  DirectiveKind kind = DirectiveKind::none;
  std::vector<std::string> tags;
};

Directive parse_directive(const std::string& trimmed, int line) {
  const std::string low = lower(trimmed);
  if (low.rfind("!$loopy", 0) != 0) return {};
  std::string rest = trim(std::string_view(low).substr(7));
  auto tags_after = [&](std::string_view prefix) {
    std::string original = trim(std::string_view(trimmed).substr(7));
    std::string list = trim(std::string_view(original).substr(prefix.size()));
    std::vector<std::string> tags;
    std::string cur;
    for (char c : list + ",") {
      if (c == ',' || c == ' ') {
        if (!cur.empty()) tags.push_back(cur);
        cur.clear();
      } else {
        cur += c;
      }
    }
    if (tags.empty()) {
      fail(ErrorCode::SyntaxError, "line " + std::to_string(line) + ", column 1: missing region tag");
    }
    for (const auto& t : tags) {
      const bool ok = (std::isalpha(static_cast<unsigned char>(t[0])) || t[0] == '_') &&
                      std::all_of(t.begin(), t.end(), [](char c) {
                        return std::isalnum(static_cast<unsigned char>(c)) || c == '_';
                      });
      if (!ok) {
        fail(ErrorCode::SyntaxError,
             "line " + std::to_string(line) + ", column 1: bad region tag '" + t + "'");
      }
    }
    return tags;
  };
  if (rest.rfind("begin tagged:", 0) == 0) return {DirectiveKind::begin_tagged, tags_after("begin tagged:")};
  if (rest.rfind("end tagged:", 0) == 0) return {DirectiveKind::end_tagged, tags_after("end tagged:")};
  if (rest == "begin transform") return {DirectiveKind::begin_transform, {}};
  if (rest == "end transform") return {DirectiveKind::end_transform, {}};
  fail(ErrorCode::SyntaxError, "line " + std::to_string(line) + ", column 1: unknown directive '" +
                                   trimmed + "'");
}

std::string strip_comment(const std::string& s) {
  const auto bang = s.find('!');
  return bang == std::string::npos ? s : s.substr(0, bang);
}

// ---------------------------------------------------------------------------
// tokens

enum class Tok { ident, integer, real, op, end };

struct Token {
  Tok kind = Tok::end;
  std::string text;
  int col = 0;
};

std::vector<Token> tokenize(const std::string& text, int line) {
  std::vector<Token> out;
  std::size_t i = 0;
  auto error = [&](const std::string& what) {
    fail(ErrorCode::SyntaxError,
         "line " + std::to_string(line) + ", column " + std::to_string(i + 1) + ": " + what);
  };
  while (i < text.size()) {
    const char c = text[i];
    if (std::isspace(static_cast<unsigned char>(c))) {
      ++i;
      continue;
    }
    const int col = static_cast<int>(i) + 1;
    if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
      std::size_t j = i;
      while (j < text.size() && (std::isalnum(static_cast<unsigned char>(text[j])) || text[j] == '_')) ++j;
      out.push_back({Tok::ident, text.substr(i, j - i), col});
      i = j;
      continue;
    }
    if (std::isdigit(static_cast<unsigned char>(c)) ||
        (c == '.' && i + 1 < text.size() && std::isdigit(static_cast<unsigned char>(text[i + 1])))) {
      std::size_t j = i;
      bool real = false;
      while (j < text.size() && std::isdigit(static_cast<unsigned char>(text[j]))) ++j;
      if (j < text.size() && text[j] == '.') {
        real = true;
        ++j;
        while (j < text.size() && std::isdigit(static_cast<unsigned char>(text[j]))) ++j;
      }
      if (j < text.size() && (text[j] == 'e' || text[j] == 'E' || text[j] == 'd' || text[j] == 'D')) {
        std::size_t k = j + 1;
        if (k < text.size() && (text[k] == '+' || text[k] == '-')) ++k;
        if (k < text.size() && std::isdigit(static_cast<unsigned char>(text[k]))) {
          real = true;
          while (k < text.size() && std::isdigit(static_cast<unsigned char>(text[k]))) ++k;
          j = k;
        }
      }
      std::string lit = text.substr(i, j - i);
      std::replace(lit.begin(), lit.end(), 'd', 'e');
      std::replace(lit.begin(), lit.end(), 'D', 'e');
      if (j < text.size() && text[j] == '_') {  // kind suffix
        ++j;
        while (j < text.size() && std::isalnum(static_cast<unsigned char>(text[j]))) ++j;
      }
      out.push_back({real ? Tok::real : Tok::integer, lit, col});
      i = j;
      continue;
    }
    // Relational operators only occur in unsupported statements; they are
    // tokenized so the statement parser can name the construct.
    static const char* const two[] = {"**", "::", "==", "/=", "<=", ">="};
    bool matched = false;
    for (const char* op : two) {
      if (text.compare(i, 2, op) == 0) {
        out.push_back({Tok::op, op, col});
        i += 2;
        matched = true;
        break;
      }
    }
    if (matched) continue;
    if (std::string_view("()=,+-*/:<>.").find(c) != std::string_view::npos) {
      out.push_back({Tok::op, std::string(1, c), col});
      ++i;
      continue;
    }
    error(std::string("unexpected character '") + c + "'");
  }
  out.push_back({Tok::end, "", static_cast<int>(text.size()) + 1});
  return out;
}

// ---------------------------------------------------------------------------
// parser

class Parser {
 public:
  explicit Parser(std::string_view text) : text_(text) {}

  SourceUnit run() {
    collect_lines();
    std::size_t pos = 0;
    while (pos < lines_.size()) {
      const auto& ll = lines_[pos];
      start(ll);
      if (lower(peek().text) == "subroutine") {
        pos = parse_subroutine(pos);
      } else {
        error("expected 'subroutine'");
      }
    }
    apply_directives(items_.size());
    if (!open_tags_.empty()) {
      fail(ErrorCode::SyntaxError,
           "line " + std::to_string(open_tags_.back().second) + ", column 1: unterminated region '" +
               open_tags_.back().first + "'");
    }
    return std::move(unit_);
  }

 private:
  struct PendingDirective {
    Directive directive;
    int line;
  };

  // Each statement carries the directives preceding it so that region
  // membership can be resolved in statement order.
  struct Item {
    std::vector<PendingDirective> before;
    LogicalLine stmt;
  };

  void collect_lines() {
    std::vector<std::string> physical;
    {
      std::size_t start = 0;
      while (start <= text_.size()) {
        auto nl = text_.find('\n', start);
        if (nl == std::string_view::npos) nl = text_.size();
        physical.emplace_back(text_.substr(start, nl - start));
        start = nl + 1;
      }
    }
    bool in_transform = false;
    int transform_line = 0;
    std::string transform;
    std::vector<PendingDirective> pending;
    std::string carry;
    int carry_line = 0;
    for (std::size_t n = 0; n < physical.size(); ++n) {
      const int line = static_cast<int>(n) + 1;
      const std::string t = trim(physical[n]);
      const Directive d = t.rfind("!$", 0) == 0 ? parse_directive(t, line) : Directive{};
      if (in_transform) {
        if (d.kind == DirectiveKind::end_transform) {
          in_transform = false;
          unit_.transform_block = transform;
          continue;
        }
        if (d.kind != DirectiveKind::none) {
          fail(ErrorCode::SyntaxError,
               "line " + std::to_string(line) + ", column 1: directive inside transform block");
        }
        std::string content = t;
        if (!content.empty() && content[0] == '!') content = content.substr(1);
        if (!content.empty() && content[0] == ' ') content = content.substr(1);
        transform += content + "\n";
        continue;
      }
      if (d.kind == DirectiveKind::begin_transform) {
        if (unit_.transform_block) {
          fail(ErrorCode::SyntaxError,
               "line " + std::to_string(line) + ", column 1: second transform block");
        }
        in_transform = true;
        transform_line = line;
        continue;
      }
      if (d.kind == DirectiveKind::end_transform) {
        fail(ErrorCode::SyntaxError,
             "line " + std::to_string(line) + ", column 1: 'end transform' without 'begin transform'");
      }
      if (d.kind != DirectiveKind::none) {
        if (!carry.empty()) {
          fail(ErrorCode::SyntaxError,
               "line " + std::to_string(line) + ", column 1: directive inside continued statement");
        }
        pending.push_back({d, line});
        continue;
      }
      std::string code = trim(strip_comment(physical[n]));
      if (code.empty()) continue;
      if (!carry.empty() && code[0] == '&') code = trim(code.substr(1));
      const bool continues = !code.empty() && code.back() == '&';
      if (continues) code = trim(code.substr(0, code.size() - 1));
      if (carry.empty()) carry_line = line;
      carry += (carry.empty() ? "" : " ") + code;
      if (continues) continue;
      items_.push_back({std::move(pending), {carry, carry_line}});
      pending.clear();
      carry.clear();
    }
    if (in_transform) {
      fail(ErrorCode::SyntaxError,
           "line " + std::to_string(transform_line) + ", column 1: unterminated transform block");
    }
    if (!carry.empty()) {
      fail(ErrorCode::SyntaxError,
           "line " + std::to_string(carry_line) + ", column 1: continuation at end of file");
    }
    trailing_ = std::move(pending);
    for (const auto& item : items_) lines_.push_back(item.stmt);
  }

  void apply_directives(std::size_t item_index) {
    for (; applied_ <= item_index && applied_ <= items_.size(); ++applied_) {
      apply_list(applied_ < items_.size() ? items_[applied_].before : trailing_);
    }
  }

  void apply_list(const std::vector<PendingDirective>& list) {
    for (const auto& pd : list) {
      if (pd.directive.kind == DirectiveKind::begin_tagged) {
        for (const auto& tag : pd.directive.tags) open_tags_.emplace_back(tag, pd.line);
      } else {
        for (const auto& tag : pd.directive.tags) {
          auto it = std::find_if(open_tags_.rbegin(), open_tags_.rend(),
                                 [&](const auto& p) { return p.first == tag; });
          if (it == open_tags_.rend()) {
            fail(ErrorCode::SyntaxError, "line " + std::to_string(pd.line) +
                                             ", column 1: 'end tagged: " + tag +
                                             "' without matching begin");
          }
          unit_.tagged_regions[tag].push_back({it->second, pd.line});
          open_tags_.erase(std::next(it).base());
        }
      }
    }
  }

  std::vector<std::string> current_tags() const {
    std::vector<std::string> tags;
    for (const auto& [tag, line] : open_tags_) {
      if (std::find(tags.begin(), tags.end(), tag) == tags.end()) tags.push_back(tag);
    }
    std::sort(tags.begin(), tags.end());
    return tags;
  }

  // -- token cursor --------------------------------------------------------

  void start(const LogicalLine& ll) {
    toks_ = tokenize(ll.text, ll.line);
    tpos_ = 0;
    line_ = ll.line;
  }

  const Token& peek(std::size_t ahead = 0) const {
    return toks_[std::min(tpos_ + ahead, toks_.size() - 1)];
  }
  Token next() { return toks_[std::min(tpos_++, toks_.size() - 1)]; }
  bool at_end() const { return peek().kind == Tok::end; }

  bool accept_op(std::string_view op) {
    if (peek().kind == Tok::op && peek().text == op) {
      ++tpos_;
      return true;
    }
    return false;
  }
  void expect_op(std::string_view op) {
    if (!accept_op(op)) error("expected '" + std::string(op) + "'");
  }
  bool accept_word(std::string_view word) {
    if (peek().kind == Tok::ident && lower(peek().text) == word) {
      ++tpos_;
      return true;
    }
    return false;
  }
  std::string expect_ident() {
    if (peek().kind != Tok::ident) error("expected identifier");
    return next().text;
  }
  void expect_end() {
    if (!at_end()) error("unexpected '" + peek().text + "'");
  }

  [[noreturn]] void error(const std::string& what) const {
    fail(ErrorCode::SyntaxError, "line " + std::to_string(line_) + ", column " +
                                     std::to_string(peek().col) + ": " + what);
  }
  [[noreturn]] void unsupported(const std::string& what) const {
    fail(ErrorCode::UnsupportedConstruct, "line " + std::to_string(line_) + ": " + what);
  }
  [[noreturn]] void shadowed(const std::string& name) const {
    fail(ErrorCode::ShadowedName, "line " + std::to_string(line_) + ": '" + name + "' is already declared");
  }

  // -- names ----------------------------------------------------------------

  std::string resolve(const std::string& name) const {
    auto it = names_.find(lower(name));
    if (it == names_.end()) {
      fail(ErrorCode::UnknownVariable,
           "line " + std::to_string(line_) + ": '" + name + "' is not declared");
    }
    return it->second;
  }

  // -- expressions ----------------------------------------------------------

  Expr parse_expr() {
    Expr e;
    bool have = false;
    if (accept_op("-")) {
      e = Expr::neg(parse_term());
      have = true;
    } else {
      accept_op("+");
    }
    if (!have) e = parse_term();
    for (;;) {
      if (accept_op("+")) {
        e = e + parse_term();
      } else if (accept_op("-")) {
        e = e - parse_term();
      } else {
        return e;
      }
    }
  }

  Expr parse_term() {
    Expr e = parse_factor();
    for (;;) {
      if (accept_op("*")) {
        e = e * parse_factor();
      } else if (accept_op("/")) {
        e = e / parse_factor();
      } else {
        return e;
      }
    }
  }

  Expr parse_factor() {
    Expr base = parse_primary();
    if (!accept_op("**")) return base;
    Expr exponent = parse_factor();
    if (exponent.as<Literal>() && exponent.as<Literal>()->dtype == DType::i32) {
      return Expr::binary(BinaryOpKind::pow, base, exponent);
    }
    return Expr::call("pow", {base, exponent});
  }

  std::vector<Expr> parse_call_args() {
    std::vector<Expr> args;
    if (accept_op(")")) return args;
    for (;;) {
      args.push_back(parse_expr());
      if (accept_op(")")) return args;
      expect_op(",");
    }
  }

  Expr parse_primary() {
    const Token& t = peek();
    if (t.kind == Tok::integer) {
      next();
      return Expr::i32(std::stoll(t.text));
    }
    if (t.kind == Tok::real) {
      next();
      return Expr::f32(std::stod(t.text));
    }
    if (accept_op("(")) {
      Expr inner = parse_expr();
      expect_op(")");
      return inner;
    }
    if (t.kind != Tok::ident) error("expected expression");
    const std::string raw = next().text;
    if (accept_op("(")) {
      const std::string low = lower(raw);
      if (!names_.count(low)) {
        static const std::set<std::string> intrinsics = {"exp", "log", "sqrt", "abs",
                                                         "min", "max", "sin", "cos"};
        if (!intrinsics.count(low)) unsupported("call of unknown function '" + raw + "'");
        return Expr::call(low, parse_call_args());
      }
      const std::string name = resolve(raw);
      const auto* decl = sub_->find_decl(name);
      if (!decl || decl->dims.empty()) unsupported("'" + name + "' is not an array");
      auto idx = parse_call_args();
      if (idx.size() != decl->dims.size()) {
        error("'" + name + "' has rank " + std::to_string(decl->dims.size()));
      }
      return Expr::subscript(name, std::move(idx));
    }
    return Expr::var(resolve(raw));
  }

  // -- statements -----------------------------------------------------------

  DType parse_type() {
    const std::string word = lower(next().text);
    if (word == "integer") {
      if (accept_op("*")) {
        if (next().text != "4") unsupported("only 4-byte integers are supported");
      } else if (accept_op("(")) {
        accept_word("kind");
        accept_op("=");
        if (next().text != "4") unsupported("only 4-byte integers are supported");
        expect_op(")");
      }
      return DType::i32;
    }
    if (word == "real") {
      if (accept_op("*")) {
        if (next().text != "4") unsupported("only 4-byte reals are supported");
      } else if (accept_op("(")) {
        accept_word("kind");
        accept_op("=");
        if (next().text != "4") unsupported("only 4-byte reals are supported");
        expect_op(")");
      }
      return DType::f32;
    }
    unsupported("type '" + word + "'");
  }

  std::vector<Expr> parse_dims() {
    std::vector<Expr> dims;
    for (;;) {
      if (peek().kind == Tok::op && peek().text == ":") unsupported("deferred-shape arrays");
      Expr d = parse_expr();
      if (accept_op(":")) unsupported("explicit lower bounds in array dimensions");
      dims.push_back(d);
      if (accept_op(")")) return dims;
      expect_op(",");
    }
  }

  void parse_declaration() {
    const DType dtype = parse_type();
    std::optional<std::vector<Expr>> dimension;
    while (accept_op(",")) {
      const std::string attr = lower(expect_ident());
      if (attr == "dimension") {
        expect_op("(");
        dimension = parse_dims();
      } else if (attr == "intent") {
        expect_op("(");
        expect_ident();
        expect_op(")");
      } else {
        unsupported("attribute '" + attr + "'");
      }
    }
    accept_op("::");
    for (;;) {
      const std::string name = expect_ident();
      if (names_.count(lower(name)) && !declared_params_pending_.count(lower(name))) shadowed(name);
      Declaration d{name, dtype, dimension.value_or(std::vector<Expr>{}), line_};
      if (accept_op("(")) d.dims = parse_dims();
      if (peek().kind == Tok::op && peek().text == "=") unsupported("initializers in declarations");
      declared_params_pending_.erase(lower(name));
      names_[lower(name)] = name;
      // dims may only mention names declared earlier
      sub_->decls.push_back(std::move(d));
      if (!accept_op(",")) break;
    }
    expect_end();
  }

  std::size_t parse_subroutine(std::size_t pos) {
    apply_directives(pos);
    Subroutine sub;
    sub.line = line_;
    sub_ = &sub;
    names_.clear();
    declared_params_pending_.clear();
    accept_word("subroutine");
    sub.name = expect_ident();
    if (accept_op("(")) {
      if (!accept_op(")")) {
        for (;;) {
          const std::string p = expect_ident();
          if (std::any_of(sub.params.begin(), sub.params.end(),
                          [&](const std::string& q) { return lower(q) == lower(p); })) {
            shadowed(p);
          }
          sub.params.push_back(p);
          if (accept_op(")")) break;
          expect_op(",");
        }
      }
    }
    expect_end();
    for (const auto& p : sub.params) declared_params_pending_.insert(lower(p));
    ++pos;

    // declarations
    while (pos < lines_.size()) {
      apply_directives(pos);
      start(lines_[pos]);
      const std::string w = lower(peek().text);
      if (w == "implicit") {
        ++pos;
        continue;
      }
      const bool is_decl = (w == "integer" || w == "real" || w == "double" || w == "logical" ||
                            w == "character" || w == "complex") &&
                           !(peek(1).kind == Tok::op && peek(1).text == "=");
      if (!is_decl) break;
      if (w != "integer" && w != "real") unsupported("type '" + w + "'");
      parse_declaration();
      ++pos;
    }
    for (const auto& p : sub.params) {
      if (!sub.find_decl(p)) {
        // accept any capitalization of the declared spelling
        auto it = names_.find(lower(p));
        if (it == names_.end()) {
          fail(ErrorCode::UnknownVariable,
               "line " + std::to_string(sub.line) + ": argument '" + p + "' is not declared");
        }
      }
    }
    for (auto& p : sub.params) p = names_.at(lower(p));
    if (names_.count(lower(sub.name))) {
      line_ = sub.line;
      shadowed(sub.name);
    }

    // body
    std::vector<std::vector<Statement>*> stack{&sub.body};
    std::vector<DoLoop*> loops;
    std::vector<std::string> active;
    bool closed = false;
    while (pos < lines_.size()) {
      apply_directives(pos);
      start(lines_[pos]);
      ++pos;
      const std::string w = lower(peek().text);
      if (w == "end" || w == "enddo" || w == "endsubroutine") {
        next();
        std::string what = w == "enddo" ? "do" : w == "endsubroutine" ? "subroutine" : "";
        if (what.empty() && peek().kind == Tok::ident) what = lower(next().text);
        if (what == "do") {
          expect_end();
          if (loops.empty()) error("'end do' without 'do'");
          loops.pop_back();
          active.pop_back();
          stack.pop_back();
          continue;
        }
        if (what == "subroutine" || what.empty()) {
          if (peek().kind == Tok::ident) {
            if (lower(next().text) != lower(sub.name)) error("mismatched subroutine name");
          }
          expect_end();
          if (!loops.empty()) error("'end subroutine' inside an open do loop");
          closed = true;
          break;
        }
        unsupported("'end " + what + "'");
      }
      if (w == "do") {
        next();
        if (accept_word("while")) unsupported("do while loops");
        if (peek().kind != Tok::ident) unsupported("do loops without a control variable");
        const std::string var = resolve(next().text);
        const auto* decl = sub.find_decl(var);
        if (!decl || decl->dtype != DType::i32 || !decl->dims.empty()) {
          unsupported("loop variable '" + var + "' must be an integer scalar");
        }
        if (std::find(sub.params.begin(), sub.params.end(), var) != sub.params.end()) {
          unsupported("loop variable '" + var + "' is a subroutine argument");
        }
        if (std::find(active.begin(), active.end(), var) != active.end()) shadowed(var);
        expect_op("=");
        const Expr lo = parse_expr();
        expect_op(",");
        const Expr hi = parse_expr();
        if (accept_op(",")) {
          const Expr step = parse_expr();
          if (!(as_integer(step) && *as_integer(step) == 1)) unsupported("non-unit loop stride");
        }
        expect_end();
        if (!(as_integer(lo) && *as_integer(lo) == 1)) unsupported("loop lower bound other than 1");
        for (const auto& v : free_variables(hi)) {
          if (std::find(active.begin(), active.end(), v) != active.end()) {
            fail(ErrorCode::NonRectangularLoop, "line " + std::to_string(line_) + ": bound of '" +
                                                    var + "' depends on loop variable '" + v + "'");
          }
        }
        stack.back()->push_back(Statement{DoLoop{var, hi, {}, line_}});
        auto* loop = &std::get<DoLoop>(stack.back()->back().node);
        loops.push_back(loop);
        active.push_back(var);
        stack.push_back(&loop->body);
        continue;
      }
      static const std::set<std::string> keywords = {
          "if",   "call",  "while", "select", "where", "forall", "goto",  "go",
          "return", "stop", "print", "write", "read",  "allocate", "exit", "cycle",
          "continue", "else", "elseif", "endif", "contains", "use", "parameter",
          "data",  "common", "function", "program", "module", "implicit", "integer", "real"};
      if (peek().kind != Tok::ident) error("expected statement");
      const bool looks_assignment =
          peek(1).kind == Tok::op && (peek(1).text == "=" || peek(1).text == "(");
      if (keywords.count(w) && !(looks_assignment && names_.count(w))) {
        unsupported("'" + w + "' statements");
      }
      Assignment a;
      a.line = line_;
      a.tags = current_tags();
      a.target = resolve(next().text);
      if (std::find(active.begin(), active.end(), a.target) != active.end()) {
        unsupported("assignment to loop variable '" + a.target + "'");
      }
      const auto* decl = sub.find_decl(a.target);
      if (accept_op("(")) {
        if (!decl || decl->dims.empty()) unsupported("'" + a.target + "' is not an array");
        a.indices = parse_call_args();
        if (a.indices.size() != decl->dims.size()) {
          error("'" + a.target + "' has rank " + std::to_string(decl->dims.size()));
        }
      } else if (decl && !decl->dims.empty()) {
        unsupported("whole-array assignment to '" + a.target + "'");
      }
      expect_op("=");
      a.value = parse_expr();
      expect_end();
      stack.back()->push_back(Statement{std::move(a)});
    }
    if (!closed) {
      fail(ErrorCode::SyntaxError,
           "line " + std::to_string(sub.line) + ", column 1: missing 'end subroutine'");
    }
    apply_directives(pos);
    unit_.subroutines.push_back(std::move(sub));
    sub_ = nullptr;
    return pos;
  }

  std::string_view text_;
  std::vector<Item> items_;
  std::vector<PendingDirective> trailing_;
  std::size_t applied_ = 0;
  std::vector<LogicalLine> lines_;
  std::vector<std::pair<std::string, int>> open_tags_;
  SourceUnit unit_;
  Subroutine* sub_ = nullptr;
  std::map<std::string, std::string> names_;
  std::set<std::string> declared_params_pending_;
  std::vector<Token> toks_;
  std::size_t tpos_ = 0;
  int line_ = 0;
};

// ---------------------------------------------------------------------------
// lowering

struct Access {
  std::string array;
  std::vector<Expr> indices;
};

bool may_overlap(const Access& a, const Access& b) {
  if (a.array != b.array) return false;
  if (a.indices.size() != b.indices.size()) return true;
  for (std::size_t i = 0; i < a.indices.size(); ++i) {
    auto x = as_integer(a.indices[i]);
    auto y = as_integer(b.indices[i]);
    if (x && y && *x != *y) return false;
  }
  return true;
}

std::vector<Access> read_accesses(const Instruction& insn) {
  std::vector<Access> out;
  visit(insn.rhs, [&](const Expr& x) {
    if (const auto* s = x.as<Subscript>()) out.push_back({s->array, s->indices});
  });
  if (insn.is_update) out.push_back({insn.assignee, insn.indices});
  return out;
}

class Lowering {
 public:
  explicit Lowering(const Subroutine& sub) : sub_(sub) {}

  Kernel run() {
    k_.name = sub_.name;
    for (const auto& p : sub_.params) {
      const auto* d = sub_.find_decl(p);
      if (d->dims.empty()) {
        if (d->dtype == DType::i32) {
          k_.domain.parameters.insert(p);
        } else {
          k_.args.emplace_back(ScalarParam{p, d->dtype});
        }
      } else {
        ArrayDescriptor a;
        a.name = p;
        a.dtype = d->dtype;
        a.space = AddressSpace::global;
        for (const auto& dim : d->dims) a.shape.push_back(lower_extent(dim, d->line));
        a.set_default_layout();
        k_.args.emplace_back(std::move(a));
      }
    }
    collect_loop_vars(sub_.body);
    for (const auto& d : sub_.decls) {
      if (is_param(d.name) || loop_vars_.count(d.name)) continue;
      ArrayDescriptor t;
      t.name = d.name;
      t.dtype = d.dtype;
      t.space = AddressSpace::priv;
      for (const auto& dim : d.dims) t.shape.push_back(lower_extent(dim, d.line));
      t.set_default_layout();
      k_.temporaries.push_back(std::move(t));
    }
    lower_block(sub_.body);
    // unused scalar temporaries are dropped
    std::set<std::string> used;
    for (const auto& insn : k_.instructions) {
      used.insert(insn.assignee);
      for (const auto& a : accessed_arrays(insn.rhs)) used.insert(a);
    }
    k_.temporaries.erase(std::remove_if(k_.temporaries.begin(), k_.temporaries.end(),
                                        [&](const ArrayDescriptor& t) { return !used.count(t.name); }),
                         k_.temporaries.end());
    infer_dependencies();
    require_consistent(k_, "lowering of '" + sub_.name + "'");
    return std::move(k_);
  }

 private:
  bool is_param(const std::string& name) const {
    return std::find(sub_.params.begin(), sub_.params.end(), name) != sub_.params.end();
  }

  void collect_loop_vars(const std::vector<Statement>& body) {
    for (const auto& s : body) {
      if (const auto* loop = std::get_if<DoLoop>(&s.node)) {
        loop_vars_.insert(loop->var);
        collect_loop_vars(loop->body);
      }
    }
  }

  Expr lower_extent(const Expr& e, int line) {
    for (const auto& v : free_variables(e)) {
      const auto* d = sub_.find_decl(v);
      if (!is_param(v) || !d || d->dtype != DType::i32 || !d->dims.empty()) {
        fail(ErrorCode::UnsupportedConstruct,
             "line " + std::to_string(line) + ": extent references '" + v +
                 "', which is not an integer argument");
      }
    }
    visit(e, [&](const Expr& x) {
      if (x.as<Subscript>() || x.as<Call>() || (x.as<Literal>() && x.as<Literal>()->dtype != DType::i32)) {
        fail(ErrorCode::UnsupportedConstruct,
             "line " + std::to_string(line) + ": extents must be integer expressions");
      }
    });
    return simplify_index(e);
  }

  std::string fresh_iname(const std::string& var) {
    if (!used_inames_.count(var)) return var;
    for (int n = 0;; ++n) {
      std::string candidate = var + "_" + std::to_string(n);
      if (!used_inames_.count(candidate) && !sub_.find_decl(candidate)) return candidate;
    }
  }

  Expr lower_value(const Expr& e, int line) {
    return rewrite(e, [&](const Expr& x) -> std::optional<Expr> {
      if (const auto* v = x.as<Variable>()) {
        if (auto it = iname_of_.find(v->name); it != iname_of_.end()) {
          return Expr::var(it->second) + Expr::i32(1);
        }
        if (loop_vars_.count(v->name)) {
          fail(ErrorCode::UnsupportedConstruct,
               "line " + std::to_string(line) + ": loop variable '" + v->name + "' used outside its loop");
        }
        if (is_param(v->name)) {
          if (!sub_.find_decl(v->name)->dims.empty()) {
            fail(ErrorCode::UnsupportedConstruct,
                 "line " + std::to_string(line) + ": whole-array reference to '" + v->name + "'");
          }
          return x;
        }
        const auto* d = sub_.find_decl(v->name);
        if (d && !d->dims.empty()) {
          fail(ErrorCode::UnsupportedConstruct,
               "line " + std::to_string(line) + ": whole-array reference to '" + v->name + "'");
        }
        return Expr::subscript(v->name, {});
      }
      if (const auto* s = x.as<Subscript>()) {
        return Expr::subscript(s->array, lower_indices(s->indices, line));
      }
      return std::nullopt;
    });
  }

  std::vector<Expr> lower_indices(const std::vector<Expr>& idx, int line) {
    std::vector<Expr> out;
    for (const auto& i : idx) out.push_back(simplify_index(lower_value(i, line) - Expr::i32(1)));
    return out;
  }

  void lower_block(const std::vector<Statement>& body) {
    for (const auto& s : body) {
      if (const auto* loop = std::get_if<DoLoop>(&s.node)) {
        const std::string iname = fresh_iname(loop->var);
        used_inames_.insert(iname);
        k_.domain.inames.push_back({iname, lower_extent(loop->upper, loop->line)});
        iname_of_[loop->var] = iname;
        enclosing_.push_back(iname);
        lower_block(loop->body);
        enclosing_.pop_back();
        iname_of_.erase(loop->var);
      } else {
        lower_assignment(std::get<Assignment>(s.node));
      }
    }
  }

  void lower_assignment(const Assignment& a) {
    if (is_param(a.target) && sub_.find_decl(a.target)->dims.empty()) {
      fail(ErrorCode::UnsupportedConstruct,
           "line " + std::to_string(a.line) + ": assignment to scalar argument '" + a.target + "'");
    }
    Instruction insn;
    insn.assignee = a.target;
    insn.indices = lower_indices(a.indices, a.line);
    insn.rhs = lower_value(a.value, a.line);
    insn.within.insert(enclosing_.begin(), enclosing_.end());
    insn.tags.insert(a.tags.begin(), a.tags.end());
    const Expr self = insn.assignee_expr();
    if (const auto* b = insn.rhs.as<BinaryOp>()) {
      if (b->op == BinaryOpKind::add && b->lhs == self) {
        insn.rhs = b->rhs;
        insn.is_update = true;
      } else if (b->op == BinaryOpKind::add && b->rhs == self) {
        insn.rhs = b->lhs;
        insn.is_update = true;
      } else if (b->op == BinaryOpKind::sub && b->lhs == self) {
        insn.rhs = Expr::neg(b->rhs);
        insn.is_update = true;
      }
    }
    int& n = id_count_[a.target];
    insn.id = n == 0 ? a.target : a.target + "_" + std::to_string(n);
    ++n;
    k_.instructions.push_back(std::move(insn));
  }

  void infer_dependencies() {
    auto& insns = k_.instructions;
    for (std::size_t b = 0; b < insns.size(); ++b) {
      const Access wb{insns[b].assignee, insns[b].indices};
      const auto rb = read_accesses(insns[b]);
      for (std::size_t a = 0; a < b; ++a) {
        const Access wa{insns[a].assignee, insns[a].indices};
        const auto ra = read_accesses(insns[a]);
        bool conflict = may_overlap(wa, wb);
        for (const auto& r : rb) conflict = conflict || may_overlap(wa, r);
        for (const auto& r : ra) conflict = conflict || may_overlap(r, wb);
        if (conflict) insns[b].depends_on.insert(insns[a].id);
      }
    }
  }

  const Subroutine& sub_;
  Kernel k_;
  std::set<std::string> loop_vars_;
  std::set<std::string> used_inames_;
  std::map<std::string, std::string> iname_of_;
  std::vector<std::string> enclosing_;
  std::map<std::string, int> id_count_;
};

}  // namespace

SourceUnit parse_source(std::string_view text) { return Parser(text).run(); }

Kernel lower_subroutine(const Subroutine& sub) { return Lowering(sub).run(); }

std::vector<Kernel> lower_to_kernels(const SourceUnit& unit) {
  std::vector<Kernel> out;
  for (const auto& sub : unit.subroutines) out.push_back(lower_subroutine(sub));
  return out;
}

}  // namespace loopforge
