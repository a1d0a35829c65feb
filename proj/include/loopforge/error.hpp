#pragma once

#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace loopforge {

enum class ErrorCode {
  // expression evaluation and rewriting
  UnboundVariable,
  IndexOutOfBounds,
  DivisionByZero,
  UnknownRule,
  ArityMismatch,
  RuleCycle,
  // kernel queries
  UnknownIname,
  UnknownVariable,
  // frontend
  SyntaxError,
  UnsupportedConstruct,
  ShadowedName,
  NonRectangularLoop,
  ScriptSyntaxError,
  UnknownCommand,
  BadArgument,
  QuerySyntaxError,
  // transformations
  DomainMismatch,
  ArgumentConflict,
  UnknownParameter,
  NonScalarParameter,
  MalformedConstraint,
  TaggedNotSequential,
  AxisConflict,
  VecExtentMismatch,
  ExtentMismatch,
  RankMismatch,
  NonLiteralExtent,
  NotDivisible,
  MultipleVecAxes,
  BadPermutation,
  MultipleWriters,
  WriteAfterRead,
  FootprintNotAffine,
  VarIsWritten,
  FootprintMismatch,
  SpaceMismatch,
  MixedAccess,
  InconsistentKernel,
  // scheduling, emission, execution
  SchedulingImpossible,
  UnfixedParameterInShape,
  VecAccessMisaligned,
  UnresolvedExtent,
  InvalidConfig,
  MissingArgument,
};

std::string_view to_string(ErrorCode code);

/// Every failure raised by the library carries a machine-checkable code.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message);

  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] void fail(ErrorCode code, const std::string& message);

/// Non-fatal finding returned by checkers and reported by transformations.
struct Diagnostic {
  std::string code;
  std::string message;

  friend bool operator==(const Diagnostic&, const Diagnostic&) = default;
};

using Diagnostics = std::vector<Diagnostic>;

}  // namespace loopforge
