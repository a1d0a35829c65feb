#include "loopforge/error.hpp"

namespace loopforge {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::UnboundVariable: return "UnboundVariable";
    case ErrorCode::IndexOutOfBounds: return "IndexOutOfBounds";
    case ErrorCode::DivisionByZero: return "DivisionByZero";
    case ErrorCode::UnknownRule: return "UnknownRule";
    case ErrorCode::ArityMismatch: return "ArityMismatch";
    case ErrorCode::RuleCycle: return "RuleCycle";
    case ErrorCode::UnknownIname: return "UnknownIname";
    case ErrorCode::UnknownVariable: return "UnknownVariable";
    case ErrorCode::SyntaxError: return "SyntaxError";
    case ErrorCode::UnsupportedConstruct: return "UnsupportedConstruct";
    case ErrorCode::ShadowedName: return "ShadowedName";
    case ErrorCode::NonRectangularLoop: return "NonRectangularLoop";
    case ErrorCode::ScriptSyntaxError: return "ScriptSyntaxError";
    case ErrorCode::UnknownCommand: return "UnknownCommand";
    case ErrorCode::BadArgument: return "BadArgument";
    case ErrorCode::QuerySyntaxError: return "QuerySyntaxError";
    case ErrorCode::DomainMismatch: return "DomainMismatch";
    case ErrorCode::ArgumentConflict: return "ArgumentConflict";
    case ErrorCode::UnknownParameter: return "UnknownParameter";
    case ErrorCode::NonScalarParameter: return "NonScalarParameter";
    case ErrorCode::MalformedConstraint: return "MalformedConstraint";
    case ErrorCode::TaggedNotSequential: return "TaggedNotSequential";
    case ErrorCode::AxisConflict: return "AxisConflict";
    case ErrorCode::VecExtentMismatch: return "VecExtentMismatch";
    case ErrorCode::ExtentMismatch: return "ExtentMismatch";
    case ErrorCode::RankMismatch: return "RankMismatch";
    case ErrorCode::NonLiteralExtent: return "NonLiteralExtent";
    case ErrorCode::NotDivisible: return "NotDivisible";
    case ErrorCode::MultipleVecAxes: return "MultipleVecAxes";
    case ErrorCode::BadPermutation: return "BadPermutation";
    case ErrorCode::MultipleWriters: return "MultipleWriters";
    case ErrorCode::WriteAfterRead: return "WriteAfterRead";
    case ErrorCode::FootprintNotAffine: return "FootprintNotAffine";
    case ErrorCode::VarIsWritten: return "VarIsWritten";
    case ErrorCode::FootprintMismatch: return "FootprintMismatch";
    case ErrorCode::SpaceMismatch: return "SpaceMismatch";
    case ErrorCode::MixedAccess: return "MixedAccess";
    case ErrorCode::InconsistentKernel: return "InconsistentKernel";
    case ErrorCode::SchedulingImpossible: return "SchedulingImpossible";
    case ErrorCode::UnfixedParameterInShape: return "UnfixedParameterInShape";
    case ErrorCode::VecAccessMisaligned: return "VecAccessMisaligned";
    case ErrorCode::UnresolvedExtent: return "UnresolvedExtent";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::MissingArgument: return "MissingArgument";
  }
  return "Unknown";
}

Error::Error(ErrorCode code, const std::string& message)
    : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

void fail(ErrorCode code, const std::string& message) { throw Error(code, message); }

}  // namespace loopforge
