#include "cotwatch/error.hpp"

namespace cotwatch {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::MalformedRecord: return "MalformedRecord";
    case ErrorCode::HeaderMismatch: return "HeaderMismatch";
    case ErrorCode::CountMismatch: return "CountMismatch";
    case ErrorCode::NonFinite: return "NonFinite";
    case ErrorCode::IoFailure: return "IoFailure";
    case ErrorCode::TooFewTrajectories: return "TooFewTrajectories";
    case ErrorCode::EmptyStep: return "EmptyStep";
    case ErrorCode::IndexOutOfRange: return "IndexOutOfRange";
    case ErrorCode::MissingProbs: return "MissingProbs";
    case ErrorCode::InvalidScheme: return "InvalidScheme";
    case ErrorCode::DimMismatch: return "DimMismatch";
    case ErrorCode::LengthMismatch: return "LengthMismatch";
    case ErrorCode::MissingLabels: return "MissingLabels";
    case ErrorCode::IncompatibleProbe: return "IncompatibleProbe";
    case ErrorCode::VersionMismatch: return "VersionMismatch";
    case ErrorCode::MissingLabel: return "MissingLabel";
    case ErrorCode::SingleClass: return "SingleClass";
    case ErrorCode::NoEligibleChains: return "NoEligibleChains";
    case ErrorCode::MissingStepScores: return "MissingStepScores";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::NoSteps: return "NoSteps";
  }
  return "Unknown";
}

}  // namespace cotwatch
