#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace cotwatch {

enum class ErrorCode {
  // trajectory_store
  MalformedRecord,
  HeaderMismatch,
  CountMismatch,
  NonFinite,
  IoFailure,
  TooFewTrajectories,
  // aggregation
  EmptyStep,
  IndexOutOfRange,
  MissingProbs,
  InvalidScheme,
  // probe
  DimMismatch,
  LengthMismatch,
  MissingLabels,
  IncompatibleProbe,
  VersionMismatch,
  // label_validator
  MissingLabel,
  // metrics
  SingleClass,
  NoEligibleChains,
  MissingStepScores,
  // synth
  InvalidConfig,
  // stream_engine
  NoSteps,
};

std::string_view to_string(ErrorCode code);

/// Data/format errors carry a code so the CLI can map them to exit classes.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code), detail_(what) {}

  ErrorCode code() const noexcept { return code_; }
  /// Message without the code prefix.
  const std::string& detail() const noexcept { return detail_; }

 private:
  ErrorCode code_;
  std::string detail_;
};

}  // namespace cotwatch
