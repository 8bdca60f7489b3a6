#pragma once
// Logical-consistency checks over (A_step, A_prefix, Y) label sequences.
//
// Terminal rule: the final prefix state must be hallucinated exactly when the
// final answer is incorrect. Transition rule: a change of prefix state must be
// witnessed by the current step label (recovery on a clean step, degradation
// on a hallucinated step). Unwitnessed changes after a run of >= n_run
// unchanged prefix states are severe and reject the trajectory.

#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "cotwatch/trajectory.hpp"

namespace cotwatch {

enum class TransitionMode { valid_recovery, anomalous_recovery, valid_degradation, spurious_degradation, steady };

enum class ViolationRule {
  terminal_consistency,
  severe_epiphany,
  severe_degradation,
  label_gap,
  // only raised when ValidatorConfig::reject_all_anomalies is set
  anomalous_recovery,
  spurious_degradation,
};

std::string_view to_string(TransitionMode m);
std::string_view to_string(ViolationRule r);

struct Violation {
  ViolationRule rule;
  std::optional<std::size_t> step_index;  // 1-based
  std::string detail;
};

/// Non-severe anomalous or spurious transition; recorded, not rejecting.
struct TransitionNote {
  TransitionMode mode;
  std::size_t step_index;   // 1-based step where the transition lands
  std::size_t run_length;   // length of the unchanged prefix run before it
};

struct ValidationVerdict {
  bool accepted = true;
  std::vector<Violation> violations;
  std::vector<TransitionNote> notes;
  std::vector<TransitionMode> transition_trace;  // one per consecutive pair (T-1 entries)
};

inline constexpr std::size_t kDefaultRunLength = 5;

struct ValidatorConfig {
  std::size_t n_run = kDefaultRunLength;
  bool reject_all_anomalies = false;
};

/// True when (a_prefix_T = 1 and y = 0) or (a_prefix_T = 0 and y = 1); y = 1 means correct.
bool check_terminal(bool a_prefix_last, bool final_correct);

TransitionMode classify_transition(bool a_prefix_prev, bool a_prefix_cur, bool a_step_cur);

/// Label-only core; lengths must match and be >= 1.
ValidationVerdict validate_labels(const std::vector<bool>& a_step, const std::vector<bool>& a_prefix,
                                  bool final_correct, const ValidatorConfig& cfg = {});

/// Throws MissingLabel if any of A_step, A_prefix, Y is absent.
ValidationVerdict validate(const Trajectory& traj, const ValidatorConfig& cfg = {});
inline ValidationVerdict validate(const Trajectory& traj, std::size_t n_run) {
  return validate(traj, ValidatorConfig{n_run, false});
}

struct DatasetReport {
  std::size_t total = 0;
  std::size_t accepted = 0;
  std::size_t rejected = 0;
  std::map<ViolationRule, std::size_t> rejected_by_rule;  // trajectories with >= 1 violation of that rule
  std::map<TransitionMode, std::size_t> transitions;
  std::size_t total_steps = 0;
  std::size_t step_hallucinations = 0;
  std::size_t prefix_hallucinations = 0;
  double step_hallucination_rate = 0.0;
  double prefix_hallucination_rate = 0.0;
  double avg_steps_per_chain = 0.0;
  std::vector<std::pair<std::string, ValidationVerdict>> verdicts;
};

/// Trajectories with missing labels are reported with a label_gap violation.
DatasetReport dataset_report(const Dataset& ds, const ValidatorConfig& cfg = {}, std::size_t threads = 1);

}  // namespace cotwatch
