#include <fmt/format.h>

#include "cotwatch/error.hpp"
#include "cotwatch/label_validator.hpp"
#include "cotwatch/parallel.hpp"

namespace cotwatch {

std::string_view to_string(TransitionMode m) {
  switch (m) {
    case TransitionMode::valid_recovery: return "valid_recovery";
    case TransitionMode::anomalous_recovery: return "anomalous_recovery";
    case TransitionMode::valid_degradation: return "valid_degradation";
    case TransitionMode::spurious_degradation: return "spurious_degradation";
    case TransitionMode::steady: return "steady";
  }
  return "unknown";
}

std::string_view to_string(ViolationRule r) {
  switch (r) {
    case ViolationRule::terminal_consistency: return "terminal_consistency";
    case ViolationRule::severe_epiphany: return "severe_epiphany";
    case ViolationRule::severe_degradation: return "severe_degradation";
    case ViolationRule::label_gap: return "label_gap";
    case ViolationRule::anomalous_recovery: return "anomalous_recovery";
    case ViolationRule::spurious_degradation: return "spurious_degradation";
  }
  return "unknown";
}

bool check_terminal(bool a_prefix_last, bool final_correct) { return a_prefix_last != final_correct; }

TransitionMode classify_transition(bool a_prefix_prev, bool a_prefix_cur, bool a_step_cur) {
  if (a_prefix_prev == a_prefix_cur) return TransitionMode::steady;
  if (a_prefix_prev) return a_step_cur ? TransitionMode::anomalous_recovery : TransitionMode::valid_recovery;
  return a_step_cur ? TransitionMode::valid_degradation : TransitionMode::spurious_degradation;
}

ValidationVerdict validate_labels(const std::vector<bool>& a_step, const std::vector<bool>& a_prefix,
                                  bool final_correct, const ValidatorConfig& cfg) {
  if (a_step.size() != a_prefix.size() || a_step.empty()) {
    throw Error(ErrorCode::LengthMismatch,
                fmt::format("label sequences of lengths {} and {}", a_step.size(), a_prefix.size()));
  }
  ValidationVerdict v;
  const std::size_t T = a_prefix.size();
  // Length of the maximal run of equal prefix states ending at the previous step.
  std::size_t run = 1;
  for (std::size_t i = 1; i < T; ++i) {
    const std::size_t t = i + 1;
    const TransitionMode mode = classify_transition(a_prefix[i - 1], a_prefix[i], a_step[i]);
    v.transition_trace.push_back(mode);
    if (mode == TransitionMode::steady) {
      ++run;
      continue;
    }
    if (mode == TransitionMode::anomalous_recovery || mode == TransitionMode::spurious_degradation) {
      const bool recovery = mode == TransitionMode::anomalous_recovery;
      if (run >= cfg.n_run) {
        v.violations.push_back(
            {recovery ? ViolationRule::severe_epiphany : ViolationRule::severe_degradation, t,
             fmt::format("{} after {} consecutive {} prefix states", to_string(mode), run,
                         recovery ? "hallucinated" : "clean")});
      } else {
        v.notes.push_back({mode, t, run});
        if (cfg.reject_all_anomalies) {
          v.violations.push_back(
              {recovery ? ViolationRule::anomalous_recovery : ViolationRule::spurious_degradation, t,
               fmt::format("{} after a run of {}", to_string(mode), run)});
        }
      }
    }
    run = 1;
  }
  if (!check_terminal(a_prefix.back(), final_correct)) {
    v.violations.push_back({ViolationRule::terminal_consistency, T,
                            fmt::format("final prefix state {} with final answer {}", a_prefix.back() ? 1 : 0,
                                        final_correct ? "correct" : "incorrect")});
  }
  v.accepted = v.violations.empty();
  return v;
}

ValidationVerdict validate(const Trajectory& traj, const ValidatorConfig& cfg) {
  if (!traj.final_correct) throw Error(ErrorCode::MissingLabel, "trajectory '" + traj.id + "' has no final label");
  std::vector<bool> step, prefix;
  for (std::size_t t = 0; t < traj.steps.size(); ++t) {
    const Step& s = traj.steps[t];
    if (!s.a_step || !s.a_prefix) {
      throw Error(ErrorCode::MissingLabel, fmt::format("trajectory '{}' step {} lacks labels", traj.id, t + 1));
    }
    step.push_back(*s.a_step);
    prefix.push_back(*s.a_prefix);
  }
  return validate_labels(step, prefix, *traj.final_correct, cfg);
}

DatasetReport dataset_report(const Dataset& ds, const ValidatorConfig& cfg, std::size_t threads) {
  DatasetReport r;
  r.total = ds.trajectories.size();
  r.verdicts.resize(r.total);
  parallel_for(r.total, threads, [&](std::size_t i) {
    const Trajectory& traj = ds.trajectories[i];
    ValidationVerdict v;
    try {
      v = validate(traj, cfg);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::MissingLabel) throw;
      v.accepted = false;
      v.violations.push_back({ViolationRule::label_gap, std::nullopt, e.what()});
    }
    r.verdicts[i] = {traj.id, std::move(v)};
  });

  for (std::size_t i = 0; i < r.total; ++i) {
    const auto& v = r.verdicts[i].second;
    (v.accepted ? r.accepted : r.rejected) += 1;
    std::map<ViolationRule, bool> seen;
    for (const auto& viol : v.violations) seen[viol.rule] = true;
    for (const auto& [rule, _] : seen) ++r.rejected_by_rule[rule];
    for (TransitionMode m : v.transition_trace) ++r.transitions[m];

    for (const Step& s : ds.trajectories[i].steps) {
      ++r.total_steps;
      if (s.a_step.value_or(false)) ++r.step_hallucinations;
      if (s.a_prefix.value_or(false)) ++r.prefix_hallucinations;
    }
  }
  if (r.total_steps > 0) {
    r.step_hallucination_rate = static_cast<double>(r.step_hallucinations) / static_cast<double>(r.total_steps);
    r.prefix_hallucination_rate = static_cast<double>(r.prefix_hallucinations) / static_cast<double>(r.total_steps);
  }
  if (r.total > 0) r.avg_steps_per_chain = static_cast<double>(r.total_steps) / static_cast<double>(r.total);
  return r;
}

}  // namespace cotwatch
