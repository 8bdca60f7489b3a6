#pragma once
// Offline scoring of whole trajectories with a (step, prefix) probe pair.

#include <optional>
#include <string>
#include <vector>

#include "cotwatch/metrics.hpp"
#include "cotwatch/probe.hpp"
#include "cotwatch/trajectory.hpp"

namespace cotwatch {

struct ScoreTrace {
  std::string id;
  std::vector<double> c_step;
  std::vector<double> c_prefix;
  std::vector<std::optional<bool>> a_step;
  std::vector<std::optional<bool>> a_prefix;
  std::optional<bool> final_correct;
};

/// Step-probe scores only.
std::vector<double> score_steps(const Trajectory& traj, const ProbeModel& step_probe);
/// Both probes; checks compatibility and the trajectory's d/layer.
ScoreTrace infer(const Trajectory& traj, const ProbeModel& step_probe, const ProbeModel& prefix_probe);
std::vector<ScoreTrace> infer(const Dataset& ds, const ProbeModel& step_probe, const ProbeModel& prefix_probe,
                              std::size_t threads = 1);

/// Needs prefix labels on every step (MissingLabels otherwise).
ChainEval to_chain_eval(const ScoreTrace& s, double threshold = 0.5);

}  // namespace cotwatch
