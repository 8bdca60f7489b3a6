#include <fmt/format.h>

#include "cotwatch/error.hpp"
#include "cotwatch/inference.hpp"
#include "cotwatch/parallel.hpp"

namespace cotwatch {

namespace {
void check_trajectory(const Trajectory& traj, const ProbeModel& p) {
  if (traj.hidden_dim != p.state_dim) {
    throw Error(ErrorCode::DimMismatch,
                fmt::format("trajectory '{}' has d={} but probe expects {}", traj.id, traj.hidden_dim, p.state_dim));
  }
  if (traj.layer_index != p.layer_index) {
    throw Error(ErrorCode::IncompatibleProbe, fmt::format("trajectory '{}' is layer {} but probe is layer {}",
                                                          traj.id, traj.layer_index, p.layer_index));
  }
}
}  // namespace

std::vector<double> score_steps(const Trajectory& traj, const ProbeModel& step_probe) {
  check_trajectory(traj, step_probe);
  std::vector<double> out;
  for (const auto& rep : batch_aggregate(traj, step_probe.aggregation)) out.push_back(step_probe.forward(rep.vector));
  return out;
}

ScoreTrace infer(const Trajectory& traj, const ProbeModel& step_probe, const ProbeModel& prefix_probe) {
  check_compatible(step_probe, prefix_probe);
  check_trajectory(traj, step_probe);
  ScoreTrace s;
  s.id = traj.id;
  s.final_correct = traj.final_correct;
  auto reps = batch_aggregate(traj, step_probe.aggregation);
  for (std::size_t t = 0; t < reps.size(); ++t) {
    std::vector<double> x = std::move(reps[t].vector);
    const double cs = step_probe.forward(x);
    x.push_back(cs);
    s.c_step.push_back(cs);
    s.c_prefix.push_back(prefix_probe.forward(x));
    s.a_step.push_back(traj.steps[t].a_step);
    s.a_prefix.push_back(traj.steps[t].a_prefix);
  }
  return s;
}

std::vector<ScoreTrace> infer(const Dataset& ds, const ProbeModel& step_probe, const ProbeModel& prefix_probe,
                              std::size_t threads) {
  check_compatible(step_probe, prefix_probe);
  std::vector<ScoreTrace> out(ds.trajectories.size());
  parallel_for(out.size(), threads,
               [&](std::size_t i) { out[i] = infer(ds.trajectories[i], step_probe, prefix_probe); });
  return out;
}

ChainEval to_chain_eval(const ScoreTrace& s, double threshold) {
  ChainEval c;
  c.id = s.id;
  c.c_prefix = s.c_prefix;
  c.c_step = s.c_step;
  c.threshold = threshold;
  for (std::size_t t = 0; t < s.a_prefix.size(); ++t) {
    if (!s.a_prefix[t]) {
      throw Error(ErrorCode::MissingLabels, fmt::format("trajectory '{}' step {} has no prefix label", s.id, t + 1));
    }
    c.a_prefix.push_back(*s.a_prefix[t] ? 1 : 0);
  }
  return c;
}

}  // namespace cotwatch
