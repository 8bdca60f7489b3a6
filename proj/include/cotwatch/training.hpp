#pragma once
// Deterministic minibatch training for step and prefix probes.

#include <cstddef>
#include <span>
#include <vector>

#include "cotwatch/probe.hpp"
#include "cotwatch/trajectory.hpp"

namespace cotwatch {

/// Per-chain training rows. For step probes labels are A_step and c_step is
/// unused; for prefix probes inputs are [z_t ; c_step_t] and labels are A_prefix.
struct ChainExamples {
  std::vector<std::vector<double>> inputs;
  std::vector<double> c_step;
  std::vector<Label> labels;
};

/// Mean BCE over every step in the batch. Adds d/dtheta into grad when non-null.
double step_objective(const ProbeModel& m, std::span<const ChainExamples> batch,
                      std::vector<double>* grad = nullptr);
/// Mean over chains of anchor + lambda_sync * sync, with c_step frozen.
double prefix_objective(const ProbeModel& m, std::span<const ChainExamples> batch, const TrainConfig& cfg,
                        std::vector<double>* grad = nullptr);
/// Objective matching m.kind.
double probe_objective(const ProbeModel& m, std::span<const ChainExamples> batch, const TrainConfig& cfg,
                       std::vector<double>* grad = nullptr);

inline constexpr double kGradCheckStep = 1e-5;
inline constexpr double kGradCheckFloor = 1e-6;

/// Relative error used by all gradient checks: |a - n| / max(|a|, |n|, floor).
double gradient_relative_error(double analytic, double numeric, double floor = kGradCheckFloor);

/// Worst relative error between analytic parameter gradients and central
/// finite differences (step 1e-5) of probe_objective.
double grad_check(const ProbeModel& m, std::span<const ChainExamples> batch, const TrainConfig& cfg);

std::vector<ChainExamples> build_step_examples(const Dataset& ds, const AggregationScheme& scheme,
                                               std::size_t threads = 1);
/// Inputs [z_t ; c_step_t] with c_step from the frozen step probe.
std::vector<ChainExamples> build_prefix_examples(const Dataset& ds, const ProbeModel& step_probe,
                                                 std::size_t threads = 1);

struct TrainLog {
  std::vector<double> epoch_losses;  // full training-set objective after each epoch
  bool loss_increased = false;
};

ProbeModel train_step_probe(const Dataset& ds, const AggregationScheme& scheme, const TrainConfig& cfg,
                            TrainLog* log = nullptr, std::size_t threads = 1);
ProbeModel train_prefix_probe(const Dataset& ds, const ProbeModel& step_probe, const TrainConfig& cfg,
                              TrainLog* log = nullptr, std::size_t threads = 1);

/// Generic driver used by both: initializes from cfg.seed and runs minibatch descent.
ProbeModel fit_probe(ProbeModel init_shape, std::span<const ChainExamples> data, const TrainConfig& cfg,
                     TrainLog* log = nullptr);

}  // namespace cotwatch
