#pragma once
// Classification metrics, Local/Final protocols and the dynamic (reflex,
// agility, structure) metrics over per-chain prefix score traces.
//
// Conventions: steps are 1-based in every returned index; the binary decision
// is yhat_t = c_t > threshold (strict).

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cotwatch/probe.hpp"

namespace cotwatch {

double auc(std::span<const double> scores, std::span<const Label> labels);

struct BinaryMetrics {
  double acc = 0.0;
  double f1 = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  std::size_t n = 0;
};

BinaryMetrics acc_f1(std::span<const double> scores, std::span<const Label> labels, double threshold = 0.5);

struct ChainEval {
  std::string id;
  std::vector<Label> a_prefix;
  std::vector<double> c_prefix;
  std::optional<std::vector<double>> c_step;
  double threshold = 0.5;

  std::size_t length() const noexcept { return a_prefix.size(); }
  bool decision(std::size_t t) const { return c_prefix.at(t - 1) > threshold; }
  void validate() const;
};

struct ProtocolMetrics {
  std::optional<double> auc;  // none when one class is absent
  BinaryMetrics binary;
};

/// Pools every (c_t, A_t) across chains.
ProtocolMetrics eval_local(std::span<const ChainEval> chains);
/// Uses (c_T, A_T) of each chain.
ProtocolMetrics eval_final(std::span<const ChainEval> chains);

std::optional<std::size_t> onset(const ChainEval& c);
/// c_{t_on} - c_{t_on - 1}; none when there is no onset or t_on = 1.
std::optional<double> snap_magnitude(const ChainEval& c);
/// none when there is no onset.
std::optional<double> detection_lag(const ChainEval& c);
/// Fraction of chains with an onset whose lag is 0. Throws NoEligibleChains.
double icr(std::span<const ChainEval> chains);

std::vector<std::size_t> recovery_events(const ChainEval& c);
double brake_strength(const ChainEval& c, std::size_t t_rec);
std::size_t lingering_time(const ChainEval& c, std::size_t t_rec);
bool healed_within_3(const ChainEval& c, std::size_t t_rec);

/// none when there is no onset.
std::optional<double> recovery_score(const ChainEval& c);
double fp_length(const ChainEval& c);

struct MetricSummary {
  std::optional<double> value;
  std::size_t count = 0;
};

struct DynamicReport {
  MetricSummary snap_m, lag, icr, brake_s, ling_t, heal_3, r_score, fp_len;
  std::size_t chains = 0;
  std::size_t recovery_events = 0;
  double t_avg = 0.0;  // mean chain length, the radar inversion constant
};

DynamicReport dynamic_report(std::span<const ChainEval> chains, std::size_t threads = 1);

struct RadarPoint {
  std::string metric;
  std::optional<double> raw;
  std::optional<double> normalized;  // [0,100], higher is better
};

/// snap_m, brake_s, heal_3, icr, r_score -> 100 * clamp(v, 0, 1);
/// lag, ling_t, fp_len -> 100 * max(0, 1 - v / t_avg).
std::vector<RadarPoint> radar(const DynamicReport& r);

/// Mean |c_{t+1} - c_t| pooled over all chains; 0 when no chain has T >= 2.
double coherence_diagnostic(std::span<const ChainEval> chains);
/// Pooled sample covariance of (c_prefix_{t+1} - c_prefix_t, c_step_{t+1}).
double directional_diagnostic(std::span<const ChainEval> chains);

/// Per-chain row for CSV export.
struct ChainMetricRow {
  std::string id;
  std::size_t length = 0;
  std::optional<std::size_t> t_on;
  std::optional<double> snap_m, lag, r_score;
  std::size_t recoveries = 0;
  std::optional<double> brake_s, ling_t, heal_3;  // means over the chain's events
  double fp_len = 0.0;
};

ChainMetricRow chain_metrics(const ChainEval& c);

}  // namespace cotwatch
