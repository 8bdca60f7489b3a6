#pragma once
// Step representations built from per-token hidden states.
//
// Step-scoped schemes look only at the current step's tokens. Global schemes
// (global_mean, global_linear, global_exp) pool every token of steps 1..t,
// weighting token g (1-based position in generation order) by 1, g, or
// exp(gamma * g) respectively.
//
// Step indices in this API are 1-based.

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cotwatch/trajectory.hpp"

namespace cotwatch {

enum class SchemeKind {
  step_mean,
  step_time_exp,
  global_mean,
  global_linear,
  global_exp,
  max_pool,
  last_token,
  surprisal_weighted,
  min_prob_state,
  bottom5_weighted,
  scalar_features,
};

inline constexpr double kDefaultGlobalExpGamma = 0.003;
inline constexpr std::size_t kScalarFeatureDim = 32;
inline constexpr int kScalarFeatureLayoutVersion = 1;
inline constexpr std::size_t kBottomK = 5;

struct AggregationScheme {
  SchemeKind kind = SchemeKind::step_time_exp;
  double gamma = kDefaultGlobalExpGamma;  // global_exp only
  bool l2_normalize = true;

  /// Scheme with its default normalization (on only for step_time_exp).
  static AggregationScheme of(SchemeKind kind);

  bool is_global() const noexcept;
  bool uses_probs() const noexcept;
  /// Output length for hidden dimension d.
  std::size_t output_dim(std::size_t d) const noexcept;
  void validate() const;

  bool operator==(const AggregationScheme&) const = default;
};

std::string_view to_string(SchemeKind kind);
SchemeKind parse_scheme_kind(std::string_view name);

struct StepRepresentation {
  std::vector<double> vector;
  std::size_t step_index = 0;
  AggregationScheme scheme;
  bool zero_norm = false;  // l2 requested but the raw vector was zero
};

// Weight vectors (non-negative, summing to 1).
std::vector<double> time_exp_weights(std::size_t num_tokens);
std::vector<double> surprisal_weights(std::span<const double> probs);
/// Surprisal softmax restricted to the k lowest-probability tokens; others get 0.
std::vector<double> bottom_k_weights(std::span<const double> probs, std::size_t k = kBottomK);

StepRepresentation step_time_exp(const Step& step, bool l2_normalize = true);
StepRepresentation step_mean(const Step& step, bool l2_normalize = false);
StepRepresentation max_pool(const Step& step, bool l2_normalize = false);
StepRepresentation last_token(const Step& step, bool l2_normalize = false);
StepRepresentation surprisal_weighted(const Step& step, bool l2_normalize = false);
StepRepresentation min_prob_state(const Step& step, bool l2_normalize = false);
StepRepresentation bottom5_weighted(const Step& step, bool l2_normalize = false);
StepRepresentation scalar_features(const Step& step, bool l2_normalize = false);

StepRepresentation global_mean(const Trajectory& traj, std::size_t upto_t, bool l2_normalize = false);
StepRepresentation global_linear(const Trajectory& traj, std::size_t upto_t, bool l2_normalize = false);
StepRepresentation global_exp(const Trajectory& traj, std::size_t upto_t,
                              double gamma = kDefaultGlobalExpGamma, bool l2_normalize = false);

/// Step-scoped schemes only.
StepRepresentation aggregate_step(const Step& step, const AggregationScheme& scheme);
/// Any scheme for step t of traj.
StepRepresentation aggregate(const Trajectory& traj, std::size_t t, const AggregationScheme& scheme);
/// Element t-1 equals aggregate(traj, t, scheme); global schemes share one pass.
std::vector<StepRepresentation> batch_aggregate(const Trajectory& traj, const AggregationScheme& scheme);

/// In-place l2 normalization; returns false (and leaves v untouched) when v is zero.
bool l2_normalize_inplace(std::span<double> v);

/// Running weighted sums for global schemes, shared by the batch pass and the
/// stream engine. For global_exp the sums are kept scaled by exp(-gamma * g_last).
class GlobalAccumulator {
 public:
  GlobalAccumulator(const AggregationScheme& scheme, std::size_t dim);

  void push(const Step& step);
  std::size_t tokens_seen() const noexcept { return tokens_; }
  /// Current pooled representation (without step index).
  std::vector<double> value() const;
  /// value() finished under the scheme's normalization, tagged as step t.
  StepRepresentation representation(std::size_t t) const;
  std::span<const double> weighted_sum() const noexcept { return sum_; }
  double weight_sum() const noexcept { return weight_sum_; }

 private:
  AggregationScheme scheme_;
  std::vector<double> sum_;
  double weight_sum_ = 0.0;
  std::size_t tokens_ = 0;
};

}  // namespace cotwatch
