#pragma once
// Synthetic labeled trajectories with planted hallucination dynamics.
//
// Latent process per step: a clean chain enters the hallucinated state with
// onset_prob (that step has A_step = 1). While hallucinated, each step starts
// a correction with recovery_prob; a correction is recovery_run clean steps
// and the prefix state clears on its last one. Y = 1 - A_prefix_T.
//
// Token states: N(mu, I) with mu = +-(separation/2) u by A_step, plus
// +-(prefix_ratio * separation / 2) v by A_prefix, for orthonormal u, v.

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "cotwatch/label_validator.hpp"
#include "cotwatch/trajectory.hpp"

namespace cotwatch {

struct SynthConfig {
  std::size_t num_chains = 500;
  std::pair<std::size_t, std::size_t> t_range{4, 12};
  std::pair<std::size_t, std::size_t> l_range{3, 10};
  std::size_t d = 16;
  double separation = 4.0;
  double prefix_ratio = 0.5;
  double onset_prob = 0.15;
  double recovery_prob = 0.2;
  std::size_t recovery_run = 2;
  // Beta(alpha, beta) token probabilities on hallucinated / clean steps
  double hallucinated_alpha = 2.0, hallucinated_beta = 5.0;
  double clean_alpha = 5.0, clean_beta = 2.0;
  std::size_t layer_index = 16;
  std::uint64_t seed = 0;

  void validate() const;
};

Dataset generate(const SynthConfig& cfg, std::size_t threads = 1);

enum class PlantKind { terminal, severe_epiphany, severe_degradation };
std::string_view to_string(PlantKind k);
PlantKind parse_plant_kind(std::string_view name);

/// Corrupts exactly `count` labeled trajectories (chosen by seed) with the
/// named violation. Severe kinds need T >= n_run + 1. Throws InvalidConfig if
/// fewer than `count` trajectories are eligible.
Dataset plant_violations(const Dataset& ds, PlantKind kind, std::size_t count, std::uint64_t seed,
                         std::vector<std::string>* planted_ids = nullptr, std::size_t n_run = kDefaultRunLength);

}  // namespace cotwatch
