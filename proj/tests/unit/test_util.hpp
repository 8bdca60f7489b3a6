#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "cotwatch/trajectory.hpp"

namespace testutil {

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("cotwatch_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

struct TrajShape {
  std::size_t d = 4;
  std::size_t max_steps = 6;
  std::size_t max_tokens = 5;
  bool labels = true;
  bool probs = true;
};

inline cotwatch::Trajectory random_trajectory(std::mt19937_64& rng, const TrajShape& shape, const std::string& id) {
  std::uniform_int_distribution<std::size_t> T(1, shape.max_steps), L(1, shape.max_tokens);
  std::normal_distribution<float> n01(0.0f, 1.0f);
  std::uniform_real_distribution<double> prob(0.01, 1.0);
  std::bernoulli_distribution coin(0.5);
  cotwatch::Trajectory t;
  t.id = id;
  t.hidden_dim = shape.d;
  t.layer_index = 3;
  const std::size_t steps = T(rng);
  for (std::size_t i = 0; i < steps; ++i) {
    cotwatch::Step s;
    const std::size_t len = L(rng);
    s.hidden_states = cotwatch::TokenStates(len, shape.d);
    for (float& v : s.hidden_states.data()) v = n01(rng);
    if (shape.probs) {
      std::vector<double> p(len);
      for (double& x : p) x = prob(rng);
      s.token_probs = p;
    }
    if (shape.labels) {
      s.a_step = coin(rng);
      s.a_prefix = coin(rng);
    }
    t.steps.push_back(std::move(s));
  }
  if (shape.labels) t.final_correct = coin(rng);
  return t;
}

inline cotwatch::Dataset random_dataset(std::mt19937_64& rng, std::size_t n, const TrajShape& shape) {
  cotwatch::Dataset ds;
  for (std::size_t i = 0; i < n; ++i) ds.trajectories.push_back(random_trajectory(rng, shape, "t" + std::to_string(i)));
  ds.split_seed = rng();
  return ds;
}

/// Trajectory whose token j of step t holds `fill(t, j, k)` in dimension k.
template <typename F>
cotwatch::Trajectory shaped(const std::vector<std::size_t>& lengths, std::size_t d, F fill) {
  cotwatch::Trajectory tr;
  tr.id = "shaped";
  tr.hidden_dim = d;
  for (std::size_t t = 0; t < lengths.size(); ++t) {
    cotwatch::Step s;
    s.hidden_states = cotwatch::TokenStates(lengths[t], d);
    for (std::size_t j = 0; j < lengths[t]; ++j) {
      for (std::size_t k = 0; k < d; ++k) s.hidden_states.row(j)[k] = static_cast<float>(fill(t, j, k));
    }
    tr.steps.push_back(std::move(s));
  }
  return tr;
}

}  // namespace testutil
