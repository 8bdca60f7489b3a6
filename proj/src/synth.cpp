#include <algorithm>
#include <cmath>
#include <random>

#include <fmt/format.h>

#include "cotwatch/error.hpp"
#include "cotwatch/parallel.hpp"
#include "cotwatch/rng.hpp"
#include "cotwatch/synth.hpp"

namespace cotwatch {

void SynthConfig::validate() const {
  auto bad = [](const std::string& msg) { throw Error(ErrorCode::InvalidConfig, msg); };
  if (num_chains == 0) bad("num_chains must be >= 1");
  if (t_range.first < 1 || t_range.first > t_range.second) bad("t_range must satisfy 1 <= min <= max");
  if (l_range.first < 1 || l_range.first > l_range.second) bad("l_range must satisfy 1 <= min <= max");
  if (d < 2) bad("d must be >= 2");
  if (!(separation >= 0.0) || !std::isfinite(separation)) bad("separation must be finite and >= 0");
  if (!(prefix_ratio >= 0.0) || !std::isfinite(prefix_ratio)) bad("prefix_ratio must be finite and >= 0");
  for (double p : {onset_prob, recovery_prob}) {
    if (!(p >= 0.0 && p <= 1.0)) bad("probabilities must lie in [0,1]");
  }
  if (recovery_run < 1) bad("recovery_run must be >= 1");
  for (double a : {hallucinated_alpha, hallucinated_beta, clean_alpha, clean_beta}) {
    if (!(a > 0.0) || !std::isfinite(a)) bad("beta parameters must be positive");
  }
}

namespace {

struct Directions {
  std::vector<double> u, v;
};

Directions random_directions(std::size_t d, std::uint64_t seed) {
  Rng rng = make_rng(seed, "synth/directions");
  std::normal_distribution<double> n01(0.0, 1.0);
  Directions dir{std::vector<double>(d), std::vector<double>(d)};
  for (auto& x : dir.u) x = n01(rng);
  for (auto& x : dir.v) x = n01(rng);
  auto norm = [](std::vector<double>& a) {
    double s = 0.0;
    for (double x : a) s += x * x;
    s = std::sqrt(s);
    for (double& x : a) x /= s;
  };
  norm(dir.u);
  double proj = 0.0;
  for (std::size_t i = 0; i < d; ++i) proj += dir.u[i] * dir.v[i];
  for (std::size_t i = 0; i < d; ++i) dir.v[i] -= proj * dir.u[i];
  norm(dir.v);
  return dir;
}

double beta_sample(Rng& rng, double a, double b) {
  std::gamma_distribution<double> ga(a, 1.0), gb(b, 1.0);
  const double x = ga(rng);
  const double y = gb(rng);
  return x / (x + y);
}

Trajectory generate_chain(const SynthConfig& cfg, const Directions& dir, std::size_t index) {
  Rng rng(derive_seed(derive_seed(cfg.seed, "synth"), fmt::format("chain/{}", index)));
  std::uniform_int_distribution<std::size_t> t_dist(cfg.t_range.first, cfg.t_range.second);
  std::uniform_int_distribution<std::size_t> l_dist(cfg.l_range.first, cfg.l_range.second);
  std::bernoulli_distribution onset(cfg.onset_prob), recover(cfg.recovery_prob);
  std::normal_distribution<double> noise(0.0, 1.0);

  Trajectory traj;
  traj.id = fmt::format("synth-{:06d}", index);
  traj.hidden_dim = cfg.d;
  traj.layer_index = cfg.layer_index;
  const std::size_t T = t_dist(rng);

  bool hallucinated = false;
  std::size_t correcting = 0;  // clean steps left in the current correction
  const double step_shift = cfg.separation / 2.0;
  const double prefix_shift = cfg.prefix_ratio * cfg.separation / 2.0;
  for (std::size_t t = 0; t < T; ++t) {
    bool a_step = false;
    if (!hallucinated) {
      if (onset(rng)) hallucinated = a_step = true;
    } else if (correcting > 0 || recover(rng)) {
      if (correcting == 0) correcting = cfg.recovery_run;
      if (--correcting == 0) hallucinated = false;
    } else {
      a_step = true;
    }

    const std::size_t L = l_dist(rng);
    Step s;
    s.hidden_states = TokenStates(L, cfg.d);
    const double su = a_step ? step_shift : -step_shift;
    const double sv = hallucinated ? prefix_shift : -prefix_shift;
    for (std::size_t j = 0; j < L; ++j) {
      auto row = s.hidden_states.row(j);
      for (std::size_t k = 0; k < cfg.d; ++k) {
        row[k] = static_cast<float>(su * dir.u[k] + sv * dir.v[k] + noise(rng));
      }
    }
    std::vector<double> probs(L);
    for (double& p : probs) {
      p = a_step ? beta_sample(rng, cfg.hallucinated_alpha, cfg.hallucinated_beta)
                 : beta_sample(rng, cfg.clean_alpha, cfg.clean_beta);
      p = std::clamp(p, 1e-6, 1.0);
    }
    s.token_probs = std::move(probs);
    s.a_step = a_step;
    s.a_prefix = hallucinated;
    traj.steps.push_back(std::move(s));
  }
  traj.final_correct = !hallucinated;
  return traj;
}

}  // namespace

Dataset generate(const SynthConfig& cfg, std::size_t threads) {
  cfg.validate();
  const Directions dir = random_directions(cfg.d, cfg.seed);
  Dataset ds;
  ds.split_seed = cfg.seed;
  ds.trajectories.resize(cfg.num_chains);
  parallel_for(cfg.num_chains, threads, [&](std::size_t i) { ds.trajectories[i] = generate_chain(cfg, dir, i); });
  return ds;
}

std::string_view to_string(PlantKind k) {
  switch (k) {
    case PlantKind::terminal: return "terminal";
    case PlantKind::severe_epiphany: return "severe_epiphany";
    case PlantKind::severe_degradation: return "severe_degradation";
  }
  return "unknown";
}

PlantKind parse_plant_kind(std::string_view name) {
  for (PlantKind k : {PlantKind::terminal, PlantKind::severe_epiphany, PlantKind::severe_degradation}) {
    if (name == to_string(k)) return k;
  }
  throw Error(ErrorCode::InvalidConfig, fmt::format("unknown violation kind '{}'", name));
}

namespace {

bool labeled(const Trajectory& t) { return t.final_correct && t.has_step_labels() && t.has_prefix_labels(); }

// Run of n_run constant prefix states, then an unwitnessed flip at step n_run + 1.
void plant_severe(Trajectory& traj, bool epiphany, std::size_t n_run) {
  for (std::size_t t = 0; t < traj.steps.size(); ++t) {
    Step& s = traj.steps[t];
    if (t < n_run) {
      s.a_prefix = epiphany;
      s.a_step = epiphany;
    } else if (t == n_run) {
      s.a_prefix = !epiphany;
      s.a_step = epiphany;
    } else {
      s.a_prefix = !epiphany;
      s.a_step = !epiphany;
    }
  }
  traj.final_correct = epiphany;
}

}  // namespace

Dataset plant_violations(const Dataset& ds, PlantKind kind, std::size_t count, std::uint64_t seed,
                         std::vector<std::string>* planted_ids, std::size_t n_run) {
  if (n_run < 1) throw Error(ErrorCode::InvalidConfig, "n_run must be >= 1");
  Dataset out = ds;
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < out.trajectories.size(); ++i) {
    const Trajectory& t = out.trajectories[i];
    if (!labeled(t)) continue;
    if (kind != PlantKind::terminal && t.num_steps() < n_run + 1) continue;
    eligible.push_back(i);
  }
  if (eligible.size() < count) {
    throw Error(ErrorCode::InvalidConfig, fmt::format("only {} trajectories eligible for {}, {} requested",
                                                      eligible.size(), to_string(kind), count));
  }
  Rng rng = make_rng(seed, "plant");
  for (std::size_t i = eligible.size(); i > 1; --i) std::swap(eligible[i - 1], eligible[rng() % i]);
  eligible.resize(count);
  std::sort(eligible.begin(), eligible.end());

  if (planted_ids) planted_ids->clear();
  for (std::size_t i : eligible) {
    Trajectory& t = out.trajectories[i];
    switch (kind) {
      case PlantKind::terminal: t.final_correct = !*t.final_correct; break;
      case PlantKind::severe_epiphany: plant_severe(t, true, n_run); break;
      case PlantKind::severe_degradation: plant_severe(t, false, n_run); break;
    }
    if (planted_ids) planted_ids->push_back(t.id);
  }
  return out;
}

}  // namespace cotwatch
