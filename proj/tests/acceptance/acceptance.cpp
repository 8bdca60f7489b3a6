// Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any failure.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "cotwatch/aggregation.hpp"
#include "cotwatch/cli.hpp"
#include "cotwatch/inference.hpp"
#include "cotwatch/label_validator.hpp"
#include "cotwatch/metrics.hpp"
#include "cotwatch/probe.hpp"
#include "cotwatch/stream_engine.hpp"
#include "cotwatch/synth.hpp"
#include "cotwatch/training.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace cotwatch;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

struct Criterion {
  const char* name;
  double time_limit_s;  // <= 0: no limit
  std::function<Outcome()> run;
};

// ---------------------------------------------------------------------------

Outcome weight_exactness() {
  double worst = 0.0, worst_sum = 0.0;
  for (std::size_t L = 2; L <= 10; ++L) {
    const auto w = time_exp_weights(L);
    const auto ref = oracle::time_exp_weights(L);
    double sum = 0.0;
    for (std::size_t i = 0; i < L; ++i) {
      worst = std::max(worst, std::abs(w[i] - ref[i]));
      sum += w[i];
    }
    worst_sum = std::max(worst_sum, std::abs(sum - 1.0));
  }
  return {worst <= 1e-12 && worst_sum <= 1e-12, fmt::format("max |w - ref| {:.2e}, max |sum - 1| {:.2e}", worst, worst_sum)};
}

Outcome property_one() {
  std::mt19937_64 rng(101);
  std::size_t checks = 0, bad = 0;
  for (int rep = 0; rep < 100; ++rep) {
    const std::size_t T = 1 + rng() % 12;
    std::vector<std::size_t> L(T);
    for (auto& l : L) l = 1 + rng() % 20;
    // step t carries the marker e_t on every token
    const auto traj = testutil::shaped(L, T, [](std::size_t t, std::size_t, std::size_t k) { return t == k ? 1.0 : 0.0; });
    std::size_t total = 0;
    for (std::size_t t = 1; t <= T; ++t) {
      total += L[t - 1];
      const auto z = global_mean(traj, t).vector;
      for (std::size_t i = 1; i <= T; ++i) {
        const double want = i <= t ? static_cast<double>(L[i - 1]) / static_cast<double>(total) : 0.0;
        bad += z[i - 1] != want;
        ++checks;
      }
    }
  }
  return {bad == 0, fmt::format("{} coefficients, {} inexact", checks, bad)};
}

Outcome property_two() {
  std::mt19937_64 rng(102);
  std::normal_distribution<double> n01(0.0, 1.0);
  double worst = 0.0;
  for (int rep = 0; rep < 100; ++rep) {
    const std::size_t L = 1 + rng() % 30, d = 1 + rng() % 6;
    // h_j = sum_{k<=j} u_k
    std::vector<std::vector<double>> u(L, std::vector<double>(d));
    for (auto& row : u) {
      for (double& x : row) x = n01(rng);
    }
    std::vector<std::vector<double>> h(L, std::vector<double>(d, 0.0));
    for (std::size_t j = 0; j < L; ++j) {
      for (std::size_t k = 0; k < d; ++k) h[j][k] = (j ? h[j - 1][k] : 0.0) + u[j][k];
    }
    const auto traj = testutil::shaped({L}, d, [&](std::size_t, std::size_t j, std::size_t k) { return h[j][k]; });
    const auto z = step_mean(traj.steps[0]).vector;
    for (std::size_t k = 0; k < d; ++k) {
      double want = 0.0;
      for (std::size_t i = 1; i <= L; ++i) {
        want += (1.0 - static_cast<double>(i - 1) / static_cast<double>(L)) * (static_cast<double>(static_cast<float>(h[i - 1][k])) - (i > 1 ? static_cast<double>(static_cast<float>(h[i - 2][k])) : 0.0));
      }
      worst = std::max(worst, std::abs(z[k] - want));
    }
  }
  return {worst <= 1e-9, fmt::format("max deviation {:.2e}", worst)};
}

Outcome gradient_suite() {
  oracle::Lcg rng(103);
  double worst = 0.0;
  for (int rep = 0; rep < 200; ++rep) {
    const std::size_t T = 1 + rng.below(10);
    std::vector<double> cs(T), cp(T);
    std::vector<Label> a(T);
    for (std::size_t t = 0; t < T; ++t) {
      cs[t] = 0.02 + 0.96 * rng.uniform();
      cp[t] = 0.02 + 0.96 * rng.uniform();
      a[t] = static_cast<Label>(rng.below(2));
    }
    TrainConfig cfg;
    cfg.lambda_final = 1.0 + 9.0 * rng.uniform();
    cfg.lambda_sync = 5.0 * rng.uniform();
    for (Label y : {Label{0}, Label{1}}) {
      worst = std::max(worst, oracle::rel_err(bce_grad(cp[0], y),
                                              oracle::central_difference([&](double p) { return bce(p, y); }, cp[0])));
    }
    const auto ga = anchor_loss_grad(cp, a, cfg.lambda_final);
    const auto gs = sync_loss_grad(cs, cp);
    const auto gt = total_loss_grad(cs, cp, a, cfg);
    for (std::size_t t = 0; t < T; ++t) {
      auto vary = [&](std::vector<double>& v, auto f) {
        return oracle::central_difference([&](double x) {
          const double keep = v[t];
          v[t] = x;
          const double r = f();
          v[t] = keep;
          return r;
        }, v[t]);
      };
      worst = std::max(worst, oracle::rel_err(ga[t], vary(cp, [&] { return anchor_loss(cp, a, cfg.lambda_final); })));
      worst = std::max(worst, oracle::rel_err(gs.d_prefix[t], vary(cp, [&] { return sync_loss(cs, cp); })));
      worst = std::max(worst, oracle::rel_err(gs.d_step[t], vary(cs, [&] { return sync_loss(cs, cp); })));
      worst = std::max(worst, oracle::rel_err(gt.d_prefix[t], vary(cp, [&] { return total_loss(cs, cp, a, cfg); })));
      worst = std::max(worst, oracle::rel_err(gt.d_step[t], vary(cs, [&] { return total_loss(cs, cp, a, cfg); })));
    }
  }
  return {worst < 1e-4, fmt::format("max relative error {:.2e}", worst)};
}

std::set<std::pair<std::string, std::size_t>> rule_set(const ValidationVerdict& v) {
  std::set<std::pair<std::string, std::size_t>> out;
  for (const auto& x : v.violations) out.insert({std::string(to_string(x.rule)), x.step_index.value_or(0)});
  return out;
}

Outcome validator_oracle() {
  std::size_t cases = 0, mismatches = 0;
  for (std::size_t T = 1; T <= 6; ++T) {
    for (std::uint32_t mask = 0; mask < (1u << (2 * T)); ++mask) {
      std::vector<bool> step(T), prefix(T);
      std::vector<int> si(T), pi(T);
      for (std::size_t t = 0; t < T; ++t) {
        si[t] = (mask >> t) & 1;
        pi[t] = (mask >> (T + t)) & 1;
        step[t] = si[t];
        prefix[t] = pi[t];
      }
      for (int y : {0, 1}) {
        for (std::size_t n_run = 1; n_run <= 6; ++n_run) {
          for (bool strict : {false, true}) {
            const auto got = validate_labels(step, prefix, y == 1, {n_run, strict});
            const auto want = oracle::check_labels(si, pi, y, n_run, strict);
            mismatches += got.accepted != want.accepted || rule_set(got) != want.violations;
            ++cases;
          }
        }
      }
    }
  }
  return {mismatches == 0, fmt::format("{} label cases, {} discrepancies", cases, mismatches)};
}

ChainEval to_eval(const oracle::Chain& o) {
  ChainEval c;
  c.id = "x";
  for (int v : o.a) c.a_prefix.push_back(static_cast<Label>(v));
  c.c_prefix = o.c;
  c.threshold = o.thr;
  return c;
}

// Counts disagreements between library and oracle on one chain.
std::size_t compare_chain(const oracle::Chain& o) {
  const ChainEval c = to_eval(o);
  std::size_t bad = 0;
  auto near = [&](const std::optional<double>& a, const std::optional<double>& b) {
    if (a.has_value() != b.has_value()) return false;
    return !a || std::abs(*a - *b) <= 1e-12;
  };
  bad += onset(c) != oracle::onset(o);
  bad += !near(snap_magnitude(c), oracle::snap(o));
  bad += detection_lag(c) != oracle::lag(o);
  const auto events = recovery_events(c);
  bad += events != oracle::recoveries(o);
  for (std::size_t t : events) {
    bad += std::abs(brake_strength(c, t) - oracle::brake(o, t)) > 1e-12;
    bad += lingering_time(c, t) != oracle::ling(o, t);
    bad += (healed_within_3(c, t) ? 1 : 0) != oracle::heal3(o, t);
  }
  bad += !near(recovery_score(c), oracle::r_score(o));
  bad += std::abs(fp_length(c) - oracle::fp_len(o)) > 1e-12;
  return bad;
}

Outcome dynamic_oracle() {
  const double low[] = {0.05, 0.3, 0.5}, high[] = {0.51, 0.7, 0.97};
  oracle::Lcg rng(104);
  std::size_t chains = 0, bad = 0;
  std::vector<oracle::Chain> pool;
  for (std::size_t T = 1; T <= 8; ++T) {
    for (std::uint32_t mask = 0; mask < (1u << (2 * T)); ++mask) {
      oracle::Chain o;
      for (std::size_t t = 0; t < T; ++t) {
        o.a.push_back((mask >> t) & 1);
        const bool yhat = (mask >> (T + t)) & 1;
        o.c.push_back(yhat ? high[rng.below(3)] : low[rng.below(3)]);
      }
      bad += compare_chain(o);
      ++chains;
    }
  }
  for (int i = 0; i < 10000; ++i) {
    oracle::Chain o;
    const std::size_t T = 1 + rng.below(30);
    for (std::size_t t = 0; t < T; ++t) {
      o.a.push_back(rng.uniform() < 0.4);
      o.c.push_back(rng.uniform());
    }
    bad += compare_chain(o);
    pool.push_back(std::move(o));
    ++chains;
  }

  std::vector<ChainEval> evals;
  for (const auto& o : pool) evals.push_back(to_eval(o));
  const auto r = dynamic_report(evals);
  const auto want = oracle::report(pool);
  auto off = [](const std::optional<double>& a, const std::optional<double>& b) {
    return a.has_value() != b.has_value() || (a && std::abs(*a - *b) > 1e-12);
  };
  std::size_t report_bad = off(r.snap_m.value, want.snap_m) + off(r.lag.value, want.lag) + off(r.icr.value, want.icr) +
                           off(r.brake_s.value, want.brake_s) + off(r.ling_t.value, want.ling_t) +
                           off(r.heal_3.value, want.heal_3) + off(r.r_score.value, want.r_score) +
                           off(r.fp_len.value, want.fp_len);
  report_bad += r.recovery_events != want.n_events;
  return {bad == 0 && report_bad == 0,
          fmt::format("{} chains, {} per-chain and {} dataset-level discrepancies", chains, bad, report_bad)};
}

Outcome case_study() {
  std::vector<int> a(21, 0);
  std::vector<double> c(21, 0.1);
  for (std::size_t t = 15; t <= 21; ++t) a[t - 1] = 1;
  c[13] = 0.22;
  c[14] = 0.46;
  c[15] = 0.77;
  for (std::size_t t = 17; t <= 21; ++t) c[t - 1] = 0.88;
  oracle::Chain o{a, c, 0.5};
  const ChainEval ch = to_eval(o);
  const double snap = *snap_magnitude(ch);
  const double lag = *detection_lag(ch);
  return {std::abs(snap - 0.24) <= 1e-12 && lag == 1.0,
          fmt::format("t_on {}, Snap_M {:.15g}, Lag {}", *onset(ch), snap, lag)};
}

double mean_sync(const std::vector<ScoreTrace>& traces) {
  double s = 0.0;
  for (const auto& t : traces) s += sync_loss(t.c_step, t.c_prefix);
  return s / static_cast<double>(traces.size());
}

Outcome end_to_end() {
  SynthConfig sc;
  sc.num_chains = 500;
  sc.separation = 4.0;
  sc.seed = 1;
  const Dataset ds = generate(sc);
  const auto [train, test] = train_eval_split(ds, 0.8, ds.split_seed);

  TrainConfig tc;
  tc.learning_rate = 0.05;
  tc.epochs = 30;
  tc.seed = 1;
  const auto step = train_step_probe(train, AggregationScheme::of(SchemeKind::step_time_exp), tc);
  TrainConfig with_sync = tc, without_sync = tc;
  with_sync.lambda_sync = 1.0;
  without_sync.lambda_sync = 0.0;
  const auto prefix1 = train_prefix_probe(train, step, with_sync);
  const auto prefix0 = train_prefix_probe(train, step, without_sync);

  const auto traces1 = infer(test, step, prefix1);
  const auto traces0 = infer(test, step, prefix0);
  std::vector<double> s;
  std::vector<Label> y;
  std::vector<ChainEval> chains;
  for (std::size_t i = 0; i < test.trajectories.size(); ++i) {
    const auto& tr = test.trajectories[i];
    for (std::size_t t = 0; t < tr.steps.size(); ++t) {
      s.push_back(traces1[i].c_step[t]);
      y.push_back(*tr.steps[t].a_step ? 1 : 0);
    }
    chains.push_back(to_chain_eval(traces1[i]));
  }
  const double step_auc = auc(s, y);
  const double final_acc = eval_final(chains).binary.acc;
  const double sync1 = mean_sync(traces1), sync0 = mean_sync(traces0);
  return {step_auc >= 0.95 && final_acc >= 0.90 && sync1 <= sync0,
          fmt::format("test chains {}, step AUC {:.4f}, Final acc {:.4f}, mean sync {:.3e} (lambda 1) vs {:.3e} (lambda 0)",
                      test.trajectories.size(), step_auc, final_acc, sync1, sync0)};
}

std::shared_ptr<ProbeModel> random_probe(std::mt19937_64& rng, ProbeKind kind, std::size_t in) {
  auto m = std::make_shared<ProbeModel>(ProbeModel::zeros(kind, ProbeArch::linear, in, 0));
  std::normal_distribution<double> n(0.0, 0.5);
  auto theta = m->parameters();
  for (double& v : theta) v = n(rng);
  m->set_parameters(theta);
  return m;
}

Outcome streaming_equivalence() {
  std::mt19937_64 rng(105);
  testutil::TrajShape shape;
  shape.d = 8;
  shape.max_steps = 12;
  shape.max_tokens = 9;
  std::vector<Trajectory> chains;
  for (int i = 0; i < 100; ++i) chains.push_back(testutil::random_trajectory(rng, shape, fmt::format("r{}", i)));

  std::vector<AggregationScheme> schemes;
  for (auto k : {SchemeKind::step_mean, SchemeKind::step_time_exp, SchemeKind::global_mean, SchemeKind::global_linear,
                 SchemeKind::global_exp, SchemeKind::max_pool, SchemeKind::last_token, SchemeKind::surprisal_weighted,
                 SchemeKind::min_prob_state, SchemeKind::bottom5_weighted, SchemeKind::scalar_features}) {
    for (bool l2 : {false, true}) {
      auto s = AggregationScheme::of(k);
      s.l2_normalize = l2;
      schemes.push_back(s);
    }
  }
  std::size_t exact_bad = 0, scores = 0;
  double worst_exp = 0.0;
  for (const auto& scheme : schemes) {
    auto step = random_probe(rng, ProbeKind::step, scheme.output_dim(shape.d));
    step->aggregation = scheme;
    step->state_dim = shape.d;
    step->layer_index = 3;
    auto prefix = random_probe(rng, ProbeKind::prefix, step->input_dim + 1);
    prefix->aggregation = scheme;
    prefix->state_dim = shape.d;
    prefix->layer_index = 3;
    prefix->step_probe_hash = step->hash();
    for (const auto& tr : chains) {
      const auto offline = infer(tr, *step, *prefix);
      StreamDetector det(step, prefix);
      for (std::size_t t = 0; t < tr.steps.size(); ++t) {
        const auto ev = det.push_step(tr.steps[t]).front();
        ++scores;
        if (scheme.kind == SchemeKind::global_exp) {
          worst_exp = std::max({worst_exp, std::abs(ev.c_step - offline.c_step[t]),
                                std::abs(ev.c_prefix - offline.c_prefix[t])});
        } else {
          exact_bad += ev.c_step != offline.c_step[t] || ev.c_prefix != offline.c_prefix[t];
        }
      }
    }
  }
  return {exact_bad == 0 && worst_exp <= 1e-9,
          fmt::format("{} schemes, {} step scores, {} bitwise mismatches, global_exp max |diff| {:.2e}", schemes.size(),
                      scores, exact_bad, worst_exp)};
}

Outcome format_round_trip() {
  std::mt19937_64 rng(106);
  const fs::path root = testutil::temp_dir("acceptance_roundtrip");
  std::size_t bad = 0;
  for (int i = 0; i < 1000; ++i) {
    testutil::TrajShape shape;
    shape.d = 1 + rng() % 8;
    shape.labels = rng() % 4 != 0;
    shape.probs = rng() % 3 != 0;
    const Dataset ds = testutil::random_dataset(rng, 1 + rng() % 4, shape);
    const fs::path dir = root / std::to_string(i);
    const auto manifest = write_dataset(ds, dir);
    bad += !equal(read_dataset(manifest), ds);
  }
  fs::remove_all(root);
  return {bad == 0, fmt::format("1000 datasets, {} mismatches", bad)};
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

int cli(std::vector<std::string> args) {
  args.insert(args.begin(), "cotwatch");
  std::istringstream in;
  std::ostringstream out, err;
  const int code = cli::run(args, in, out, err);
  if (code != 0) std::fprintf(stderr, "%s", err.str().c_str());
  return code;
}

std::vector<std::string> pipeline_outputs(const fs::path& dir) {
  const std::string data = (dir / "data").string(), step = (dir / "step.json").string(),
                    prefix = (dir / "prefix.json").string(), scores = (dir / "scores.ndjson").string(),
                    report = (dir / "report.json").string();
  int rc = cli({"synth", "--chains", "200", "--seed", "1", "--out", data});
  rc |= cli({"train-step", "--data", data, "--seed", "1", "--lr", "0.05", "--epochs", "10", "--out", step});
  rc |= cli({"train-prefix", "--data", data, "--step-probe", step, "--seed", "1", "--lr", "0.05", "--epochs", "10",
             "--out", prefix});
  rc |= cli({"infer", "--data", data, "--step-probe", step, "--prefix-probe", prefix, "--out", scores});
  rc |= cli({"evaluate", "--scores", scores, "--mode", "all", "--report", report});
  if (rc != 0) return {};
  return {slurp(dir / "data" / "manifest.jsonl"), slurp(step), slurp(prefix), slurp(scores), slurp(report)};
}

Outcome pipeline_determinism() {
  const fs::path root = testutil::temp_dir("acceptance_pipeline");
  const auto a = pipeline_outputs(root / "a");
  const auto b = pipeline_outputs(root / "b");
  if (a.empty() || b.empty()) return {false, "a pipeline stage failed"};
  std::size_t differ = 0;
  for (std::size_t i = 0; i < a.size(); ++i) differ += a[i] != b[i];
  fs::remove_all(root);
  return {differ == 0, fmt::format("{} artifacts compared, {} differ, report {} bytes", a.size(), differ, a.back().size())};
}

}  // namespace

int main() {
  const std::vector<Criterion> criteria = {
      {"aggregation_weight_exactness", 1, weight_exactness},
      {"property_one_global_mean_coefficients", 5, property_one},
      {"property_two_increment_weights", 5, property_two},
      {"gradient_suite", 30, gradient_suite},
      {"validator_oracle", 60, validator_oracle},
      {"dynamic_metric_oracle", 120, dynamic_oracle},
      {"case_study_regression", 0, case_study},
      {"end_to_end_synthetic", 60, end_to_end},
      {"streaming_equivalence", 10, streaming_equivalence},
      {"format_round_trip", 10, format_round_trip},
      {"pipeline_determinism", 0, pipeline_determinism},
  };
  int failures = 0;
  for (const auto& c : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (c.time_limit_s > 0 && s >= c.time_limit_s) {
      o.pass = false;
      o.detail += fmt::format("; over the {} s budget", c.time_limit_s);
    }
    failures += !o.pass;
    std::printf("%s %s: %s [%.3f s]\n", o.pass ? "PASS" : "FAIL", c.name, o.detail.c_str(), s);
    std::fflush(stdout);
  }
  std::printf("%zu criteria, %d failed\n", criteria.size(), failures);
  return failures == 0 ? 0 : 1;
}
