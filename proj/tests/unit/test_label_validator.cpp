#include <random>
#include <set>

#include <gtest/gtest.h>

#include "cotwatch/error.hpp"
#include "cotwatch/label_validator.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace cotwatch;

namespace {

std::vector<bool> bits(std::initializer_list<int> v) {
  std::vector<bool> out;
  for (int x : v) out.push_back(x != 0);
  return out;
}

std::set<std::pair<std::string, std::size_t>> rule_set(const ValidationVerdict& v) {
  std::set<std::pair<std::string, std::size_t>> out;
  for (const auto& viol : v.violations) out.insert({std::string(to_string(viol.rule)), *viol.step_index});
  return out;
}

Trajectory labeled(const std::vector<bool>& step, const std::vector<bool>& prefix, bool y) {
  Trajectory tr = testutil::shaped(std::vector<std::size_t>(step.size(), 2), 3, [](auto, auto, auto) { return 0.1; });
  for (std::size_t t = 0; t < step.size(); ++t) {
    tr.steps[t].a_step = step[t];
    tr.steps[t].a_prefix = prefix[t];
  }
  tr.final_correct = y;
  return tr;
}

}  // namespace

TEST(Validator, TerminalRule) {
  EXPECT_TRUE(check_terminal(true, false));
  EXPECT_TRUE(check_terminal(false, true));
  EXPECT_FALSE(check_terminal(true, true));
  EXPECT_FALSE(check_terminal(false, false));
}

TEST(Validator, TransitionTable) {
  EXPECT_EQ(classify_transition(true, false, false), TransitionMode::valid_recovery);
  EXPECT_EQ(classify_transition(true, false, true), TransitionMode::anomalous_recovery);
  EXPECT_EQ(classify_transition(false, true, true), TransitionMode::valid_degradation);
  EXPECT_EQ(classify_transition(false, true, false), TransitionMode::spurious_degradation);
  for (bool p : {false, true}) {
    for (bool s : {false, true}) EXPECT_EQ(classify_transition(p, p, s), TransitionMode::steady);
  }
}

TEST(Validator, Examples) {
  // clean chain, correct answer
  auto v = validate_labels(bits({0, 0, 0}), bits({0, 0, 0}), true);
  EXPECT_TRUE(v.accepted);
  EXPECT_EQ(v.transition_trace.size(), 2u);

  // hallucinated end with a correct answer
  v = validate_labels(bits({0, 1, 1}), bits({0, 1, 1}), true);
  EXPECT_FALSE(v.accepted);
  ASSERT_EQ(v.violations.size(), 1u);
  EXPECT_EQ(v.violations[0].rule, ViolationRule::terminal_consistency);
  EXPECT_EQ(*v.violations[0].step_index, 3u);

  // five hallucinated prefix steps, then a recovery on a hallucinated step
  v = validate_labels(bits({1, 1, 1, 1, 1, 1}), bits({1, 1, 1, 1, 1, 0}), true);
  EXPECT_FALSE(v.accepted);
  EXPECT_EQ(rule_set(v), (std::set<std::pair<std::string, std::size_t>>{{"severe_epiphany", 6}}));

  // same pattern after only four steps is a note
  v = validate_labels(bits({1, 1, 1, 1, 1}), bits({1, 1, 1, 1, 0}), true);
  EXPECT_TRUE(v.accepted);
  ASSERT_EQ(v.notes.size(), 1u);
  EXPECT_EQ(v.notes[0].mode, TransitionMode::anomalous_recovery);
  EXPECT_EQ(v.notes[0].step_index, 5u);
  EXPECT_EQ(v.notes[0].run_length, 4u);

  // strict mode rejects it
  v = validate_labels(bits({1, 1, 1, 1, 1}), bits({1, 1, 1, 1, 0}), true, {5, true});
  EXPECT_FALSE(v.accepted);
  EXPECT_EQ(v.violations[0].rule, ViolationRule::anomalous_recovery);

  // long clean run, then a prefix flip on a clean step
  v = validate_labels(bits({0, 0, 0, 0, 0, 0, 1}), bits({0, 0, 0, 0, 0, 1, 1}), false);
  EXPECT_EQ(rule_set(v), (std::set<std::pair<std::string, std::size_t>>{{"severe_degradation", 6}}));

  // recovery on a clean step is fine however long the run
  v = validate_labels(bits({1, 1, 1, 1, 1, 1, 0}), bits({1, 1, 1, 1, 1, 1, 0}), true);
  EXPECT_TRUE(v.accepted);
}

TEST(Validator, SingleStepChain) {
  EXPECT_TRUE(validate_labels(bits({1}), bits({1}), false).accepted);
  EXPECT_FALSE(validate_labels(bits({0}), bits({0}), false).accepted);
  EXPECT_TRUE(validate_labels(bits({0}), bits({0}), false).transition_trace.empty());
}

TEST(Validator, LengthErrors) {
  try {
    validate_labels(bits({0, 1}), bits({0}), true);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::LengthMismatch);
  }
  EXPECT_THROW(validate_labels({}, {}, true), Error);
}

TEST(Validator, ExhaustiveAgainstOracle) {
  std::size_t cases = 0;
  for (std::size_t T = 1; T <= 7; ++T) {
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
        for (std::size_t n_run : {1u, 2u, 5u}) {
          for (bool strict : {false, true}) {
            const auto got = validate_labels(step, prefix, y == 1, {n_run, strict});
            const auto want = oracle::check_labels(si, pi, y, n_run, strict);
            ASSERT_EQ(got.accepted, want.accepted) << "T=" << T << " mask=" << mask;
            ASSERT_EQ(rule_set(got), want.violations);
            ++cases;
          }
        }
      }
    }
  }
  EXPECT_GT(cases, 100000u);
}

TEST(Validator, LargerRunLengthNeverRejectsMore) {
  std::mt19937_64 rng(77);
  std::bernoulli_distribution coin(0.5);
  std::uniform_int_distribution<std::size_t> len(1, 20);
  for (int rep = 0; rep < 3000; ++rep) {
    const std::size_t T = len(rng);
    std::vector<bool> s(T), p(T);
    for (std::size_t t = 0; t < T; ++t) {
      s[t] = coin(rng);
      p[t] = t > 0 && coin(rng) && coin(rng) ? !p[t - 1] : (t > 0 ? static_cast<bool>(p[t - 1]) : coin(rng));
    }
    const bool y = !p.back() || coin(rng);
    bool prev_accept = false;
    for (std::size_t n = 1; n <= 12; ++n) {
      const bool acc = validate_labels(s, p, y, {n, false}).accepted;
      if (prev_accept) {
        EXPECT_TRUE(acc) << "n_run=" << n;
      }
      prev_accept = acc;
    }
  }
}

TEST(Validator, TrajectoryWrapperAndMissingLabels) {
  Trajectory tr = labeled(bits({0, 1}), bits({0, 1}), false);
  EXPECT_TRUE(validate(tr).accepted);
  EXPECT_TRUE(validate(tr, 1).accepted);
  tr.steps[1].a_prefix.reset();
  try {
    validate(tr);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::MissingLabel);
  }
  tr = labeled(bits({0}), bits({0}), true);
  tr.final_correct.reset();
  EXPECT_THROW(validate(tr), Error);
}

TEST(Validator, DatasetReportCountsAndRates) {
  Dataset ds;
  ds.trajectories.push_back(labeled(bits({0, 0, 0}), bits({0, 0, 0}), true));
  ds.trajectories.push_back(labeled(bits({0, 1, 1}), bits({0, 1, 1}), true));  // terminal
  ds.trajectories.push_back(labeled(bits({1, 1, 1, 1, 1, 1}), bits({1, 1, 1, 1, 1, 0}), false));  // epiphany + terminal
  ds.trajectories.push_back(labeled(bits({0, 1, 0}), bits({0, 1, 0}), true));
  Trajectory gap = labeled(bits({0, 0}), bits({0, 0}), true);
  gap.steps[0].a_step.reset();
  ds.trajectories.push_back(gap);

  for (std::size_t threads : {1u, 3u}) {
    const auto r = dataset_report(ds, {}, threads);
    EXPECT_EQ(r.total, 5u);
    EXPECT_EQ(r.accepted, 2u);
    EXPECT_EQ(r.rejected, 3u);
    EXPECT_EQ(r.rejected_by_rule.at(ViolationRule::terminal_consistency), 2u);
    EXPECT_EQ(r.rejected_by_rule.at(ViolationRule::severe_epiphany), 1u);
    EXPECT_EQ(r.rejected_by_rule.at(ViolationRule::label_gap), 1u);
    EXPECT_EQ(r.total_steps, 3u + 3u + 6u + 3u + 2u);
    EXPECT_EQ(r.step_hallucinations, 0u + 2u + 6u + 1u + 0u);
    EXPECT_EQ(r.prefix_hallucinations, 0u + 2u + 5u + 1u + 0u);
    EXPECT_DOUBLE_EQ(r.step_hallucination_rate, 9.0 / 17.0);
    EXPECT_DOUBLE_EQ(r.prefix_hallucination_rate, 8.0 / 17.0);
    EXPECT_DOUBLE_EQ(r.avg_steps_per_chain, 17.0 / 5.0);
    EXPECT_EQ(r.transitions.at(TransitionMode::valid_degradation), 2u);
    EXPECT_EQ(r.transitions.at(TransitionMode::valid_recovery), 1u);
    EXPECT_EQ(r.transitions.at(TransitionMode::anomalous_recovery), 1u);
    ASSERT_EQ(r.verdicts.size(), 5u);
    EXPECT_EQ(r.verdicts[4].first, "shaped");
    EXPECT_FALSE(r.verdicts[4].second.accepted);
  }
}
