#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/format.h>

#include "cotwatch/error.hpp"
#include "cotwatch/metrics.hpp"
#include "cotwatch/parallel.hpp"

namespace cotwatch {

namespace {

void check_lengths(std::size_t a, std::size_t b) {
  if (a != b) throw Error(ErrorCode::LengthMismatch, fmt::format("lengths {} and {} differ", a, b));
}

// Order-independent mean: values are sorted before summation.
MetricSummary summarize(std::vector<double> values) {
  MetricSummary s;
  s.count = values.size();
  if (values.empty()) return s;
  std::sort(values.begin(), values.end());
  double sum = 0.0;
  for (double v : values) sum += v;
  s.value = sum / static_cast<double>(values.size());
  return s;
}

}  // namespace

double auc(std::span<const double> scores, std::span<const Label> labels) {
  check_lengths(scores.size(), labels.size());
  const std::size_t n = scores.size();
  std::size_t n_pos = 0;
  for (Label y : labels) n_pos += y ? 1 : 0;
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) throw Error(ErrorCode::SingleClass, "AUC needs both classes present");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // Average 1-based ranks over tie groups.
  double pos_rank_sum = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double rank = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
    for (std::size_t k = i; k <= j; ++k) {
      if (labels[order[k]]) pos_rank_sum += rank;
    }
    i = j + 1;
  }
  const double np = static_cast<double>(n_pos);
  const double u = pos_rank_sum - np * (np + 1.0) / 2.0;
  return u / (np * static_cast<double>(n_neg));
}

BinaryMetrics acc_f1(std::span<const double> scores, std::span<const Label> labels, double threshold) {
  check_lengths(scores.size(), labels.size());
  if (scores.empty()) throw Error(ErrorCode::NoEligibleChains, "no predictions to score");
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool pred = scores[i] > threshold;
    const bool y = labels[i] != 0;
    if (pred && y) ++tp;
    else if (pred) ++fp;
    else if (y) ++fn;
    else ++tn;
  }
  BinaryMetrics m;
  m.n = scores.size();
  m.acc = static_cast<double>(tp + tn) / static_cast<double>(m.n);
  m.precision = tp + fp > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
  m.recall = tp + fn > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
  m.f1 = m.precision + m.recall > 0 ? 2.0 * m.precision * m.recall / (m.precision + m.recall) : 0.0;
  return m;
}

void ChainEval::validate() const {
  if (a_prefix.empty()) throw Error(ErrorCode::NoSteps, "chain '" + id + "' has no steps");
  check_lengths(a_prefix.size(), c_prefix.size());
  if (c_step) check_lengths(a_prefix.size(), c_step->size());
  if (!(threshold > 0.0 && threshold < 1.0)) {
    throw Error(ErrorCode::InvalidConfig, fmt::format("threshold {} outside (0,1)", threshold));
  }
}

namespace {

ProtocolMetrics protocol(const std::vector<double>& s, const std::vector<Label>& y, double threshold) {
  ProtocolMetrics m;
  try {
    m.auc = auc(s, y);
  } catch (const Error& e) {
    if (e.code() != ErrorCode::SingleClass) throw;
  }
  m.binary = acc_f1(s, y, threshold);
  return m;
}

double common_threshold(std::span<const ChainEval> chains) {
  if (chains.empty()) throw Error(ErrorCode::NoEligibleChains, "no chains to evaluate");
  const double th = chains.front().threshold;
  for (const auto& c : chains) {
    c.validate();
    if (c.threshold != th) throw Error(ErrorCode::InvalidConfig, "chains use different thresholds");
  }
  return th;
}

}  // namespace

ProtocolMetrics eval_local(std::span<const ChainEval> chains) {
  const double th = common_threshold(chains);
  std::vector<double> s;
  std::vector<Label> y;
  for (const auto& c : chains) {
    s.insert(s.end(), c.c_prefix.begin(), c.c_prefix.end());
    y.insert(y.end(), c.a_prefix.begin(), c.a_prefix.end());
  }
  return protocol(s, y, th);
}

ProtocolMetrics eval_final(std::span<const ChainEval> chains) {
  const double th = common_threshold(chains);
  std::vector<double> s;
  std::vector<Label> y;
  for (const auto& c : chains) {
    s.push_back(c.c_prefix.back());
    y.push_back(c.a_prefix.back());
  }
  return protocol(s, y, th);
}

std::optional<std::size_t> onset(const ChainEval& c) {
  for (std::size_t t = 1; t <= c.length(); ++t) {
    if (c.a_prefix[t - 1]) return t;
  }
  return std::nullopt;
}

std::optional<double> snap_magnitude(const ChainEval& c) {
  const auto t_on = onset(c);
  if (!t_on || *t_on == 1) return std::nullopt;
  return c.c_prefix[*t_on - 1] - c.c_prefix[*t_on - 2];
}

std::optional<double> detection_lag(const ChainEval& c) {
  const auto t_on = onset(c);
  if (!t_on) return std::nullopt;
  const std::size_t T = c.length();
  for (std::size_t t = *t_on; t <= T; ++t) {
    if (c.decision(t)) return static_cast<double>(t - *t_on);
  }
  return static_cast<double>(T - *t_on + 1);
}

double icr(std::span<const ChainEval> chains) {
  std::size_t eligible = 0, immediate = 0;
  for (const auto& c : chains) {
    const auto lag = detection_lag(c);
    if (!lag) continue;
    ++eligible;
    if (*lag == 0.0) ++immediate;
  }
  if (eligible == 0) throw Error(ErrorCode::NoEligibleChains, "no chain has a hallucinated prefix");
  return static_cast<double>(immediate) / static_cast<double>(eligible);
}

std::vector<std::size_t> recovery_events(const ChainEval& c) {
  std::vector<std::size_t> out;
  for (std::size_t t = 2; t <= c.length(); ++t) {
    if (c.a_prefix[t - 2] && !c.a_prefix[t - 1]) out.push_back(t);
  }
  return out;
}

namespace {
void check_event(const ChainEval& c, std::size_t t_rec) {
  if (t_rec < 2 || t_rec > c.length()) {
    throw Error(ErrorCode::IndexOutOfRange, fmt::format("recovery step {} outside [2, {}]", t_rec, c.length()));
  }
}
}  // namespace

double brake_strength(const ChainEval& c, std::size_t t_rec) {
  check_event(c, t_rec);
  return c.c_prefix[t_rec - 2] - c.c_prefix[t_rec - 1];
}

std::size_t lingering_time(const ChainEval& c, std::size_t t_rec) {
  check_event(c, t_rec);
  std::size_t n = 0;
  for (std::size_t t = t_rec; t <= c.length() && c.decision(t); ++t) ++n;
  return n;
}

bool healed_within_3(const ChainEval& c, std::size_t t_rec) {
  check_event(c, t_rec);
  const std::size_t last = std::min(c.length(), t_rec + 2);
  double lo = c.c_prefix[t_rec - 1];
  for (std::size_t t = t_rec + 1; t <= last; ++t) lo = std::min(lo, c.c_prefix[t - 1]);
  return lo < c.threshold;
}

std::optional<double> recovery_score(const ChainEval& c) {
  const auto t_on = onset(c);
  if (!t_on) return std::nullopt;
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t t = *t_on + 1; t <= c.length(); ++t) {
    if (c.a_prefix[t - 1]) continue;
    sum += c.c_prefix[t - 1];
    ++n;
  }
  const double mean = n > 0 ? sum / static_cast<double>(n) : 0.5;
  return 1.0 - mean;
}

double fp_length(const ChainEval& c) {
  std::size_t segments = 0, total = 0, run = 0;
  for (std::size_t t = 1; t <= c.length(); ++t) {
    if (c.decision(t) && !c.a_prefix[t - 1]) {
      ++run;
      continue;
    }
    if (run > 0) {
      ++segments;
      total += run;
      run = 0;
    }
  }
  if (run > 0) {
    ++segments;
    total += run;
  }
  return segments > 0 ? static_cast<double>(total) / static_cast<double>(segments) : 0.0;
}

namespace {

struct ChainContrib {
  std::optional<double> snap, lag, r_score;
  double fp_len = 0.0;
  std::vector<double> brake, ling, heal;
};

ChainContrib contrib(const ChainEval& c) {
  ChainContrib r;
  r.snap = snap_magnitude(c);
  r.lag = detection_lag(c);
  r.r_score = recovery_score(c);
  r.fp_len = fp_length(c);
  for (std::size_t t : recovery_events(c)) {
    r.brake.push_back(brake_strength(c, t));
    r.ling.push_back(static_cast<double>(lingering_time(c, t)));
    r.heal.push_back(healed_within_3(c, t) ? 1.0 : 0.0);
  }
  return r;
}

std::optional<double> mean_of(const std::vector<double>& v) {
  if (v.empty()) return std::nullopt;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

}  // namespace

DynamicReport dynamic_report(std::span<const ChainEval> chains, std::size_t threads) {
  for (const auto& c : chains) c.validate();
  std::vector<ChainContrib> per(chains.size());
  parallel_for(chains.size(), threads, [&](std::size_t i) { per[i] = contrib(chains[i]); });

  std::vector<double> snap, lag, icr_hits, r_score, fp, brake, ling, heal;
  std::size_t total_len = 0;
  for (std::size_t i = 0; i < chains.size(); ++i) {
    const auto& p = per[i];
    total_len += chains[i].length();
    if (p.snap) snap.push_back(*p.snap);
    if (p.lag) {
      lag.push_back(*p.lag);
      icr_hits.push_back(*p.lag == 0.0 ? 1.0 : 0.0);
    }
    if (p.r_score) r_score.push_back(*p.r_score);
    fp.push_back(p.fp_len);
    brake.insert(brake.end(), p.brake.begin(), p.brake.end());
    ling.insert(ling.end(), p.ling.begin(), p.ling.end());
    heal.insert(heal.end(), p.heal.begin(), p.heal.end());
  }

  DynamicReport r;
  r.chains = chains.size();
  r.recovery_events = brake.size();
  r.t_avg = chains.empty() ? 0.0 : static_cast<double>(total_len) / static_cast<double>(chains.size());
  r.snap_m = summarize(std::move(snap));
  r.lag = summarize(std::move(lag));
  r.icr = summarize(std::move(icr_hits));
  r.r_score = summarize(std::move(r_score));
  r.fp_len = summarize(std::move(fp));
  r.brake_s = summarize(std::move(brake));
  r.ling_t = summarize(std::move(ling));
  r.heal_3 = summarize(std::move(heal));
  return r;
}

std::vector<RadarPoint> radar(const DynamicReport& r) {
  auto direct = [](const std::optional<double>& v) -> std::optional<double> {
    if (!v) return std::nullopt;
    return 100.0 * std::clamp(*v, 0.0, 1.0);
  };
  auto inverted = [&](const std::optional<double>& v) -> std::optional<double> {
    if (!v || r.t_avg <= 0.0) return std::nullopt;
    return 100.0 * std::max(0.0, 1.0 - *v / r.t_avg);
  };
  return {
      {"snap_m", r.snap_m.value, direct(r.snap_m.value)},
      {"lag", r.lag.value, inverted(r.lag.value)},
      {"icr", r.icr.value, direct(r.icr.value)},
      {"brake_s", r.brake_s.value, direct(r.brake_s.value)},
      {"ling_t", r.ling_t.value, inverted(r.ling_t.value)},
      {"heal_3", r.heal_3.value, direct(r.heal_3.value)},
      {"r_score", r.r_score.value, direct(r.r_score.value)},
      {"fp_len", r.fp_len.value, inverted(r.fp_len.value)},
  };
}

double coherence_diagnostic(std::span<const ChainEval> chains) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& c : chains) {
    c.validate();
    for (std::size_t t = 1; t < c.length(); ++t) {
      sum += std::abs(c.c_prefix[t] - c.c_prefix[t - 1]);
      ++n;
    }
  }
  return n > 0 ? sum / static_cast<double>(n) : 0.0;
}

double directional_diagnostic(std::span<const ChainEval> chains) {
  std::vector<double> dx, sy;
  for (const auto& c : chains) {
    c.validate();
    if (!c.c_step) throw Error(ErrorCode::MissingStepScores, "chain '" + c.id + "' has no step scores");
    for (std::size_t t = 1; t < c.length(); ++t) {
      dx.push_back(c.c_prefix[t] - c.c_prefix[t - 1]);
      sy.push_back((*c.c_step)[t]);
    }
  }
  const std::size_t n = dx.size();
  if (n < 2) return 0.0;
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += dx[i];
    my += sy[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double cov = 0.0;
  for (std::size_t i = 0; i < n; ++i) cov += (dx[i] - mx) * (sy[i] - my);
  return cov / static_cast<double>(n - 1);
}

ChainMetricRow chain_metrics(const ChainEval& c) {
  c.validate();
  const ChainContrib p = contrib(c);
  ChainMetricRow row;
  row.id = c.id;
  row.length = c.length();
  row.t_on = onset(c);
  row.snap_m = p.snap;
  row.lag = p.lag;
  row.r_score = p.r_score;
  row.recoveries = p.brake.size();
  row.brake_s = mean_of(p.brake);
  row.ling_t = mean_of(p.ling);
  row.heal_3 = mean_of(p.heal);
  row.fp_len = p.fp_len;
  return row;
}

}  // namespace cotwatch
