#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/format.h>

#include "cotwatch/aggregation.hpp"
#include "cotwatch/error.hpp"
#include "cotwatch/kernels.hpp"

namespace cotwatch {
namespace {

void require_tokens(const Step& step) {
  if (step.num_tokens() == 0) throw Error(ErrorCode::EmptyStep, "step has no tokens");
}

std::span<const double> require_probs(const Step& step) {
  require_tokens(step);
  if (!step.token_probs) throw Error(ErrorCode::MissingProbs, "scheme needs token probabilities");
  return *step.token_probs;
}

StepRepresentation finish(std::vector<double> v, SchemeKind kind, bool l2) {
  StepRepresentation rep;
  rep.scheme = AggregationScheme::of(kind);
  rep.scheme.l2_normalize = l2;
  if (l2) rep.zero_norm = !l2_normalize_inplace(v);
  rep.vector = std::move(v);
  return rep;
}

// Elementwise division rather than multiplication by a reciprocal keeps pooled
// coefficients exact (L_t / sum L_i rounds once).
void divide_by(std::span<double> v, double s) {
  for (double& x : v) x /= s;
}

std::vector<double> weighted_rows(const Step& step, std::span<const double> weights) {
  std::vector<double> acc(step.hidden_states.cols(), 0.0);
  for (std::size_t j = 0; j < step.num_tokens(); ++j) {
    if (weights[j] != 0.0) kernels::axpy(weights[j], step.hidden_states.row(j), acc);
  }
  return acc;
}

std::vector<double> row_as_double(const Step& step, std::size_t j) {
  const auto r = step.hidden_states.row(j);
  return {r.begin(), r.end()};
}

void require_upto(const Trajectory& traj, std::size_t upto_t) {
  if (upto_t < 1 || upto_t > traj.steps.size()) {
    throw Error(ErrorCode::IndexOutOfRange,
                fmt::format("step {} outside 1..{}", upto_t, traj.steps.size()));
  }
}

double percentile(std::span<const double> sorted, double q) {
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

}  // namespace

AggregationScheme AggregationScheme::of(SchemeKind kind) {
  AggregationScheme s;
  s.kind = kind;
  s.l2_normalize = kind == SchemeKind::step_time_exp;
  return s;
}

bool AggregationScheme::is_global() const noexcept {
  return kind == SchemeKind::global_mean || kind == SchemeKind::global_linear ||
         kind == SchemeKind::global_exp;
}

bool AggregationScheme::uses_probs() const noexcept {
  return kind == SchemeKind::surprisal_weighted || kind == SchemeKind::min_prob_state ||
         kind == SchemeKind::bottom5_weighted || kind == SchemeKind::scalar_features;
}

std::size_t AggregationScheme::output_dim(std::size_t d) const noexcept {
  return kind == SchemeKind::scalar_features ? kScalarFeatureDim : d;
}

void AggregationScheme::validate() const {
  if (kind == SchemeKind::global_exp && !(gamma > 0.0 && std::isfinite(gamma))) {
    throw Error(ErrorCode::InvalidScheme, fmt::format("global_exp needs gamma > 0, got {}", gamma));
  }
}

std::string_view to_string(SchemeKind kind) {
  switch (kind) {
    case SchemeKind::step_mean: return "step_mean";
    case SchemeKind::step_time_exp: return "step_time_exp";
    case SchemeKind::global_mean: return "global_mean";
    case SchemeKind::global_linear: return "global_linear";
    case SchemeKind::global_exp: return "global_exp";
    case SchemeKind::max_pool: return "max_pool";
    case SchemeKind::last_token: return "last_token";
    case SchemeKind::surprisal_weighted: return "surprisal_weighted";
    case SchemeKind::min_prob_state: return "min_prob_state";
    case SchemeKind::bottom5_weighted: return "bottom5_weighted";
    case SchemeKind::scalar_features: return "scalar_features";
  }
  return "unknown";
}

SchemeKind parse_scheme_kind(std::string_view name) {
  for (int k = 0; k <= static_cast<int>(SchemeKind::scalar_features); ++k) {
    const auto kind = static_cast<SchemeKind>(k);
    if (to_string(kind) == name) return kind;
  }
  throw Error(ErrorCode::InvalidScheme, fmt::format("unknown aggregation scheme '{}'", name));
}

bool l2_normalize_inplace(std::span<double> v) {
  const double norm = std::sqrt(kernels::dot(v, v));
  if (norm == 0.0) return false;
  divide_by(v, norm);
  return true;
}

std::vector<double> time_exp_weights(std::size_t num_tokens) {
  if (num_tokens == 0) throw Error(ErrorCode::EmptyStep, "step has no tokens");
  // A single token has no position spread; it takes all the weight.
  if (num_tokens == 1) return {1.0};
  std::vector<double> w(num_tokens);
  const double denom = static_cast<double>(num_tokens - 1);
  double total = 0.0;
  for (std::size_t n = 0; n < num_tokens; ++n) {
    w[n] = std::exp(static_cast<double>(n) / denom);
    total += w[n];
  }
  for (double& x : w) x /= total;
  return w;
}

std::vector<double> surprisal_weights(std::span<const double> probs) {
  if (probs.empty()) throw Error(ErrorCode::EmptyStep, "step has no tokens");
  std::vector<double> s(probs.size());
  for (std::size_t j = 0; j < probs.size(); ++j) s[j] = -std::log(probs[j]);
  const double top = *std::max_element(s.begin(), s.end());
  double total = 0.0;
  for (double& x : s) {
    x = std::exp(x - top);
    total += x;
  }
  for (double& x : s) x /= total;
  return s;
}

std::vector<double> bottom_k_weights(std::span<const double> probs, std::size_t k) {
  if (probs.empty()) throw Error(ErrorCode::EmptyStep, "step has no tokens");
  std::vector<std::size_t> order(probs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return probs[a] < probs[b]; });
  order.resize(std::min(k, order.size()));
  std::vector<double> subset;
  for (std::size_t j : order) subset.push_back(probs[j]);
  const auto sw = surprisal_weights(subset);
  std::vector<double> w(probs.size(), 0.0);
  for (std::size_t i = 0; i < order.size(); ++i) w[order[i]] = sw[i];
  return w;
}

StepRepresentation step_time_exp(const Step& step, bool l2_normalize) {
  const auto w = time_exp_weights(step.num_tokens());
  return finish(weighted_rows(step, w), SchemeKind::step_time_exp, l2_normalize);
}

StepRepresentation step_mean(const Step& step, bool l2_normalize) {
  require_tokens(step);
  std::vector<double> acc(step.hidden_states.cols(), 0.0);
  for (std::size_t j = 0; j < step.num_tokens(); ++j) kernels::axpy(1.0, step.hidden_states.row(j), acc);
  divide_by(acc, static_cast<double>(step.num_tokens()));
  return finish(std::move(acc), SchemeKind::step_mean, l2_normalize);
}

StepRepresentation max_pool(const Step& step, bool l2_normalize) {
  require_tokens(step);
  auto acc = row_as_double(step, 0);
  for (std::size_t j = 1; j < step.num_tokens(); ++j) kernels::max_into(step.hidden_states.row(j), acc);
  return finish(std::move(acc), SchemeKind::max_pool, l2_normalize);
}

StepRepresentation last_token(const Step& step, bool l2_normalize) {
  require_tokens(step);
  return finish(row_as_double(step, step.num_tokens() - 1), SchemeKind::last_token, l2_normalize);
}

StepRepresentation surprisal_weighted(const Step& step, bool l2_normalize) {
  const auto w = surprisal_weights(require_probs(step));
  return finish(weighted_rows(step, w), SchemeKind::surprisal_weighted, l2_normalize);
}

StepRepresentation min_prob_state(const Step& step, bool l2_normalize) {
  const auto probs = require_probs(step);
  // min_element returns the earliest position among ties.
  const auto j = static_cast<std::size_t>(std::min_element(probs.begin(), probs.end()) - probs.begin());
  return finish(row_as_double(step, j), SchemeKind::min_prob_state, l2_normalize);
}

StepRepresentation bottom5_weighted(const Step& step, bool l2_normalize) {
  const auto w = bottom_k_weights(require_probs(step), kBottomK);
  return finish(weighted_rows(step, w), SchemeKind::bottom5_weighted, l2_normalize);
}

// Layout v1: 0 mean, 1 median, 2 stddev (population), 3 stddev/mean,
// 4 min, 5 max, 6 range, 7 p25, 8 p75, 9 p90, 10 frac>0.5, 11 frac>0.7,
// 12 frac<0.3, 13 first, 14 last, 15 mean of final ceil(L/3) tokens,
// 16 max consecutive rise, 17 max consecutive drop, 18-21 zero,
// 22-31 histogram over [0,1] in 0.1 bins (last bin closed).
StepRepresentation scalar_features(const Step& step, bool l2_normalize) {
  const auto p = require_probs(step);
  const std::size_t n = p.size();
  const double dn = static_cast<double>(n);
  std::vector<double> v(kScalarFeatureDim, 0.0);

  std::vector<double> sorted(p.begin(), p.end());
  std::sort(sorted.begin(), sorted.end());
  const double mean = std::accumulate(p.begin(), p.end(), 0.0) / dn;
  double var = 0.0;
  for (double x : p) var += (x - mean) * (x - mean);
  const double stddev = std::sqrt(var / dn);

  v[0] = mean;
  v[1] = percentile(sorted, 0.5);
  v[2] = stddev;
  v[3] = mean == 0.0 ? 0.0 : stddev / mean;
  v[4] = sorted.front();
  v[5] = sorted.back();
  v[6] = sorted.back() - sorted.front();
  v[7] = percentile(sorted, 0.25);
  v[8] = percentile(sorted, 0.75);
  v[9] = percentile(sorted, 0.90);
  v[10] = static_cast<double>(std::count_if(p.begin(), p.end(), [](double x) { return x > 0.5; })) / dn;
  v[11] = static_cast<double>(std::count_if(p.begin(), p.end(), [](double x) { return x > 0.7; })) / dn;
  v[12] = static_cast<double>(std::count_if(p.begin(), p.end(), [](double x) { return x < 0.3; })) / dn;
  v[13] = p.front();
  v[14] = p.back();
  const std::size_t tail = (n + 2) / 3;
  v[15] = std::accumulate(p.end() - static_cast<std::ptrdiff_t>(tail), p.end(), 0.0) /
          static_cast<double>(tail);
  for (std::size_t j = 1; j < n; ++j) {
    v[16] = std::max(v[16], p[j] - p[j - 1]);
    v[17] = std::max(v[17], p[j - 1] - p[j]);
  }
  for (double x : p) {
    const auto bin = std::min<std::size_t>(static_cast<std::size_t>(x * 10.0), 9);
    v[22 + bin] += 1.0 / dn;
  }
  return finish(std::move(v), SchemeKind::scalar_features, l2_normalize);
}

StepRepresentation global_mean(const Trajectory& traj, std::size_t upto_t, bool l2_normalize) {
  require_upto(traj, upto_t);
  std::vector<double> acc(traj.hidden_dim, 0.0);
  double wsum = 0.0;
  for (std::size_t t = 0; t < upto_t; ++t) {
    const Step& s = traj.steps[t];
    for (std::size_t j = 0; j < s.num_tokens(); ++j) {
      kernels::axpy(1.0, s.hidden_states.row(j), acc);
      wsum += 1.0;
    }
  }
  divide_by(acc, wsum);
  auto rep = finish(std::move(acc), SchemeKind::global_mean, l2_normalize);
  rep.step_index = upto_t;
  return rep;
}

StepRepresentation global_linear(const Trajectory& traj, std::size_t upto_t, bool l2_normalize) {
  require_upto(traj, upto_t);
  std::vector<double> acc(traj.hidden_dim, 0.0);
  double wsum = 0.0;
  std::size_t g = 0;
  for (std::size_t t = 0; t < upto_t; ++t) {
    const Step& s = traj.steps[t];
    for (std::size_t j = 0; j < s.num_tokens(); ++j) {
      const double w = static_cast<double>(++g);
      kernels::axpy(w, s.hidden_states.row(j), acc);
      wsum += w;
    }
  }
  divide_by(acc, wsum);
  auto rep = finish(std::move(acc), SchemeKind::global_linear, l2_normalize);
  rep.step_index = upto_t;
  return rep;
}

StepRepresentation global_exp(const Trajectory& traj, std::size_t upto_t, double gamma, bool l2_normalize) {
  require_upto(traj, upto_t);
  AggregationScheme probe = AggregationScheme::of(SchemeKind::global_exp);
  probe.gamma = gamma;
  probe.validate();
  std::size_t n = 0;
  for (std::size_t t = 0; t < upto_t; ++t) n += traj.steps[t].num_tokens();
  // Weights exp(gamma * g) shifted by the newest position; the ratio is unchanged.
  std::vector<double> acc(traj.hidden_dim, 0.0);
  double wsum = 0.0;
  std::size_t g = 0;
  for (std::size_t t = 0; t < upto_t; ++t) {
    const Step& s = traj.steps[t];
    for (std::size_t j = 0; j < s.num_tokens(); ++j) {
      ++g;
      const double w = std::exp(-gamma * static_cast<double>(n - g));
      kernels::axpy(w, s.hidden_states.row(j), acc);
      wsum += w;
    }
  }
  divide_by(acc, wsum);
  auto rep = finish(std::move(acc), SchemeKind::global_exp, l2_normalize);
  rep.scheme.gamma = gamma;
  rep.step_index = upto_t;
  return rep;
}

StepRepresentation aggregate_step(const Step& step, const AggregationScheme& scheme) {
  const bool l2 = scheme.l2_normalize;
  switch (scheme.kind) {
    case SchemeKind::step_mean: return step_mean(step, l2);
    case SchemeKind::step_time_exp: return step_time_exp(step, l2);
    case SchemeKind::max_pool: return max_pool(step, l2);
    case SchemeKind::last_token: return last_token(step, l2);
    case SchemeKind::surprisal_weighted: return surprisal_weighted(step, l2);
    case SchemeKind::min_prob_state: return min_prob_state(step, l2);
    case SchemeKind::bottom5_weighted: return bottom5_weighted(step, l2);
    case SchemeKind::scalar_features: return scalar_features(step, l2);
    default:
      throw Error(ErrorCode::InvalidScheme,
                  fmt::format("{} needs the trajectory prefix", to_string(scheme.kind)));
  }
}

StepRepresentation aggregate(const Trajectory& traj, std::size_t t, const AggregationScheme& scheme) {
  scheme.validate();
  require_upto(traj, t);
  switch (scheme.kind) {
    case SchemeKind::global_mean: return global_mean(traj, t, scheme.l2_normalize);
    case SchemeKind::global_linear: return global_linear(traj, t, scheme.l2_normalize);
    case SchemeKind::global_exp: return global_exp(traj, t, scheme.gamma, scheme.l2_normalize);
    default: {
      auto rep = aggregate_step(traj.steps[t - 1], scheme);
      rep.step_index = t;
      return rep;
    }
  }
}

std::vector<StepRepresentation> batch_aggregate(const Trajectory& traj, const AggregationScheme& scheme) {
  scheme.validate();
  std::vector<StepRepresentation> out;
  out.reserve(traj.steps.size());
  if (scheme.kind == SchemeKind::global_mean || scheme.kind == SchemeKind::global_linear) {
    // Same summation order as the per-t functions, so results match bitwise.
    GlobalAccumulator acc(scheme, traj.hidden_dim);
    for (std::size_t t = 1; t <= traj.steps.size(); ++t) {
      acc.push(traj.steps[t - 1]);
      out.push_back(acc.representation(t));
    }
    return out;
  }
  for (std::size_t t = 1; t <= traj.steps.size(); ++t) out.push_back(aggregate(traj, t, scheme));
  return out;
}

GlobalAccumulator::GlobalAccumulator(const AggregationScheme& scheme, std::size_t dim)
    : scheme_(scheme), sum_(dim, 0.0) {
  if (!scheme.is_global()) {
    throw Error(ErrorCode::InvalidScheme,
                fmt::format("{} is step-scoped; no accumulator", to_string(scheme.kind)));
  }
  scheme.validate();
}

void GlobalAccumulator::push(const Step& step) {
  require_tokens(step);
  if (step.hidden_states.cols() != sum_.size()) {
    throw Error(ErrorCode::DimMismatch,
                fmt::format("step d={} but accumulator d={}", step.hidden_states.cols(), sum_.size()));
  }
  const std::size_t L = step.num_tokens();
  switch (scheme_.kind) {
    case SchemeKind::global_mean:
      for (std::size_t j = 0; j < L; ++j) {
        kernels::axpy(1.0, step.hidden_states.row(j), sum_);
        weight_sum_ += 1.0;
      }
      break;
    case SchemeKind::global_linear:
      for (std::size_t j = 0; j < L; ++j) {
        const double w = static_cast<double>(tokens_ + j + 1);
        kernels::axpy(w, step.hidden_states.row(j), sum_);
        weight_sum_ += w;
      }
      break;
    case SchemeKind::global_exp: {
      // Rescale old sums to the new newest position, then add the step's tokens.
      const double decay = std::exp(-scheme_.gamma * static_cast<double>(L));
      kernels::scale(decay, sum_);
      weight_sum_ *= decay;
      for (std::size_t j = 0; j < L; ++j) {
        const double w = std::exp(-scheme_.gamma * static_cast<double>(L - 1 - j));
        kernels::axpy(w, step.hidden_states.row(j), sum_);
        weight_sum_ += w;
      }
      break;
    }
    default:
      break;
  }
  tokens_ += L;
}

std::vector<double> GlobalAccumulator::value() const {
  if (tokens_ == 0) throw Error(ErrorCode::NoSteps, "accumulator has seen no tokens");
  std::vector<double> v = sum_;
  divide_by(v, weight_sum_);
  return v;
}

StepRepresentation GlobalAccumulator::representation(std::size_t t) const {
  auto rep = finish(value(), scheme_.kind, scheme_.l2_normalize);
  rep.scheme = scheme_;
  rep.step_index = t;
  return rep;
}

}  // namespace cotwatch
