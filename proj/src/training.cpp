#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "cotwatch/error.hpp"
#include "cotwatch/parallel.hpp"
#include "cotwatch/rng.hpp"
#include "cotwatch/training.hpp"

namespace cotwatch {
namespace {

constexpr double kBeta1 = 0.9;
constexpr double kBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;

// d BCE(sigmoid(z), y) / dz, zero where the probability is clamped.
double bce_logit_grad(double p, Label y) {
  if (p < kProbClamp || p > 1.0 - kProbClamp) return 0.0;
  return p - static_cast<double>(y);
}

class Optimizer {
 public:
  Optimizer(const TrainConfig& cfg, std::size_t n) : cfg_(cfg), m_(n, 0.0), v_(n, 0.0) {}

  void step(std::vector<double>& theta, const std::vector<double>& grad) {
    const double lr = cfg_.learning_rate;
    if (cfg_.optimizer == OptimizerKind::sgd) {
      for (std::size_t i = 0; i < theta.size(); ++i) theta[i] -= lr * grad[i];
      return;
    }
    ++t_;
    const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < theta.size(); ++i) {
      m_[i] = kBeta1 * m_[i] + (1.0 - kBeta1) * grad[i];
      v_[i] = kBeta2 * v_[i] + (1.0 - kBeta2) * grad[i] * grad[i];
      const double mhat = m_[i] / c1;
      const double vhat = v_[i] / c2;
      theta[i] -= lr * mhat / (std::sqrt(vhat) + kAdamEps);
    }
  }

 private:
  TrainConfig cfg_;
  std::vector<double> m_, v_;
  std::size_t t_ = 0;
};

void initialize(ProbeModel& m, std::uint64_t seed) {
  Rng rng = make_rng(seed, "init");
  if (m.arch == ProbeArch::linear) {
    std::normal_distribution<double> noise(0.0, 0.01);
    for (double& w : m.weights) w = noise(rng);
    std::fill(m.biases.begin(), m.biases.end(), 0.0);
    return;
  }
  const double in = static_cast<double>(m.input_dim);
  const double hid = static_cast<double>(m.hidden_dim);
  std::uniform_real_distribution<double> first(-std::sqrt(6.0 / (in + hid)), std::sqrt(6.0 / (in + hid)));
  std::uniform_real_distribution<double> second(-std::sqrt(6.0 / (hid + 1.0)), std::sqrt(6.0 / (hid + 1.0)));
  const std::size_t nw1 = m.hidden_dim * m.input_dim;
  for (std::size_t i = 0; i < m.weights.size(); ++i) m.weights[i] = i < nw1 ? first(rng) : second(rng);
  std::fill(m.biases.begin(), m.biases.end(), 0.0);
}

}  // namespace

double step_objective(const ProbeModel& m, std::span<const ChainExamples> batch, std::vector<double>* grad) {
  std::size_t n = 0;
  for (const auto& c : batch) n += c.inputs.size();
  if (n == 0) throw Error(ErrorCode::MissingLabels, "empty training batch");
  if (grad) grad->assign(m.num_parameters(), 0.0);
  const double inv_n = 1.0 / static_cast<double>(n);
  double loss = 0.0;
  for (const auto& chain : batch) {
    for (std::size_t t = 0; t < chain.inputs.size(); ++t) {
      const double p = m.forward(chain.inputs[t]);
      loss += bce(p, chain.labels[t]);
      if (grad) {
        const double dz = bce_logit_grad(p, chain.labels[t]) * inv_n;
        if (dz != 0.0) m.accumulate_logit_gradient(chain.inputs[t], dz, *grad);
      }
    }
  }
  return loss * inv_n;
}

double prefix_objective(const ProbeModel& m, std::span<const ChainExamples> batch, const TrainConfig& cfg,
                        std::vector<double>* grad) {
  if (batch.empty()) throw Error(ErrorCode::MissingLabels, "empty training batch");
  if (grad) grad->assign(m.num_parameters(), 0.0);
  const double inv_chains = 1.0 / static_cast<double>(batch.size());
  double loss = 0.0;
  std::vector<double> c_prefix;
  for (const auto& chain : batch) {
    c_prefix.resize(chain.inputs.size());
    for (std::size_t t = 0; t < chain.inputs.size(); ++t) c_prefix[t] = m.forward(chain.inputs[t]);
    loss += total_loss(chain.c_step, c_prefix, chain.labels, cfg);
    if (!grad) continue;
    const auto g = total_loss_grad(chain.c_step, c_prefix, chain.labels, cfg);
    for (std::size_t t = 0; t < chain.inputs.size(); ++t) {
      const double p = c_prefix[t];
      const double dz = g.d_prefix[t] * p * (1.0 - p) * inv_chains;
      if (dz != 0.0) m.accumulate_logit_gradient(chain.inputs[t], dz, *grad);
    }
  }
  return loss * inv_chains;
}

double probe_objective(const ProbeModel& m, std::span<const ChainExamples> batch, const TrainConfig& cfg,
                       std::vector<double>* grad) {
  return m.kind == ProbeKind::step ? step_objective(m, batch, grad) : prefix_objective(m, batch, cfg, grad);
}

double gradient_relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

double grad_check(const ProbeModel& m, std::span<const ChainExamples> batch, const TrainConfig& cfg) {
  std::vector<double> analytic;
  probe_objective(m, batch, cfg, &analytic);
  ProbeModel work = m;
  const std::vector<double> theta = m.parameters();
  double worst = 0.0;
  std::vector<double> shifted = theta;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    shifted[i] = theta[i] + kGradCheckStep;
    work.set_parameters(shifted);
    const double up = probe_objective(work, batch, cfg);
    shifted[i] = theta[i] - kGradCheckStep;
    work.set_parameters(shifted);
    const double down = probe_objective(work, batch, cfg);
    shifted[i] = theta[i];
    const double numeric = (up - down) / (2.0 * kGradCheckStep);
    worst = std::max(worst, gradient_relative_error(analytic[i], numeric));
  }
  return worst;
}

std::vector<ChainExamples> build_step_examples(const Dataset& ds, const AggregationScheme& scheme,
                                               std::size_t threads) {
  scheme.validate();
  std::vector<ChainExamples> out(ds.trajectories.size());
  parallel_for(ds.trajectories.size(), threads, [&](std::size_t i) {
    const Trajectory& traj = ds.trajectories[i];
    if (!traj.has_step_labels()) {
      throw Error(ErrorCode::MissingLabels, "trajectory '" + traj.id + "' lacks step labels");
    }
    auto reps = batch_aggregate(traj, scheme);
    ChainExamples ex;
    for (std::size_t t = 0; t < reps.size(); ++t) {
      ex.inputs.push_back(std::move(reps[t].vector));
      ex.labels.push_back(*traj.steps[t].a_step ? 1 : 0);
    }
    out[i] = std::move(ex);
  });
  return out;
}

std::vector<ChainExamples> build_prefix_examples(const Dataset& ds, const ProbeModel& step_probe,
                                                 std::size_t threads) {
  if (step_probe.kind != ProbeKind::step) throw Error(ErrorCode::IncompatibleProbe, "not a step probe");
  std::vector<ChainExamples> out(ds.trajectories.size());
  parallel_for(ds.trajectories.size(), threads, [&](std::size_t i) {
    const Trajectory& traj = ds.trajectories[i];
    if (traj.hidden_dim != step_probe.state_dim || traj.layer_index != step_probe.layer_index) {
      throw Error(ErrorCode::IncompatibleProbe,
                  fmt::format("trajectory '{}' (d={}, layer={}) vs step probe (d={}, layer={})", traj.id,
                              traj.hidden_dim, traj.layer_index, step_probe.state_dim, step_probe.layer_index));
    }
    if (!traj.has_prefix_labels()) {
      throw Error(ErrorCode::MissingLabels, "trajectory '" + traj.id + "' lacks prefix labels");
    }
    auto reps = batch_aggregate(traj, step_probe.aggregation);
    ChainExamples ex;
    for (std::size_t t = 0; t < reps.size(); ++t) {
      std::vector<double> x = std::move(reps[t].vector);
      const double c = step_probe.forward(x);
      x.push_back(c);
      ex.inputs.push_back(std::move(x));
      ex.c_step.push_back(c);
      ex.labels.push_back(*traj.steps[t].a_prefix ? 1 : 0);
    }
    out[i] = std::move(ex);
  });
  return out;
}

ProbeModel fit_probe(ProbeModel model, std::span<const ChainExamples> data, const TrainConfig& cfg,
                     TrainLog* log) {
  cfg.validate();
  if (data.empty()) throw Error(ErrorCode::TooFewTrajectories, "no training trajectories");
  initialize(model, cfg.seed);
  model.train_config = cfg;

  std::vector<double> theta = model.parameters();
  Optimizer opt(cfg, theta.size());
  Rng shuffle = make_rng(cfg.seed, "shuffle");
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<ChainExamples> batch;
  std::vector<double> grad;
  double previous = probe_objective(model, data, cfg);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = order.size() - 1; i > 0; --i) {
      std::swap(order[i], order[static_cast<std::size_t>(shuffle() % (i + 1))]);
    }
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      batch.clear();
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      for (std::size_t k = start; k < stop; ++k) batch.push_back(data[order[k]]);
      probe_objective(model, batch, cfg, &grad);
      opt.step(theta, grad);
      model.set_parameters(theta);
    }
    const double loss = probe_objective(model, data, cfg);
    if (log) log->epoch_losses.push_back(loss);
    if (loss > previous) {
      if (log) log->loss_increased = true;
      spdlog::warn("{} probe: training loss rose from {:.6g} to {:.6g} in epoch {} (learning_rate {})",
                   to_string(model.kind), previous, loss, epoch + 1, cfg.learning_rate);
    }
    previous = loss;
  }
  return model;
}

ProbeModel train_step_probe(const Dataset& ds, const AggregationScheme& scheme, const TrainConfig& cfg,
                            TrainLog* log, std::size_t threads) {
  cfg.validate();
  if (ds.trajectories.empty()) throw Error(ErrorCode::TooFewTrajectories, "no training trajectories");
  const auto data = build_step_examples(ds, scheme, threads);
  const std::size_t d = ds.trajectories.front().hidden_dim;
  ProbeModel shape = ProbeModel::zeros(ProbeKind::step, cfg.arch, scheme.output_dim(d), cfg.mlp_hidden);
  shape.aggregation = scheme;
  shape.layer_index = ds.trajectories.front().layer_index;
  shape.state_dim = d;
  return fit_probe(std::move(shape), data, cfg, log);
}

ProbeModel train_prefix_probe(const Dataset& ds, const ProbeModel& step_probe, const TrainConfig& cfg,
                              TrainLog* log, std::size_t threads) {
  cfg.validate();
  if (ds.trajectories.empty()) throw Error(ErrorCode::TooFewTrajectories, "no training trajectories");
  const auto data = build_prefix_examples(ds, step_probe, threads);
  ProbeModel shape = ProbeModel::zeros(ProbeKind::prefix, cfg.arch, step_probe.input_dim + 1, cfg.mlp_hidden);
  shape.aggregation = step_probe.aggregation;
  shape.layer_index = step_probe.layer_index;
  shape.state_dim = step_probe.state_dim;
  shape.threshold = step_probe.threshold;
  shape.step_probe_hash = step_probe.hash();
  return fit_probe(std::move(shape), data, cfg, log);
}

}  // namespace cotwatch
