#pragma once
// Lightweight step- and prefix-level probes and the prefix training objective.
//
//   anchor = (1/T) * sum_t w_t * BCE(c_prefix_t, A_prefix_t),  w_T = lambda_final, else 1
//   sync   = sum_t max(0, c_step_t - c_prefix_t)^2 * c_step_t^2
//   total  = anchor + lambda_sync * sync
//
// A prefix probe sees [z_t ; c_step_t], so its input_dim is the step probe's + 1.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cotwatch/aggregation.hpp"

namespace cotwatch {

inline constexpr int kProbeFormatVersion = 1;
inline constexpr double kProbClamp = 1e-12;
inline constexpr std::size_t kDefaultMlpHidden = 64;

using Label = std::uint8_t;

enum class ProbeKind { step, prefix };
enum class ProbeArch { linear, mlp1 };
enum class OptimizerKind { sgd, adaptive_moments };

std::string_view to_string(ProbeKind k);
std::string_view to_string(ProbeArch a);
std::string_view to_string(OptimizerKind o);
ProbeArch parse_probe_arch(std::string_view name);
OptimizerKind parse_optimizer(std::string_view name);

struct TrainConfig {
  double learning_rate = 1e-3;
  std::size_t epochs = 20;
  std::size_t batch_size = 32;  // trajectories per minibatch
  std::uint64_t seed = 0;
  double lambda_final = 5.0;
  double lambda_sync = 1.0;
  OptimizerKind optimizer = OptimizerKind::adaptive_moments;
  ProbeArch arch = ProbeArch::linear;
  std::size_t mlp_hidden = kDefaultMlpHidden;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

struct ProbeModel {
  ProbeKind kind = ProbeKind::step;
  ProbeArch arch = ProbeArch::linear;
  std::size_t input_dim = 0;
  std::size_t hidden_dim = 0;  // mlp1 width; 0 for linear
  // linear: weights = w (input_dim), biases = b (1)
  // mlp1:   weights = W1 (hidden x input, row-major) ++ w2 (hidden)
  //         biases  = b1 (hidden) ++ b2 (1)
  std::vector<double> weights;
  std::vector<double> biases;
  AggregationScheme aggregation;
  std::size_t layer_index = 0;
  std::size_t state_dim = 0;  // token hidden-state dimension d the probe was trained on
  double threshold = 0.5;
  std::string step_probe_hash;  // prefix probes only
  TrainConfig train_config;

  /// Zero-initialized probe of the given shape.
  static ProbeModel zeros(ProbeKind kind, ProbeArch arch, std::size_t input_dim,
                          std::size_t hidden_dim = kDefaultMlpHidden);

  double logit(std::span<const double> x) const;
  /// sigmoid(logit(x)), a probability in (0,1).
  double forward(std::span<const double> x) const;

  std::size_t num_parameters() const noexcept { return weights.size() + biases.size(); }
  std::vector<double> parameters() const;
  void set_parameters(std::span<const double> theta);
  /// grad += scale * d logit(x) / d theta, in parameters() order.
  void accumulate_logit_gradient(std::span<const double> x, double scale, std::span<double> grad) const;

  /// Stable identity: hex FNV-1a of the serialized file content.
  std::string hash() const;
};

double sigmoid(double z);

double bce(double p, Label y);
/// d BCE / d p; zero where p is clamped.
double bce_grad(double p, Label y);

double anchor_loss(std::span<const double> c_prefix, std::span<const Label> a_prefix, double lambda_final);
/// d anchor / d c_prefix.
std::vector<double> anchor_loss_grad(std::span<const double> c_prefix, std::span<const Label> a_prefix,
                                     double lambda_final);

double sync_loss(std::span<const double> c_step, std::span<const double> c_prefix);
struct SyncGrad {
  std::vector<double> d_step;
  std::vector<double> d_prefix;
};
SyncGrad sync_loss_grad(std::span<const double> c_step, std::span<const double> c_prefix);

double total_loss(std::span<const double> c_step, std::span<const double> c_prefix,
                  std::span<const Label> a_prefix, const TrainConfig& cfg);
SyncGrad total_loss_grad(std::span<const double> c_step, std::span<const double> c_prefix,
                         std::span<const Label> a_prefix, const TrainConfig& cfg);

/// Throws IncompatibleProbe unless prefix was trained on top of step.
void check_compatible(const ProbeModel& step, const ProbeModel& prefix);

std::string serialize_probe(const ProbeModel& m);
ProbeModel parse_probe(std::string_view text);
void save_probe(const ProbeModel& m, const std::filesystem::path& path);
ProbeModel load_probe(const std::filesystem::path& path);

}  // namespace cotwatch
