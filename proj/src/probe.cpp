#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <fmt/format.h>
#include <json.hpp>

#include "cotwatch/error.hpp"
#include "cotwatch/kernels.hpp"
#include "cotwatch/probe.hpp"
#include "cotwatch/rng.hpp"

namespace cotwatch {
using ojson = nlohmann::ordered_json;
using json = nlohmann::json;

namespace {

void require_lengths(std::size_t a, std::size_t b, const char* what) {
  if (a != b) throw Error(ErrorCode::LengthMismatch, fmt::format("{}: lengths {} and {}", what, a, b));
  if (a == 0) throw Error(ErrorCode::LengthMismatch, fmt::format("{}: empty sequence", what));
}

std::string number_array(std::span<const double> v) {
  std::string out = "[";
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    // 17 significant digits in exponent form: bit-exact reload, sign of zero kept.
    out += fmt::format("{:.16e}", v[i]);
  }
  out += ']';
  return out;
}

ojson scheme_json(const AggregationScheme& s) {
  ojson j;
  j["kind"] = to_string(s.kind);
  j["gamma"] = s.gamma;
  j["l2_normalize"] = s.l2_normalize;
  j["scalar_feature_layout_version"] = kScalarFeatureLayoutVersion;
  return j;
}

ojson train_config_json(const TrainConfig& c) {
  ojson j;
  j["learning_rate"] = c.learning_rate;
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["seed"] = c.seed;
  j["lambda_final"] = c.lambda_final;
  j["lambda_sync"] = c.lambda_sync;
  j["optimizer"] = to_string(c.optimizer);
  j["arch"] = to_string(c.arch);
  j["mlp_hidden"] = c.mlp_hidden;
  return j;
}

std::vector<double> doubles(const json& j, const char* key) {
  if (!j.contains(key) || !j.at(key).is_array()) {
    throw Error(ErrorCode::MalformedRecord, fmt::format("probe file: '{}' must be an array", key));
  }
  std::vector<double> out;
  for (const json& v : j.at(key)) {
    if (!v.is_number()) throw Error(ErrorCode::MalformedRecord, fmt::format("probe file: '{}' entry", key));
    out.push_back(v.get<double>());
  }
  return out;
}

std::size_t expected_weights(ProbeArch arch, std::size_t in, std::size_t hidden) {
  return arch == ProbeArch::linear ? in : hidden * in + hidden;
}

std::size_t expected_biases(ProbeArch arch, std::size_t hidden) {
  return arch == ProbeArch::linear ? 1 : hidden + 1;
}

}  // namespace

std::string_view to_string(ProbeKind k) { return k == ProbeKind::step ? "step" : "prefix"; }
std::string_view to_string(ProbeArch a) { return a == ProbeArch::linear ? "linear" : "mlp1"; }
std::string_view to_string(OptimizerKind o) {
  return o == OptimizerKind::sgd ? "sgd" : "adaptive_moments";
}

ProbeArch parse_probe_arch(std::string_view name) {
  if (name == "linear") return ProbeArch::linear;
  if (name == "mlp1") return ProbeArch::mlp1;
  throw Error(ErrorCode::InvalidConfig, fmt::format("unknown probe arch '{}'", name));
}

OptimizerKind parse_optimizer(std::string_view name) {
  if (name == "sgd") return OptimizerKind::sgd;
  if (name == "adaptive_moments" || name == "adam") return OptimizerKind::adaptive_moments;
  throw Error(ErrorCode::InvalidConfig, fmt::format("unknown optimizer '{}'", name));
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw Error(ErrorCode::InvalidConfig, "learning_rate must be > 0");
  if (epochs < 1) throw Error(ErrorCode::InvalidConfig, "epochs must be >= 1");
  if (batch_size < 1) throw Error(ErrorCode::InvalidConfig, "batch_size must be >= 1");
  if (!(lambda_final >= 1.0)) throw Error(ErrorCode::InvalidConfig, "lambda_final must be >= 1");
  if (!(lambda_sync >= 0.0)) throw Error(ErrorCode::InvalidConfig, "lambda_sync must be >= 0");
  if (arch == ProbeArch::mlp1 && mlp_hidden < 1) throw Error(ErrorCode::InvalidConfig, "mlp_hidden must be >= 1");
}

ProbeModel ProbeModel::zeros(ProbeKind kind, ProbeArch arch, std::size_t input_dim, std::size_t hidden_dim) {
  ProbeModel m;
  m.kind = kind;
  m.arch = arch;
  m.input_dim = input_dim;
  m.hidden_dim = arch == ProbeArch::linear ? 0 : hidden_dim;
  m.weights.assign(expected_weights(arch, input_dim, m.hidden_dim), 0.0);
  m.biases.assign(expected_biases(arch, m.hidden_dim), 0.0);
  return m;
}

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

double ProbeModel::logit(std::span<const double> x) const {
  if (x.size() != input_dim) {
    throw Error(ErrorCode::DimMismatch, fmt::format("probe expects {} inputs, got {}", input_dim, x.size()));
  }
  if (arch == ProbeArch::linear) return kernels::dot(weights, x) + biases[0];
  const std::span<const double> w(weights);
  const auto w2 = w.subspan(hidden_dim * input_dim, hidden_dim);
  double z = biases[hidden_dim];
  for (std::size_t k = 0; k < hidden_dim; ++k) {
    const double h = std::tanh(kernels::dot(w.subspan(k * input_dim, input_dim), x) + biases[k]);
    z += w2[k] * h;
  }
  return z;
}

double ProbeModel::forward(std::span<const double> x) const { return sigmoid(logit(x)); }

std::vector<double> ProbeModel::parameters() const {
  std::vector<double> theta(weights);
  theta.insert(theta.end(), biases.begin(), biases.end());
  return theta;
}

void ProbeModel::set_parameters(std::span<const double> theta) {
  if (theta.size() != num_parameters()) {
    throw Error(ErrorCode::DimMismatch,
                fmt::format("probe has {} parameters, got {}", num_parameters(), theta.size()));
  }
  std::copy(theta.begin(), theta.begin() + static_cast<std::ptrdiff_t>(weights.size()), weights.begin());
  std::copy(theta.begin() + static_cast<std::ptrdiff_t>(weights.size()), theta.end(), biases.begin());
}

void ProbeModel::accumulate_logit_gradient(std::span<const double> x, double scale,
                                           std::span<double> grad) const {
  if (x.size() != input_dim) {
    throw Error(ErrorCode::DimMismatch, fmt::format("probe expects {} inputs, got {}", input_dim, x.size()));
  }
  if (arch == ProbeArch::linear) {
    kernels::axpy(scale, x, grad.first(input_dim));
    grad[input_dim] += scale;
    return;
  }
  const std::span<const double> w(weights);
  const std::size_t nw1 = hidden_dim * input_dim;
  const auto w2 = w.subspan(nw1, hidden_dim);
  auto g_w1 = grad.first(nw1);
  auto g_w2 = grad.subspan(nw1, hidden_dim);
  auto g_b1 = grad.subspan(weights.size(), hidden_dim);
  for (std::size_t k = 0; k < hidden_dim; ++k) {
    const double h = std::tanh(kernels::dot(w.subspan(k * input_dim, input_dim), x) + biases[k]);
    g_w2[k] += scale * h;
    const double dh = scale * w2[k] * (1.0 - h * h);
    kernels::axpy(dh, x, g_w1.subspan(k * input_dim, input_dim));
    g_b1[k] += dh;
  }
  grad[weights.size() + hidden_dim] += scale;
}

std::string ProbeModel::hash() const {
  return fmt::format("{:016x}", fnv1a64(serialize_probe(*this)));
}

double bce(double p, Label y) {
  const double q = std::clamp(p, kProbClamp, 1.0 - kProbClamp);
  return y ? -std::log(q) : -std::log(1.0 - q);
}

double bce_grad(double p, Label y) {
  if (p < kProbClamp || p > 1.0 - kProbClamp) return 0.0;
  return y ? -1.0 / p : 1.0 / (1.0 - p);
}

double anchor_loss(std::span<const double> c_prefix, std::span<const Label> a_prefix, double lambda_final) {
  require_lengths(c_prefix.size(), a_prefix.size(), "anchor_loss");
  const std::size_t T = c_prefix.size();
  double sum = 0.0;
  for (std::size_t t = 0; t < T; ++t) {
    const double w = t + 1 == T ? lambda_final : 1.0;
    sum += w * bce(c_prefix[t], a_prefix[t]);
  }
  return sum / static_cast<double>(T);
}

std::vector<double> anchor_loss_grad(std::span<const double> c_prefix, std::span<const Label> a_prefix,
                                     double lambda_final) {
  require_lengths(c_prefix.size(), a_prefix.size(), "anchor_loss");
  const std::size_t T = c_prefix.size();
  std::vector<double> g(T);
  for (std::size_t t = 0; t < T; ++t) {
    const double w = t + 1 == T ? lambda_final : 1.0;
    g[t] = w * bce_grad(c_prefix[t], a_prefix[t]) / static_cast<double>(T);
  }
  return g;
}

double sync_loss(std::span<const double> c_step, std::span<const double> c_prefix) {
  require_lengths(c_step.size(), c_prefix.size(), "sync_loss");
  double sum = 0.0;
  for (std::size_t t = 0; t < c_step.size(); ++t) {
    const double gap = std::max(0.0, c_step[t] - c_prefix[t]);
    sum += gap * gap * c_step[t] * c_step[t];
  }
  return sum;
}

SyncGrad sync_loss_grad(std::span<const double> c_step, std::span<const double> c_prefix) {
  require_lengths(c_step.size(), c_prefix.size(), "sync_loss");
  SyncGrad g{std::vector<double>(c_step.size(), 0.0), std::vector<double>(c_step.size(), 0.0)};
  for (std::size_t t = 0; t < c_step.size(); ++t) {
    const double gap = c_step[t] - c_prefix[t];
    if (gap <= 0.0) continue;
    const double s2 = c_step[t] * c_step[t];
    g.d_prefix[t] = -2.0 * gap * s2;
    g.d_step[t] = 2.0 * gap * s2 + 2.0 * gap * gap * c_step[t];
  }
  return g;
}

double total_loss(std::span<const double> c_step, std::span<const double> c_prefix,
                  std::span<const Label> a_prefix, const TrainConfig& cfg) {
  require_lengths(c_step.size(), c_prefix.size(), "total_loss");
  return anchor_loss(c_prefix, a_prefix, cfg.lambda_final) + cfg.lambda_sync * sync_loss(c_step, c_prefix);
}

SyncGrad total_loss_grad(std::span<const double> c_step, std::span<const double> c_prefix,
                         std::span<const Label> a_prefix, const TrainConfig& cfg) {
  require_lengths(c_step.size(), c_prefix.size(), "total_loss");
  SyncGrad g = sync_loss_grad(c_step, c_prefix);
  const auto ga = anchor_loss_grad(c_prefix, a_prefix, cfg.lambda_final);
  for (std::size_t t = 0; t < ga.size(); ++t) {
    g.d_step[t] *= cfg.lambda_sync;
    g.d_prefix[t] = ga[t] + cfg.lambda_sync * g.d_prefix[t];
  }
  return g;
}

void check_compatible(const ProbeModel& step, const ProbeModel& prefix) {
  auto fail = [](const std::string& why) { throw Error(ErrorCode::IncompatibleProbe, why); };
  if (step.kind != ProbeKind::step) fail("first probe is not a step probe");
  if (prefix.kind != ProbeKind::prefix) fail("second probe is not a prefix probe");
  if (prefix.input_dim != step.input_dim + 1) {
    fail(fmt::format("prefix input_dim {} != step input_dim {} + 1", prefix.input_dim, step.input_dim));
  }
  if (!(prefix.aggregation == step.aggregation)) fail("aggregation schemes differ");
  if (prefix.layer_index != step.layer_index) fail("layer indices differ");
  if (prefix.state_dim != step.state_dim) fail("hidden-state dimensions differ");
  if (prefix.step_probe_hash != step.hash()) {
    fail(fmt::format("prefix probe was trained on step probe {} but got {}", prefix.step_probe_hash, step.hash()));
  }
}

std::string serialize_probe(const ProbeModel& m) {
  ojson head;
  head["format_version"] = kProbeFormatVersion;
  head["kind"] = to_string(m.kind);
  head["arch"] = to_string(m.arch);
  head["input_dim"] = m.input_dim;
  head["hidden_dim"] = m.arch == ProbeArch::mlp1 ? ojson(m.hidden_dim) : ojson(nullptr);
  head["layer"] = m.layer_index;
  head["state_dim"] = m.state_dim;
  head["aggregation"] = scheme_json(m.aggregation);
  head["threshold"] = m.threshold;
  head["step_probe_hash"] = m.kind == ProbeKind::prefix ? ojson(m.step_probe_hash) : ojson(nullptr);
  head["train_config"] = train_config_json(m.train_config);
  std::string text = head.dump();
  text.pop_back();  // reopen the object for the numeric arrays
  text += ",\"weights\":" + number_array(m.weights);
  text += ",\"biases\":" + number_array(m.biases);
  text += "}";
  return text;
}

ProbeModel parse_probe(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::MalformedRecord, std::string("probe file: ") + e.what());
  }
  try {
    if (j.value("format_version", -1) != kProbeFormatVersion) {
      throw Error(ErrorCode::VersionMismatch,
                  fmt::format("probe format_version {} unsupported", j.value("format_version", -1)));
    }
    ProbeModel m;
    const auto kind = j.at("kind").get<std::string>();
    if (kind != "step" && kind != "prefix") throw Error(ErrorCode::MalformedRecord, "probe kind " + kind);
    m.kind = kind == "step" ? ProbeKind::step : ProbeKind::prefix;
    m.arch = parse_probe_arch(j.at("arch").get<std::string>());
    m.input_dim = j.at("input_dim").get<std::size_t>();
    m.hidden_dim = j.at("hidden_dim").is_null() ? 0 : j.at("hidden_dim").get<std::size_t>();
    m.layer_index = j.at("layer").get<std::size_t>();
    m.state_dim = j.value("state_dim", std::size_t{0});
    const json& agg = j.at("aggregation");
    m.aggregation.kind = parse_scheme_kind(agg.at("kind").get<std::string>());
    m.aggregation.gamma = agg.at("gamma").get<double>();
    m.aggregation.l2_normalize = agg.at("l2_normalize").get<bool>();
    if (agg.value("scalar_feature_layout_version", -1) != kScalarFeatureLayoutVersion) {
      throw Error(ErrorCode::VersionMismatch, "scalar-feature layout version mismatch");
    }
    m.threshold = j.value("threshold", 0.5);
    if (m.kind == ProbeKind::prefix) m.step_probe_hash = j.at("step_probe_hash").get<std::string>();
    if (j.contains("train_config")) {
      const json& c = j.at("train_config");
      m.train_config.learning_rate = c.at("learning_rate").get<double>();
      m.train_config.epochs = c.at("epochs").get<std::size_t>();
      m.train_config.batch_size = c.at("batch_size").get<std::size_t>();
      m.train_config.seed = c.at("seed").get<std::uint64_t>();
      m.train_config.lambda_final = c.at("lambda_final").get<double>();
      m.train_config.lambda_sync = c.at("lambda_sync").get<double>();
      m.train_config.optimizer = parse_optimizer(c.at("optimizer").get<std::string>());
      m.train_config.arch = parse_probe_arch(c.at("arch").get<std::string>());
      m.train_config.mlp_hidden = c.at("mlp_hidden").get<std::size_t>();
    }
    m.weights = doubles(j, "weights");
    m.biases = doubles(j, "biases");
    if (m.weights.size() != expected_weights(m.arch, m.input_dim, m.hidden_dim) ||
        m.biases.size() != expected_biases(m.arch, m.hidden_dim)) {
      throw Error(ErrorCode::MalformedRecord, "probe parameter counts do not match architecture");
    }
    if (!(m.threshold > 0.0 && m.threshold < 1.0)) {
      throw Error(ErrorCode::MalformedRecord, "probe threshold outside (0,1)");
    }
    return m;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::MalformedRecord, std::string("probe file: ") + e.what());
  }
}

void save_probe(const ProbeModel& m, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoFailure, "cannot create " + path.string());
  out << serialize_probe(m) << '\n';
  if (!out) throw Error(ErrorCode::IoFailure, "write failed on " + path.string());
}

ProbeModel load_probe(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoFailure, "cannot open " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_probe(buf.str());
}

}  // namespace cotwatch
