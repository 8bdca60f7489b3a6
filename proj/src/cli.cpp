#include <algorithm>
#include <chrono>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <json.hpp>
#include <openssl/evp.h>
#include <spdlog/sinks/ostream_sink.h>
#include <spdlog/spdlog.h>

#include "cotwatch/aggregation.hpp"
#include "cotwatch/cli.hpp"
#include "cotwatch/error.hpp"
#include "cotwatch/inference.hpp"
#include "cotwatch/kernels.hpp"
#include "cotwatch/label_validator.hpp"
#include "cotwatch/rng.hpp"
#include "cotwatch/metrics.hpp"
#include "cotwatch/stream_engine.hpp"
#include "cotwatch/synth.hpp"
#include "cotwatch/training.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace cotwatch::cli {

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Options {
  // global
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  std::string log_level = "warn";
  std::string config;
  std::string sidecar;

  // shared
  std::string data, out, report;
  std::string step_probe, prefix_probe;
  double train_fraction = 0.8;

  // synth
  SynthConfig synth;
  std::string plant = "none";
  std::size_t plant_count = 0;

  // validate
  std::size_t n_run = kDefaultRunLength;
  bool strict = false;
  bool reject_all_anomalies = false;

  // aggregation
  std::string scheme = "step_time_exp";
  double gamma = kDefaultGlobalExpGamma;
  std::string l2 = "auto";

  // training
  TrainConfig train;
  std::string optimizer = "adaptive_moments";
  std::string arch = "linear";
  std::string train_log;

  // infer
  std::string subset = "eval";

  // evaluate
  std::string scores;
  std::string mode = "all";
  double threshold = 0.5;
  std::string radar, csv;

  // stream
  std::string input = "-";
  bool timing = false;
};

struct Bound {
  std::string name;
  std::function<json()> get;
};

class Registry {
 public:
  template <typename T>
  CLI::Option* option(CLI::App* app, const std::string& name, T& var, const std::string& desc) {
    bound_[app].push_back({name, [&var] { return json(var); }});
    return app->add_option("--" + name, var, desc)->capture_default_str();
  }
  CLI::Option* flag(CLI::App* app, const std::string& name, bool& var, const std::string& desc) {
    bound_[app].push_back({name, [&var] { return json(var); }});
    return app->add_flag("--" + name, var, desc);
  }
  json effective(CLI::App* global, CLI::App* sub) const {
    json o = json::object();
    for (CLI::App* a : {global, sub}) {
      auto it = bound_.find(a);
      if (it == bound_.end()) continue;
      for (const auto& b : it->second) o[b.name] = b.get();
    }
    return o;
  }

 private:
  std::map<CLI::App*, std::vector<Bound>> bound_;
};

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error(ErrorCode::IoFailure, "cannot open '" + path.string() + "' for writing");
  f << text;
  if (!f) throw Error(ErrorCode::IoFailure, "write to '" + path.string() + "' failed");
}

std::string read_text(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorCode::IoFailure, "cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// Writes to the file, or to `out` when path is "-" or empty.
void emit(const std::string& path, const std::string& text, std::ostream& out) {
  if (path.empty() || path == "-") {
    out << text;
    out.flush();
  } else {
    write_text(path, text);
  }
}

Dataset load(const std::string& path) {
  fs::path p(path);
  if (fs::is_directory(p)) p /= "manifest.jsonl";
  return read_dataset(p);
}

json opt_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }
json opt_json(const std::optional<bool>& v) { return v ? json(*v ? 1 : 0) : json(nullptr); }

AggregationScheme scheme_from(const Options& o) {
  AggregationScheme s = AggregationScheme::of(parse_scheme_kind(o.scheme));
  s.gamma = o.gamma;
  if (o.l2 != "auto") s.l2_normalize = o.l2 == "true";
  s.validate();
  return s;
}

TrainConfig train_config_from(const Options& o) {
  TrainConfig c = o.train;
  c.seed = o.seed;
  c.optimizer = parse_optimizer(o.optimizer);
  c.arch = parse_probe_arch(o.arch);
  c.validate();
  return c;
}

Dataset subset_of(const Dataset& ds, const Options& o) {
  if (o.subset == "all") return ds;
  auto [train, eval] = train_eval_split(ds, o.train_fraction, o.seed);
  return o.subset == "train" ? train : eval;
}

json binary_json(const ProtocolMetrics& m) {
  json j;
  j["auc"] = opt_json(m.auc);
  j["acc"] = m.binary.acc;
  j["f1"] = m.binary.f1;
  j["precision"] = m.binary.precision;
  j["recall"] = m.binary.recall;
  j["n"] = m.binary.n;
  return j;
}

// ---- synth -----------------------------------------------------------------

int cmd_synth(const Options& o, std::ostream& out) {
  SynthConfig cfg = o.synth;
  cfg.seed = o.seed;
  Dataset ds = generate(cfg, o.threads);
  std::vector<std::string> planted;
  if (o.plant != "none") {
    ds = plant_violations(ds, parse_plant_kind(o.plant), o.plant_count, derive_seed(o.seed, "plant"), &planted);
  }
  const fs::path manifest = write_dataset(ds, o.out);
  json j;
  j["manifest"] = manifest.string();
  j["chains"] = ds.trajectories.size();
  if (!planted.empty()) j["planted"] = planted;
  out << j.dump() << '\n';
  return kOk;
}

// ---- validate --------------------------------------------------------------

int cmd_validate(const Options& o, std::ostream& out) {
  const Dataset ds = load(o.data);
  ValidatorConfig cfg{o.n_run, o.reject_all_anomalies};
  const DatasetReport r = dataset_report(ds, cfg, o.threads);

  json summary;
  summary["total"] = r.total;
  summary["accepted"] = r.accepted;
  summary["rejected"] = r.rejected;
  summary["acceptance_rate"] = r.total ? static_cast<double>(r.accepted) / static_cast<double>(r.total) : 0.0;
  json by_rule = json::object();
  for (const auto& [rule, n] : r.rejected_by_rule) by_rule[std::string(to_string(rule))] = n;
  summary["rejected_by_rule"] = by_rule;
  json transitions = json::object();
  for (const auto& [mode, n] : r.transitions) transitions[std::string(to_string(mode))] = n;
  summary["transitions"] = transitions;
  summary["total_steps"] = r.total_steps;
  summary["step_hallucination_rate"] = r.step_hallucination_rate;
  summary["prefix_hallucination_rate"] = r.prefix_hallucination_rate;
  summary["avg_steps_per_chain"] = r.avg_steps_per_chain;
  summary["n_run"] = o.n_run;
  summary["reject_all_anomalies"] = o.reject_all_anomalies;

  if (!o.report.empty()) {
    json rows = json::array();
    for (const auto& [id, v] : r.verdicts) {
      json row;
      row["id"] = id;
      row["accepted"] = v.accepted;
      json viol = json::array();
      for (const auto& x : v.violations) {
        json e;
        e["rule"] = to_string(x.rule);
        e["step"] = x.step_index ? json(*x.step_index) : json(nullptr);
        e["detail"] = x.detail;
        viol.push_back(e);
      }
      row["violations"] = viol;
      json notes = json::array();
      for (const auto& n : v.notes) {
        notes.push_back({{"mode", to_string(n.mode)}, {"step", n.step_index}, {"run_length", n.run_length}});
      }
      row["notes"] = notes;
      rows.push_back(row);
    }
    json rep;
    rep["summary"] = summary;
    rep["trajectories"] = rows;
    write_text(o.report, rep.dump(2) + "\n");
  }
  out << summary.dump() << '\n';
  return o.strict && r.rejected > 0 ? kRejected : kOk;
}

// ---- aggregate -------------------------------------------------------------

int cmd_aggregate(const Options& o, std::ostream& out) {
  const Dataset ds = load(o.data);
  const AggregationScheme scheme = scheme_from(o);
  std::ostringstream ss;
  for (const auto& traj : ds.trajectories) {
    for (const auto& rep : batch_aggregate(traj, scheme)) {
      json j;
      j["id"] = traj.id;
      j["t"] = rep.step_index;
      j["vector"] = rep.vector;
      ss << j.dump() << '\n';
    }
  }
  emit(o.out, ss.str(), out);
  return kOk;
}

// ---- training --------------------------------------------------------------

json train_summary(const ProbeModel& m, const TrainLog& log, const Options& o, std::size_t chains) {
  json j;
  j["probe"] = o.out;
  j["kind"] = to_string(m.kind);
  j["hash"] = m.hash();
  j["train_chains"] = chains;
  j["final_loss"] = log.epoch_losses.empty() ? json(nullptr) : json(log.epoch_losses.back());
  j["loss_increased"] = log.loss_increased;
  return j;
}

void write_train_log(const Options& o, const TrainLog& log) {
  if (o.train_log.empty()) return;
  json j;
  j["epoch_losses"] = log.epoch_losses;
  j["loss_increased"] = log.loss_increased;
  write_text(o.train_log, j.dump(2) + "\n");
}

int cmd_train_step(const Options& o, std::ostream& out) {
  const AggregationScheme scheme = scheme_from(o);
  const TrainConfig cfg = train_config_from(o);
  const Dataset ds = load(o.data);
  const Dataset train = train_eval_split(ds, o.train_fraction, o.seed).first;
  TrainLog log;
  const ProbeModel m = train_step_probe(train, scheme, cfg, &log, o.threads);
  save_probe(m, o.out);
  write_train_log(o, log);
  out << train_summary(m, log, o, train.trajectories.size()).dump() << '\n';
  return kOk;
}

int cmd_train_prefix(const Options& o, std::ostream& out) {
  const TrainConfig cfg = train_config_from(o);
  const ProbeModel step = load_probe(o.step_probe);
  const Dataset ds = load(o.data);
  const Dataset train = train_eval_split(ds, o.train_fraction, o.seed).first;
  TrainLog log;
  const ProbeModel m = train_prefix_probe(train, step, cfg, &log, o.threads);
  save_probe(m, o.out);
  write_train_log(o, log);
  out << train_summary(m, log, o, train.trajectories.size()).dump() << '\n';
  return kOk;
}

// ---- infer -----------------------------------------------------------------

json trace_json(const ScoreTrace& s) {
  json j;
  j["id"] = s.id;
  j["c_step"] = s.c_step;
  j["c_prefix"] = s.c_prefix;
  json as = json::array(), ap = json::array();
  for (const auto& v : s.a_step) as.push_back(opt_json(v));
  for (const auto& v : s.a_prefix) ap.push_back(opt_json(v));
  j["a_step"] = as;
  j["a_prefix"] = ap;
  j["final_correct"] = opt_json(s.final_correct);
  return j;
}

std::optional<bool> opt_label(const json& v) {
  if (v.is_null()) return std::nullopt;
  if (!v.is_number_integer() || (v.get<int>() != 0 && v.get<int>() != 1)) {
    throw Error(ErrorCode::MalformedRecord, "label must be 0, 1 or null");
  }
  return v.get<int>() == 1;
}

std::vector<ScoreTrace> read_scores(const std::string& path) {
  std::istringstream in(read_text(path));
  std::vector<ScoreTrace> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json j = json::parse(line);
      ScoreTrace s;
      s.id = j.at("id").get<std::string>();
      s.c_step = j.at("c_step").get<std::vector<double>>();
      s.c_prefix = j.at("c_prefix").get<std::vector<double>>();
      for (const auto& v : j.at("a_step")) s.a_step.push_back(opt_label(v));
      for (const auto& v : j.at("a_prefix")) s.a_prefix.push_back(opt_label(v));
      s.final_correct = opt_label(j.at("final_correct"));
      const std::size_t T = s.c_prefix.size();
      if (T == 0 || s.c_step.size() != T || s.a_step.size() != T || s.a_prefix.size() != T) {
        throw Error(ErrorCode::MalformedRecord, "score arrays must be non-empty and equally long");
      }
      out.push_back(std::move(s));
    } catch (const json::exception& e) {
      throw Error(ErrorCode::MalformedRecord, fmt::format("{}:{}: {}", path, lineno, e.what()));
    } catch (const Error& e) {
      throw Error(e.code(), fmt::format("{}:{}: {}", path, lineno, e.detail()));
    }
  }
  if (out.empty()) throw Error(ErrorCode::NoEligibleChains, "'" + path + "' has no score records");
  return out;
}

int cmd_infer(const Options& o, std::ostream& out) {
  const ProbeModel step = load_probe(o.step_probe);
  const ProbeModel prefix = load_probe(o.prefix_probe);
  check_compatible(step, prefix);
  const Dataset ds = subset_of(load(o.data), o);
  std::ostringstream ss;
  for (const auto& s : infer(ds, step, prefix, o.threads)) ss << trace_json(s).dump() << '\n';
  emit(o.out, ss.str(), out);
  return kOk;
}

// ---- evaluate --------------------------------------------------------------

std::string csv_num(const std::optional<double>& v) { return v ? fmt::format("{:.17g}", *v) : ""; }

int cmd_evaluate(const Options& o, std::ostream& out) {
  const auto traces = read_scores(o.scores);
  const bool all = o.mode == "all";
  json rep;
  rep["threshold"] = o.threshold;
  rep["chains"] = traces.size();

  if (all || o.mode == "step") {
    std::vector<double> s;
    std::vector<Label> y;
    for (const auto& t : traces) {
      for (std::size_t i = 0; i < t.c_step.size(); ++i) {
        if (!t.a_step[i]) throw Error(ErrorCode::MissingLabels, "trajectory '" + t.id + "' lacks step labels");
        s.push_back(t.c_step[i]);
        y.push_back(*t.a_step[i] ? 1 : 0);
      }
    }
    ProtocolMetrics m;
    try {
      m.auc = auc(s, y);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::SingleClass) throw;
    }
    m.binary = acc_f1(s, y, o.threshold);
    rep["step"] = binary_json(m);
  }

  std::vector<ChainEval> chains;
  if (o.mode != "step") {
    for (const auto& t : traces) chains.push_back(to_chain_eval(t, o.threshold));
  }
  if (all || o.mode == "local") rep["local"] = binary_json(eval_local(chains));
  if (all || o.mode == "final") rep["final"] = binary_json(eval_final(chains));
  if (all || o.mode == "dynamic") {
    const DynamicReport d = dynamic_report(chains, o.threads);
    json dj;
    auto put = [&](const char* name, const MetricSummary& m) {
      dj[name] = {{"value", opt_json(m.value)}, {"count", m.count}};
    };
    put("snap_m", d.snap_m);
    put("lag", d.lag);
    put("icr", d.icr);
    put("brake_s", d.brake_s);
    put("ling_t", d.ling_t);
    put("heal_3", d.heal_3);
    put("r_score", d.r_score);
    put("fp_len", d.fp_len);
    dj["recovery_events"] = d.recovery_events;
    dj["t_avg"] = d.t_avg;
    dj["coherence"] = coherence_diagnostic(chains);
    dj["directional"] = directional_diagnostic(chains);
    rep["dynamic"] = dj;

    if (!o.radar.empty()) {
      json rj;
      rj["normalization"] = {{"direct", "100 * clamp(v, 0, 1)"},
                             {"inverted", "100 * max(0, 1 - v / t_avg)"},
                             {"inverted_metrics", {"lag", "ling_t", "fp_len"}},
                             {"t_avg", d.t_avg}};
      json pts = json::array();
      for (const auto& p : radar(d)) {
        pts.push_back({{"metric", p.metric}, {"raw", opt_json(p.raw)}, {"normalized", opt_json(p.normalized)}});
      }
      rj["metrics"] = pts;
      write_text(o.radar, rj.dump(2) + "\n");
    }
  }
  if (!o.csv.empty()) {
    std::string text = "id,length,t_on,snap_m,lag,r_score,recoveries,brake_s,ling_t,heal_3,fp_len\n";
    for (const auto& c : chains) {
      const ChainMetricRow r = chain_metrics(c);
      text += fmt::format("{},{},{},{},{},{},{},{},{},{},{:.17g}\n", r.id, r.length,
                          r.t_on ? std::to_string(*r.t_on) : "", csv_num(r.snap_m), csv_num(r.lag),
                          csv_num(r.r_score), r.recoveries, csv_num(r.brake_s), csv_num(r.ling_t),
                          csv_num(r.heal_3), r.fp_len);
    }
    write_text(o.csv, text);
  }
  emit(o.report, rep.dump(2) + "\n", out);
  return kOk;
}

// ---- stream ----------------------------------------------------------------

std::vector<float> decode_states(const std::string& b64, std::size_t d) {
  if (b64.size() % 4 != 0) throw Error(ErrorCode::MalformedRecord, "hidden_states is not valid base64");
  std::vector<unsigned char> buf(b64.size() / 4 * 3 + 1);
  const int n = EVP_DecodeBlock(buf.data(), reinterpret_cast<const unsigned char*>(b64.data()),
                                static_cast<int>(b64.size()));
  if (n < 0) throw Error(ErrorCode::MalformedRecord, "hidden_states is not valid base64");
  std::size_t len = static_cast<std::size_t>(n);
  if (!b64.empty() && b64.back() == '=') --len;
  if (b64.size() >= 2 && b64[b64.size() - 2] == '=') --len;
  if (len == 0 || len % (4 * d) != 0) {
    throw Error(ErrorCode::CountMismatch, fmt::format("{} state bytes is not a multiple of 4*d = {}", len, 4 * d));
  }
  std::vector<float> v(len / 4);
  for (std::size_t i = 0; i < v.size(); ++i) {
    const std::uint32_t u = static_cast<std::uint32_t>(buf[4 * i]) | static_cast<std::uint32_t>(buf[4 * i + 1]) << 8 |
                            static_cast<std::uint32_t>(buf[4 * i + 2]) << 16 |
                            static_cast<std::uint32_t>(buf[4 * i + 3]) << 24;
    std::memcpy(&v[i], &u, sizeof u);
  }
  return v;
}

Step parse_step_record(const std::string& line, std::size_t d) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::MalformedRecord, e.what());
  }
  if (!j.is_object() || !j.contains("hidden_states") || !j["hidden_states"].is_string()) {
    throw Error(ErrorCode::MalformedRecord, "step record needs a base64 'hidden_states' string");
  }
  std::vector<float> data = decode_states(j["hidden_states"].get<std::string>(), d);
  const std::size_t L = data.size() / d;
  if (j.contains("num_tokens") && !j["num_tokens"].is_null() && j["num_tokens"].get<std::size_t>() != L) {
    throw Error(ErrorCode::CountMismatch, fmt::format("num_tokens {} but {} rows of states",
                                                      j["num_tokens"].get<std::size_t>(), L));
  }
  Step s;
  s.hidden_states = TokenStates(L, d, std::move(data));
  if (j.contains("token_probs") && !j["token_probs"].is_null()) {
    s.token_probs = j["token_probs"].get<std::vector<double>>();
  }
  return s;
}

json event_json(const StreamEvent& e) {
  json j;
  j["event"] = to_string(e.kind);
  j["t"] = e.step_index;
  j["c_step"] = e.c_step;
  j["c_prefix"] = e.c_prefix;
  j["decision"] = e.decision ? 1 : 0;
  return j;
}

int cmd_stream(const Options& o, std::istream& stdin_, std::ostream& out) {
  auto step = std::make_shared<const ProbeModel>(load_probe(o.step_probe));
  auto prefix = std::make_shared<const ProbeModel>(load_probe(o.prefix_probe));
  StreamDetector det(step, prefix);

  std::ifstream file;
  std::istream* in = &stdin_;
  if (o.input != "-") {
    file.open(o.input);
    if (!file) throw Error(ErrorCode::IoFailure, "cannot open '" + o.input + "'");
    in = &file;
  }
  std::string line;
  while (std::getline(*in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto t0 = std::chrono::steady_clock::now();
    const Step s = parse_step_record(line, step->state_dim);
    const auto events = det.push_step(s);
    const auto us = std::chrono::duration<double, std::micro>(std::chrono::steady_clock::now() - t0).count();
    for (const auto& e : events) {
      json j = event_json(e);
      if (o.timing) j["elapsed_us"] = us;
      out << j.dump() << '\n';
    }
    out.flush();
  }
  const StreamVerdict v = det.finalize();
  json j;
  j["event"] = "final";
  j["steps"] = v.steps;
  j["c_prefix"] = v.c_prefix;
  j["decision"] = v.decision ? 1 : 0;
  out << j.dump() << '\n';
  out.flush();
  return kOk;
}

// ---- driver ----------------------------------------------------------------

std::string version_text() {
  return fmt::format("cotwatch {}\nmanifest {}\nhsb {}\nprobe-file {}\nscalar-feature-layout {}\nkernels {}",
                     kToolVersion, kManifestVersion, kHsbVersion, kProbeFormatVersion, kScalarFeatureLayoutVersion,
                     kernels::backend_name(kernels::active_backend()));
}

const std::vector<std::string> kSubcommands = {"synth", "validate",     "aggregate", "train-step",
                                               "train-prefix", "infer", "evaluate",  "stream"};

std::string json_value_arg(const json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
  if (v.is_number()) return v.dump();
  throw UsageError("config values must be strings, numbers or booleans");
}

// Appends the config file's options after the command line so they take precedence.
std::vector<std::string> apply_config(std::vector<std::string> args) {
  std::string path;
  for (std::size_t i = 1; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) path = args[i + 1];
    else if (args[i].rfind("--config=", 0) == 0) path = args[i].substr(9);
  }
  if (path.empty()) return args;
  json cfg;
  try {
    cfg = json::parse(read_text(path));
  } catch (const json::exception& e) {
    throw UsageError(fmt::format("config '{}': {}", path, e.what()));
  }
  if (!cfg.is_object()) throw UsageError("config '" + path + "' must hold a JSON object");
  bool has_sub = false;
  for (std::size_t i = 1; i < args.size(); ++i) {
    if (std::find(kSubcommands.begin(), kSubcommands.end(), args[i]) != kSubcommands.end()) has_sub = true;
  }
  if (cfg.contains("subcommand") && !has_sub) {
    args.insert(args.begin() + 1, cfg["subcommand"].get<std::string>());
  }
  const json& opts = cfg.contains("options") ? cfg["options"] : cfg;
  for (const auto& [k, v] : opts.items()) {
    if (k == "subcommand" || k == "tool_version" || k == "config" || k == "sidecar") continue;
    // "--k=" with an empty value would swallow the next argument
    if (v.is_boolean()) {
      args.push_back(fmt::format("--{}={}", k, json_value_arg(v)));
    } else {
      args.push_back("--" + k);
      args.push_back(json_value_arg(v));
    }
  }
  return args;
}

int exit_code_for(const Error& e) {
  return e.code() == ErrorCode::InvalidConfig ? kUsage : kDataError;
}

}  // namespace

int run(const std::vector<std::string>& raw_args, std::istream& in, std::ostream& out, std::ostream& err) {
  auto sink = std::make_shared<spdlog::sinks::ostream_sink_mt>(err);
  auto previous = spdlog::default_logger();
  spdlog::set_default_logger(std::make_shared<spdlog::logger>("cotwatch", sink));
  struct RestoreLogger {
    std::shared_ptr<spdlog::logger> p;
    ~RestoreLogger() { spdlog::set_default_logger(p); }
  } restore{previous};
  spdlog::set_pattern("[%l] %v");

  Options o;
  Registry reg;
  CLI::App app{"Streaming hallucination detection over reasoning-step hidden states", "cotwatch"};
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.fallthrough();
  app.require_subcommand(1);
  app.set_version_flag("--version", version_text);

  reg.option(&app, "seed", o.seed, "Root seed for every random sub-stream");
  reg.option(&app, "threads", o.threads, "Worker threads for data-parallel sections")->check(CLI::PositiveNumber);
  reg.option(&app, "log-level", o.log_level, "trace|debug|info|warn|error|off")
      ->check(CLI::IsMember({"trace", "debug", "info", "warn", "error", "off"}));
  app.add_option("--config", o.config, "JSON file whose options override the command line");
  app.add_option("--sidecar", o.sidecar, "Where to write the effective-config JSON");

  auto need_file = [](CLI::Option* opt) { return opt->required(); };

  auto* synth = app.add_subcommand("synth", "Generate a synthetic labeled dataset");
  reg.option(synth, "chains", o.synth.num_chains, "Number of trajectories");
  reg.option(synth, "sep", o.synth.separation, "Cluster separation in noise units");
  reg.option(synth, "t-min", o.synth.t_range.first, "Minimum steps");
  reg.option(synth, "t-max", o.synth.t_range.second, "Maximum steps");
  reg.option(synth, "l-min", o.synth.l_range.first, "Minimum tokens per step");
  reg.option(synth, "l-max", o.synth.l_range.second, "Maximum tokens per step");
  reg.option(synth, "dim", o.synth.d, "Hidden dimension");
  reg.option(synth, "layer", o.synth.layer_index, "Layer index recorded in the manifest");
  reg.option(synth, "onset", o.synth.onset_prob, "Per-step onset probability");
  reg.option(synth, "recovery", o.synth.recovery_prob, "Per-step correction probability");
  reg.option(synth, "recovery-run", o.synth.recovery_run, "Clean steps needed to clear the prefix state");
  reg.option(synth, "prefix-ratio", o.synth.prefix_ratio, "Prefix-state shift relative to separation");
  reg.option(synth, "plant", o.plant, "none|terminal|severe_epiphany|severe_degradation")
      ->check(CLI::IsMember({"none", "terminal", "severe_epiphany", "severe_degradation"}));
  reg.option(synth, "plant-count", o.plant_count, "Trajectories to corrupt");
  need_file(reg.option(synth, "out", o.out, "Output directory"));

  auto* validate = app.add_subcommand("validate", "Check label consistency");
  need_file(reg.option(validate, "data", o.data, "Manifest or dataset directory"));
  reg.option(validate, "n-run", o.n_run, "Run length that makes an anomaly severe")->check(CLI::PositiveNumber);
  reg.option(validate, "report", o.report, "Per-trajectory JSON report");
  reg.flag(validate, "strict", o.strict, "Exit 4 when any trajectory is rejected");
  reg.flag(validate, "reject-all-anomalies", o.reject_all_anomalies, "Reject non-severe anomalies too");

  auto add_scheme = [&](CLI::App* a) {
    reg.option(a, "scheme", o.scheme, "Aggregation scheme");
    reg.option(a, "gamma", o.gamma, "global_exp decay rate");
    reg.option(a, "l2", o.l2, "auto|true|false")->check(CLI::IsMember({"auto", "true", "false"}));
  };
  auto add_train = [&](CLI::App* a) {
    reg.option(a, "lr", o.train.learning_rate, "Learning rate");
    reg.option(a, "epochs", o.train.epochs, "Epochs");
    reg.option(a, "batch-size", o.train.batch_size, "Trajectories per minibatch");
    reg.option(a, "optimizer", o.optimizer, "sgd|adaptive_moments")
        ->check(CLI::IsMember({"sgd", "adaptive_moments"}));
    reg.option(a, "arch", o.arch, "linear|mlp1")->check(CLI::IsMember({"linear", "mlp1"}));
    reg.option(a, "mlp-hidden", o.train.mlp_hidden, "mlp1 width");
    reg.option(a, "train-fraction", o.train_fraction, "Fraction of trajectories used for training");
    reg.option(a, "train-log", o.train_log, "Write per-epoch losses here");
  };

  auto* aggregate = app.add_subcommand("aggregate", "Emit step representations as NDJSON");
  need_file(reg.option(aggregate, "data", o.data, "Manifest or dataset directory"));
  add_scheme(aggregate);
  reg.option(aggregate, "out", o.out, "Output file (default stdout)");

  auto* train_step = app.add_subcommand("train-step", "Train the step-level probe");
  need_file(reg.option(train_step, "data", o.data, "Manifest or dataset directory"));
  add_scheme(train_step);
  add_train(train_step);
  need_file(reg.option(train_step, "out", o.out, "Probe file to write"));

  auto* train_prefix = app.add_subcommand("train-prefix", "Train the prefix-level probe on a frozen step probe");
  need_file(reg.option(train_prefix, "data", o.data, "Manifest or dataset directory"));
  need_file(reg.option(train_prefix, "step-probe", o.step_probe, "Trained step probe"));
  add_train(train_prefix);
  reg.option(train_prefix, "lambda-final", o.train.lambda_final, "Final-step anchor weight");
  reg.option(train_prefix, "lambda-sync", o.train.lambda_sync, "Sync loss weight");
  need_file(reg.option(train_prefix, "out", o.out, "Probe file to write"));

  auto* infer_cmd = app.add_subcommand("infer", "Score trajectories with a probe pair");
  need_file(reg.option(infer_cmd, "data", o.data, "Manifest or dataset directory"));
  need_file(reg.option(infer_cmd, "step-probe", o.step_probe, "Step probe"));
  need_file(reg.option(infer_cmd, "prefix-probe", o.prefix_probe, "Prefix probe"));
  reg.option(infer_cmd, "subset", o.subset, "train|eval|all")->check(CLI::IsMember({"train", "eval", "all"}));
  reg.option(infer_cmd, "train-fraction", o.train_fraction, "Split fraction used at training time");
  reg.option(infer_cmd, "out", o.out, "Output NDJSON (default stdout)");

  auto* evaluate = app.add_subcommand("evaluate", "Classification and dynamic metrics over score traces");
  need_file(reg.option(evaluate, "scores", o.scores, "NDJSON written by infer"));
  reg.option(evaluate, "mode", o.mode, "local|final|dynamic|step|all")
      ->check(CLI::IsMember({"local", "final", "dynamic", "step", "all"}));
  reg.option(evaluate, "threshold", o.threshold, "Decision threshold")->check(CLI::Range(0.0, 1.0));
  reg.option(evaluate, "radar", o.radar, "Write [0,100]-normalized dynamic metrics here");
  reg.option(evaluate, "csv", o.csv, "Write per-chain metric rows here");
  reg.option(evaluate, "report", o.report, "Report JSON (default stdout)");

  auto* stream = app.add_subcommand("stream", "Score NDJSON step records online");
  need_file(reg.option(stream, "step-probe", o.step_probe, "Step probe"));
  need_file(reg.option(stream, "prefix-probe", o.prefix_probe, "Prefix probe"));
  reg.option(stream, "input", o.input, "NDJSON step records (default stdin)");
  reg.flag(stream, "timing", o.timing, "Add per-step wall time to events");

  std::vector<std::string> args;
  try {
    args = apply_config(raw_args);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  }
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  CLI::App* sub = app.get_subcommands().front();
  const std::string name = sub->get_name();
  try {
    // Conflicts are rejected before touching any file.
    if (name == "evaluate") {
      if (!o.radar.empty() && o.mode != "dynamic" && o.mode != "all") {
        throw UsageError("--radar needs --mode dynamic or all");
      }
      if (!(o.threshold > 0.0 && o.threshold < 1.0)) throw UsageError("--threshold must lie in (0,1)");
    }
    if (name == "synth" && o.plant == "none" && o.plant_count > 0) throw UsageError("--plant-count needs --plant");
    if ((name == "train-step" || name == "train-prefix" || name == "infer") &&
        !(o.train_fraction > 0.0 && o.train_fraction < 1.0)) {
      throw UsageError("--train-fraction must lie in (0,1)");
    }
    if (name == "train-step" || name == "aggregate") scheme_from(o);
    if (name == "train-step" || name == "train-prefix") train_config_from(o);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  }

  spdlog::set_level(spdlog::level::from_str(o.log_level));

  try {
    std::string sidecar = o.sidecar;
    if (sidecar.empty()) {
      if (name == "synth") sidecar = (fs::path(o.out) / "synth.config.json").string();
      else if (name == "evaluate" && !o.report.empty() && o.report != "-") sidecar = o.report + ".config.json";
      else if (name == "validate" && !o.report.empty()) sidecar = o.report + ".config.json";
      else if (name != "evaluate" && name != "validate" && !o.out.empty() && o.out != "-") sidecar = o.out + ".config.json";
    }

    int code = kOk;
    if (name == "synth") code = cmd_synth(o, out);
    else if (name == "validate") code = cmd_validate(o, out);
    else if (name == "aggregate") code = cmd_aggregate(o, out);
    else if (name == "train-step") code = cmd_train_step(o, out);
    else if (name == "train-prefix") code = cmd_train_prefix(o, out);
    else if (name == "infer") code = cmd_infer(o, out);
    else if (name == "evaluate") code = cmd_evaluate(o, out);
    else if (name == "stream") code = cmd_stream(o, in, out);

    if (!sidecar.empty()) {
      json s;
      s["tool_version"] = kToolVersion;
      s["subcommand"] = name;
      s["options"] = reg.effective(&app, sub);
      write_text(sidecar, s.dump(2) + "\n");
    }
    return code;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return exit_code_for(e);
  } catch (const json::exception& e) {
    err << "error: malformed JSON: " << e.what() << '\n';
    return kDataError;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return kDataError;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << '\n';
    return kInternal;
  }
}

int run(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  return run(args, std::cin, std::cout, std::cerr);
}

}  // namespace cotwatch::cli
