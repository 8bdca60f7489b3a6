#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include <fmt/format.h>
#include <json.hpp>

#include "cotwatch/error.hpp"
#include "cotwatch/rng.hpp"
#include "cotwatch/trajectory.hpp"

namespace cotwatch {
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr char kMagic[4] = {'H', 'S', 'B', '1'};
constexpr std::size_t kHeaderBytes = 16;

void put_u32(std::vector<std::byte>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::byte>((v >> (8 * i)) & 0xffu));
}

std::uint32_t get_u32(std::span<const std::byte> b, std::size_t off) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[off + i]) << (8 * i);
  return v;
}

void put_f32(std::vector<std::byte>& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

std::vector<std::byte> read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoFailure, "cannot open " + p.string());
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(in.tellg());
  in.seekg(0, std::ios::beg);
  std::vector<std::byte> buf(size);
  if (size > 0 && !in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(size))) {
    throw Error(ErrorCode::IoFailure, "short read on " + p.string());
  }
  return buf;
}

void write_file(const fs::path& p, std::span<const std::byte> bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoFailure, "cannot create " + p.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::IoFailure, "write failed on " + p.string());
}

json optional_bit(const std::optional<bool>& v) { return v ? json(*v ? 1 : 0) : json(nullptr); }

std::optional<bool> parse_bit(const json& v, const std::string& where) {
  if (v.is_null()) return std::nullopt;
  if (v.is_number_integer()) {
    const auto i = v.get<long long>();
    if (i == 0 || i == 1) return i == 1;
  }
  throw Error(ErrorCode::MalformedRecord, where + ": expected 0, 1 or null");
}

json to_manifest_record(const Trajectory& traj, const std::string& hidden_ref) {
  json steps = json::array();
  for (const Step& s : traj.steps) {
    steps.push_back({{"num_tokens", s.num_tokens()},
                     {"a_step", optional_bit(s.a_step)},
                     {"a_prefix", optional_bit(s.a_prefix)},
                     {"token_probs", s.token_probs ? json(*s.token_probs) : json(nullptr)}});
  }
  return {{"id", traj.id},
          {"layer", traj.layer_index},
          {"hidden_dim", traj.hidden_dim},
          {"final_correct", optional_bit(traj.final_correct)},
          {"hidden_ref", hidden_ref},
          {"steps", std::move(steps)}};
}

template <typename T>
T require(const json& obj, const char* key, const std::string& where) {
  if (!obj.contains(key)) throw Error(ErrorCode::MalformedRecord, where + ": missing '" + key + "'");
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception& e) {
    throw Error(ErrorCode::MalformedRecord, where + ": bad '" + key + "': " + e.what());
  }
}

std::size_t require_count(const json& obj, const char* key, const std::string& where) {
  if (!obj.contains(key) || !obj.at(key).is_number_integer() || obj.at(key).get<long long>() < 0) {
    throw Error(ErrorCode::MalformedRecord, where + ": '" + key + "' must be a non-negative integer");
  }
  return obj.at(key).get<std::size_t>();
}

Trajectory parse_record(const json& rec, const fs::path& base_dir, const std::string& where) {
  if (!rec.is_object()) throw Error(ErrorCode::MalformedRecord, where + ": not an object");
  Trajectory traj;
  traj.id = require<std::string>(rec, "id", where);
  traj.layer_index = require_count(rec, "layer", where);
  traj.hidden_dim = require_count(rec, "hidden_dim", where);
  if (!rec.contains("final_correct")) {
    throw Error(ErrorCode::MalformedRecord, where + ": missing 'final_correct'");
  }
  traj.final_correct = parse_bit(rec.at("final_correct"), where + " final_correct");
  const auto hidden_ref = require<std::string>(rec, "hidden_ref", where);
  if (!rec.contains("steps") || !rec.at("steps").is_array()) {
    throw Error(ErrorCode::MalformedRecord, where + ": 'steps' must be an array");
  }

  std::vector<std::size_t> counts;
  std::vector<Step> steps;
  for (std::size_t t = 0; t < rec.at("steps").size(); ++t) {
    const json& js = rec.at("steps")[t];
    const std::string swhere = fmt::format("{} step {}", where, t + 1);
    if (!js.is_object()) throw Error(ErrorCode::MalformedRecord, swhere + ": not an object");
    counts.push_back(require_count(js, "num_tokens", swhere));
    Step s;
    s.a_step = parse_bit(js.value("a_step", json(nullptr)), swhere + " a_step");
    s.a_prefix = parse_bit(js.value("a_prefix", json(nullptr)), swhere + " a_prefix");
    const json probs = js.value("token_probs", json(nullptr));
    if (!probs.is_null()) {
      if (!probs.is_array()) throw Error(ErrorCode::MalformedRecord, swhere + ": token_probs");
      std::vector<double> p;
      for (const json& v : probs) {
        if (!v.is_number()) throw Error(ErrorCode::MalformedRecord, swhere + ": token_probs entry");
        p.push_back(v.get<double>());
      }
      s.token_probs = std::move(p);
    }
    steps.push_back(std::move(s));
  }

  const auto bytes = read_file(base_dir / hidden_ref);
  auto [d, data] = decode_hsb(bytes);
  if (d != traj.hidden_dim) {
    throw Error(ErrorCode::HeaderMismatch,
                fmt::format("{}: block d={} but manifest hidden_dim={}", where, d, traj.hidden_dim));
  }
  const std::size_t declared = std::accumulate(counts.begin(), counts.end(), std::size_t{0});
  const std::size_t rows = d == 0 ? 0 : data.size() / d;
  if (declared != rows) {
    throw Error(ErrorCode::CountMismatch,
                fmt::format("{}: manifest declares {} tokens, block has {}", where, declared, rows));
  }
  std::size_t offset = 0;
  for (std::size_t t = 0; t < steps.size(); ++t) {
    const std::size_t n = counts[t] * d;
    std::vector<float> block(data.begin() + static_cast<std::ptrdiff_t>(offset),
                             data.begin() + static_cast<std::ptrdiff_t>(offset + n));
    steps[t].hidden_states = TokenStates(counts[t], d, std::move(block));
    offset += n;
  }
  traj.steps = std::move(steps);
  check_invariants(traj);
  return traj;
}

std::string sanitize(const std::string& id) {
  std::string out;
  for (char c : id) {
    const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') ||
                    c == '-' || c == '_';
    out.push_back(ok ? c : '_');
  }
  return out.substr(0, 48);
}

}  // namespace

TokenStates::TokenStates(std::size_t rows, std::size_t cols, std::vector<float> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw Error(ErrorCode::CountMismatch,
                fmt::format("token block {}x{} given {} values", rows_, cols_, data_.size()));
  }
}

bool TokenStates::bit_equal(const TokenStates& other) const {
  return rows_ == other.rows_ && cols_ == other.cols_ &&
         (data_.empty() ||
          std::memcmp(data_.data(), other.data_.data(), data_.size() * sizeof(float)) == 0);
}

std::size_t Trajectory::total_tokens() const noexcept {
  std::size_t n = 0;
  for (const Step& s : steps) n += s.num_tokens();
  return n;
}

bool Trajectory::has_step_labels() const noexcept {
  return !steps.empty() &&
         std::all_of(steps.begin(), steps.end(), [](const Step& s) { return s.a_step.has_value(); });
}

bool Trajectory::has_prefix_labels() const noexcept {
  return !steps.empty() &&
         std::all_of(steps.begin(), steps.end(), [](const Step& s) { return s.a_prefix.has_value(); });
}

void check_invariants(const Step& step, std::size_t hidden_dim) {
  if (step.num_tokens() == 0) throw Error(ErrorCode::EmptyStep, "step has no tokens");
  if (step.hidden_states.cols() != hidden_dim) {
    throw Error(ErrorCode::DimMismatch, fmt::format("step states have d={}, expected {}",
                                                    step.hidden_states.cols(), hidden_dim));
  }
  for (float v : step.hidden_states.data()) {
    if (!std::isfinite(v)) throw Error(ErrorCode::NonFinite, "hidden state contains NaN/Inf");
  }
  if (step.token_probs) {
    if (step.token_probs->size() != step.num_tokens()) {
      throw Error(ErrorCode::MalformedRecord,
                  fmt::format("token_probs has {} entries for {} tokens", step.token_probs->size(),
                              step.num_tokens()));
    }
    for (double p : *step.token_probs) {
      if (!(p > 0.0 && p <= 1.0)) {
        throw Error(ErrorCode::MalformedRecord, fmt::format("token probability {} outside (0,1]", p));
      }
    }
  }
}

void check_invariants(const Trajectory& traj) {
  const std::string where = "trajectory '" + traj.id + "'";
  if (traj.steps.empty()) throw Error(ErrorCode::EmptyStep, where + " has no steps");
  if (traj.hidden_dim == 0) throw Error(ErrorCode::MalformedRecord, where + " has hidden_dim 0");
  try {
    for (const Step& s : traj.steps) check_invariants(s, traj.hidden_dim);
  } catch (const Error& e) {
    throw Error(e.code(), where + ": " + e.detail());
  }
  const auto labeled = std::count_if(traj.steps.begin(), traj.steps.end(),
                                     [](const Step& s) { return s.a_prefix.has_value(); });
  if (labeled != 0 && static_cast<std::size_t>(labeled) != traj.steps.size()) {
    throw Error(ErrorCode::MalformedRecord, where + ": prefix labels must be all present or all absent");
  }
}

void check_invariants(const Dataset& ds) {
  for (const Trajectory& t : ds.trajectories) check_invariants(t);
  for (const Trajectory& t : ds.trajectories) {
    const Trajectory& first = ds.trajectories.front();
    if (t.hidden_dim != first.hidden_dim || t.layer_index != first.layer_index) {
      throw Error(ErrorCode::MalformedRecord,
                  fmt::format("trajectory '{}' has (d={}, layer={}) but dataset has (d={}, layer={})",
                              t.id, t.hidden_dim, t.layer_index, first.hidden_dim, first.layer_index));
    }
  }
}

bool equal(const Trajectory& a, const Trajectory& b) {
  if (a.id != b.id || a.final_correct != b.final_correct || a.hidden_dim != b.hidden_dim ||
      a.layer_index != b.layer_index || a.steps.size() != b.steps.size()) {
    return false;
  }
  for (std::size_t t = 0; t < a.steps.size(); ++t) {
    const Step& x = a.steps[t];
    const Step& y = b.steps[t];
    if (x.a_step != y.a_step || x.a_prefix != y.a_prefix || x.token_probs.has_value() != y.token_probs.has_value()) {
      return false;
    }
    if (x.token_probs &&
        (x.token_probs->size() != y.token_probs->size() ||
         std::memcmp(x.token_probs->data(), y.token_probs->data(), x.token_probs->size() * sizeof(double)) != 0)) {
      return false;
    }
    if (!x.hidden_states.bit_equal(y.hidden_states)) return false;
  }
  return true;
}

bool equal(const Dataset& a, const Dataset& b) {
  if (a.split_seed != b.split_seed || a.trajectories.size() != b.trajectories.size()) return false;
  for (std::size_t i = 0; i < a.trajectories.size(); ++i) {
    if (!equal(a.trajectories[i], b.trajectories[i])) return false;
  }
  return true;
}

std::vector<std::byte> encode_hsb(const Trajectory& traj) {
  const std::size_t tokens = traj.total_tokens();
  std::vector<std::byte> out;
  out.reserve(kHeaderBytes + tokens * traj.hidden_dim * 4);
  for (char c : kMagic) out.push_back(static_cast<std::byte>(c));
  put_u32(out, kHsbVersion);
  put_u32(out, static_cast<std::uint32_t>(traj.hidden_dim));
  put_u32(out, static_cast<std::uint32_t>(tokens));
  for (const Step& s : traj.steps) {
    for (float f : s.hidden_states.data()) put_f32(out, f);
  }
  return out;
}

std::pair<std::size_t, std::vector<float>> decode_hsb(std::span<const std::byte> bytes) {
  if (bytes.size() < kHeaderBytes) throw Error(ErrorCode::HeaderMismatch, "block shorter than header");
  for (int i = 0; i < 4; ++i) {
    if (bytes[i] != static_cast<std::byte>(kMagic[i])) throw Error(ErrorCode::HeaderMismatch, "bad magic");
  }
  const std::uint32_t version = get_u32(bytes, 4);
  if (version != kHsbVersion) {
    throw Error(ErrorCode::HeaderMismatch, fmt::format("unsupported block version {}", version));
  }
  const std::size_t d = get_u32(bytes, 8);
  const std::size_t count = get_u32(bytes, 12);
  const std::size_t payload = bytes.size() - kHeaderBytes;
  if (payload != count * d * 4) {
    throw Error(ErrorCode::CountMismatch,
                fmt::format("header declares {} x {} floats, payload has {} bytes", count, d, payload));
  }
  std::vector<float> data(count * d);
  for (std::size_t i = 0; i < data.size(); ++i) {
    data[i] = std::bit_cast<float>(get_u32(bytes, kHeaderBytes + 4 * i));
    if (!std::isfinite(data[i])) throw Error(ErrorCode::NonFinite, "hidden state contains NaN/Inf");
  }
  return {d, std::move(data)};
}

Dataset read_dataset(const fs::path& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw Error(ErrorCode::IoFailure, "cannot open manifest " + manifest_path.string());
  const fs::path base = manifest_path.parent_path();
  Dataset ds;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = fmt::format("{}:{}", manifest_path.filename().string(), lineno);
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::parse_error& e) {
      throw Error(ErrorCode::MalformedRecord, where + ": " + e.what());
    }
    ds.trajectories.push_back(parse_record(rec, base, where));
  }
  const fs::path meta = base / "dataset.json";
  if (fs::exists(meta)) {
    std::ifstream min(meta);
    try {
      ds.split_seed = json::parse(min).value("split_seed", std::uint64_t{0});
    } catch (const json::exception& e) {
      throw Error(ErrorCode::MalformedRecord, "dataset.json: " + std::string(e.what()));
    }
  }
  check_invariants(ds);
  return ds;
}

fs::path write_dataset(const Dataset& ds, const fs::path& out_dir) {
  check_invariants(ds);
  std::error_code ec;
  fs::create_directories(out_dir / "hsb", ec);
  if (ec) throw Error(ErrorCode::IoFailure, "cannot create " + out_dir.string() + ": " + ec.message());

  const fs::path manifest = out_dir / "manifest.jsonl";
  std::ofstream out(manifest, std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoFailure, "cannot create " + manifest.string());
  for (std::size_t i = 0; i < ds.trajectories.size(); ++i) {
    const Trajectory& traj = ds.trajectories[i];
    const std::string ref = fmt::format("hsb/{:06d}_{}.hsb", i, sanitize(traj.id));
    write_file(out_dir / ref, encode_hsb(traj));
    out << to_manifest_record(traj, ref).dump() << '\n';
  }
  if (!out) throw Error(ErrorCode::IoFailure, "write failed on " + manifest.string());

  std::ofstream meta(out_dir / "dataset.json", std::ios::trunc);
  meta << json{{"manifest_version", kManifestVersion}, {"split_seed", ds.split_seed}}.dump() << '\n';
  if (!meta) throw Error(ErrorCode::IoFailure, "cannot write dataset.json");
  return manifest;
}

std::pair<Dataset, Dataset> train_eval_split(const Dataset& ds, double fraction, std::uint64_t seed) {
  const std::size_t n = ds.trajectories.size();
  if (n < 2) throw Error(ErrorCode::TooFewTrajectories, fmt::format("need >= 2 trajectories, have {}", n));
  if (!(fraction > 0.0 && fraction < 1.0)) {
    throw Error(ErrorCode::InvalidConfig, fmt::format("split fraction {} outside (0,1)", fraction));
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = make_rng(seed, "split");
  // Fisher-Yates with an explicit draw so the permutation does not depend on
  // the standard library's shuffle implementation.
  for (std::size_t i = n - 1; i > 0; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % (i + 1));
    std::swap(order[i], order[j]);
  }
  auto n_train = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
  n_train = std::clamp<std::size_t>(n_train, 1, n - 1);
  std::vector<bool> in_train(n, false);
  for (std::size_t i = 0; i < n_train; ++i) in_train[order[i]] = true;

  Dataset train, eval;
  train.split_seed = eval.split_seed = seed;
  for (std::size_t i = 0; i < n; ++i) {
    (in_train[i] ? train : eval).trajectories.push_back(ds.trajectories[i]);
  }
  return {std::move(train), std::move(eval)};
}

}  // namespace cotwatch
