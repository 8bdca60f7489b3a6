#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>
#include <openssl/evp.h>

#include <json.hpp>

#include "cotwatch/cli.hpp"
#include "cotwatch/trajectory.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result cli(std::vector<std::string> args, const std::string& stdin_text = "") {
  args.insert(args.begin(), "cotwatch");
  std::istringstream in(stdin_text);
  std::ostringstream out, err;
  const int code = cotwatch::cli::run(args, in, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

std::vector<json> ndjson(const std::string& text) {
  std::vector<json> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(json::parse(line));
  }
  return out;
}

std::string base64(const std::vector<float>& v) {
  std::string raw(v.size() * 4, '\0');
  for (std::size_t i = 0; i < v.size(); ++i) {
    std::uint32_t u;
    std::memcpy(&u, &v[i], 4);
    for (int b = 0; b < 4; ++b) raw[4 * i + b] = static_cast<char>((u >> (8 * b)) & 0xff);
  }
  std::string enc(4 * ((raw.size() + 2) / 3) + 1, '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(enc.data()),
                                reinterpret_cast<const unsigned char*>(raw.data()), static_cast<int>(raw.size()));
  enc.resize(static_cast<std::size_t>(n));
  return enc;
}

// synth -> train-step -> train-prefix, shared by several tests.
struct Pipeline {
  fs::path dir, data, step, prefix;
};

const Pipeline& pipeline() {
  static const Pipeline p = [] {
    Pipeline q;
    q.dir = testutil::temp_dir("cli_pipeline");
    q.data = q.dir / "data";
    q.step = q.dir / "step.json";
    q.prefix = q.dir / "prefix.json";
    auto r = cli({"synth", "--chains", "60", "--dim", "6", "--seed", "3", "--out", q.data.string()});
    EXPECT_EQ(r.code, 0) << r.err;
    r = cli({"train-step", "--data", q.data.string(), "--lr", "0.05", "--epochs", "5", "--out", q.step.string()});
    EXPECT_EQ(r.code, 0) << r.err;
    r = cli({"train-prefix", "--data", q.data.string(), "--step-probe", q.step.string(), "--lr", "0.05", "--epochs",
             "5", "--out", q.prefix.string()});
    EXPECT_EQ(r.code, 0) << r.err;
    return q;
  }();
  return p;
}

}  // namespace

TEST(Cli, VersionAndHelp) {
  auto r = cli({"--version"});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("cotwatch 0.1.0"), std::string::npos);
  EXPECT_NE(r.out.find("kernels "), std::string::npos);
  r = cli({"--help"});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("train-prefix"), std::string::npos);
}

TEST(Cli, UsageErrors) {
  EXPECT_EQ(cli({}).code, 2);
  EXPECT_EQ(cli({"synth", "--bogus", "1", "--out", "x"}).code, 2);
  EXPECT_EQ(cli({"validate"}).code, 2);
  EXPECT_EQ(cli({"frobnicate"}).code, 2);
  EXPECT_EQ(cli({"synth", "--plant", "nonsense", "--out", "x"}).code, 2);

  const auto dir = testutil::temp_dir("cli_usage");
  const auto radar = dir / "radar.json";
  auto r = cli({"evaluate", "--scores", (dir / "missing.ndjson").string(), "--mode", "local", "--radar", radar.string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("--radar"), std::string::npos);
  EXPECT_FALSE(fs::exists(radar));

  r = cli({"synth", "--plant-count", "2", "--out", (dir / "d").string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_FALSE(fs::exists(dir / "d"));

  EXPECT_EQ(cli({"train-step", "--data", "x", "--scheme", "nope", "--out", "y"}).code, 2);
  EXPECT_EQ(cli({"train-step", "--data", "x", "--lr", "-1", "--out", "y"}).code, 2);
  EXPECT_EQ(cli({"train-step", "--data", "x", "--train-fraction", "1.5", "--out", "y"}).code, 2);
  EXPECT_EQ(cli({"evaluate", "--scores", "x", "--threshold", "1"}).code, 2);
}

TEST(Cli, FullPipelineWithSidecars) {
  const auto& p = pipeline();
  EXPECT_TRUE(fs::exists(p.data / "manifest.jsonl"));
  EXPECT_TRUE(fs::exists(p.data / "synth.config.json"));
  EXPECT_TRUE(fs::exists(p.dir / "step.json.config.json"));

  const auto report = p.dir / "validate.json";
  auto r = cli({"validate", "--data", p.data.string(), "--report", report.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto summary = json::parse(r.out);
  EXPECT_EQ(summary["total"], 60);
  EXPECT_EQ(summary["accepted"], 60);
  EXPECT_EQ(json::parse(slurp(report))["trajectories"].size(), 60u);

  const auto scores = p.dir / "scores.ndjson";
  r = cli({"infer", "--data", p.data.string(), "--step-probe", p.step.string(), "--prefix-probe", p.prefix.string(),
           "--subset", "all", "--out", scores.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(ndjson(slurp(scores)).size(), 60u);

  r = cli({"infer", "--data", p.data.string(), "--step-probe", p.step.string(), "--prefix-probe", p.prefix.string()});
  ASSERT_EQ(r.code, 0);
  EXPECT_EQ(ndjson(r.out).size(), 12u);  // default eval subset, 20%

  const auto eval = p.dir / "eval.json", radar = p.dir / "radar.json", csv = p.dir / "chains.csv";
  r = cli({"evaluate", "--scores", scores.string(), "--mode", "all", "--radar", radar.string(), "--csv", csv.string(),
           "--report", eval.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rep = json::parse(slurp(eval));
  for (const char* k : {"step", "local", "final", "dynamic"}) EXPECT_TRUE(rep.contains(k)) << k;
  EXPECT_GT(rep["local"]["auc"].get<double>(), 0.8);
  EXPECT_EQ(json::parse(slurp(radar))["metrics"].size(), 8u);
  const std::string rows = slurp(csv);
  EXPECT_EQ(std::count(rows.begin(), rows.end(), '\n'), 61);
  EXPECT_TRUE(fs::exists(p.dir / "eval.json.config.json"));

  r = cli({"aggregate", "--data", p.data.string(), "--scheme", "global_exp"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto reps = ndjson(r.out);
  EXPECT_FALSE(reps.empty());
  EXPECT_EQ(reps[0]["vector"].size(), 6u);
}

TEST(Cli, DataErrors) {
  const auto& p = pipeline();
  const auto dir = testutil::temp_dir("cli_corrupt");
  fs::copy(p.data, dir / "data", fs::copy_options::recursive);
  const auto victim = dir / "data" / "hsb" / "000002_synth-000002.hsb";
  fs::resize_file(victim, fs::file_size(victim) - 3);
  auto r = cli({"validate", "--data", (dir / "data").string()});
  EXPECT_EQ(r.code, 3);
  EXPECT_FALSE(r.err.empty());
  r = cli({"train-step", "--data", (dir / "data").string(), "--out", (dir / "p.json").string()});
  EXPECT_EQ(r.code, 3);
  EXPECT_FALSE(fs::exists(dir / "p.json"));

  EXPECT_EQ(cli({"validate", "--data", (dir / "nowhere").string()}).code, 3);

  // a prefix probe paired with the wrong step probe
  const auto other = dir / "other_step.json";
  ASSERT_EQ(cli({"train-step", "--data", p.data.string(), "--scheme", "step_mean", "--epochs", "1", "--out",
                 other.string()})
                .code,
            0);
  r = cli({"infer", "--data", p.data.string(), "--step-probe", other.string(), "--prefix-probe", p.prefix.string()});
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("IncompatibleProbe"), std::string::npos);
}

TEST(Cli, StrictValidationExitCode) {
  const auto dir = testutil::temp_dir("cli_strict");
  const auto data = dir / "data";
  auto r = cli({"synth", "--chains", "30", "--dim", "4", "--plant", "terminal", "--plant-count", "4", "--out",
                data.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(json::parse(r.out)["planted"].size(), 4u);

  r = cli({"validate", "--data", data.string()});
  EXPECT_EQ(r.code, 0);
  EXPECT_EQ(json::parse(r.out)["rejected"], 4);
  r = cli({"validate", "--data", data.string(), "--strict"});
  EXPECT_EQ(r.code, 4);
}

TEST(Cli, ConfigFileOverridesFlags) {
  const auto dir = testutil::temp_dir("cli_config");
  const auto cfg = dir / "cfg.json";
  std::ofstream(cfg) << R"({"subcommand": "synth", "options": {"chains": 7, "dim": 3}})";
  auto r = cli({"--config", cfg.string(), "--chains", "3", "--out", (dir / "d").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(json::parse(r.out)["chains"], 7);
  const auto ds = cotwatch::read_dataset(dir / "d" / "manifest.jsonl");
  EXPECT_EQ(ds.trajectories.size(), 7u);
  EXPECT_EQ(ds.trajectories[0].hidden_dim, 3u);

  std::ofstream(dir / "bad.json") << "[1, 2";
  EXPECT_EQ(cli({"--config", (dir / "bad.json").string(), "synth", "--out", "x"}).code, 2);
}

TEST(Cli, SidecarRerunIsByteIdentical) {
  const auto& p = pipeline();
  const auto dir = testutil::temp_dir("cli_rerun");
  const auto probe = dir / "step.json";
  auto r = cli({"train-step", "--data", p.data.string(), "--scheme", "global_linear", "--epochs", "3", "--seed", "8",
                "--out", probe.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const std::string first = slurp(probe);
  const auto sidecar = json::parse(slurp(dir / "step.json.config.json"));
  EXPECT_EQ(sidecar["subcommand"], "train-step");
  EXPECT_EQ(sidecar["options"]["scheme"], "global_linear");
  EXPECT_EQ(sidecar["options"]["seed"], 8);

  fs::copy_file(dir / "step.json.config.json", dir / "saved.json");
  fs::remove(probe);
  r = cli({"--config", (dir / "saved.json").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(slurp(probe), first);
  EXPECT_EQ(slurp(dir / "step.json.config.json"), slurp(dir / "saved.json"));

  const auto d1 = dir / "s1";
  ASSERT_EQ(cli({"synth", "--chains", "9", "--seed", "4", "--out", d1.string()}).code, 0);
  const std::string manifest = slurp(d1 / "manifest.jsonl");
  const std::string block = slurp(d1 / "hsb" / "000004_synth-000004.hsb");
  fs::copy_file(d1 / "synth.config.json", dir / "synth_saved.json");
  fs::remove_all(d1);
  ASSERT_EQ(cli({"--config", (dir / "synth_saved.json").string()}).code, 0);
  EXPECT_EQ(slurp(d1 / "manifest.jsonl"), manifest);
  EXPECT_EQ(slurp(d1 / "hsb" / "000004_synth-000004.hsb"), block);
}

TEST(Cli, StreamMatchesInfer) {
  const auto& p = pipeline();
  const auto ds = cotwatch::read_dataset(p.data / "manifest.jsonl");
  const auto& tr = ds.trajectories[5];
  std::string input;
  for (const auto& s : tr.steps) {
    json rec;
    rec["hidden_states"] = base64({s.hidden_states.data().begin(), s.hidden_states.data().end()});
    rec["num_tokens"] = s.num_tokens();
    if (s.token_probs) rec["token_probs"] = *s.token_probs;
    input += rec.dump() + "\n\n";
  }
  auto r = cli({"stream", "--step-probe", p.step.string(), "--prefix-probe", p.prefix.string()}, input);
  ASSERT_EQ(r.code, 0) << r.err;
  const auto events = ndjson(r.out);

  auto inf = cli({"infer", "--data", p.data.string(), "--step-probe", p.step.string(), "--prefix-probe",
                  p.prefix.string(), "--subset", "all"});
  ASSERT_EQ(inf.code, 0);
  json offline;
  for (const auto& j : ndjson(inf.out)) {
    if (j["id"] == tr.id) offline = j;
  }
  ASSERT_FALSE(offline.is_null());

  std::size_t scores = 0;
  for (const auto& e : events) {
    if (e["event"] != "score") continue;
    const std::size_t t = e["t"].get<std::size_t>();
    EXPECT_EQ(e["c_prefix"].get<double>(), offline["c_prefix"][t - 1].get<double>());
    EXPECT_EQ(e["c_step"].get<double>(), offline["c_step"][t - 1].get<double>());
    ++scores;
  }
  EXPECT_EQ(scores, tr.steps.size());
  EXPECT_EQ(events.back()["event"], "final");
  EXPECT_EQ(events.back()["steps"], tr.steps.size());

  r = cli({"stream", "--step-probe", p.step.string(), "--prefix-probe", p.prefix.string(), "--timing"},
          input.substr(0, input.find('\n')) + "\n");
  ASSERT_EQ(r.code, 0);
  EXPECT_TRUE(ndjson(r.out)[0].contains("elapsed_us"));

  EXPECT_EQ(cli({"stream", "--step-probe", p.step.string(), "--prefix-probe", p.prefix.string()}, "{oops\n").code, 3);
  EXPECT_EQ(cli({"stream", "--step-probe", p.step.string(), "--prefix-probe", p.prefix.string()},
                R"({"hidden_states": ")" + base64({1.0f, 2.0f, 3.0f}) + "\"}\n")
                .code,
            3);
  EXPECT_EQ(cli({"stream", "--step-probe", p.step.string(), "--prefix-probe", p.prefix.string()}, "").code, 3);
}
