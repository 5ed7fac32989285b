#include <gtest/gtest.h>

#include <cstdlib>
#include <sstream>

#include "rosar/pipeline.hpp"
#include "test_util.hpp"

using namespace rosar;
using nlohmann::json;

namespace {

const fs::path kConfigs = fs::path(ROSAR_SOURCE_DIR) / "configs";

struct CliResult {
  int code;
  std::string out;
  std::string err;
};

CliResult run_cli(const std::string& args, const fs::path& scratch, const std::string& env = {}) {
  const fs::path o = scratch / "stdout.txt", e = scratch / "stderr.txt";
  const std::string cmd = env + " \"" + std::string(ROSAR_CLI_PATH) + "\" " + args + " >\"" + o.string() + "\" 2>\"" +
                          e.string() + "\"";
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, read_file(o), read_file(e)};
}

json smoke_json() { return json::parse(read_file(kConfigs / "smoke.json")); }

std::string config_error(const json& j) {
  try {
    parse_pipeline_config(j);
  } catch (const std::exception& e) {
    return e.what();
  }
  return {};
}

// One smoke pipeline shared by the tests that only read its outputs.
const fs::path& smoke_run() {
  static testutil::TempDir dir;
  static const bool done = [] {
    std::ostringstream log;
    run_pipeline(parse_pipeline_config(smoke_json()), dir / "run", &log);
    return true;
  }();
  (void)done;
  static const fs::path root = dir / "run";
  return root;
}

}  // namespace

TEST(PipelineConfigTest, MissingKeyIsNamed) {
  auto j = smoke_json();
  j["data"].erase("train");
  EXPECT_NE(config_error(j).find("data.train"), std::string::npos) << config_error(j);
  j = smoke_json();
  j.erase("version");
  EXPECT_NE(config_error(j).find("'version'"), std::string::npos);
  j = smoke_json();
  j["data"]["attack"][0].erase("count");
  EXPECT_NE(config_error(j).find("count"), std::string::npos) << config_error(j);
}

TEST(PipelineConfigTest, RejectsBadValues) {
  auto j = smoke_json();
  j["version"] = 99;
  EXPECT_FALSE(config_error(j).empty());
  j = smoke_json();
  j["data"]["train"][0]["variant"] = "bogus";
  EXPECT_FALSE(config_error(j).empty());
  j = smoke_json();
  j["search"]["p1"]["lower"] = 0.5;
  j["search"]["p1"]["upper"] = 0.1;
  EXPECT_FALSE(config_error(j).empty());
  j = smoke_json();
  j["finetune"]["robustness_epoch"] = 7;
  EXPECT_FALSE(config_error(j).empty());
}

TEST(PipelineConfigTest, DefaultsOverridesAndTimeLimits) {
  const auto c = parse_pipeline_config(smoke_json());
  EXPECT_EQ(c.seed, 11u);
  EXPECT_EQ(c.p1.lower, 0.0);
  EXPECT_EQ(c.p1.upper, 0.08);
  EXPECT_EQ(c.p2.lower, 0.6);
  EXPECT_EQ(c.p2.direction, UnsafeDirection::LowEpsUnsafe);
  EXPECT_EQ(c.p1.max_iter, 3);
  EXPECT_EQ(c.iou_threshold, 0.5);
  EXPECT_TRUE(std::isinf(c.attack.time_limit));
  // an environment seed only replaces the default, never an explicit config seed
  EXPECT_EQ(parse_pipeline_config(smoke_json(), 123).seed, 11u);
  auto unseeded = smoke_json();
  unseeded.erase("seed");
  EXPECT_EQ(parse_pipeline_config(unseeded, 123).seed, 123u);
  EXPECT_EQ(parse_pipeline_config(unseeded).seed, 7u);
  for (const json& t : {json(nullptr), json(0), json(-3), json("inf")}) {
    auto j = smoke_json();
    j["attack"]["time_limit"] = t;
    EXPECT_TRUE(std::isinf(parse_pipeline_config(j).attack.time_limit)) << t;
  }
  auto j = smoke_json();
  j["attack"]["time_limit"] = 2.5;
  EXPECT_EQ(parse_pipeline_config(j).attack.time_limit, 2.5);
}

TEST(PipelineTest, SmokeRunProducesCompleteReport) {
  const auto& root = smoke_run();
  const auto summary = json::parse(read_file(root / "report" / "summary.json"));
  EXPECT_EQ(summary.at("schema_version"), kReportSchemaVersion);
  for (const char* prop : {"p1", "p2"}) {
    ASSERT_TRUE(summary.at("robustness").contains(prop)) << prop;
    EXPECT_TRUE(summary.at("robustness").at(prop).contains("original")) << prop;
  }
  EXPECT_TRUE(summary.at("eval").contains("original"));
  EXPECT_TRUE(summary.at("extra").contains("patch_transfer"));

  const std::string csv = read_file(root / "report" / "robustness.csv");
  std::size_t rows = std::count(csv.begin(), csv.end(), '\n') - 1;
  std::size_t records = 0;
  for (const auto& dir : fs::recursive_directory_iterator(root / "search"))
    if (dir.path().filename() == "records.jsonl") records += read_records(dir.path()).size();
  EXPECT_EQ(rows, records);

  for (const auto& dir : fs::recursive_directory_iterator(root)) {
    if (dir.path().filename() != "run_manifest.json") continue;
    const auto m = json::parse(read_file(dir.path()));
    for (const char* key : {"subcommand", "parameters", "inputs", "outputs", "seeds", "wall_clock_seconds", "tool_version"})
      EXPECT_TRUE(m.contains(key)) << dir.path() << " " << key;
    for (const auto& out : m.at("outputs")) EXPECT_TRUE(output_parses(out.get<std::string>())) << out;
  }
}

TEST(PipelineTest, EveryCounterExampleReplays) {
  const auto& root = smoke_run();
  std::size_t total = 0;
  for (const auto& dir : fs::recursive_directory_iterator(root / "search")) {
    if (dir.path().filename() != "records.jsonl") continue;
    for (const auto& r : read_records(dir.path())) {
      const auto model = load_model(root / "models" / r.model_id / "weights.bin");
      for (const auto& rel : r.ce_paths) {
        const auto ce = load_counterexample(dir.path().parent_path() / rel);
        const auto rep = replay(model, ce);
        EXPECT_TRUE(rep.in_region) << rel;
        EXPECT_TRUE(rep.violates) << rel;
        ++total;
      }
    }
  }
  EXPECT_GT(total, 0u);
}

TEST(PipelineTest, RerunSkipsEveryStageAndStageResumes) {
  testutil::TempDir dir;
  const auto cfg = parse_pipeline_config(smoke_json());
  std::ostringstream log;
  const auto first = run_pipeline(cfg, dir / "run", &log);
  const std::string csv = read_file(dir / "run/report/robustness.csv");
  const auto again = run_pipeline(cfg, dir / "run", &log);
  ASSERT_EQ(again.size(), first.size());
  for (const auto& s : again) EXPECT_TRUE(s.skipped) << s.name;
  for (const auto& s : first) EXPECT_FALSE(s.skipped) << s.name;

  fs::remove(run_manifest_path(dir / "run/report"));
  const auto third = run_pipeline(cfg, dir / "run", &log);
  for (const auto& s : third) EXPECT_EQ(s.skipped, s.name != "report") << s.name;
  EXPECT_EQ(read_file(dir / "run/report/robustness.csv"), csv);
}

TEST(PipelineTest, SameConfigGivesIdenticalCsv) {
  testutil::TempDir dir;
  std::ostringstream log;
  const auto cfg = parse_pipeline_config(smoke_json());
  run_pipeline(cfg, dir / "b", &log);
  EXPECT_EQ(read_file(dir / "b/report/robustness.csv"), read_file(smoke_run() / "report/robustness.csv"));
}

TEST(CliTest, GenDataCountAndDeterminism) {
  testutil::TempDir dir;
  const auto a = run_cli("gen-data --variant noisy --count 3 --seed 5 --out \"" + (dir / "a").string() + "\"", dir.path());
  ASSERT_EQ(a.code, 0) << a.err;
  const auto b = run_cli("gen-data --variant noisy --count 3 --seed 5 --out \"" + (dir / "b").string() + "\"", dir.path());
  ASSERT_EQ(b.code, 0) << b.err;
  const auto m = read_dataset(dir / "a");
  ASSERT_EQ(m.entries.size(), 3u);
  for (const auto& e : m.entries) {
    EXPECT_EQ(read_file(dir / "a" / e.image), read_file(dir / "b" / e.image));
    EXPECT_EQ(read_file(dir / "a" / e.labels), read_file(dir / "b" / e.labels));
  }
  const auto man = json::parse(read_file(dir / "a/run_manifest.json"));
  EXPECT_EQ(man.at("subcommand"), "gen-data");
  EXPECT_EQ(man.at("seeds").at("seed"), 5);
}

TEST(CliTest, EnvironmentSeedIsUsed) {
  testutil::TempDir dir;
  const auto r = run_cli("gen-data --variant clean --count 1 --out \"" + (dir / "e").string() + "\"", dir.path(),
                         "ROSAR_SEED=99");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(read_dataset(dir / "e").seed, 99u);
  const auto bad = run_cli("gen-data --variant clean --count 1 --out \"" + (dir / "f").string() + "\"", dir.path(),
                           "ROSAR_SEED=abc");
  EXPECT_NE(bad.code, 0);
  EXPECT_NE(bad.err.find("ROSAR_SEED"), std::string::npos) << bad.err;
}

TEST(CliTest, InvalidArgumentsExitNonZeroAndNameTheFlag) {
  testutil::TempDir dir;
  const auto r = run_cli("gen-data --variant bogus --out \"" + (dir / "x").string() + "\"", dir.path());
  EXPECT_NE(r.code, 0);
  EXPECT_NE((r.out + r.err).find("--variant"), std::string::npos) << r.err;
  EXPECT_FALSE(fs::exists(dir / "x" / "manifest.json"));
  const auto t = run_cli("bound-search --model nope --data nope", dir.path());
  EXPECT_NE(t.code, 0);
  const auto u = run_cli("evaluate", dir.path());
  EXPECT_NE(u.code, 0);
  EXPECT_NE((u.out + u.err).find("--model"), std::string::npos) << u.err;
}

TEST(CliTest, PipelineConfigErrorNamesKey) {
  testutil::TempDir dir;
  auto j = smoke_json();
  j["data"].erase("attack");
  write_file_atomic(dir / "cfg.json", j.dump());
  const auto r = run_cli("pipeline --config \"" + (dir / "cfg.json").string() + "\" --out \"" + (dir / "run").string() + "\"",
                         dir.path());
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.err.find("data.attack"), std::string::npos) << r.err;
}

TEST(CliTest, TrainEvaluateChain) {
  testutil::TempDir dir;
  const std::string d = (dir / "data").string(), m = (dir / "model").string(), e = (dir / "eval").string();
  ASSERT_EQ(run_cli("gen-data --variant clean --count 4 --seed 2 --out \"" + d + "\"", dir.path()).code, 0);
  const auto t = run_cli("train --data \"" + d + "\" --epochs 2 --seed 3 --out \"" + m + "\"", dir.path());
  ASSERT_EQ(t.code, 0) << t.err;
  EXPECT_EQ(json::parse(read_file(dir / "model/train_log.json")).size(), 2u);
  const auto ev = run_cli("evaluate --model \"" + m + "/weights.bin\" --data \"" + d + "\" --out \"" + e + "\"", dir.path());
  ASSERT_EQ(ev.code, 0) << ev.err;
  const auto rep = json::parse(read_file(dir / "eval/eval.json"));
  EXPECT_EQ(rep.at("iou_threshold"), 0.5);
  EXPECT_GE(rep.at("tp_percent").get<double>(), 0.0);
  EXPECT_LE(rep.at("ap").get<double>(), 1.0);
  // weights are reproducible from the same inputs
  const auto t2 = run_cli("train --data \"" + d + "\" --epochs 2 --seed 3 --out \"" + (dir / "model2").string() + "\"",
                          dir.path());
  ASSERT_EQ(t2.code, 0);
  EXPECT_EQ(read_file(dir / "model/weights.bin"), read_file(dir / "model2/weights.bin"));
}
