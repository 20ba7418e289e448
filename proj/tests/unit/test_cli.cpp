#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include "reachplan/cli.hpp"

using namespace reachplan;
namespace fs = std::filesystem;

namespace {

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("reachplan_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string config(const std::string& name, const nlohmann::json& j) {
    const auto p = dir_ / name;
    cli::write_text(p, j.dump());
    return p.string();
  }

  int run(const std::string& cmd, const std::string& cfg, const std::string& out, bool deterministic = true,
          std::string* err_text = nullptr) {
    cli::CommandOptions o;
    o.command = cmd;
    o.config_path = cfg;
    o.out_dir = (dir_ / out).string();
    o.deterministic = deterministic;
    std::ostringstream err;
    const int code = cli::run(o, err);
    if (err_text) *err_text = err.str();
    return code;
  }

  std::string file(const std::string& rel) { return cli::read_text((dir_ / rel).string()); }

  fs::path dir_;
};

}  // namespace

TEST_F(CliTest, SolveGridWritesFieldAndSummary) {
  const auto cfg = config("g.json", {{"system", "particle"}, {"resolution", {9, 9, 9, 9}}});
  ASSERT_EQ(run("solve-grid", cfg, "g"), cli::kOk);
  const auto s = nlohmann::json::parse(file("g/summary.json"));
  EXPECT_EQ(s["system"], "particle");
  EXPECT_LT(s["max_deviation_from_l"].get<double>(), 1e-9);
  EXPECT_EQ(s["runtime_s"].get<double>(), 0.0);
  const auto f = read_field((dir_ / "g/field.bin").string());
  EXPECT_EQ(f.grid.counts(), (std::vector<int>{9, 9, 9, 9}));
}

TEST_F(CliTest, ManifestReplayIsByteIdentical) {
  const auto cfg = config("g.json", {{"system", "air3d"}, {"resolution", {15, 15, 15}}});
  ASSERT_EQ(run("solve-grid", cfg, "a"), cli::kOk);
  ASSERT_EQ(run("solve-grid", (dir_ / "a/manifest.json").string(), "b", false), cli::kOk);
  for (const char* name : {"manifest.json", "field.bin", "summary.json"})
    EXPECT_EQ(file(std::string("a/") + name), file(std::string("b/") + name)) << name;
}

TEST_F(CliTest, MemoryCapIsRefused) {
  std::string err;
  const auto cfg = config("g.json", {{"system", "air3d"}, {"resolution", {41, 41, 41}}, {"memory_cap_mb", 1}});
  EXPECT_EQ(run("solve-grid", cfg, "g", true, &err), cli::kRefused);
  EXPECT_NE(err.find("MiB"), std::string::npos);
  EXPECT_FALSE(fs::exists(dir_ / "g/field.bin"));
}

TEST_F(CliTest, ConfigErrorsExitTwo) {
  cli::write_text(dir_ / "bad.json", "{not json");
  EXPECT_EQ(run("solve-grid", (dir_ / "bad.json").string(), "x"), cli::kConfigError);
  EXPECT_EQ(run("solve-grid", (dir_ / "missing.json").string(), "x"), cli::kConfigError);
  EXPECT_EQ(run("solve-grid", config("c.json", {{"system", "particle"}, {"resolution", {9, 9}}}), "x"), cli::kConfigError);
  EXPECT_EQ(run("solve-grid", config("d.json", {{"system", "boat"}, {"resolution", {9, 9}}}), "x"), cli::kConfigError);
  // manifest from another command
  ASSERT_EQ(run("solve-grid", config("g.json", {{"system", "particle"}, {"resolution", {5, 5, 5, 5}}}), "g"), cli::kOk);
  EXPECT_EQ(run("train", (dir_ / "g/manifest.json").string(), "x"), cli::kConfigError);
}

TEST_F(CliTest, TrainEvalAndPlot) {
  ASSERT_EQ(run("solve-grid", config("g.json", {{"system", "air3d"}, {"resolution", {15, 15, 15}}}), "g"), cli::kOk);
  const nlohmann::json train{{"system", "air3d"},
                             {"field", (dir_ / "g/field.bin").string()},
                             {"seeds", {3, 4}},
                             {"validation_samples", 100},
                             {"report_samples", 200},
                             {"train", {{"sample_budget", 2000}, {"batch_size", 100}, {"variant", "bc_sym"}, {"log_every", 5},
                                        {"arch", {{"hidden_width", 16}, {"hidden_layers", 2}, {"omega0", 30.0}}}}}};
  ASSERT_EQ(run("train", config("t.json", train), "t"), cli::kOk);
  const auto s = nlohmann::json::parse(file("t/summary.json"));
  ASSERT_EQ(s["runs"].size(), 2u);
  EXPECT_EQ(s["variant"], "bc_sym");
  EXPECT_TRUE(fs::exists(dir_ / "t/checkpoint_seed3.bin"));
  EXPECT_NE(file("t/train_log_seed4.csv").find("step,window,loss"), std::string::npos);

  // replay of a training run
  ASSERT_EQ(run("train", (dir_ / "t/manifest.json").string(), "t2"), cli::kOk);
  EXPECT_EQ(file("t/checkpoint_seed3.bin"), file("t2/checkpoint_seed3.bin"));
  EXPECT_EQ(file("t/train_log_seed4.csv"), file("t2/train_log_seed4.csv"));

  // resume continues the step count
  nlohmann::json resume = train;
  resume["seeds"] = {3};
  resume["resume"] = (dir_ / "t/checkpoint_seed3.bin").string();
  resume["train"]["sample_budget"] = 3000;
  ASSERT_EQ(run("train", config("r.json", resume), "r"), cli::kOk);
  const std::string log = file("r/train_log.csv");
  EXPECT_NE(log.find("\n25,"), std::string::npos);

  const nlohmann::json eval{{"field", (dir_ / "g/field.bin").string()}, {"checkpoint", (dir_ / "t/checkpoint_seed3.bin").string()}, {"samples", 300}};
  ASSERT_EQ(run("eval-value", config("e.json", eval), "e"), cli::kOk);
  const std::string csv = file("e/eval.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 2);
  EXPECT_NE(csv.find("air3d,bc_sym,300,"), std::string::npos);

  nlohmann::json zero = eval;
  zero["samples"] = 0;
  EXPECT_EQ(run("eval-value", config("z.json", zero), "z"), cli::kConfigError);
  nlohmann::json truncated = eval;
  cli::write_text(dir_ / "trunc.bin", file("t/checkpoint_seed3.bin").substr(0, 40));
  truncated["checkpoint"] = (dir_ / "trunc.bin").string();
  EXPECT_EQ(run("eval-value", config("tr.json", truncated), "tr"), cli::kConfigError);

  const nlohmann::json plot{{"slice", {{"checkpoint", (dir_ / "t/checkpoint_seed3.bin").string()}, {"dims", {0, 2}}, {"resolution", {4, 3}}}}};
  ASSERT_EQ(run("plot", config("p.json", plot), "p"), cli::kOk);
  const std::string slice = file("p/value_slice.csv");
  EXPECT_EQ(std::count(slice.begin(), slice.end(), '\n'), 5);
  EXPECT_EQ(std::count(slice.begin(), slice.begin() + static_cast<long>(slice.find('\n')), ','), 3);
}

TEST_F(CliTest, BenchWritesMetricsTracesAndReplays) {
  const nlohmann::json bench{{"system", "particle"},
                             {"agent_counts", {2}},
                             {"scenarios", 2},
                             {"traces", true},
                             {"trial", {{"time_limit", 3.0}}}};
  ASSERT_EQ(run("bench", config("b.json", bench), "b"), cli::kOk);
  const std::string metrics = file("b/metrics.csv");
  EXPECT_EQ(std::count(metrics.begin(), metrics.end(), '\n'), 3);
  EXPECT_TRUE(fs::exists(dir_ / "b/traces/nehmo_m2_s0.jsonl"));
  ASSERT_EQ(run("bench", (dir_ / "b/manifest.json").string(), "b2", false), cli::kOk);
  EXPECT_EQ(metrics, file("b2/metrics.csv"));
  EXPECT_EQ(file("b/trials.csv"), file("b2/trials.csv"));
  EXPECT_EQ(file("b/manifest.json"), file("b2/manifest.json"));

  const nlohmann::json plot{{"trace", (dir_ / "b/traces/nehmo_m2_s0.jsonl").string()}};
  ASSERT_EQ(run("plot", config("p.json", plot), "p"), cli::kOk);
  EXPECT_EQ(file("p/agent_1.csv").substr(0, 9), "t,x0,x1\n0");

  EXPECT_EQ(run("bench", config("arm.json", {{"system", "simple_arm"}, {"agent_counts", {2}}}), "x"), cli::kConfigError);
  EXPECT_EQ(run("plot", config("empty.json", nlohmann::json::object()), "x"), cli::kConfigError);
}
