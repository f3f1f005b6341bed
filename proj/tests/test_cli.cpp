#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <sstream>

#include "cli.hpp"
#include "fixtures.hpp"
#include "json.hpp"
#include "seqcal/metrics.hpp"
#include "seqcal/recalibrate.hpp"
#include "seqcal/toybench.hpp"

namespace seqcal {
namespace {

using nlohmann::json;
using testing::TempDir;

struct Outcome {
  int code;
  std::string out;
  std::string err;
};

Outcome run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

json read_json(const std::string& path) { return json::parse(testing::slurp(path)); }

void write_two_records(const std::string& path) {
  testing::spit(path,
                R"({"seq_id":"p1","t":1,"vocab_size":3,"eos_id":2,"gold_id":0,"entries":[[0,0.4],[1,0.1],[2,0.5]],"rest_mass":0})"
                "\n"
                R"({"seq_id":"p2","t":1,"vocab_size":3,"eos_id":2,"gold_id":0,"entries":[[1,0.5],[2,0.5]],"rest_mass":0})"
                "\n");
}

TEST(Cli, StatsOnTwoRecordFile) {
  TempDir dir("cli");
  write_two_records(dir.file("two.jsonl"));
  const auto r = run({"--out", dir.file("rep"), "stats", "--logs", dir.file("two.jsonl"), "--bins",
                      "10", "--weighted"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(std::count(r.out.begin(), r.out.end(), '\n'), 1);
  const auto e = read_json(dir.file("rep/ece.json"));
  EXPECT_EQ(e["metric"], "ece");
  EXPECT_NEAR(e["score"].get<double>(), 0.5, 1e-12);
  EXPECT_EQ(e["bins"].size(), 10u);
  const auto w = read_json(dir.file("rep/weighted_ece.json"));
  const auto recs = read_log_file(dir.file("two.jsonl"));
  EXPECT_EQ(w["score"].get<double>(), weighted_ece(recs, BinningConfig{10}).score);
  EXPECT_NEAR(w["score"].get<double>(), 0.5, 1e-12);
  const std::string csv = testing::slurp(dir.file("rep/ece.csv"));
  EXPECT_EQ(csv.rfind("bin_lo,bin_hi,mass,avg_confidence,avg_accuracy\n", 0), 0u);
}

TEST(Cli, StatsPartitions) {
  TempDir dir("cli");
  const auto task = default_task(2);
  write_log_file(dir.file("logs.jsonl"), flatten(emit_logs(*build_true_model(task), task, 100, 2)));
  for (const std::string spec : {"eos", "entropy:1.0", "token:3"}) {
    const auto r = run({"--out", dir.file(spec.substr(0, 3)), "stats", "--logs", dir.file("logs.jsonl"),
                        "--partition", spec});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto p = read_json(dir.file(spec.substr(0, 3) + "/partition.json"));
    EXPECT_EQ(p["partition"], spec);
    EXPECT_EQ(p["groups"].size(), 2u);
  }
  const auto r = run({"--out", dir.file("ht"), "stats", "--logs", dir.file("logs.jsonl"), "--partition",
                      "headtail:0.1,0.5,1.0"});
  ASSERT_EQ(r.code, 0) << r.err;
  const std::string csv = testing::slurp(dir.file("ht/headtail.csv"));
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
  EXPECT_EQ(run({"--out", dir.file("bogus"), "stats", "--logs", dir.file("logs.jsonl"), "--partition", "bogus"}).code,
            cli::kExitUsage);
  EXPECT_FALSE(std::filesystem::exists(dir.file("bogus")));
}

TEST(Cli, UsageErrors) {
  const auto unknown = run({"stats", "--nope"});
  EXPECT_EQ(unknown.code, cli::kExitUsage);
  EXPECT_NE(unknown.err.find("--logs"), std::string::npos);  // help text
  EXPECT_EQ(run({}).code, cli::kExitUsage);
  EXPECT_EQ(run({"fit", "--logs", "x", "--mode", "other", "--params-out", "p"}).code, cli::kExitUsage);
  EXPECT_EQ(run({"--help"}).code, cli::kExitOk);
}

TEST(Cli, DataErrorsCarryContext) {
  TempDir dir("cli");
  const auto missing = run({"stats", "--logs", dir.file("none.jsonl")});
  EXPECT_EQ(missing.code, cli::kExitData);
  EXPECT_NE(missing.err.find("none.jsonl"), std::string::npos);
  testing::spit(dir.file("bad.jsonl"), "{\"seq_id\": 1,\n");
  const auto bad = run({"stats", "--logs", dir.file("bad.jsonl")});
  EXPECT_EQ(bad.code, cli::kExitData);
  EXPECT_NE(bad.err.find("line 1"), std::string::npos);
}

class ToyPipeline : public ::testing::Test {
 protected:
  void SetUp() override {
    testing::spit(dir.file("task.json"), task_to_json(default_task(5)));
    testing::spit(dir.file("sharp.json"), distortion_to_json(DistortionSpec{0.5, 0.0, 0.35}));
    ASSERT_EQ(run({"--seed", "5", "toy", "gen", "--spec", dir.file("task.json"), "--n", "600", "--distort",
                   dir.file("sharp.json"), "--logs-out", dir.file("sharp.jsonl")})
                  .code,
              0);
  }
  TempDir dir{"cli"};
};

TEST_F(ToyPipeline, FitSingleRecoversInverseDistortion) {
  const auto r = run({"fit", "--logs", dir.file("sharp.jsonl"), "--mode", "single", "--params-out",
                      dir.file("single.json")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto p = std::get<SingleTemperature>(load_params(dir.file("single.json")));
  // q = p^2 is undone by T = 2, the reciprocal of the distortion temperature.
  EXPECT_NEAR(p.temperature, 2.0, 0.1);
}

TEST_F(ToyPipeline, OptimizerChoiceChangesTheFit) {
  for (const char* opt : {"adam", "gd"}) {
    const auto r = run({"fit", "--logs", dir.file("sharp.jsonl"), "--mode", "variable", "--epochs", "20",
                        "--optimizer", opt, "--params-out", dir.file(std::string(opt) + ".json")});
    ASSERT_EQ(r.code, 0) << r.err;
  }
  EXPECT_NE(testing::slurp(dir.file("adam.json")), testing::slurp(dir.file("gd.json")));
  EXPECT_EQ(run({"fit", "--logs", dir.file("sharp.jsonl"), "--mode", "variable", "--optimizer", "sgd",
                 "--params-out", dir.file("x.json")})
                .code,
            cli::kExitUsage);
}

TEST_F(ToyPipeline, ApplyLowersWeightedEce) {
  ASSERT_EQ(run({"fit", "--logs", dir.file("sharp.jsonl"), "--mode", "variable", "--epochs", "400",
                 "--params-out", dir.file("var.json")})
                .code,
            0);
  const auto r = run({"apply", "--logs", dir.file("sharp.jsonl"), "--params", dir.file("var.json"),
                      "--logs-out", dir.file("fixed.jsonl")});
  ASSERT_EQ(r.code, 0) << r.err;
  std::ifstream in(dir.file("fixed.jsonl"));
  const auto summary = validate_dataset(in);
  EXPECT_GT(summary.count, 0u);
  EXPECT_EQ(summary.parse_errors + summary.validation_errors, 0u);
  const auto before = read_log_file(dir.file("sharp.jsonl"));
  const auto after = read_log_file(dir.file("fixed.jsonl"));
  ASSERT_EQ(before.size(), after.size());
  EXPECT_TRUE(after.front().features.has_value());
  EXPECT_LT(weighted_ece(after).score, weighted_ece(before).score);
}

TEST_F(ToyPipeline, SeqcalAndBeamsweepReports) {
  ASSERT_EQ(run({"fit", "--logs", dir.file("sharp.jsonl"), "--mode", "single", "--params-out",
                 dir.file("single.json")})
                .code,
            0);
  const auto s = run({"--out", dir.file("sc"), "seqcal", "--task", dir.file("task.json"), "--model",
                      dir.file("sharp.json"), "--params", dir.file("single.json"), "--samples", "20",
                      "--n", "40"});
  ASSERT_EQ(s.code, 0) << s.err;
  EXPECT_EQ(read_json(dir.file("sc/seqcal.json")).size(), 40u);
  EXPECT_EQ(read_json(dir.file("sc/structured_ece.json"))["metric"], "structured_ece");
  const auto b = run({"--out", dir.file("bs"), "toy", "beamsweep", "--spec", dir.file("task.json"),
                      "--distort", dir.file("sharp.json"), "--beams", "1,2,4", "--n", "50"});
  ASSERT_EQ(b.code, 0) << b.err;
  const std::string csv = testing::slurp(dir.file("bs/beamsweep.csv"));
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "beam,corpus_bleu,mean_log_score");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
  EXPECT_EQ(run({"toy", "beamsweep", "--spec", dir.file("task.json"), "--beams", "0"}).code,
            cli::kExitUsage);
}

TEST_F(ToyPipeline, ByteIdenticalReruns) {
  auto pipeline = [&](const std::string& tag, const std::string& threads) {
    const std::string out = dir.file(tag);
    EXPECT_EQ(run({"--seed", "9", "--threads", threads, "--out", out, "toy", "gen", "--spec",
                   dir.file("task.json"), "--n", "300", "--distort", dir.file("sharp.json"),
                   "--logs-out", out + "/logs.jsonl"})
                  .code,
              0);
    EXPECT_EQ(run({"--threads", threads, "--out", out, "stats", "--logs", out + "/logs.jsonl",
                   "--weighted"})
                  .code,
              0);
    EXPECT_EQ(run({"--seed", "9", "--threads", threads, "fit", "--logs", out + "/logs.jsonl", "--mode",
                   "variable", "--epochs", "50", "--params-out", out + "/p.json"})
                  .code,
              0);
  };
  pipeline("a", "1");
  pipeline("b", "1");
  pipeline("c", "3");
  for (const char* f : {"logs.jsonl", "ece.json", "ece.csv", "weighted_ece.json", "p.json"}) {
    const std::string a = testing::slurp(dir.file(std::string("a/") + f));
    EXPECT_FALSE(a.empty()) << f;
    EXPECT_EQ(a, testing::slurp(dir.file(std::string("b/") + f))) << f;
    EXPECT_EQ(a, testing::slurp(dir.file(std::string("c/") + f))) << f;
  }
}

TEST_F(ToyPipeline, SeedFromEnvironment) {
  ::setenv("SEQCAL_SEED", "5", 1);
  ASSERT_EQ(run({"toy", "gen", "--spec", dir.file("task.json"), "--n", "600", "--distort",
                 dir.file("sharp.json"), "--logs-out", dir.file("env.jsonl")})
                .code,
            0);
  ::unsetenv("SEQCAL_SEED");
  EXPECT_EQ(testing::slurp(dir.file("env.jsonl")), testing::slurp(dir.file("sharp.jsonl")));
}

}  // namespace
}  // namespace seqcal
