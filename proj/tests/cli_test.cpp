#include "agnofed/commands.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "agnofed/plot.hpp"

namespace agnofed {
namespace {

namespace fs = std::filesystem;

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::size_t count_of(const std::string& hay, const std::string& needle) {
  std::size_t n = 0;
  for (auto pos = hay.find(needle); pos != std::string::npos; pos = hay.find(needle, pos + 1)) ++n;
  return n;
}

std::size_t line_count(const std::string& text) { return count_of(text, "\n"); }

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("agnofed_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  // Small synthetic experiment; `extra` is spliced into the top-level object.
  std::string small_spec(const std::string& sampler, const std::string& extra = "") const {
    return R"({
  "task": "synth-regression",
  "data": {"n_clients": 6, "samples_per_client": 10, "dim": 3, "seed": 1},
  "run": {"local_steps": 3, "global_rounds": 12, "step_size": 0.02, "batch_size": 4},
  "sampler": )" + sampler + R"(,
  "out": ")" + (dir_ / "out").string() + "\"" + extra + "\n}\n";
  }

  fs::path dir_;
  std::ostringstream out_, err_;
};

const char* kFixed = R"({"kind": "fixed-size-weighted", "size": 2, "beta": 5})";

TEST_F(CliTest, SpecErrorsCarryLineNumbers) {
  const std::string text = "{\n  \"task\": \"synth-regression\",\n  \"run\": {\"local_steps\": 0},\n"
                           "  \"sampler\": {\"kind\": \"bernoulli\", \"probs\": [0.5]}\n}\n";
  try {
    parse_experiment_spec(text);
    FAIL() << "expected SpecError";
  } catch (const SpecError& e) {
    EXPECT_EQ(e.line(), 3u) << e.what();
  }
  try {
    parse_experiment_spec("{\n  \"task\": \"synth-regression\",\n  \"bogus\": 1\n}\n");
    FAIL() << "expected SpecError";
  } catch (const SpecError& e) {
    EXPECT_EQ(e.line(), 3u) << e.what();
    EXPECT_NE(std::string(e.what()).find("bogus"), std::string::npos);
  }
  try {
    parse_experiment_spec("{\n  \"task\": \"synth-regression\",\n  \"seeds\": [1,\n}\n");
    FAIL() << "expected SpecError";
  } catch (const SpecError& e) {
    EXPECT_EQ(e.line(), 4u) << e.what();
  }
  EXPECT_THROW(parse_experiment_spec(small_spec(kFixed, R"(, "rules": [])")), SpecError);
  EXPECT_THROW(parse_experiment_spec(small_spec(kFixed, R"(, "rules": ["median"])")), SpecError);
  EXPECT_THROW(parse_experiment_spec(small_spec(kFixed, R"(, "seeds": [])")), SpecError);
  EXPECT_THROW(parse_experiment_spec(small_spec(kFixed, R"(, "task": "cifar")")), SpecError);
}

TEST_F(CliTest, OverridesApply) {
  SpecOverrides o;
  o.seed = 9;
  o.global_rounds = 4;
  o.rules = std::vector<std::string>{"weighted"};
  const auto spec = parse_experiment_spec(small_spec(kFixed), o);
  EXPECT_EQ(spec.seeds, std::vector<std::uint64_t>{9});
  EXPECT_EQ(spec.run.global_rounds, 4u);
  EXPECT_EQ(spec.rules, std::vector<std::string>{"weighted"});
  EXPECT_EQ(spec.config.at("run").at("global_rounds"), 4);
}

TEST_F(CliTest, RunWritesOneRecordPerRound) {
  const auto spec = parse_experiment_spec(small_spec(kFixed));
  ASSERT_EQ(cmd_run(spec, out_, err_), kExitOk) << err_.str();
  const auto trace = slurp(dir_ / "out" / "agnostic" / "0" / "trace.jsonl");
  EXPECT_EQ(line_count(trace), 12u);
  EXPECT_TRUE(fs::exists(dir_ / "out" / "agnostic" / "0" / "final_state.json"));
  const auto csv = slurp(dir_ / "out" / "summary.csv");
  EXPECT_EQ(line_count(csv), 13u);
  EXPECT_EQ(csv.substr(0, csv.find('\n')),
            "rule,seed,round,subset_size,objective_aggregate,objective_running_avg,suboptimality");
  const auto manifest = Json::parse(slurp(dir_ / "out" / "manifest.json"));
  EXPECT_EQ(manifest.at("seeds"), Json::array({0}));
  EXPECT_EQ(manifest.at("version"), kVersion);
  EXPECT_EQ(manifest.at("config_hash").get<std::string>().rfind("fnv1a64:", 0), 0u);
}

TEST_F(CliTest, ExplicitWeightedManifestMatchesExactMarginals) {
  const std::string sampler = R"({"kind": "explicit", "n_clients": 6, "atoms": [
    {"subset": [1, 2], "prob": 0.5}, {"subset": [3], "prob": 0.2}, {"subset": [4, 5, 6], "prob": 0.3}]})";
  const auto spec = parse_experiment_spec(small_spec(sampler, R"(, "rules": ["weighted"])"));
  ASSERT_EQ(cmd_run(spec, out_, err_), kExitOk) << err_.str();
  const auto manifest = Json::parse(slurp(dir_ / "out" / "manifest.json"));
  const auto exact = compute_marginals_exact(parse_subset_distribution(spec.sampler));
  const auto p = manifest.at("marginals").at("p").get<std::vector<double>>();
  ASSERT_EQ(p.size(), 6u);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(p[i], exact.p[i]);
  EXPECT_EQ(manifest.at("marginals_mode"), "exact");
}

TEST_F(CliTest, RerunIsByteIdentical) {
  const auto spec = parse_experiment_spec(small_spec(kFixed, R"(, "rules": ["agnostic", "weighted"], "seeds": [0, 3])"));
  ASSERT_EQ(cmd_run(spec, out_, err_), kExitOk) << err_.str();
  const auto first = slurp(dir_ / "out" / "summary.csv");
  const auto first_manifest = slurp(dir_ / "out" / "manifest.json");
  ASSERT_EQ(cmd_run(spec, out_, err_), kExitOk);
  EXPECT_EQ(slurp(dir_ / "out" / "summary.csv"), first);
  EXPECT_EQ(slurp(dir_ / "out" / "manifest.json"), first_manifest);
  EXPECT_EQ(line_count(first), 1u + 2 * 2 * 12);
}

TEST_F(CliTest, RunReportsIoFailure) {
  std::ofstream(dir_ / "blocker") << "x";
  auto spec = parse_experiment_spec(small_spec(kFixed));
  spec.out = dir_ / "blocker" / "sub";
  EXPECT_EQ(cmd_run(spec, out_, err_), kExitIo);
}

TEST_F(CliTest, MarginalsExamples) {
  ASSERT_EQ(cmd_marginals(Json::parse(R"({"kind": "explicit", "n_clients": 2, "atoms": [{"subset": [1, 2], "prob": 1}]})"),
                          MarginalsMode::kExact, 0, 0, out_, err_),
            kExitOk);
  auto j = Json::parse(out_.str());
  EXPECT_EQ(j.at("p"), Json::array({0.5, 0.5}));
  EXPECT_EQ(j.at("skew"), 0.0);

  out_.str("");
  ASSERT_EQ(cmd_marginals(Json::parse(R"({"kind": "fixed-size-weighted", "size": 1, "weights": [2, 1]})"),
                          MarginalsMode::kExact, 0, 0, out_, err_),
            kExitOk);
  j = Json::parse(out_.str());
  EXPECT_NEAR(j.at("p")[0].get<double>(), 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(j.at("p")[1].get<double>(), 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(j.at("skew").get<double>(), 1.0 / 3.0, 1e-15);
}

TEST_F(CliTest, MarginalsErrors) {
  const auto fixed = Json::parse(R"({"kind": "fixed-size-weighted", "size": 1, "weights": [2, 1]})");
  EXPECT_EQ(cmd_marginals(fixed, MarginalsMode::kEstimate, 0, 0, out_, err_), kExitInvalid);
  const auto big = Json::parse(R"({"kind": "fixed-size-weighted", "size": 10, "n_clients": 100, "beta": 10})");
  EXPECT_EQ(cmd_marginals(big, MarginalsMode::kExact, 0, 0, out_, err_), kExitCapacity);
  EXPECT_NE(err_.str().find("estimate"), std::string::npos);
  out_.str("");
  EXPECT_EQ(cmd_marginals(big, MarginalsMode::kEstimate, 2000, 0, out_, err_), kExitOk);
  const auto j = Json::parse(out_.str());
  EXPECT_EQ(j.at("p").size(), 100u);
  EXPECT_FALSE(j.at("stderr").is_null());
  EXPECT_EQ(cmd_marginals(Json::parse(R"({"kind": "nope"})"), MarginalsMode::kExact, 0, 0, out_, err_), kExitInvalid);
}

TEST_F(CliTest, SweepUniformHasNoDifference) {
  const auto spec = parse_experiment_spec(small_spec(kFixed, R"(, "seeds": [0, 1, 2])"));
  ASSERT_EQ(cmd_sweep_skew(spec, {std::numeric_limits<double>::infinity()}, out_, err_), kExitOk) << err_.str();
  const auto table = parse_csv(slurp(dir_ / "out" / "skew_scatter.csv"));
  ASSERT_EQ(table.rows.size(), 3u);
  const int diff = table.column("difference");
  for (const auto& row : table.rows) EXPECT_EQ(std::stod(row[diff]), 0.0);
  const auto sweep = Json::parse(slurp(dir_ / "out" / "sweep.json"));
  EXPECT_EQ(sweep.at("pearson"), "undefined");
}

TEST_F(CliTest, SweepSkewGrowsWithBias) {
  const auto spec = parse_experiment_spec(small_spec(kFixed, R"(, "seeds": [0, 1])"));
  ASSERT_EQ(cmd_sweep_skew(spec, {50.0, 5.0}, out_, err_), kExitOk) << err_.str();
  const auto table = parse_csv(slurp(dir_ / "out" / "skew_scatter.csv"));
  ASSERT_EQ(table.rows.size(), 4u);
  const int skew = table.column("skew");
  const int seed = table.column("seed");
  for (std::size_t k = 0; k < 2; ++k) {
    EXPECT_EQ(table.rows[k][seed], table.rows[k + 2][seed]);
    EXPECT_LT(std::stod(table.rows[k][skew]), std::stod(table.rows[k + 2][skew]));
  }
}

TEST_F(CliTest, SweepPreconditions) {
  const auto spec = parse_experiment_spec(small_spec(kFixed));
  EXPECT_EQ(cmd_sweep_skew(spec, {10.0}, out_, err_), kExitInvalid);
  EXPECT_EQ(cmd_sweep_skew(spec, {}, out_, err_), kExitInvalid);
  EXPECT_EQ(cmd_sweep_skew(spec, {10.0, -1.0}, out_, err_), kExitInvalid);
  const auto bern = parse_experiment_spec(small_spec(R"({"kind": "bernoulli", "probs": [0.5, 0.5, 0.5, 0.5, 0.5, 0.5]})"));
  EXPECT_EQ(cmd_sweep_skew(bern, {10.0, 5.0}, out_, err_), kExitInvalid);
}

TEST_F(CliTest, PlotLossCurves) {
  std::ofstream(dir_ / "s.csv") << "rule,seed,round,objective_aggregate\n"
                                   "agnostic,0,1,1.0\nagnostic,0,2,0.5\nweighted,0,1,2.0\nweighted,0,2,0.0\n";
  ASSERT_EQ(cmd_plot(dir_ / "s.csv", "loss-curves", dir_ / "s.svg", out_, err_), kExitOk) << err_.str();
  const auto svg = slurp(dir_ / "s.svg");
  EXPECT_EQ(svg.rfind("<svg", 0) == 0 || svg.rfind("<?xml", 0) == 0, true);
  EXPECT_EQ(count_of(svg, "<polyline"), 2u);
  EXPECT_EQ(count_of(svg, "class=\"legend\""), 2u);
  EXPECT_EQ(svg.find("href"), std::string::npos);
}

TEST_F(CliTest, PlotErrors) {
  std::ofstream(dir_ / "empty.csv") << "rule,seed,round,objective_aggregate\n";
  EXPECT_EQ(cmd_plot(dir_ / "empty.csv", "loss-curves", dir_ / "e.svg", out_, err_), kExitInvalid);
  std::ofstream(dir_ / "cols.csv") << "rule,seed\nagnostic,0\n";
  EXPECT_EQ(cmd_plot(dir_ / "cols.csv", "loss-curves", dir_ / "c.svg", out_, err_), kExitInvalid);
  EXPECT_NE(err_.str().find("objective_aggregate"), std::string::npos) << err_.str();
  EXPECT_EQ(cmd_plot(dir_ / "cols.csv", "histogram", dir_ / "c.svg", out_, err_), kExitInvalid);
  EXPECT_EQ(cmd_plot(dir_ / "missing.csv", "loss-curves", dir_ / "c.svg", out_, err_), kExitIo);
}

TEST_F(CliTest, PlotScatterMarkerPerPoint) {
  const auto spec = parse_experiment_spec(small_spec(kFixed, R"(, "seeds": [0, 1, 2])"));
  ASSERT_EQ(cmd_sweep_skew(spec, {20.0, 5.0}, out_, err_), kExitOk) << err_.str();
  ASSERT_EQ(cmd_plot(dir_ / "out" / "skew_scatter.csv", "skew-scatter", dir_ / "sc.svg", out_, err_), kExitOk);
  EXPECT_EQ(count_of(slurp(dir_ / "sc.svg"), "<circle"), 6u);
}

TEST_F(CliTest, VerifyQuickPassesAndNegativeControlFails) {
  VerifyOptions opts;
  opts.report = dir_ / "report.json";
  EXPECT_EQ(cmd_verify(opts, out_, err_), kExitOk) << out_.str() << err_.str();
  const auto report = Json::parse(slurp(dir_ / "report.json"));
  EXPECT_TRUE(report.contains("constants"));
  opts.report.reset();
  opts.shrink_g = 10.0;
  std::ostringstream out2, err2;
  EXPECT_EQ(cmd_verify(opts, out2, err2), kExitVerifyFailed);
  EXPECT_NE(out2.str().find("FAILS"), std::string::npos);
}

TEST(Fnv1a, KnownVectors) {
  EXPECT_EQ(fnv1a(""), 0xcbf29ce484222325ULL);
  EXPECT_EQ(fnv1a("a"), 0xaf63dc4c8601ec8cULL);
  EXPECT_EQ(fnv1a("foobar"), 0x85944171f73967e8ULL);
}

}  // namespace
}  // namespace agnofed
