#include <CLI11.hpp>
#include <iostream>
#include <limits>
#include <string>
#include <vector>

#include "agnofed/commands.hpp"

using namespace agnofed;

namespace {

double parse_beta(const std::string& s) {
  if (s == "inf" || s == "infinity") return std::numeric_limits<double>::infinity();
  std::size_t used = 0;
  const double v = std::stod(s, &used);
  if (used != s.size()) throw ValidationError("bad beta \"" + s + "\"");
  return v;
}

struct SpecFlags {
  std::string config;
  SpecOverrides overrides;
  std::uint64_t seed = 0;
  std::string out;
  std::size_t rounds = 0, local_steps = 0, batch_size = 0;
  double step_size = 0.0, radius = 0.0;
  std::vector<std::string> rules;
  std::vector<std::uint64_t> seeds;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
    cmd->add_option("--seed", seed, "run a single seed instead of the config's list");
    cmd->add_option("--seeds", seeds, "replace the config's seed list");
    cmd->add_option("--out", out, "output directory");
    cmd->add_option("--rounds", rounds, "global rounds T");
    cmd->add_option("--local-steps", local_steps, "local window H");
    cmd->add_option("--step-size", step_size, "constant step size eta");
    cmd->add_option("--batch-size", batch_size, "minibatch size b");
    cmd->add_option("--radius", radius, "projection ball radius R");
    cmd->add_option("--rules", rules, "agnostic and/or weighted");
  }

  ExperimentSpec load(const CLI::App* cmd) {
    if (cmd->count("--seed")) overrides.seed = seed;
    if (cmd->count("--seeds")) overrides.seeds = seeds;
    if (cmd->count("--out")) overrides.out = out;
    if (cmd->count("--rounds")) overrides.global_rounds = rounds;
    if (cmd->count("--local-steps")) overrides.local_steps = local_steps;
    if (cmd->count("--step-size")) overrides.step_size = step_size;
    if (cmd->count("--batch-size")) overrides.batch_size = batch_size;
    if (cmd->count("--radius")) overrides.radius = radius;
    if (cmd->count("--rules")) overrides.rules = rules;
    return load_experiment_spec(config, overrides);
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Agnostic federated averaging simulator and verification suite"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  SpecFlags run_flags;
  auto* run = app.add_subcommand("run", "run FedAvg for every (rule, seed) in a config");
  run_flags.attach(run);

  SpecFlags sweep_flags;
  std::vector<std::string> betas{"50", "20", "10", "5"};
  auto* sweep = app.add_subcommand("sweep-skew", "weighted - agnostic loss versus participation skew");
  sweep_flags.attach(sweep);
  sweep->add_option("--betas", betas, "exp(-(i-1)/beta) bias strengths; inf means uniform")->capture_default_str();

  std::string sampler_path, mode = "exact";
  std::size_t draws = 100000;
  std::uint64_t marg_seed = 0;
  auto* marg = app.add_subcommand("marginals", "print the marginal survival weights of a sampler");
  marg->add_option("--sampler", sampler_path, "sampler descriptor (JSON file)")->required()->check(CLI::ExistingFile);
  marg->add_option("--mode", mode, "exact or estimate")->check(CLI::IsMember({"exact", "estimate"}))
      ->capture_default_str();
  marg->add_option("--draws", draws, "Monte Carlo draws in estimate mode")->capture_default_str();
  marg->add_option("--seed", marg_seed, "seed for estimate mode")->capture_default_str();

  VerifyOptions verify_opts;
  std::string scale = "quick", report;
  auto* verify = app.add_subcommand("verify", "run the inequality and rate suite");
  verify->add_option("scale", scale, "quick or full")->check(CLI::IsMember({"quick", "full"}))->capture_default_str();
  verify->add_option("--seed", verify_opts.seed, "suite seed")->capture_default_str();
  verify->add_option("--report", report, "write a JSON report here");
  verify->add_option("--debug-shrink-g", verify_opts.shrink_g, "divide G by this factor (negative control)");

  std::string csv, kind, svg;
  auto* plot = app.add_subcommand("plot", "render a summary CSV as SVG");
  plot->add_option("csv", csv, "input CSV")->required();
  plot->add_option("--kind", kind, "loss-curves or skew-scatter")->required()
      ->check(CLI::IsMember({"loss-curves", "skew-scatter"}));
  plot->add_option("--out", svg, "output SVG")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitInvalid;
  }

  try {
    if (*run) return cmd_run(run_flags.load(run), std::cout, std::cerr);
    if (*sweep) {
      std::vector<double> parsed;
      for (const auto& b : betas) parsed.push_back(parse_beta(b));
      return cmd_sweep_skew(sweep_flags.load(sweep), parsed, std::cout, std::cerr);
    }
    if (*marg) {
      const Json sampler = Json::parse(read_text(sampler_path));
      return cmd_marginals(sampler, mode == "exact" ? MarginalsMode::kExact : MarginalsMode::kEstimate, draws,
                           marg_seed, std::cout, std::cerr);
    }
    if (*verify) {
      verify_opts.full = scale == "full";
      if (!report.empty()) verify_opts.report = report;
      return cmd_verify(verify_opts, std::cout, std::cerr);
    }
    if (*plot) return cmd_plot(csv, kind, svg, std::cout, std::cerr);
  } catch (...) {
    return report_exception(std::cerr);
  }
  return kExitInvalid;
}
