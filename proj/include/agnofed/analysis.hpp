#pragma once

// Numerical checks of the convergence argument for agnostic FedAvg: the
// sample-to-model inequality, one-step progress, in-window divergence of
// parameters and values, and the empirical rate exponent.

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "agnofed/availability.hpp"
#include "agnofed/data.hpp"
#include "agnofed/engine.hpp"
#include "agnofed/optimization.hpp"

namespace agnofed {

struct InequalityReport {
  std::string name;
  double lhs = 0.0;
  double rhs = 0.0;
  double slack = 0.0;  // rhs - lhs
  std::size_t samples = 0;
  double tolerance = 0.0;
  bool holds = false;  // slack >= -tolerance
  std::string note;
};

InequalityReport make_report(std::string name, double lhs, double rhs, double tolerance, std::size_t samples,
                             std::string note = {});

// E_S || mean_{i in S} theta_i - theta* ||^2  <=  sum_i p_i || theta_i - theta* ||^2
// with both sides evaluated exactly over the atoms of `dist`.
InequalityReport check_sample_to_model(const SubsetDistribution& dist, std::span<const ParamVector> client_params,
                                       const ParamVector& theta_star);

struct OneStepOptions {
  std::uint64_t max_enumerated_batches = 100'000;
  std::size_t mc_draws = 4096;  // when enumeration is too large
};

// E || Pi(theta - eta g) - theta* ||^2  <=  ||theta - theta*||^2
//     - 2 eta (f_i(theta) - f_i(theta*)) + 2 eta^2 sigma^2 + 2 eta^2 G^2
// The expectation is over all size-b minibatches when there are few enough,
// otherwise Monte Carlo with 3 standard errors added to the tolerance.
InequalityReport check_one_step_progress(const ParamVector& theta, const ClientDataset& client, const LossModel& model,
                                         double step, const ProjectionSet& set, const ParamVector& theta_star,
                                         std::size_t batch_size, const ProblemConstants& constants, Rng& rng,
                                         const OneStepOptions& options = {});

// Seed-averaged in-window quantities, maximized over windows, client pairs
// i != j and step pairs (tau_i, tau_j) in [sH, sH + H].
struct WindowDivergence {
  std::vector<double> param_distance;  // per window
  std::vector<double> value_gap;       // per window
  std::size_t seeds = 0;

  double max_param_distance() const;
  double max_value_gap() const;
};

// Runs agnostic FedAvg once per seed (config.seed, config.seed + 1, ...).
WindowDivergence measure_window_divergence(const RunConfig& config, const ParticipationSampler& sampler,
                                           const FederationData& data, std::size_t seeds);

// max E|| theta_i^{tau_i} - theta_j^{tau_j} ||  <=  4 eta G H
InequalityReport check_local_divergence(const RunConfig& config, const ParticipationSampler& sampler,
                                        const FederationData& data, std::size_t seeds,
                                        const ProblemConstants& constants);
InequalityReport local_divergence_report(const WindowDivergence& measured, const RunConfig& config,
                                         const ProblemConstants& constants);

// max E| f_i(theta_i^{tau_i}) - f_i(theta_j^{tau_j}) |  <=  2 l eta G H
InequalityReport check_value_divergence(const RunConfig& config, const ParticipationSampler& sampler,
                                        const FederationData& data, std::size_t seeds,
                                        const ProblemConstants& constants);
InequalityReport value_divergence_report(const WindowDivergence& measured, const RunConfig& config,
                                         const ProblemConstants& constants);

// Per-window recursion used to assemble the rate, per client i:
//   E||theta_i^{end-1} - theta*||^2 <= E||theta_hat^{start} - theta*||^2
//       - 2 eta H E[f_i(theta_hat^{end}) - f_i(theta*)]
//       + H (2 eta^2 sigma^2 + 3 eta^2 G^2 + 8 l eta^2 G H)
// Expectations are seed averages; reports the worst (window, client).
InequalityReport check_window_recursion(const RunConfig& config, const ParticipationSampler& sampler,
                                        const FederationData& data, std::size_t seeds,
                                        const ProblemConstants& constants, const ParamVector& theta_star);

struct RateFit {
  std::vector<double> horizons;
  std::vector<double> suboptimalities;
  std::vector<double> excluded;  // horizons dropped for nonpositive suboptimality
  double slope = 0.0;
  double intercept = 0.0;
  double r_squared = 0.0;
};

// Least squares of log(suboptimality) on log(T). Nonpositive entries are
// excluded; throws ValidationError when fewer than two points remain.
RateFit fit_rate(const std::map<std::size_t, double>& suboptimality_by_horizon);

// Final averaged-iterate suboptimality for each horizon T, using the agnostic
// rule and the config's step rule (typically c / sqrt(T H)).
std::map<std::size_t, double> measure_rate(const RunConfig& base, const ParticipationSampler& sampler,
                                           const FederationData& data, const MarginalWeights& weights,
                                           double optimum_value, std::span<const std::size_t> horizons);

struct RuleComparison {
  std::uint64_t seed = 0;
  double agnostic = 0.0;  // final averaged-iterate objective
  double weighted = 0.0;
  double skew = 0.0;

  double difference() const { return weighted - agnostic; }
};

// Runs both rules with identical seeds and reports final averaged-iterate
// objectives sum_i p_i f_i under `weights`.
std::vector<RuleComparison> compare_rules(const RunConfig& config, const ParticipationSampler& sampler,
                                          const FederationData& data, const MarginalWeights& weights,
                                          std::span<const std::uint64_t> seeds);

// NaN when either series has zero variance.
double pearson_correlation(std::span<const double> x, std::span<const double> y);

}  // namespace agnofed
