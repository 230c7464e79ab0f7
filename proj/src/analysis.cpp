#include "agnofed/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "agnofed/error.hpp"

namespace agnofed {

namespace {

constexpr double kExactTolerance = 1e-10;

std::vector<RunTrace> instrumented_runs(const RunConfig& config, const ParticipationSampler& sampler,
                                        const FederationData& data, std::size_t seeds) {
  if (seeds == 0) throw ValidationError("need at least one seed");
  std::vector<RunTrace> runs;
  runs.reserve(seeds);
  for (std::size_t s = 0; s < seeds; ++s) {
    RunConfig cfg = config;
    cfg.seed = config.seed + s;
    cfg.record_windows = true;
    runs.push_back(run_fedavg(cfg, sampler, AgnosticRule{}, data));
  }
  return runs;
}

std::string describe_step(const RunConfig& config, const ProblemConstants& c) {
  std::ostringstream msg;
  msg << "eta=" << config.step_size() << " H=" << config.local_steps << " G=" << c.gradient_bound
      << " l=" << c.lipschitz;
  return msg.str();
}

}  // namespace

InequalityReport make_report(std::string name, double lhs, double rhs, double tolerance, std::size_t samples,
                             std::string note) {
  InequalityReport r;
  r.name = std::move(name);
  r.lhs = lhs;
  r.rhs = rhs;
  r.slack = rhs - lhs;
  r.tolerance = tolerance;
  r.samples = samples;
  r.holds = r.slack >= -tolerance;
  r.note = std::move(note);
  return r;
}

InequalityReport check_sample_to_model(const SubsetDistribution& dist, std::span<const ParamVector> client_params,
                                       const ParamVector& theta_star) {
  if (client_params.size() != dist.n_clients()) {
    throw ValidationError("need one parameter vector per client of the distribution");
  }
  double lhs = 0.0;
  for (const auto& atom : dist.atoms()) {
    ParamVector mean = ParamVector::Zero(theta_star.size());
    for (std::size_t i : atom.subset) mean += client_params[i];
    mean /= static_cast<double>(atom.subset.size());
    lhs += atom.prob * (mean - theta_star).squaredNorm();
  }
  const MarginalWeights p = compute_marginals_exact(dist);
  double rhs = 0.0;
  for (std::size_t i = 0; i < client_params.size(); ++i) {
    rhs += p.p[i] * (client_params[i] - theta_star).squaredNorm();
  }
  return make_report("sample-to-model", lhs, rhs, kExactTolerance, dist.atoms().size());
}

InequalityReport check_one_step_progress(const ParamVector& theta, const ClientDataset& client, const LossModel& model,
                                         double step, const ProjectionSet& set, const ParamVector& theta_star,
                                         std::size_t batch_size, const ProblemConstants& constants, Rng& rng,
                                         const OneStepOptions& options) {
  const std::size_t n = client.size();
  const std::size_t b = std::min(batch_size, n);
  double sum = 0.0;
  double sum_sq = 0.0;
  std::size_t count = 0;
  auto visit = [&](const Minibatch& batch) {
    const double d = (sgd_step(theta, client, model, batch, step, set) - theta_star).squaredNorm();
    sum += d;
    sum_sq += d * d;
    ++count;
  };
  const std::uint64_t batches = binomial_capped(n, b, options.max_enumerated_batches + 1);
  const bool exact = batches <= options.max_enumerated_batches;
  if (exact) {
    for_each_minibatch(n, b, visit);
  } else {
    for (std::size_t k = 0; k < options.mc_draws; ++k) visit(sample_minibatch(n, b, rng));
  }
  const double m = static_cast<double>(count);
  const double lhs = sum / m;
  double tolerance = kExactTolerance;
  if (!exact) tolerance += 3.0 * std::sqrt(std::max(0.0, sum_sq / m - lhs * lhs) / m);

  const double eta_sq = step * step;
  const double gap = local_loss(theta, client, model) - local_loss(theta_star, client, model);
  const double rhs = (theta - theta_star).squaredNorm() - 2.0 * step * gap +
                     2.0 * eta_sq * constants.sigma_sq +
                     2.0 * eta_sq * constants.gradient_bound * constants.gradient_bound;
  std::ostringstream note;
  note << (exact ? "exact over " : "monte carlo over ") << count << " minibatches; G=" << constants.gradient_bound
       << " sigma^2=" << constants.sigma_sq;
  return make_report("one-step-progress", lhs, rhs, tolerance, count, note.str());
}

double WindowDivergence::max_param_distance() const {
  return param_distance.empty() ? 0.0 : *std::max_element(param_distance.begin(), param_distance.end());
}

double WindowDivergence::max_value_gap() const {
  return value_gap.empty() ? 0.0 : *std::max_element(value_gap.begin(), value_gap.end());
}

WindowDivergence measure_window_divergence(const RunConfig& config, const ParticipationSampler& sampler,
                                           const FederationData& data, std::size_t seeds) {
  const auto runs = instrumented_runs(config, sampler, data, seeds);
  const std::size_t n = data.n_clients();
  const std::size_t steps = config.local_steps + 1;
  const std::size_t windows = runs.front().windows.size();
  // index: ((i * steps + ki) * n + j) * steps + kj
  const std::size_t cells = n * steps * n * steps;
  WindowDivergence out;
  out.seeds = seeds;
  out.param_distance.assign(windows, 0.0);
  out.value_gap.assign(windows, 0.0);
  std::vector<double> dist(cells);
  std::vector<double> gap(cells);
  std::vector<double> loss(n * n * steps);  // loss[(i * n + j) * steps + k] = f_i(theta_j^k)
  for (std::size_t w = 0; w < windows; ++w) {
    std::fill(dist.begin(), dist.end(), 0.0);
    std::fill(gap.begin(), gap.end(), 0.0);
    for (const auto& run : runs) {
      const auto& snap = run.windows[w].steps;
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
          for (std::size_t k = 0; k < steps; ++k) {
            loss[(i * n + j) * steps + k] = local_loss(snap[k][j], data.datasets[i], data.model);
          }
        }
      }
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t ki = 0; ki < steps; ++ki) {
          const double own = loss[(i * n + i) * steps + ki];
          for (std::size_t j = 0; j < n; ++j) {
            if (j == i) continue;
            for (std::size_t kj = 0; kj < steps; ++kj) {
              const std::size_t c = ((i * steps + ki) * n + j) * steps + kj;
              dist[c] += (snap[ki][i] - snap[kj][j]).norm();
              gap[c] += std::abs(own - loss[(i * n + j) * steps + kj]);
            }
          }
        }
      }
    }
    const double inv = 1.0 / static_cast<double>(seeds);
    out.param_distance[w] = *std::max_element(dist.begin(), dist.end()) * inv;
    out.value_gap[w] = *std::max_element(gap.begin(), gap.end()) * inv;
  }
  return out;
}

InequalityReport local_divergence_report(const WindowDivergence& measured, const RunConfig& config,
                                         const ProblemConstants& constants) {
  const double rhs = 4.0 * config.step_size() * constants.gradient_bound * static_cast<double>(config.local_steps);
  std::size_t violations = 0;
  for (double v : measured.param_distance) violations += v > rhs + kExactTolerance ? 1 : 0;
  std::ostringstream note;
  note << measured.param_distance.size() << " windows x " << measured.seeds << " seeds, " << violations
       << " windows over the bound; " << describe_step(config, constants);
  return make_report("local-parameter-divergence", measured.max_param_distance(), rhs, kExactTolerance,
                     measured.param_distance.size() * measured.seeds, note.str());
}

InequalityReport value_divergence_report(const WindowDivergence& measured, const RunConfig& config,
                                         const ProblemConstants& constants) {
  const double rhs = 2.0 * constants.lipschitz * config.step_size() * constants.gradient_bound *
                     static_cast<double>(config.local_steps);
  std::size_t violations = 0;
  for (double v : measured.value_gap) violations += v > rhs + kExactTolerance ? 1 : 0;
  std::ostringstream note;
  note << measured.value_gap.size() << " windows x " << measured.seeds << " seeds, " << violations
       << " windows over the bound; " << describe_step(config, constants);
  return make_report("local-value-divergence", measured.max_value_gap(), rhs, kExactTolerance,
                     measured.value_gap.size() * measured.seeds, note.str());
}

InequalityReport check_local_divergence(const RunConfig& config, const ParticipationSampler& sampler,
                                        const FederationData& data, std::size_t seeds,
                                        const ProblemConstants& constants) {
  return local_divergence_report(measure_window_divergence(config, sampler, data, seeds), config, constants);
}

InequalityReport check_value_divergence(const RunConfig& config, const ParticipationSampler& sampler,
                                        const FederationData& data, std::size_t seeds,
                                        const ProblemConstants& constants) {
  return value_divergence_report(measure_window_divergence(config, sampler, data, seeds), config, constants);
}

InequalityReport check_window_recursion(const RunConfig& config, const ParticipationSampler& sampler,
                                        const FederationData& data, std::size_t seeds,
                                        const ProblemConstants& constants, const ParamVector& theta_star) {
  const auto runs = instrumented_runs(config, sampler, data, seeds);
  const std::size_t n = data.n_clients();
  const std::size_t h = config.local_steps;
  const double eta = config.step_size();
  const double hd = static_cast<double>(h);
  const double g = constants.gradient_bound;
  const double noise = hd * (2.0 * eta * eta * constants.sigma_sq + 3.0 * eta * eta * g * g +
                             8.0 * constants.lipschitz * eta * eta * g * hd);
  std::vector<double> optimum_loss(n);
  for (std::size_t i = 0; i < n; ++i) optimum_loss[i] = local_loss(theta_star, data.datasets[i], data.model);

  const double inv = 1.0 / static_cast<double>(seeds);
  double worst_slack = std::numeric_limits<double>::infinity();
  double worst_lhs = 0.0;
  double worst_rhs = 0.0;
  std::size_t checked = 0;
  const std::size_t windows = runs.front().windows.size();
  for (std::size_t w = 0; w < windows; ++w) {
    for (std::size_t i = 0; i < n; ++i) {
      double lhs = 0.0;
      double start = 0.0;
      double gap = 0.0;
      for (const auto& run : runs) {
        const auto& snap = run.windows[w].steps;
        lhs += (snap[h - 1][i] - theta_star).squaredNorm();
        start += (snap[0][i] - theta_star).squaredNorm();
        gap += local_loss(snap[h][i], data.datasets[i], data.model) - optimum_loss[i];
      }
      lhs *= inv;
      const double rhs = start * inv - 2.0 * eta * hd * gap * inv + noise;
      ++checked;
      if (rhs - lhs < worst_slack) {
        worst_slack = rhs - lhs;
        worst_lhs = lhs;
        worst_rhs = rhs;
      }
    }
  }
  std::ostringstream note;
  note << "worst of " << checked << " (window, client) pairs; " << describe_step(config, constants);
  return make_report("window-recursion", worst_lhs, worst_rhs, kExactTolerance, checked * seeds, note.str());
}

RateFit fit_rate(const std::map<std::size_t, double>& suboptimality_by_horizon) {
  RateFit fit;
  for (const auto& [horizon, value] : suboptimality_by_horizon) {
    if (value > 0.0 && std::isfinite(value)) {
      fit.horizons.push_back(static_cast<double>(horizon));
      fit.suboptimalities.push_back(value);
    } else {
      fit.excluded.push_back(static_cast<double>(horizon));
    }
  }
  const std::size_t m = fit.horizons.size();
  if (m < 2) {
    std::ostringstream msg;
    msg << "rate fit needs at least 2 positive suboptimalities, have " << m;
    throw ValidationError(msg.str());
  }
  std::vector<double> x(m);
  std::vector<double> y(m);
  for (std::size_t k = 0; k < m; ++k) {
    x[k] = std::log(fit.horizons[k]);
    y[k] = std::log(fit.suboptimalities[k]);
  }
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(m);
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(m);
  double sxx = 0.0;
  double sxy = 0.0;
  double syy = 0.0;
  for (std::size_t k = 0; k < m; ++k) {
    sxx += (x[k] - mx) * (x[k] - mx);
    sxy += (x[k] - mx) * (y[k] - my);
    syy += (y[k] - my) * (y[k] - my);
  }
  fit.slope = sxy / sxx;
  fit.intercept = my - fit.slope * mx;
  double ss_res = 0.0;
  for (std::size_t k = 0; k < m; ++k) {
    const double r = y[k] - (fit.intercept + fit.slope * x[k]);
    ss_res += r * r;
  }
  fit.r_squared = syy > 0.0 ? 1.0 - ss_res / syy : 1.0;
  return fit;
}

std::map<std::size_t, double> measure_rate(const RunConfig& base, const ParticipationSampler& sampler,
                                           const FederationData& data, const MarginalWeights& weights,
                                           double optimum_value, std::span<const std::size_t> horizons) {
  std::map<std::size_t, double> out;
  for (std::size_t horizon : horizons) {
    RunConfig cfg = base;
    cfg.global_rounds = horizon;
    cfg.record_windows = false;
    const RunTrace trace = run_fedavg(cfg, sampler, AgnosticRule{}, data);
    out[horizon] = global_objective(trace.averaged, weights, data.datasets, data.model) - optimum_value;
  }
  return out;
}

std::vector<RuleComparison> compare_rules(const RunConfig& config, const ParticipationSampler& sampler,
                                          const FederationData& data, const MarginalWeights& weights,
                                          std::span<const std::uint64_t> seeds) {
  validate_marginals(weights);
  const double skew = participation_skew(weights);
  std::vector<RuleComparison> out;
  out.reserve(seeds.size());
  for (std::uint64_t seed : seeds) {
    RunConfig cfg = config;
    cfg.seed = seed;
    cfg.record_windows = false;
    const RunTrace agnostic = run_fedavg(cfg, sampler, AgnosticRule{}, data);
    const RunTrace weighted = run_fedavg(cfg, sampler, WeightedRule{weights}, data);
    out.push_back({seed, global_objective(agnostic.averaged, weights, data.datasets, data.model),
                   global_objective(weighted.averaged, weights, data.datasets, data.model), skew});
  }
  return out;
}

double pearson_correlation(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) return std::numeric_limits<double>::quiet_NaN();
  const double m = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / m;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / m;
  double sxx = 0.0;
  double syy = 0.0;
  double sxy = 0.0;
  for (std::size_t k = 0; k < x.size(); ++k) {
    sxx += (x[k] - mx) * (x[k] - mx);
    syy += (y[k] - my) * (y[k] - my);
    sxy += (x[k] - mx) * (y[k] - my);
  }
  if (sxx <= 0.0 || syy <= 0.0) return std::numeric_limits<double>::quiet_NaN();
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace agnofed
