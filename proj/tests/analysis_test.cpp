#include "agnofed/analysis.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "agnofed/error.hpp"
#include "test_util.hpp"

namespace agnofed {
namespace {

using testing::make_dataset;

ParamVector vec(std::initializer_list<double> v) {
  ParamVector out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index k = 0;
  for (double x : v) out(k++) = x;
  return out;
}

TEST(SampleToModel, SingletonsGiveEquality) {
  const SubsetDistribution dist(2, {{{0}, 0.5}, {{1}, 0.5}});
  const std::vector<ParamVector> params{vec({3, -1}), vec({0.5, 2})};
  const auto r = check_sample_to_model(dist, params, vec({1, 1}));
  EXPECT_TRUE(r.holds);
  EXPECT_LT(std::abs(r.slack), 1e-12);
}

TEST(SampleToModel, PairHandExample) {
  const SubsetDistribution dist(2, {{{0, 1}, 1.0}});
  const std::vector<ParamVector> params{vec({1, 0}), vec({-1, 0})};
  const auto r = check_sample_to_model(dist, params, vec({0, 0}));
  EXPECT_DOUBLE_EQ(r.lhs, 0.0);
  EXPECT_DOUBLE_EQ(r.rhs, 1.0);
  EXPECT_DOUBLE_EQ(r.slack, 1.0);
  EXPECT_TRUE(r.holds);
  EXPECT_EQ(r.tolerance, 1e-10);
}

TEST(SampleToModel, AllAtOptimum) {
  const SubsetDistribution dist(3, {{{0, 1}, 0.3}, {{2}, 0.7}});
  const std::vector<ParamVector> params(3, vec({0.25, 4}));
  const auto r = check_sample_to_model(dist, params, vec({0.25, 4}));
  EXPECT_EQ(r.lhs, 0.0);
  EXPECT_EQ(r.rhs, 0.0);
}

// Both sides evaluated independently of the library, directly from atoms.
TEST(SampleToModel, RandomInstancesAgreeWithOracle) {
  Rng rng(2024);
  std::uniform_int_distribution<std::size_t> pick_n(1, 8);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = pick_n(rng);
    std::vector<Atom> atoms;
    std::set<Subset> seen;
    const std::size_t want = 1 + trial % 6;
    for (std::size_t k = 0; k < 40 && atoms.size() < want; ++k) {
      Subset s;
      for (std::size_t i = 0; i < n; ++i) {
        if (unit(rng) < 0.5) s.push_back(i);
      }
      if (s.empty() || !seen.insert(s).second) continue;
      atoms.push_back({s, unit(rng) + 0.01});
    }
    double total = 0.0;
    for (const auto& a : atoms) total += a.prob;
    for (auto& a : atoms) a.prob /= total;
    const SubsetDistribution dist(n, atoms);

    std::vector<ParamVector> params;
    for (std::size_t i = 0; i < n; ++i) params.push_back(testing::random_vector(3, 2.0, rng));
    const ParamVector star = testing::random_vector(3, 1.0, rng);

    double lhs = 0.0;
    std::vector<double> p(n, 0.0);
    for (const auto& a : dist.atoms()) {
      ParamVector mean = ParamVector::Zero(3);
      for (std::size_t i : a.subset) mean += params[i];
      mean /= static_cast<double>(a.subset.size());
      lhs += a.prob * (mean - star).squaredNorm();
      for (std::size_t i : a.subset) p[i] += a.prob / static_cast<double>(a.subset.size());
    }
    double rhs = 0.0;
    for (std::size_t i = 0; i < n; ++i) rhs += p[i] * (params[i] - star).squaredNorm();

    const auto r = check_sample_to_model(dist, params, star);
    EXPECT_NEAR(r.lhs, lhs, 1e-10);
    EXPECT_NEAR(r.rhs, rhs, 1e-10);
    EXPECT_TRUE(r.holds);
    EXPECT_LE(lhs, rhs + 1e-10);
  }
}

TEST(SampleToModel, RejectsMismatchedParams) {
  const SubsetDistribution dist(3, {{{0}, 1.0}});
  const std::vector<ParamVector> params{vec({1})};
  EXPECT_THROW(check_sample_to_model(dist, params, vec({0})), ValidationError);
}

ProblemConstants constants_of(double g, double sigma_sq, double lip = 1.0) {
  ProblemConstants c;
  c.gradient_bound = g;
  c.sigma_sq = sigma_sq;
  c.lipschitz = lip;
  c.client_sigma = {std::sqrt(sigma_sq)};
  return c;
}

TEST(OneStepProgress, ZeroStepIsEqualityInside) {
  const auto client = make_dataset({{1.0}, {2.0}, {-1.0}}, {0.5, 1.0, 0.0});
  Rng rng(1);
  const auto r = check_one_step_progress(vec({0.4}), client, LossModel::squared_error(), 0.0, ProjectionSet(5.0),
                                         vec({-0.2}), 2, constants_of(3.0, 1.0), rng);
  EXPECT_NEAR(r.lhs, 0.36, 1e-15);
  EXPECT_NEAR(r.rhs, 0.36, 1e-15);
  EXPECT_TRUE(r.holds);
}

// f(t) = mean (x t - y)^2 on a 1-D dataset, full batch: the step is
// deterministic and both sides have closed forms.
TEST(OneStepProgress, FullBatchOneDimClosedForm) {
  const std::vector<double> xs{1.0, 2.0, -0.5, 1.5};
  const std::vector<double> ys{0.7, 1.1, -0.6, 1.2};
  const auto client = make_dataset({{1.0}, {2.0}, {-0.5}, {1.5}}, {0.7, 1.1, -0.6, 1.2});
  double sxx = 0, sxy = 0, syy = 0;
  for (std::size_t k = 0; k < 4; ++k) {
    sxx += xs[k] * xs[k] / 4;
    sxy += xs[k] * ys[k] / 4;
    syy += ys[k] * ys[k] / 4;
  }
  const auto f = [&](double t) { return sxx * t * t - 2 * sxy * t + syy; };
  const double star = sxy / sxx;
  const double g = 4.0, sigma_sq = 0.0;
  Rng rng(5);
  for (double eta : {0.01, 0.05, 0.1}) {
    for (double theta : {-2.0, 0.0, 0.3, 1.7}) {
      const double next = theta - eta * 2 * (sxx * theta - sxy);  // radius is not active
      const double lhs = (next - star) * (next - star);
      const double rhs = (theta - star) * (theta - star) - 2 * eta * (f(theta) - f(star)) +
                         2 * eta * eta * sigma_sq + 2 * eta * eta * g * g;
      const auto r = check_one_step_progress(vec({theta}), client, LossModel::squared_error(), eta,
                                             ProjectionSet(100.0), vec({star}), 4, constants_of(g, sigma_sq), rng);
      EXPECT_NEAR(r.lhs, lhs, 1e-12);
      EXPECT_NEAR(r.rhs, rhs, 1e-12);
      EXPECT_GT(r.slack, 0.0);
      EXPECT_TRUE(r.holds);
    }
  }
}

// Exact expectation over all C(4, 2) batches, computed here by hand.
TEST(OneStepProgress, EnumeratedBatchesMatchOracle) {
  const std::vector<double> xs{1.0, -1.0, 0.5, 2.0};
  const std::vector<double> ys{0.0, 1.0, 0.5, -1.0};
  const auto client = make_dataset({{1.0}, {-1.0}, {0.5}, {2.0}}, {0.0, 1.0, 0.5, -1.0});
  const double theta = 0.8, star = -0.1, eta = 0.05;
  double lhs = 0.0;
  int count = 0;
  for (int a = 0; a < 4; ++a) {
    for (int b = a + 1; b < 4; ++b) {
      const double grad = (2 * xs[a] * (xs[a] * theta - ys[a]) + 2 * xs[b] * (xs[b] * theta - ys[b])) / 2;
      const double next = theta - eta * grad;
      lhs += (next - star) * (next - star);
      ++count;
    }
  }
  lhs /= count;
  Rng rng(0);
  const auto r = check_one_step_progress(vec({theta}), client, LossModel::squared_error(), eta, ProjectionSet(10.0),
                                         vec({star}), 2, constants_of(5.0, 2.0), rng);
  EXPECT_NEAR(r.lhs, lhs, 1e-14);
  EXPECT_EQ(r.samples, 6u);
}

TEST(OneStepProgress, AtConstrainedOptimum) {
  Rng rng(11);
  const auto model = LossModel::squared_error();
  const auto client = testing::random_dataset(6, 2, model, rng);
  const ProjectionSet set(0.05);
  const MarginalWeights p{{1.0}, std::nullopt};
  const std::vector<ClientDataset> one{client};
  const auto opt = solve_reference_optimum(p, one, model, set);
  const auto c = estimate_constants(model, one, set, 3, p, rng);
  for (double eta : {0.01, 0.05}) {
    const auto r = check_one_step_progress(opt.theta, client, model, eta, set, opt.theta, 3, c, rng);
    EXPECT_TRUE(r.holds);
    EXPECT_LE(r.lhs, 2 * eta * eta * (c.sigma_sq + c.gradient_bound * c.gradient_bound) + 1e-12);
  }
}

FederationData regression(std::size_t n, std::uint64_t seed = 0) {
  SynthRegressionSpec s;
  s.n_clients = n;
  s.samples_per_client = 20;
  s.dim = 5;
  s.seed = seed;
  return generate_regression(s);
}

RunConfig window_config() {
  RunConfig c;
  c.local_steps = 4;
  c.global_rounds = 15;
  c.step = StepSize::constant(0.01);
  c.batch_size = 5;
  return c;
}

TEST(Divergence, SingleClientIsZero) {
  const auto data = regression(1);
  const auto sampler = ParticipationSampler::fixed_size_weighted({1}, 1);
  const auto m = measure_window_divergence(window_config(), sampler, data, 3);
  EXPECT_EQ(m.max_param_distance(), 0.0);
  EXPECT_EQ(m.max_value_gap(), 0.0);
  EXPECT_TRUE(local_divergence_report(m, window_config(), constants_of(1.0, 0.0)).holds);
}

TEST(Divergence, FrozenParameters) {
  auto c = window_config();
  c.step = StepSize::constant(0.0);
  const auto data = regression(4);
  const auto m =
      measure_window_divergence(c, ParticipationSampler::fixed_size_weighted({1, 2, 3, 4}, 2), data, 2);
  EXPECT_EQ(m.max_param_distance(), 0.0);
  EXPECT_EQ(m.max_value_gap(), 0.0);
}

TEST(Divergence, ConstantLossHasNoValueGap) {
  FederationData data;
  data.model = LossModel::squared_error();
  for (int i = 0; i < 3; ++i) data.datasets.push_back(make_dataset({{0, 0}, {0, 0}}, {1.0 + i, -1.0}));
  auto c = window_config();
  c.batch_size = 2;
  const auto m = measure_window_divergence(c, ParticipationSampler::fixed_size_weighted({1, 1, 1}, 2), data, 2);
  EXPECT_EQ(m.max_value_gap(), 0.0);
}

TEST(Divergence, ReportsUseStatedBounds) {
  WindowDivergence m;
  m.param_distance = {0.1, 0.3, 0.2};
  m.value_gap = {0.05, 0.01, 0.02};
  m.seeds = 4;
  const auto c = window_config();
  const auto consts = constants_of(2.0, 0.0, 3.0);
  const auto local = local_divergence_report(m, c, consts);
  EXPECT_DOUBLE_EQ(local.lhs, 0.3);
  EXPECT_DOUBLE_EQ(local.rhs, 4 * 0.01 * 2.0 * 4);
  const auto value = value_divergence_report(m, c, consts);
  EXPECT_DOUBLE_EQ(value.lhs, 0.05);
  EXPECT_DOUBLE_EQ(value.rhs, 2 * 3.0 * 0.01 * 2.0 * 4);
}

TEST(Divergence, RegressionHoldsWithSlack) {
  const auto data = regression(5, 1);
  const auto sampler = ParticipationSampler::fixed_size_weighted(exponential_weights(5, 10.0), 2);
  const auto p = compute_marginals_exact(enumerate_sampler_distribution(sampler));
  const auto c = window_config();
  Rng rng(3);
  const auto consts = estimate_constants(data.model, data.datasets, c.projection, c.batch_size, p, rng);
  const auto local = check_local_divergence(c, sampler, data, 8, consts);
  const auto value = check_value_divergence(c, sampler, data, 8, consts);
  EXPECT_TRUE(local.holds);
  EXPECT_GT(local.slack, 0.0);
  EXPECT_GT(local.lhs, 0.0);
  EXPECT_TRUE(value.holds);
  EXPECT_GT(value.slack, 0.0);
}

TEST(FitRate, PlantedLaw) {
  const auto fit = fit_rate({{100, 3.0 / 10}, {400, 3.0 / 20}, {1600, 3.0 / 40}});
  EXPECT_NEAR(fit.slope, -0.5, 1e-9);
  EXPECT_NEAR(fit.r_squared, 1.0, 1e-12);
  EXPECT_NEAR(fit.intercept, std::log(3.0), 1e-9);
  const auto other = fit_rate({{10, 2 * std::pow(10.0, -0.8)}, {30, 2 * std::pow(30.0, -0.8)},
                               {70, 2 * std::pow(70.0, -0.8)}, {500, 2 * std::pow(500.0, -0.8)}});
  EXPECT_NEAR(other.slope, -0.8, 1e-9);
}

TEST(FitRate, ConstantHasZeroSlope) {
  const auto fit = fit_rate({{64, 0.2}, {256, 0.2}, {1024, 0.2}});
  EXPECT_NEAR(fit.slope, 0.0, 1e-12);
}

TEST(FitRate, ExcludesNonpositive) {
  const auto fit = fit_rate({{64, 0.1}, {256, 0.05}, {1024, 0.0}});
  EXPECT_EQ(fit.excluded, std::vector<double>{1024});
  EXPECT_EQ(fit.horizons.size(), 2u);
  EXPECT_NEAR(fit.slope, -0.5, 1e-12);
  EXPECT_THROW(fit_rate({{64, 0.1}, {256, -1e-3}}), ValidationError);
  EXPECT_THROW(fit_rate({}), ValidationError);
}

TEST(Pearson, KnownValues) {
  const std::vector<double> x{1, 2, 3, 4};
  const std::vector<double> up{2, 4, 6, 8}, down{4, 3, 2, 1}, flat{5, 5, 5, 5};
  EXPECT_NEAR(pearson_correlation(x, up), 1.0, 1e-15);
  EXPECT_NEAR(pearson_correlation(x, down), -1.0, 1e-15);
  EXPECT_TRUE(std::isnan(pearson_correlation(x, flat)));
  const std::vector<double> y{1, 3, 2, 5};
  // sum dx dy = 5.5, sum dx^2 = 5, sum dy^2 = 8.75
  EXPECT_NEAR(pearson_correlation(x, y), 5.5 / std::sqrt(5.0 * 8.75), 1e-14);
}

TEST(CompareRules, UniformMarginalsGiveZeroDifference) {
  const auto data = regression(4);
  const auto sampler = ParticipationSampler::fixed_size_weighted({1, 1, 1, 1}, 2);
  const std::vector<std::uint64_t> seeds{0, 1, 2};
  for (const auto& r : compare_rules(window_config(), sampler, data, uniform_marginals(4), seeds)) {
    EXPECT_EQ(r.difference(), 0.0);
    EXPECT_EQ(r.skew, 0.0);
  }
}

TEST(CompareRules, SingleClientIdentical) {
  const auto data = regression(1);
  const std::vector<std::uint64_t> seeds{7};
  const auto out = compare_rules(window_config(), ParticipationSampler::fixed_size_weighted({1}, 1), data,
                                 uniform_marginals(1), seeds);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0].seed, 7u);
  EXPECT_EQ(out[0].agnostic, out[0].weighted);
}

TEST(MeasureRate, DecreasesWithHorizon) {
  SynthRegressionSpec s;
  s.n_clients = 4;
  s.samples_per_client = 20;
  s.dim = 3;
  s.noise_std = 0.0;
  const auto data = generate_regression(s);
  const auto sampler = ParticipationSampler::fixed_size_weighted(exponential_weights(4, 10.0), 2);
  const auto p = compute_marginals_exact(enumerate_sampler_distribution(sampler));
  RunConfig base;
  base.local_steps = 4;
  base.batch_size = 20;
  base.step = StepSize::inv_sqrt_th(1.0);
  base.projection = ProjectionSet(100.0);
  const auto opt = solve_reference_optimum(p, data.datasets, data.model, base.projection);
  const std::vector<std::size_t> horizons{16, 64, 256};
  const auto subs = measure_rate(base, sampler, data, p, opt.value, horizons);
  ASSERT_EQ(subs.size(), 3u);
  EXPECT_GT(subs.at(16), subs.at(64));
  EXPECT_GT(subs.at(64), subs.at(256));
  EXPECT_GE(subs.at(256), 0.0);
}

}  // namespace
}  // namespace agnofed
