#include "agnofed/commands.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

#include "agnofed/analysis.hpp"
#include "agnofed/error.hpp"
#include "agnofed/plot.hpp"

namespace agnofed {

namespace {

// Raised while reading the config; `key` is used to find a line number.
struct FieldError {
  std::string key;
  std::string message;
};

[[noreturn]] void field_error(const std::string& key, const std::string& message) { throw FieldError{key, message}; }

std::size_t line_of_offset(const std::string& text, std::size_t offset) {
  offset = std::min(offset, text.size());
  return 1 + static_cast<std::size_t>(std::count(text.begin(), text.begin() + static_cast<long>(offset), '\n'));
}

std::size_t line_of_key(const std::string& text, const std::string& key) {
  if (key.empty()) return 0;
  const auto pos = text.find('"' + key + '"');
  return pos == std::string::npos ? 0 : line_of_offset(text, pos);
}

void reject_unknown(const Json& j, const std::string& where, std::initializer_list<const char*> known) {
  const std::set<std::string> allowed(known.begin(), known.end());
  for (const auto& [key, value] : j.items()) {
    if (!allowed.count(key)) field_error(key, "unknown field \"" + key + "\" in " + where);
  }
}

const Json* find(const Json& j, const char* key) {
  const auto it = j.find(key);
  return it == j.end() ? nullptr : &*it;
}

std::size_t get_count(const Json& j, const char* key, std::size_t fallback, std::size_t min_value = 0) {
  const Json* v = find(j, key);
  if (!v) return fallback;
  if (!v->is_number_integer() || v->get<long long>() < static_cast<long long>(min_value)) {
    field_error(key, std::string("\"") + key + "\" must be an integer >= " + std::to_string(min_value));
  }
  return v->get<std::size_t>();
}

double get_real(const Json& j, const char* key, double fallback) {
  const Json* v = find(j, key);
  if (!v) return fallback;
  if (!v->is_number()) field_error(key, std::string("\"") + key + "\" must be a number");
  return v->get<double>();
}

bool get_bool(const Json& j, const char* key, bool fallback) {
  const Json* v = find(j, key);
  if (!v) return fallback;
  if (!v->is_boolean()) field_error(key, std::string("\"") + key + "\" must be true or false");
  return v->get<bool>();
}

std::string get_string(const Json& j, const char* key, const std::string& fallback) {
  const Json* v = find(j, key);
  if (!v) return fallback;
  if (!v->is_string()) field_error(key, std::string("\"") + key + "\" must be a string");
  return v->get<std::string>();
}

const Json& get_object(const Json& j, const char* key) {
  static const Json empty = Json::object();
  const Json* v = find(j, key);
  if (!v) return empty;
  if (!v->is_object()) field_error(key, std::string("\"") + key + "\" must be an object");
  return *v;
}

void apply_overrides(Json& j, const SpecOverrides& o) {
  auto& run = j["run"];
  if (!run.is_object()) run = Json::object();
  if (o.seed) j["seeds"] = Json::array({*o.seed});
  if (o.seeds) j["seeds"] = *o.seeds;
  if (o.out) j["out"] = o.out->string();
  if (o.global_rounds) run["global_rounds"] = *o.global_rounds;
  if (o.local_steps) run["local_steps"] = *o.local_steps;
  if (o.step_size) run["step_size"] = *o.step_size;
  if (o.batch_size) run["batch_size"] = *o.batch_size;
  if (o.radius) run["radius"] = *o.radius;
  if (o.rules) j["rules"] = *o.rules;
}

SynthRegressionSpec read_synth(const Json& d) {
  reject_unknown(d, "data", {"n_clients", "samples_per_client", "dim", "noise_std", "heterogeneity", "seed"});
  SynthRegressionSpec s;
  s.n_clients = get_count(d, "n_clients", s.n_clients, 1);
  s.samples_per_client = get_count(d, "samples_per_client", s.samples_per_client, 1);
  s.dim = get_count(d, "dim", s.dim, 1);
  s.noise_std = get_real(d, "noise_std", s.noise_std);
  s.heterogeneity = get_real(d, "heterogeneity", s.heterogeneity);
  s.seed = get_count(d, "seed", 0);
  if (!(s.noise_std >= 0.0)) field_error("noise_std", "\"noise_std\" must be >= 0");
  if (!(s.heterogeneity >= 0.0)) field_error("heterogeneity", "\"heterogeneity\" must be >= 0");
  return s;
}

MnistSpec read_mnist(const Json& d) {
  reject_unknown(d, "data", {"images", "labels", "partition", "limit", "n_clients", "seed"});
  MnistSpec m;
  m.images = get_string(d, "images", "");
  m.labels = get_string(d, "labels", "");
  if (m.images.empty()) field_error("images", "mnist-logistic needs \"images\" (IDX image file)");
  if (m.labels.empty()) field_error("labels", "mnist-logistic needs \"labels\" (IDX label file)");
  const std::string part = get_string(d, "partition", "iid");
  if (part == "iid") m.strategy = PartitionStrategy::kIidShards;
  else if (part == "label-sorted") m.strategy = PartitionStrategy::kLabelSorted;
  else field_error("partition", "\"partition\" must be \"iid\" or \"label-sorted\"");
  m.limit = get_count(d, "limit", m.limit);
  m.n_clients = get_count(d, "n_clients", m.n_clients, 1);
  m.seed = get_count(d, "seed", 0);
  return m;
}

StepSize read_step(const Json& run) {
  const Json* v = find(run, "step_size");
  if (!v) return StepSize::constant(0.01);
  if (v->is_number()) return StepSize::constant(v->get<double>());
  if (v->is_object()) {
    const std::string schedule = get_string(*v, "schedule", "");
    if (schedule != "inv-sqrt-th") field_error("schedule", "step schedule must be \"inv-sqrt-th\"");
    return StepSize::inv_sqrt_th(get_real(*v, "c", 1.0));
  }
  field_error("step_size", "\"step_size\" must be a number or {\"schedule\": \"inv-sqrt-th\", \"c\": ...}");
}

RunConfig read_run(const Json& run) {
  reject_unknown(run, "run", {"local_steps", "global_rounds", "step_size", "batch_size", "radius", "project_weighted"});
  RunConfig c;
  c.local_steps = get_count(run, "local_steps", c.local_steps, 1);
  c.global_rounds = get_count(run, "global_rounds", c.global_rounds, 1);
  c.step = read_step(run);
  if (!(c.step.value > 0.0) || !std::isfinite(c.step.value)) field_error("step_size", "step size must be > 0");
  c.batch_size = get_count(run, "batch_size", c.batch_size, 1);
  const double radius = get_real(run, "radius", 10.0);
  if (!(radius > 0.0) || !std::isfinite(radius)) field_error("radius", "\"radius\" must be > 0");
  c.projection = ProjectionSet(radius);
  c.project_weighted = get_bool(run, "project_weighted", false);
  return c;
}

MarginalsSpec read_marginals(const Json& m) {
  reject_unknown(m, "marginals", {"mode", "draws"});
  MarginalsSpec s;
  const std::string mode = get_string(m, "mode", "auto");
  if (mode == "auto") s.mode = MarginalsMode::kAuto;
  else if (mode == "exact") s.mode = MarginalsMode::kExact;
  else if (mode == "estimate") s.mode = MarginalsMode::kEstimate;
  else field_error("mode", "marginals \"mode\" must be auto, exact or estimate");
  s.draws = get_count(m, "draws", s.draws);
  if (s.mode != MarginalsMode::kExact && s.draws == 0) field_error("draws", "\"draws\" must be >= 1");
  return s;
}

std::string format_fixed(double v, int precision = 6) {
  if (!std::isfinite(v)) return format_number(v);
  std::ostringstream s;
  s << std::setprecision(precision) << v;
  return s.str();
}

std::size_t sampler_clients(const ParticipationSampler& sampler) { return sampler.n_clients(); }

bool is_symmetric(const ParticipationSampler& sampler) {
  if (const auto* f = std::get_if<FixedSizeWeightedSampler>(&sampler.variant())) {
    return std::adjacent_find(f->weights.begin(), f->weights.end(), std::not_equal_to<>()) == f->weights.end();
  }
  if (const auto* b = std::get_if<BernoulliSampler>(&sampler.variant())) {
    return std::adjacent_find(b->probs.begin(), b->probs.end(), std::not_equal_to<>()) == b->probs.end();
  }
  return false;
}

Json manifest_base(const ExperimentSpec& spec, const std::string& command) {
  const std::string dumped = spec.config.dump();
  char hash[17];
  std::snprintf(hash, sizeof(hash), "%016llx", static_cast<unsigned long long>(fnv1a(dumped)));
  return {{"tool", "agnofed"}, {"version", kVersion}, {"command", command}, {"config", spec.config},
          {"config_hash", std::string("fnv1a64:") + hash}, {"seeds", spec.seeds}};
}

std::string csv_number(double v) { return format_number(v); }

// Random explicit distribution over distinct nonempty subsets of [0, n).
SubsetDistribution random_distribution(std::size_t n, Rng& rng) {
  const std::uint64_t universe = (std::uint64_t{1} << n) - 1;
  std::uniform_int_distribution<std::uint64_t> mask_dist(1, universe);
  const std::size_t max_atoms = static_cast<std::size_t>(std::min<std::uint64_t>(universe, 12));
  const std::size_t atoms_wanted = std::uniform_int_distribution<std::size_t>(1, max_atoms)(rng);
  std::set<std::uint64_t> masks;
  while (masks.size() < atoms_wanted) masks.insert(mask_dist(rng));
  std::exponential_distribution<double> mass(1.0);
  std::vector<Atom> atoms;
  double total = 0.0;
  for (std::uint64_t mask : masks) {
    Atom a;
    for (std::size_t i = 0; i < n; ++i) {
      if (mask >> i & 1U) a.subset.push_back(i);
    }
    a.prob = mass(rng);
    total += a.prob;
    atoms.push_back(std::move(a));
  }
  for (auto& a : atoms) a.prob /= total;
  return SubsetDistribution(n, std::move(atoms));
}

// Keeps the report with the smallest slack relative to its tolerance.
struct WorstOf {
  std::optional<InequalityReport> worst;
  std::size_t samples = 0;
  std::size_t failures = 0;

  void add(const InequalityReport& r) {
    samples += r.samples;
    failures += r.holds ? 0 : 1;
    if (!worst || r.slack + r.tolerance < worst->slack + worst->tolerance) worst = r;
  }

  InequalityReport finish(const std::string& name, std::size_t instances) const {
    InequalityReport r = *worst;
    r.name = name;
    r.samples = samples;
    r.holds = failures == 0;
    std::ostringstream note;
    note << "worst of " << instances << " instances, " << failures << " failing; " << worst->note;
    r.note = note.str();
    return r;
  }
};

struct VerifySuite {
  std::vector<InequalityReport> reports;
  std::optional<RateFit> rate;
  bool rate_holds = false;
  Json constants = Json::object();
};

constexpr double kRateSlopeLow = -0.7;
constexpr double kRateSlopeHigh = -0.3;
constexpr double kRateMinR2 = 0.9;

ProblemConstants shrink(ProblemConstants c, double factor) {
  c.gradient_bound /= factor;
  return c;
}

void verify_normalization(VerifySuite& suite, std::size_t instances, Rng& rng) {
  double worst = 0.0;
  for (std::size_t k = 0; k < instances; ++k) {
    const std::size_t n = std::uniform_int_distribution<std::size_t>(1, 10)(rng);
    const MarginalWeights p = compute_marginals_exact(random_distribution(n, rng));
    double sum = 0.0;
    for (double x : p.p) sum += x;
    worst = std::max(worst, std::abs(sum - 1.0));
  }
  suite.reports.push_back(make_report("marginal-normalization", worst, 0.0, 1e-12, instances,
                                      "max |sum p - 1| over random explicit distributions, N <= 10"));
}

void verify_sample_to_model(VerifySuite& suite, std::size_t instances, Rng& rng) {
  WorstOf general;
  double singleton_gap = 0.0;
  for (std::size_t k = 0; k < instances; ++k) {
    const std::size_t n = std::uniform_int_distribution<std::size_t>(1, 8)(rng);
    const std::size_t dim = std::uniform_int_distribution<std::size_t>(1, 5)(rng);
    const SubsetDistribution dist = random_distribution(n, rng);
    std::vector<ParamVector> params;
    for (std::size_t i = 0; i < n; ++i) params.push_back(sample_in_ball(dim, 5.0, rng));
    const ParamVector star = sample_in_ball(dim, 5.0, rng);
    general.add(check_sample_to_model(dist, params, star));

    std::vector<Atom> singles;
    std::exponential_distribution<double> mass(1.0);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      singles.push_back({{i}, mass(rng)});
      total += singles.back().prob;
    }
    for (auto& a : singles) a.prob /= total;
    const auto eq = check_sample_to_model(SubsetDistribution(n, std::move(singles)), params, star);
    singleton_gap = std::max(singleton_gap, std::abs(eq.lhs - eq.rhs));
  }
  suite.reports.push_back(general.finish("sample-to-model", instances));
  suite.reports.push_back(make_report("sample-to-model-singletons", singleton_gap, 0.0, 1e-12, instances,
                                      "max |lhs - rhs| when every atom is a single client"));
}

struct OneStepFixture {
  std::string name;
  FederationData data;
  double radius;
  std::size_t batch_size;
};

std::vector<OneStepFixture> one_step_fixtures(std::uint64_t seed) {
  std::vector<OneStepFixture> out;
  SynthRegressionSpec s;
  s.n_clients = 3;
  s.samples_per_client = 8;
  s.dim = 3;
  s.noise_std = 0.3;
  s.heterogeneity = 1.0;
  s.seed = seed;
  out.push_back({"regression", generate_regression(s), 2.0, 3});

  // Three-class softmax on 2-d points scattered around class centres.
  Rng rng = make_stream(seed, StreamTag::kVerify, 101);
  std::normal_distribution<double> noise(0.0, 0.7);
  FederationData logistic;
  logistic.model = LossModel::multinomial_logistic(3);
  const double centres[3][2] = {{1.0, 0.0}, {-0.5, 0.9}, {-0.5, -0.9}};
  for (std::size_t c = 0; c < 3; ++c) {
    ClientDataset d;
    d.features.resize(8, 2);
    d.targets.resize(8);
    for (Eigen::Index r = 0; r < 8; ++r) {
      const std::size_t label = (c + static_cast<std::size_t>(r)) % 3;
      d.features(r, 0) = centres[label][0] + noise(rng);
      d.features(r, 1) = centres[label][1] + noise(rng);
      d.targets(r) = static_cast<double>(label);
    }
    logistic.datasets.push_back(std::move(d));
  }
  out.push_back({"logistic", std::move(logistic), 2.0, 2});

  // One client, full batch, curvature around 25: eta * lambda exceeds 1/2 for
  // the larger steps, so the 2 eta^2 G^2 term is what keeps the bound valid.
  FederationData stiff;
  stiff.model = LossModel::squared_error();
  ClientDataset d;
  d.features.resize(8, 2);
  d.targets.resize(8);
  std::normal_distribution<double> unit(0.0, 1.0);
  for (Eigen::Index r = 0; r < 8; ++r) {
    d.features(r, 0) = 5.0 * unit(rng);
    d.features(r, 1) = 5.0 * unit(rng);
    d.targets(r) = 0.6 * d.features(r, 0) - 0.4 * d.features(r, 1);
  }
  stiff.datasets.push_back(std::move(d));
  out.push_back({"stiff", std::move(stiff), 2.0, 8});
  return out;
}

void verify_one_step(VerifySuite& suite, std::size_t instances, double shrink_g, std::uint64_t seed, Rng& rng) {
  for (const auto& fx : one_step_fixtures(seed)) {
    const auto& data = fx.data;
    const std::size_t n = data.n_clients();
    const MarginalWeights p = compute_marginals_exact(
        enumerate_sampler_distribution(ParticipationSampler::fixed_size_weighted(exponential_weights(n, 2.0), std::min<std::size_t>(2, n))));
    const ProjectionSet ball(fx.radius);
    Rng crng = make_stream(seed, StreamTag::kConstants, 1);
    const ProblemConstants constants =
        shrink(estimate_constants(data.model, data.datasets, ball, fx.batch_size, p, crng), shrink_g);
    suite.constants["one-step-" + fx.name] = to_json(constants);
    const ReferenceOptimum star = solve_reference_optimum(p, data.datasets, data.model, ball);

    WorstOf random_points;
    std::uniform_real_distribution<double> eta(1e-4, 0.05);
    std::uniform_int_distribution<std::size_t> client(0, n - 1);
    for (std::size_t k = 0; k < instances; ++k) {
      const ParamVector theta = sample_in_ball(data.param_dim(), fx.radius, rng);
      random_points.add(check_one_step_progress(theta, data.datasets[client(rng)], data.model, eta(rng), ball,
                                                star.theta, fx.batch_size, constants, rng));
    }
    suite.reports.push_back(random_points.finish("one-step-progress/" + fx.name, instances));

    // At the optimum of a ball small enough to bind, the projection is active
    // and the bound is tightest.
    const ReferenceOptimum free = solve_reference_optimum(p, data.datasets, data.model, ProjectionSet(1e6));
    const ProjectionSet tight(std::max(1e-3, 0.5 * free.theta.norm()));
    Rng trng = make_stream(seed, StreamTag::kConstants, 2);
    const ProblemConstants tight_constants =
        shrink(estimate_constants(data.model, data.datasets, tight, fx.batch_size, p, trng), shrink_g);
    const ReferenceOptimum tight_star = solve_reference_optimum(p, data.datasets, data.model, tight);
    WorstOf at_optimum;
    for (std::size_t i = 0; i < n; ++i) {
      for (double step : {0.01, 0.05}) {
        at_optimum.add(check_one_step_progress(tight_star.theta, data.datasets[i], data.model, step, tight,
                                               tight_star.theta, fx.batch_size, tight_constants, rng));
      }
    }
    suite.reports.push_back(at_optimum.finish("one-step-at-optimum/" + fx.name, 2 * n));
  }
}

void verify_windows(VerifySuite& suite, bool full, double shrink_g, std::uint64_t seed) {
  SynthRegressionSpec s;
  s.n_clients = 5;
  s.samples_per_client = 20;
  s.dim = 5;
  s.seed = seed;
  const FederationData data = generate_regression(s);
  const auto sampler = ParticipationSampler::fixed_size_weighted(exponential_weights(5, 10.0), 2);
  const MarginalWeights p = compute_marginals_exact(enumerate_sampler_distribution(sampler));
  RunConfig config;
  config.local_steps = 4;
  config.global_rounds = full ? 50 : 25;
  config.step = StepSize::constant(0.01);
  config.batch_size = 5;
  config.seed = seed;
  Rng crng = make_stream(seed, StreamTag::kConstants, 3);
  const ProblemConstants constants = shrink(
      estimate_constants(data.model, data.datasets, config.projection, config.batch_size, p, crng), shrink_g);
  suite.constants["windows"] = to_json(constants);
  const std::size_t seeds = full ? 20 : 5;
  const WindowDivergence measured = measure_window_divergence(config, sampler, data, seeds);
  suite.reports.push_back(local_divergence_report(measured, config, constants));
  suite.reports.push_back(value_divergence_report(measured, config, constants));
  const ReferenceOptimum star = solve_reference_optimum(p, data.datasets, data.model, config.projection);
  suite.reports.push_back(check_window_recursion(config, sampler, data, seeds, constants, star.theta));
}

void verify_rate(VerifySuite& suite, bool full, std::uint64_t seed) {
  SynthRegressionSpec s;
  s.n_clients = 10;
  s.samples_per_client = 50;
  s.dim = 5;
  s.noise_std = 0.0;
  s.seed = seed;
  const FederationData data = generate_regression(s);
  const auto sampler = ParticipationSampler::fixed_size_weighted(exponential_weights(10, 10.0), 3);
  const MarginalWeights p = compute_marginals_exact(enumerate_sampler_distribution(sampler));
  const ReferenceOptimum free = solve_reference_optimum(p, data.datasets, data.model, ProjectionSet(1e6));
  RunConfig config;
  config.local_steps = 5;
  config.batch_size = s.samples_per_client;
  config.step = StepSize::inv_sqrt_th(1.0);
  config.projection = ProjectionSet(0.5 * free.theta.norm());
  config.seed = seed;
  const ReferenceOptimum star = solve_reference_optimum(p, data.datasets, data.model, config.projection);
  std::vector<std::size_t> horizons{64, 256, 1024};
  if (full) horizons.push_back(4096);
  suite.rate = fit_rate(measure_rate(config, sampler, data, p, star.value, horizons));
  suite.rate_holds = suite.rate->slope >= kRateSlopeLow && suite.rate->slope <= kRateSlopeHigh &&
                     suite.rate->r_squared >= kRateMinR2;
}

}  // namespace

SpecError::SpecError(const std::string& message, std::size_t line)
    : ValidationError(line > 0 ? "config line " + std::to_string(line) + ": " + message : "config: " + message),
      line_(line) {}

ExperimentSpec parse_experiment_spec(const std::string& text, const SpecOverrides& overrides) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw SpecError(std::string("malformed JSON: ") + e.what(), line_of_offset(text, e.byte > 0 ? e.byte - 1 : 0));
  }
  if (!j.is_object()) throw SpecError("top level must be a JSON object", 1);
  try {
    apply_overrides(j, overrides);
    reject_unknown(j, "config", {"task", "data", "run", "sampler", "marginals", "rules", "seeds", "out",
                                 "reference_optimum", "constants"});
    ExperimentSpec spec;
    spec.task = get_string(j, "task", spec.task);
    const Json& data = get_object(j, "data");
    std::size_t n_clients = 0;
    if (spec.task == "synth-regression") {
      spec.synth = read_synth(data);
      n_clients = spec.synth.n_clients;
    } else if (spec.task == "mnist-logistic") {
      spec.mnist = read_mnist(data);
      n_clients = spec.mnist.n_clients;
    } else {
      field_error("task", "\"task\" must be \"synth-regression\" or \"mnist-logistic\"");
    }
    spec.run = read_run(get_object(j, "run"));
    spec.run.n_clients = n_clients;

    if (!j.contains("sampler")) field_error("sampler", "missing \"sampler\" descriptor");
    spec.sampler = j.at("sampler");
    if (!spec.sampler.is_object()) field_error("sampler", "\"sampler\" must be an object");
    try {
      const auto sampler = build_sampler(spec.sampler, n_clients);
      if (sampler.n_clients() != n_clients) {
        field_error("sampler", "sampler covers " + std::to_string(sampler.n_clients()) + " clients but the data has " +
                                   std::to_string(n_clients));
      }
    } catch (const ValidationError& e) {
      field_error("sampler", e.what());
    }
    spec.marginals = read_marginals(get_object(j, "marginals"));

    if (const Json* rules = find(j, "rules")) {
      if (!rules->is_array() || rules->empty()) field_error("rules", "\"rules\" must be a nonempty array");
      spec.rules.clear();
      for (const auto& r : *rules) {
        if (!r.is_string() || (r != "agnostic" && r != "weighted")) {
          field_error("rules", "rules must be \"agnostic\" or \"weighted\"");
        }
        if (std::find(spec.rules.begin(), spec.rules.end(), r.get<std::string>()) == spec.rules.end()) {
          spec.rules.push_back(r.get<std::string>());
        }
      }
    }
    if (const Json* seeds = find(j, "seeds")) {
      if (!seeds->is_array() || seeds->empty()) field_error("seeds", "\"seeds\" must be a nonempty array");
      spec.seeds.clear();
      for (const auto& s : *seeds) {
        if (!s.is_number_unsigned()) field_error("seeds", "seeds must be nonnegative integers");
        spec.seeds.push_back(s.get<std::uint64_t>());
      }
    }
    spec.out = get_string(j, "out", spec.out.string());
    const bool mnist = spec.task == "mnist-logistic";
    spec.reference_optimum = get_bool(j, "reference_optimum", !mnist);
    const Json& constants = get_object(j, "constants");
    reject_unknown(constants, "constants", {"theta_samples"});
    spec.constants_theta_samples = get_count(constants, "theta_samples", mnist ? 0 : 64);

    spec.config = j;
    return spec;
  } catch (const FieldError& e) {
    throw SpecError(e.message, line_of_key(text, e.key));
  } catch (const Json::exception& e) {
    throw SpecError(e.what(), 0);
  }
}

ExperimentSpec load_experiment_spec(const std::filesystem::path& path, const SpecOverrides& overrides) {
  return parse_experiment_spec(read_text(path), overrides);
}

FederationData build_federation(const ExperimentSpec& spec) {
  if (spec.task == "synth-regression") return generate_regression(spec.synth);
  const MnistData mnist = load_mnist_idx(spec.mnist.images, spec.mnist.labels, spec.mnist.limit);
  Eigen::VectorXd labels(static_cast<Eigen::Index>(mnist.labels.size()));
  for (std::size_t k = 0; k < mnist.labels.size(); ++k) labels(static_cast<Eigen::Index>(k)) = mnist.labels[k];
  FederationData data = partition(mnist.features, labels, spec.mnist.n_clients, spec.mnist.strategy, spec.mnist.seed,
                                  LossModel::multinomial_logistic(10));
  data.meta["images"] = spec.mnist.images.string();
  data.meta["labels"] = spec.mnist.labels.string();
  data.meta["limit"] = spec.mnist.limit;
  return data;
}

ParticipationSampler build_sampler(const Json& descriptor, std::size_t n_clients) {
  Json d = descriptor;
  if (d.is_object() && d.value("kind", "") == "fixed-size-weighted" && !d.contains("weights") &&
      !d.contains("n_clients")) {
    d["n_clients"] = n_clients;
  }
  return parse_sampler(d);
}

ResolvedMarginals resolve_marginals(const ParticipationSampler& sampler, const MarginalsSpec& spec,
                                    std::uint64_t seed) {
  auto estimate = [&] {
    if (spec.draws == 0) throw ValidationError("estimate mode needs draws >= 1");
    Rng rng = make_stream(seed, StreamTag::kMarginals);
    return ResolvedMarginals{estimate_marginals(sampler, spec.draws, rng), "estimate"};
  };
  switch (spec.mode) {
    case MarginalsMode::kExact:
      return {compute_marginals_exact(enumerate_sampler_distribution(sampler)), "exact"};
    case MarginalsMode::kEstimate:
      return estimate();
    case MarginalsMode::kAuto:
      break;
  }
  if (std::holds_alternative<ExplicitSampler>(sampler.variant())) {
    return {compute_marginals_exact(enumerate_sampler_distribution(sampler)), "exact"};
  }
  if (is_symmetric(sampler)) return {uniform_marginals(sampler_clients(sampler)), "exact-symmetric"};
  try {
    return {compute_marginals_exact(enumerate_sampler_distribution(sampler)), "exact"};
  } catch (const CapacityError&) {
    return estimate();
  }
}

std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

int cmd_run(const ExperimentSpec& spec, std::ostream& out, std::ostream& err) {
  try {
    const FederationData data = build_federation(spec);
    const ParticipationSampler sampler = build_sampler(spec.sampler, data.n_clients());
    const ResolvedMarginals marginals = resolve_marginals(sampler, spec.marginals, 0);
    const MarginalWeights& p = marginals.weights;

    ObjectiveReference objective{p, std::nullopt};
    Json manifest = manifest_base(spec, "run");
    if (spec.reference_optimum) {
      const ReferenceOptimum star =
          solve_reference_optimum(p, data.datasets, data.model, spec.run.projection);
      objective.optimum_value = star.value;
      manifest["optimum"] = {{"value", star.value},
                             {"method", star.method},
                             {"converged", star.converged},
                             {"iterations", star.iterations}};
    } else {
      manifest["optimum"] = nullptr;
    }
    if (spec.constants_theta_samples > 0) {
      Rng rng = make_stream(0, StreamTag::kConstants);
      ConstantsOptions opts;
      opts.theta_samples = spec.constants_theta_samples;
      manifest["constants"] =
          to_json(estimate_constants(data.model, data.datasets, spec.run.projection, spec.run.batch_size, p, rng, opts));
    } else {
      manifest["constants"] = nullptr;
    }

    std::ostringstream csv;
    csv << "rule,seed,round,subset_size,objective_aggregate,objective_running_avg,suboptimality\n";
    Json runs = Json::array();
    out << std::left << std::setw(10) << "rule" << std::setw(8) << "seed" << std::setw(18) << "final objective"
        << "suboptimality\n";
    for (const auto& rule_id : spec.rules) {
      const AggregationRule rule = rule_id == "weighted" ? AggregationRule{WeightedRule{p}} : AgnosticRule{};
      for (std::uint64_t seed : spec.seeds) {
        RunConfig cfg = spec.run;
        cfg.seed = seed;
        const RunTrace trace = run_fedavg(cfg, sampler, rule, data, objective);
        const auto dir = spec.out / rule_id / std::to_string(seed);
        write_trace_jsonl(dir / "trace.jsonl", trace);
        write_final_state(dir / "final_state.json", trace);
        for (const auto& r : trace.rounds) {
          csv << rule_id << ',' << seed << ',' << r.round << ',' << r.subset.size() << ','
              << csv_number(r.objective_aggregate) << ',' << csv_number(r.objective_running_avg) << ','
              << (r.suboptimality ? csv_number(*r.suboptimality) : "") << '\n';
        }
        const double final_value = global_objective(trace.averaged, p, data.datasets, data.model);
        runs.push_back({{"rule", rule_id},
                        {"seed", seed},
                        {"trace", (std::filesystem::path(rule_id) / std::to_string(seed) / "trace.jsonl").string()},
                        {"final_objective", final_value}});
        out << std::setw(10) << rule_id << std::setw(8) << seed << std::setw(18) << format_fixed(final_value)
            << (objective.optimum_value ? format_fixed(final_value - *objective.optimum_value) : "-") << '\n';
      }
    }
    write_text(spec.out / "summary.csv", csv.str());
    manifest["marginals"] = to_json(p);
    manifest["marginals_mode"] = marginals.mode;
    manifest["skew"] = participation_skew(p);
    manifest["data"] = data.meta;
    manifest["runs"] = std::move(runs);
    write_text(spec.out / "manifest.json", manifest.dump(2) + "\n");
    out << "wrote " << (spec.out / "summary.csv").string() << '\n';
    return kExitOk;
  } catch (...) {
    return report_exception(err);
  }
}

int cmd_sweep_skew(const ExperimentSpec& base, const std::vector<double>& betas, std::ostream& out,
                   std::ostream& err) {
  try {
    if (betas.empty()) throw ValidationError("sweep needs at least one beta");
    if (betas.size() * base.seeds.size() < 2) throw ValidationError("sweep needs at least 2 (beta, seed) points");
    for (double b : betas) {
      if (!(b > 0.0)) throw ValidationError("betas must be > 0 (use inf for uniform weights)");
    }
    if (base.sampler.value("kind", "") != "fixed-size-weighted") {
      throw ValidationError("sweep-skew needs a fixed-size-weighted base sampler");
    }
    const FederationData data = build_federation(base);
    const std::size_t n = data.n_clients();
    const std::size_t m = base.sampler.value("size", std::size_t{0});

    std::ostringstream csv;
    csv << "beta,seed,skew,agnostic,weighted,difference\n";
    std::vector<double> skews;
    std::vector<double> diffs;
    Json points = Json::array();
    Json marginals_json = Json::object();
    for (double beta : betas) {
      const auto sampler = ParticipationSampler::fixed_size_weighted(exponential_weights(n, beta), m);
      const ResolvedMarginals marginals = resolve_marginals(sampler, base.marginals, 0);
      marginals_json[format_number(beta)] = {{"mode", marginals.mode}, {"p", to_json(marginals.weights)["p"]}};
      for (const auto& c : compare_rules(base.run, sampler, data, marginals.weights, base.seeds)) {
        csv << format_number(beta) << ',' << c.seed << ',' << csv_number(c.skew) << ',' << csv_number(c.agnostic)
            << ',' << csv_number(c.weighted) << ',' << csv_number(c.difference()) << '\n';
        skews.push_back(c.skew);
        diffs.push_back(c.difference());
        points.push_back({{"beta", format_number(beta)},
                          {"seed", c.seed},
                          {"skew", c.skew},
                          {"agnostic", c.agnostic},
                          {"weighted", c.weighted},
                          {"difference", c.difference()}});
        out << "beta=" << format_number(beta) << " seed=" << c.seed << " skew=" << format_fixed(c.skew)
            << " weighted-agnostic=" << format_fixed(c.difference()) << '\n';
      }
    }
    const double r = pearson_correlation(skews, diffs);
    write_text(base.out / "skew_scatter.csv", csv.str());
    Json sweep = manifest_base(base, "sweep-skew");
    sweep["betas"] = Json::array();
    for (double b : betas) sweep["betas"].push_back(format_number(b));
    sweep["pearson"] = std::isnan(r) ? Json("undefined") : Json(r);
    sweep["points"] = std::move(points);
    sweep["marginals"] = std::move(marginals_json);
    write_text(base.out / "sweep.json", sweep.dump(2) + "\n");
    out << "pearson(skew, weighted - agnostic) = " << (std::isnan(r) ? "undefined (zero variance)" : format_fixed(r))
        << '\n';
    return kExitOk;
  } catch (...) {
    return report_exception(err);
  }
}

int cmd_marginals(const Json& sampler_json, MarginalsMode mode, std::size_t draws, std::uint64_t seed,
                  std::ostream& out, std::ostream& err) {
  try {
    if (mode == MarginalsMode::kEstimate && draws == 0) throw ValidationError("estimate mode needs draws >= 1");
    const ParticipationSampler sampler = parse_sampler(sampler_json);
    const ResolvedMarginals r = resolve_marginals(sampler, {mode, draws}, seed);
    Json j = to_json(r.weights);
    j["skew"] = participation_skew(r.weights);
    j["mode"] = r.mode;
    out << j.dump(2) << '\n';
    return kExitOk;
  } catch (const CapacityError& e) {
    err << "error: " << e.what() << "\nhint: use --mode estimate --draws <count> for samplers this large\n";
    return kExitCapacity;
  } catch (...) {
    return report_exception(err);
  }
}

int cmd_verify(const VerifyOptions& options, std::ostream& out, std::ostream& err) {
  try {
    if (!(options.shrink_g > 0.0)) throw ValidationError("--debug-shrink-g must be > 0");
    VerifySuite suite;
    Rng rng = make_stream(options.seed, StreamTag::kVerify);
    verify_normalization(suite, options.full ? 1000 : 200, rng);
    verify_sample_to_model(suite, options.full ? 1000 : 200, rng);
    verify_one_step(suite, options.full ? 200 : 50, options.shrink_g, options.seed, rng);
    verify_windows(suite, options.full, options.shrink_g, options.seed);
    verify_rate(suite, options.full, options.seed);

    out << std::left << std::setw(34) << "check" << std::right << std::setw(14) << "lhs" << std::setw(14) << "rhs"
        << std::setw(14) << "slack" << "  result\n";
    std::vector<std::string> failing;
    for (const auto& r : suite.reports) {
      out << std::left << std::setw(34) << r.name << std::right << std::setw(14) << format_fixed(r.lhs)
          << std::setw(14) << format_fixed(r.rhs) << std::setw(14) << format_fixed(r.slack) << "  "
          << (r.holds ? "holds" : "FAILS") << '\n';
      if (!r.holds) failing.push_back(r.name);
    }
    const RateFit& fit = *suite.rate;
    out << std::left << std::setw(34) << "rate-fit" << "slope " << format_fixed(fit.slope, 4) << " in ["
        << kRateSlopeLow << ", " << kRateSlopeHigh << "], r^2 " << format_fixed(fit.r_squared, 4)
        << " >= " << kRateMinR2 << "  " << (suite.rate_holds ? "holds" : "FAILS") << '\n';
    if (!suite.rate_holds) failing.push_back("rate-fit");
    if (options.shrink_g != 1.0) out << "note: G divided by " << options.shrink_g << " (debug)\n";

    if (options.report) {
      Json reports = Json::array();
      for (const auto& r : suite.reports) reports.push_back(to_json(r));
      Json rate = to_json(fit);
      rate["holds"] = suite.rate_holds;
      rate["band"] = {kRateSlopeLow, kRateSlopeHigh};
      rate["min_r_squared"] = kRateMinR2;
      const Json doc = {{"version", kVersion},
                        {"scale", options.full ? "full" : "quick"},
                        {"seed", options.seed},
                        {"shrink_g", options.shrink_g},
                        {"reports", std::move(reports)},
                        {"rate", std::move(rate)},
                        {"constants", suite.constants},
                        {"all_hold", failing.empty()}};
      write_text(*options.report, doc.dump(2) + "\n");
    }
    if (!failing.empty()) {
      err << "verification failed:";
      for (const auto& f : failing) err << ' ' << f;
      err << '\n';
      return kExitVerifyFailed;
    }
    out << "all checks hold\n";
    return kExitOk;
  } catch (...) {
    return report_exception(err);
  }
}

int cmd_plot(const std::filesystem::path& csv, const std::string& kind, const std::filesystem::path& svg,
             std::ostream& out, std::ostream& err) {
  try {
    const CsvTable table = parse_csv(read_text(csv));
    std::string doc;
    if (kind == "loss-curves") doc = render_loss_curves_svg(table);
    else if (kind == "skew-scatter") doc = render_skew_scatter_svg(table);
    else throw ValidationError("plot kind must be loss-curves or skew-scatter");
    write_text(svg, doc);
    out << "wrote " << svg.string() << '\n';
    return kExitOk;
  } catch (...) {
    return report_exception(err);
  }
}

int report_exception(std::ostream& err) {
  try {
    throw;
  } catch (const CapacityError& e) {
    err << "error: " << e.what() << '\n';
    return kExitCapacity;
  } catch (const IoError& e) {
    err << "error: " << e.what() << '\n';
    return kExitIo;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return kExitIo;
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << '\n';
    return kExitInvalid;
  } catch (const FormatError& e) {
    err << "error: " << e.what() << '\n';
    return kExitInvalid;
  } catch (const ConsistencyError& e) {
    err << "error: " << e.what() << '\n';
    return kExitInvalid;
  } catch (const Json::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitInvalid;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitIo;
  }
}

}  // namespace agnofed
