#include "agnofed/engine.hpp"

#include <cmath>
#include <limits>
#include <sstream>

#include "agnofed/error.hpp"
#include "agnofed/random.hpp"

namespace agnofed {

namespace {

double max_pairwise_distance(const WindowSnapshot& window) {
  double worst = 0.0;
  for (const auto& a_step : window.steps) {
    for (const auto& b_step : window.steps) {
      for (const auto& a : a_step) {
        for (const auto& b : b_step) worst = std::max(worst, (a - b).norm());
      }
    }
  }
  return worst;
}

}  // namespace

double RunConfig::step_size() const {
  if (step.rule == StepSize::Rule::kConstant) return step.value;
  return step.value / std::sqrt(static_cast<double>(global_rounds * local_steps));
}

std::string rule_name(const AggregationRule& rule) {
  return std::holds_alternative<AgnosticRule>(rule) ? "agnostic" : "weighted";
}

ParamVector aggregate(const Subset& subset, std::span<const ParamVector> params, const AggregationRule& rule,
                      std::size_t n_clients) {
  if (subset.empty()) throw ValidationError("cannot aggregate an empty subset");
  for (std::size_t i : subset) {
    if (i >= n_clients || i >= params.size()) throw ValidationError("subset member outside the federation");
  }
  const double size = static_cast<double>(subset.size());
  ParamVector out = ParamVector::Zero(params[subset.front()].size());
  if (std::holds_alternative<AgnosticRule>(rule)) {
    for (std::size_t i : subset) out += params[i];
    return out / size;
  }
  const auto& weights = std::get<WeightedRule>(rule).weights;
  if (weights.size() != n_clients) throw ValidationError("weighted rule needs one weight per client");
  // N * (1/N) can round to 1 - ulp; snapping it keeps uniform weights
  // bit-identical to the agnostic mean
  const double n = static_cast<double>(n_clients);
  for (std::size_t i : subset) {
    double c = n * weights.p[i];
    if (std::abs(c - 1.0) <= 4 * std::numeric_limits<double>::epsilon()) c = 1.0;
    out += c * params[i];
  }
  return out / size;
}

void validate_run(const RunConfig& config, const ParticipationSampler& sampler, const AggregationRule& rule,
                  const FederationData& data) {
  validate_federation(data);
  const std::size_t n = data.n_clients();
  if (config.n_clients != 0 && config.n_clients != n) {
    std::ostringstream msg;
    msg << "config declares " << config.n_clients << " clients but the data has " << n;
    throw ValidationError(msg.str());
  }
  if (sampler.n_clients() != n) throw ValidationError("sampler and data disagree on the number of clients");
  if (config.local_steps < 1) throw ValidationError("local_steps (H) must be >= 1");
  if (config.global_rounds < 1) throw ValidationError("global_rounds (T) must be >= 1");
  if (!(config.step.value >= 0.0) || !std::isfinite(config.step.value)) throw ValidationError("step size must be >= 0");
  if (config.batch_size < 1 || config.batch_size > data.min_client_size()) {
    std::ostringstream msg;
    msg << "batch size " << config.batch_size << " outside [1, " << data.min_client_size() << "]";
    throw ValidationError(msg.str());
  }
  if (const auto* w = std::get_if<WeightedRule>(&rule)) {
    if (w->weights.size() != n) throw ValidationError("weighted rule needs one weight per client");
    validate_marginals(w->weights);
  }
}

RunTrace run_fedavg(const RunConfig& config, const ParticipationSampler& sampler, const AggregationRule& rule,
                    const FederationData& data, const ObjectiveReference& objective) {
  validate_run(config, sampler, rule, data);
  const std::size_t n = data.n_clients();
  const std::size_t h = config.local_steps;
  const double eta = config.step_size();
  const bool weighted = std::holds_alternative<WeightedRule>(rule);
  const bool track_objective = !objective.weights.p.empty();
  if (track_objective && objective.weights.size() != n) {
    throw ValidationError("objective weights do not match the number of clients");
  }

  Rng participation = make_stream(config.seed, StreamTag::kParticipation);
  std::vector<Rng> minibatch_streams;
  minibatch_streams.reserve(n);
  for (std::size_t i = 0; i < n; ++i) minibatch_streams.push_back(make_stream(config.seed, StreamTag::kMinibatch, i));

  const auto dim = static_cast<Eigen::Index>(data.param_dim());
  RunTrace trace;
  trace.rule = rule_name(rule);
  trace.seed = config.seed;
  trace.rounds.reserve(config.global_rounds);
  FederationState& state = trace.final_state;
  state.client_params.assign(n, ParamVector::Zero(dim));
  state.last_aggregate = ParamVector::Zero(dim);
  state.sum_of_aggregates = ParamVector::Zero(dim);

  WindowSnapshot window;
  if (config.record_windows) window.steps.push_back(state.client_params);

  for (std::size_t t = 1; t <= config.total_iterations(); ++t) {
    state.clock = t;
    if (t % h == 0) {
      const Subset subset = sampler.sample(participation);
      ParamVector agg = aggregate(subset, state.client_params, rule, n);
      if (weighted && config.project_weighted) agg = project(agg, config.projection);
      for (auto& theta : state.client_params) theta = agg;
      state.sum_of_aggregates += agg;
      ++state.aggregations;

      RoundRecord record;
      record.round = state.aggregations;
      record.subset = subset;
      record.aggregate_norm = agg.norm();
      const ParamVector running = state.sum_of_aggregates / static_cast<double>(state.aggregations);
      if (track_objective) {
        record.objective_aggregate = global_objective(agg, objective.weights, data.datasets, data.model);
        record.objective_running_avg = global_objective(running, objective.weights, data.datasets, data.model);
        if (objective.optimum_value) record.suboptimality = record.objective_running_avg - *objective.optimum_value;
      } else {
        record.objective_aggregate = std::numeric_limits<double>::quiet_NaN();
        record.objective_running_avg = std::numeric_limits<double>::quiet_NaN();
      }
      state.last_aggregate = std::move(agg);
      if (config.record_windows) {
        window.steps.push_back(state.client_params);
        record.window_divergence = max_pairwise_distance(window);
        trace.windows.push_back(std::move(window));
        window = WindowSnapshot{};
        window.steps.push_back(state.client_params);
      }
      record.aggregate = state.last_aggregate;
      trace.rounds.push_back(std::move(record));
    } else {
      for (std::size_t i = 0; i < n; ++i) {
        const auto& client = data.datasets[i];
        const Minibatch batch = sample_minibatch(client.size(), config.batch_size, minibatch_streams[i]);
        state.client_params[i] = sgd_step(state.client_params[i], client, data.model, batch, eta, config.projection);
      }
      if (config.record_windows) window.steps.push_back(state.client_params);
    }
  }
  trace.averaged = averaged_iterate(trace);
  return trace;
}

ParamVector averaged_iterate(const RunTrace& trace) {
  if (trace.rounds.empty()) throw ValidationError("averaged_iterate needs at least one round");
  ParamVector sum = ParamVector::Zero(trace.rounds.front().aggregate.size());
  for (const auto& r : trace.rounds) sum += r.aggregate;
  return sum / static_cast<double>(trace.rounds.size());
}

}  // namespace agnofed
