#pragma once

// Agnostic federated averaging: interleaved local projected SGD and
// stochastic-participation aggregation.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "agnofed/availability.hpp"
#include "agnofed/data.hpp"
#include "agnofed/optimization.hpp"

namespace agnofed {

struct StepSize {
  enum class Rule { kConstant, kInvSqrtTH };
  Rule rule = Rule::kConstant;
  double value = 0.01;  // eta, or c in c / sqrt(T H)

  static StepSize constant(double eta) { return {Rule::kConstant, eta}; }
  static StepSize inv_sqrt_th(double c) { return {Rule::kInvSqrtTH, c}; }
};

struct RunConfig {
  std::size_t n_clients = 0;
  std::size_t local_steps = 5;     // H
  std::size_t global_rounds = 100; // T
  StepSize step;
  std::size_t batch_size = 10;
  ProjectionSet projection{10.0};
  std::uint64_t seed = 0;
  // Project weighted-rule aggregates back onto the ball (ablation only).
  bool project_weighted = false;
  // Keep every client parameter inside each communication window.
  bool record_windows = false;

  double step_size() const;
  std::size_t total_iterations() const { return local_steps * global_rounds; }
};

struct AgnosticRule {};

// theta_hat = (N / |S|) sum_{i in S} p_i theta_i
struct WeightedRule {
  MarginalWeights weights;
};

using AggregationRule = std::variant<AgnosticRule, WeightedRule>;

std::string rule_name(const AggregationRule& rule);

// Throws ValidationError on an empty subset, an id >= N, or a weighted rule
// whose weights do not cover N clients.
ParamVector aggregate(const Subset& subset, std::span<const ParamVector> params, const AggregationRule& rule,
                      std::size_t n_clients);

struct FederationState {
  std::vector<ParamVector> client_params;
  ParamVector last_aggregate;
  ParamVector sum_of_aggregates;
  std::size_t clock = 0;
  std::size_t aggregations = 0;
};

struct RoundRecord {
  std::size_t round = 0;  // 1-based global round tau
  Subset subset;          // 0-based
  ParamVector aggregate;
  double objective_aggregate = 0.0;
  double objective_running_avg = 0.0;
  std::optional<double> suboptimality;
  double aggregate_norm = 0.0;
  std::optional<double> window_divergence;  // max pairwise in-window distance
};

// Client parameters at t = sH + k, k = 0..H: steps[k][i].
struct WindowSnapshot {
  std::vector<std::vector<ParamVector>> steps;
};

struct RunTrace {
  std::string rule;
  std::uint64_t seed = 0;
  std::vector<RoundRecord> rounds;
  ParamVector averaged;
  FederationState final_state;
  std::vector<WindowSnapshot> windows;
};

// Objective the trace reports: sum_i p_i f_i, optionally with its optimum
// value for suboptimality. Empty weights skip objective evaluation.
struct ObjectiveReference {
  MarginalWeights weights;
  std::optional<double> optimum_value;
};

void validate_run(const RunConfig& config, const ParticipationSampler& sampler, const AggregationRule& rule,
                  const FederationData& data);

// Runs t = 1..TH. Rounds with t mod H == 0 sample a subset, aggregate and
// broadcast; all other rounds take one projected minibatch step per client.
// Deterministic given config.seed.
RunTrace run_fedavg(const RunConfig& config, const ParticipationSampler& sampler, const AggregationRule& rule,
                    const FederationData& data, const ObjectiveReference& objective = {});

// Mean of all per-round aggregates.
ParamVector averaged_iterate(const RunTrace& trace);

}  // namespace agnofed
