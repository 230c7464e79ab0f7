#pragma once

// Stochastic client participation: explicit subset distributions, round-wise
// subset samplers, and the marginal survival weights they induce.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <variant>
#include <vector>

#include "agnofed/random.hpp"

namespace agnofed {

// Sorted, duplicate-free, 0-based client indices.
using Subset = std::vector<std::size_t>;

struct Atom {
  Subset subset;
  double prob = 0.0;
};

// Tolerance on the total mass of an explicit subset distribution.
inline constexpr double kDistributionMassTolerance = 1e-12;

// A finite distribution over nonempty client subsets. Immutable once built;
// the constructor sorts each subset and rejects anything that is not a
// probability distribution over distinct nonempty subsets of [0, N).
class SubsetDistribution {
 public:
  SubsetDistribution(std::size_t n_clients, std::vector<Atom> atoms);

  std::size_t n_clients() const { return n_clients_; }
  const std::vector<Atom>& atoms() const { return atoms_; }

 private:
  std::size_t n_clients_;
  std::vector<Atom> atoms_;
};

struct ExplicitSampler {
  SubsetDistribution distribution;
};

// Successive sampling: M sequential draws without replacement, each
// proportional to the weights of the clients not yet drawn.
struct FixedSizeWeightedSampler {
  std::vector<double> weights;
  std::size_t size = 1;
};

// Each client independently with its own probability; empty rounds are
// redrawn, so the induced distribution is conditioned on nonempty.
struct BernoulliSampler {
  std::vector<double> probs;
};

class ParticipationSampler {
 public:
  using Variant = std::variant<ExplicitSampler, FixedSizeWeightedSampler, BernoulliSampler>;

  static ParticipationSampler explicit_distribution(SubsetDistribution dist);
  static ParticipationSampler fixed_size_weighted(std::vector<double> weights, std::size_t size);
  static ParticipationSampler bernoulli(std::vector<double> probs);

  std::size_t n_clients() const;
  const Variant& variant() const { return variant_; }

  // One round's available subset. Never empty.
  Subset sample(Rng& rng) const;

 private:
  explicit ParticipationSampler(Variant v);

  Variant variant_;
  std::vector<double> cumulative_;  // explicit atoms only
};

inline Subset sample_subset(const ParticipationSampler& sampler, Rng& rng) {
  return sampler.sample(rng);
}

inline constexpr std::size_t kMaxBernoulliEnumerationClients = 12;
inline constexpr std::uint64_t kMaxOrderedSequences = 1'000'000;

// Exact subset distribution of a sampler, by brute force. Throws
// CapacityError past the enumeration limits above.
SubsetDistribution enumerate_sampler_distribution(const ParticipationSampler& sampler);

struct MarginalWeights {
  std::vector<double> p;
  // Monte-Carlo standard errors; absent for exact marginals.
  std::optional<std::vector<double>> std_error;

  std::size_t size() const { return p.size(); }
  double operator[](std::size_t i) const { return p[i]; }
};

MarginalWeights uniform_marginals(std::size_t n_clients);

// Throws ValidationError unless p is nonnegative and sums to 1 within
// `tolerance`.
void validate_marginals(const MarginalWeights& weights, double tolerance = 1e-9);

// p_i = sum_j q(A_j) / |A_j| * 1[i in A_j]
MarginalWeights compute_marginals_exact(const SubsetDistribution& dist);

// Monte-Carlo average of 1[i in S] / |S| over `draws` rounds, with plug-in
// standard errors. Throws ValidationError when draws == 0.
MarginalWeights estimate_marginals(const ParticipationSampler& sampler, std::size_t draws, Rng& rng);

// ||p - (1/N) 1||_1
double participation_skew(const MarginalWeights& weights);

// w_i = exp(-i / beta) for 0-based i; an infinite beta gives uniform weights.
std::vector<double> exponential_weights(std::size_t n_clients, double beta);

}  // namespace agnofed
