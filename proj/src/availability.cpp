#include "agnofed/availability.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>

#include "agnofed/error.hpp"

namespace agnofed {

namespace {

double uniform01(Rng& rng) {
  return std::uniform_real_distribution<double>(0.0, 1.0)(rng);
}

void check_weights(const std::vector<double>& weights, std::size_t size) {
  if (weights.empty()) throw ValidationError("fixed-size sampler needs at least one client");
  if (size < 1 || size > weights.size()) {
    std::ostringstream msg;
    msg << "fixed-size sampler size " << size << " outside [1, " << weights.size() << "]";
    throw ValidationError(msg.str());
  }
  for (double w : weights) {
    if (!(w > 0.0) || !std::isfinite(w)) throw ValidationError("fixed-size sampler weights must be finite and > 0");
  }
}

void check_probs(const std::vector<double>& probs) {
  if (probs.empty()) throw ValidationError("bernoulli sampler needs at least one client");
  bool any_positive = false;
  for (double q : probs) {
    if (!(q >= 0.0 && q <= 1.0)) throw ValidationError("bernoulli probabilities must lie in [0, 1]");
    any_positive = any_positive || q > 0.0;
  }
  if (!any_positive) throw ValidationError("bernoulli sampler can never draw a nonempty subset");
}

// Index of the entry selected by u in [0, total) over `weights`, skipping
// masked entries.
std::size_t pick_weighted(const std::vector<double>& weights, const std::vector<bool>& taken, double u) {
  std::size_t last = weights.size();
  double acc = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (taken[i]) continue;
    acc += weights[i];
    last = i;
    if (u < acc) return i;
  }
  return last;  // u rounded past the final edge
}

SubsetDistribution normalized(std::size_t n, std::map<Subset, double> mass) {
  double total = 0.0;
  for (const auto& [s, q] : mass) total += q;
  std::vector<Atom> atoms;
  atoms.reserve(mass.size());
  for (auto& [s, q] : mass) atoms.push_back({s, q / total});
  return SubsetDistribution(n, std::move(atoms));
}

}  // namespace

SubsetDistribution::SubsetDistribution(std::size_t n_clients, std::vector<Atom> atoms)
    : n_clients_(n_clients), atoms_(std::move(atoms)) {
  if (n_clients_ == 0) throw ValidationError("subset distribution needs N >= 1");
  if (atoms_.empty()) throw ValidationError("subset distribution has no atoms");
  std::set<Subset> seen;
  double total = 0.0;
  for (auto& atom : atoms_) {
    if (atom.subset.empty()) throw ValidationError("empty subset atom: q(empty set) must be 0");
    if (!(atom.prob >= 0.0) || atom.prob > 1.0) throw ValidationError("atom probability outside [0, 1]");
    std::sort(atom.subset.begin(), atom.subset.end());
    if (std::adjacent_find(atom.subset.begin(), atom.subset.end()) != atom.subset.end()) {
      throw ValidationError("atom subset lists a client twice");
    }
    if (atom.subset.back() >= n_clients_) {
      std::ostringstream msg;
      msg << "client id " << atom.subset.back() + 1 << " exceeds N = " << n_clients_;
      throw ValidationError(msg.str());
    }
    if (!seen.insert(atom.subset).second) throw ValidationError("duplicate subset atom");
    total += atom.prob;
  }
  if (std::abs(total - 1.0) > kDistributionMassTolerance) {
    std::ostringstream msg;
    msg.precision(17);
    msg << "atom probabilities sum to " << total << ", expected 1";
    throw ValidationError(msg.str());
  }
}

ParticipationSampler::ParticipationSampler(Variant v) : variant_(std::move(v)) {
  if (const auto* e = std::get_if<ExplicitSampler>(&variant_)) {
    cumulative_.reserve(e->distribution.atoms().size());
    double acc = 0.0;
    for (const auto& atom : e->distribution.atoms()) {
      acc += atom.prob;
      cumulative_.push_back(acc);
    }
  }
}

ParticipationSampler ParticipationSampler::explicit_distribution(SubsetDistribution dist) {
  return ParticipationSampler(ExplicitSampler{std::move(dist)});
}

ParticipationSampler ParticipationSampler::fixed_size_weighted(std::vector<double> weights, std::size_t size) {
  check_weights(weights, size);
  return ParticipationSampler(FixedSizeWeightedSampler{std::move(weights), size});
}

ParticipationSampler ParticipationSampler::bernoulli(std::vector<double> probs) {
  check_probs(probs);
  return ParticipationSampler(BernoulliSampler{std::move(probs)});
}

std::size_t ParticipationSampler::n_clients() const {
  return std::visit(
      [](const auto& s) -> std::size_t {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, ExplicitSampler>) return s.distribution.n_clients();
        else if constexpr (std::is_same_v<T, FixedSizeWeightedSampler>) return s.weights.size();
        else return s.probs.size();
      },
      variant_);
}

Subset ParticipationSampler::sample(Rng& rng) const {
  if (const auto* e = std::get_if<ExplicitSampler>(&variant_)) {
    const double u = uniform01(rng) * cumulative_.back();
    auto it = std::upper_bound(cumulative_.begin(), cumulative_.end(), u);
    std::size_t j = static_cast<std::size_t>(it - cumulative_.begin());
    const auto& atoms = e->distribution.atoms();
    if (j >= atoms.size()) {
      // u rounded onto the final edge: take the last atom with mass
      j = atoms.size() - 1;
      while (atoms[j].prob == 0.0 && j > 0) --j;
    }
    return atoms[j].subset;
  }
  if (const auto* f = std::get_if<FixedSizeWeightedSampler>(&variant_)) {
    const std::size_t n = f->weights.size();
    std::vector<bool> taken(n, false);
    Subset out;
    out.reserve(f->size);
    for (std::size_t k = 0; k < f->size; ++k) {
      double remaining = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (!taken[i]) remaining += f->weights[i];
      }
      const std::size_t i = pick_weighted(f->weights, taken, uniform01(rng) * remaining);
      taken[i] = true;
      out.push_back(i);
    }
    std::sort(out.begin(), out.end());
    return out;
  }
  const auto& b = std::get<BernoulliSampler>(variant_);
  Subset out;
  while (out.empty()) {
    for (std::size_t i = 0; i < b.probs.size(); ++i) {
      if (uniform01(rng) < b.probs[i]) out.push_back(i);
    }
  }
  return out;
}

SubsetDistribution enumerate_sampler_distribution(const ParticipationSampler& sampler) {
  const auto& v = sampler.variant();
  if (const auto* e = std::get_if<ExplicitSampler>(&v)) return e->distribution;

  if (const auto* f = std::get_if<FixedSizeWeightedSampler>(&v)) {
    const std::size_t n = f->weights.size();
    std::uint64_t sequences = 1;
    for (std::size_t k = 0; k < f->size; ++k) {
      sequences *= static_cast<std::uint64_t>(n - k);
      if (sequences > kMaxOrderedSequences) {
        std::ostringstream msg;
        msg << "fixed-size sampler N=" << n << ", M=" << f->size << " has more than " << kMaxOrderedSequences
            << " ordered draw sequences";
        throw CapacityError(msg.str());
      }
    }
    std::map<Subset, double> mass;
    std::vector<bool> taken(n, false);
    Subset chosen;
    double total = std::accumulate(f->weights.begin(), f->weights.end(), 0.0);
    // depth-first over ordered draw sequences
    auto visit = [&](auto&& self, double prob, double remaining) -> void {
      if (chosen.size() == f->size) {
        Subset key = chosen;
        std::sort(key.begin(), key.end());
        mass[key] += prob;
        return;
      }
      for (std::size_t i = 0; i < n; ++i) {
        if (taken[i]) continue;
        taken[i] = true;
        chosen.push_back(i);
        self(self, prob * f->weights[i] / remaining, remaining - f->weights[i]);
        chosen.pop_back();
        taken[i] = false;
      }
    };
    visit(visit, 1.0, total);
    return normalized(n, std::move(mass));
  }

  const auto& b = std::get<BernoulliSampler>(v);
  const std::size_t n = b.probs.size();
  if (n > kMaxBernoulliEnumerationClients) {
    std::ostringstream msg;
    msg << "bernoulli sampler with N=" << n << " exceeds the enumeration limit of " << kMaxBernoulliEnumerationClients;
    throw CapacityError(msg.str());
  }
  std::map<Subset, double> mass;
  for (std::uint32_t mask = 1; mask < (1u << n); ++mask) {
    double prob = 1.0;
    Subset s;
    for (std::size_t i = 0; i < n; ++i) {
      if (mask & (1u << i)) {
        prob *= b.probs[i];
        s.push_back(i);
      } else {
        prob *= 1.0 - b.probs[i];
      }
    }
    if (prob > 0.0) mass[s] = prob;
  }
  // dividing by the total mass conditions on a nonempty draw
  return normalized(n, std::move(mass));
}

MarginalWeights uniform_marginals(std::size_t n_clients) {
  if (n_clients == 0) throw ValidationError("marginals need N >= 1");
  return {std::vector<double>(n_clients, 1.0 / static_cast<double>(n_clients)), std::nullopt};
}

void validate_marginals(const MarginalWeights& weights, double tolerance) {
  if (weights.p.empty()) throw ValidationError("marginal weights are empty");
  double total = 0.0;
  for (double x : weights.p) {
    if (!(x >= 0.0) || !std::isfinite(x)) throw ValidationError("marginal weights must be finite and >= 0");
    total += x;
  }
  if (std::abs(total - 1.0) > tolerance) {
    std::ostringstream msg;
    msg.precision(17);
    msg << "marginal weights sum to " << total << ", expected 1";
    throw ValidationError(msg.str());
  }
  if (weights.std_error && weights.std_error->size() != weights.p.size()) {
    throw ValidationError("marginal standard errors do not match the number of clients");
  }
}

MarginalWeights compute_marginals_exact(const SubsetDistribution& dist) {
  std::vector<double> p(dist.n_clients(), 0.0);
  for (const auto& atom : dist.atoms()) {
    const double share = atom.prob / static_cast<double>(atom.subset.size());
    for (std::size_t i : atom.subset) p[i] += share;
  }
  return {std::move(p), std::nullopt};
}

MarginalWeights estimate_marginals(const ParticipationSampler& sampler, std::size_t draws, Rng& rng) {
  if (draws == 0) throw ValidationError("estimate_marginals needs draws >= 1");
  const std::size_t n = sampler.n_clients();
  std::vector<double> sum(n, 0.0);
  std::vector<double> sum_sq(n, 0.0);
  for (std::size_t k = 0; k < draws; ++k) {
    const Subset s = sampler.sample(rng);
    const double share = 1.0 / static_cast<double>(s.size());
    for (std::size_t i : s) {
      sum[i] += share;
      sum_sq[i] += share * share;
    }
  }
  const double m = static_cast<double>(draws);
  MarginalWeights out;
  out.p.resize(n);
  std::vector<double> se(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double mean = sum[i] / m;
    const double var = std::max(0.0, sum_sq[i] / m - mean * mean);
    out.p[i] = mean;
    se[i] = std::sqrt(var / m);
  }
  out.std_error = std::move(se);
  return out;
}

double participation_skew(const MarginalWeights& weights) {
  const double u = 1.0 / static_cast<double>(weights.size());
  double skew = 0.0;
  for (double x : weights.p) skew += std::abs(x - u);
  return skew;
}

std::vector<double> exponential_weights(std::size_t n_clients, double beta) {
  if (!(beta > 0.0)) throw ValidationError("exponential bias beta must be > 0");
  std::vector<double> w(n_clients, 1.0);
  if (std::isinf(beta)) return w;
  for (std::size_t i = 0; i < n_clients; ++i) w[i] = std::exp(-static_cast<double>(i) / beta);
  return w;
}

}  // namespace agnofed
