#pragma once

// Convex local losses, minibatch gradients, Euclidean-ball projection and the
// participation-weighted global objective.

#include <Eigen/Dense>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "agnofed/availability.hpp"
#include "agnofed/random.hpp"

namespace agnofed {

using ParamVector = Eigen::VectorXd;
using FeatureMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// One client's local data. For classification the targets hold class
// indices stored as doubles.
struct ClientDataset {
  FeatureMatrix features;
  Eigen::VectorXd targets;

  std::size_t size() const { return static_cast<std::size_t>(features.rows()); }
  std::size_t dim() const { return static_cast<std::size_t>(features.cols()); }
};

enum class LossKind { kSquaredError, kMultinomialLogistic };

// Linear predictor plus per-sample loss.
//  - squared error: (x.theta - y)^2, theta in R^d
//  - multinomial logistic: -log softmax(W x)_y, theta = row-major W in R^{C x d}
struct LossModel {
  LossKind kind = LossKind::kSquaredError;
  std::size_t n_classes = 0;

  static LossModel squared_error() { return {LossKind::kSquaredError, 0}; }
  static LossModel multinomial_logistic(std::size_t classes);

  std::size_t param_dim(std::size_t feature_dim) const {
    return kind == LossKind::kSquaredError ? feature_dim : n_classes * feature_dim;
  }
};

// Origin-centred closed Euclidean ball.
class ProjectionSet {
 public:
  explicit ProjectionSet(double radius);
  double radius() const { return radius_; }

 private:
  double radius_;
};

// Sorted distinct sample indices.
struct Minibatch {
  std::vector<std::size_t> indices;
};

// Throws ValidationError if the dataset is empty, non-finite, or has
// targets that are not valid class indices for `model`.
void validate_dataset(const ClientDataset& data, const LossModel& model);

// Uniform size-b subset of [0, n), without replacement.
Minibatch sample_minibatch(std::size_t n, std::size_t b, Rng& rng);

Minibatch full_batch(std::size_t n);

double local_loss(const ParamVector& theta, const ClientDataset& data, const LossModel& model);

ParamVector minibatch_gradient(const ParamVector& theta, const ClientDataset& data, const LossModel& model,
                               const Minibatch& batch);

// Identical arithmetic to minibatch_gradient over the full batch.
ParamVector full_gradient(const ParamVector& theta, const ClientDataset& data, const LossModel& model);

ParamVector project(const ParamVector& theta, const ProjectionSet& set);

ParamVector sgd_step(const ParamVector& theta, const ClientDataset& data, const LossModel& model,
                     const Minibatch& batch, double step, const ProjectionSet& set);

// sum_i p_i f(theta; D_i)
double global_objective(const ParamVector& theta, const MarginalWeights& weights,
                        std::span<const ClientDataset> datasets, const LossModel& model);

ParamVector global_gradient(const ParamVector& theta, const MarginalWeights& weights,
                            std::span<const ClientDataset> datasets, const LossModel& model);

struct SolverOptions {
  double tolerance = 1e-10;  // on the gradient-mapping norm
  std::size_t max_iterations = 200'000;
};

struct ReferenceOptimum {
  ParamVector theta;
  double value = 0.0;
  std::string method;  // "normal-equations", "projected-gradient", or with a "(fallback)" note
  bool converged = true;
  std::size_t iterations = 0;
  double gradient_mapping_norm = 0.0;
};

// Minimizer of the p-weighted objective over the projection ball.
ReferenceOptimum solve_reference_optimum(const MarginalWeights& weights, std::span<const ClientDataset> datasets,
                                         const LossModel& model, const ProjectionSet& set,
                                         const SolverOptions& options = {});

struct ProblemConstants {
  double gradient_bound = 0.0;        // G
  std::vector<double> client_sigma;   // sigma_i
  double sigma_sq = 0.0;              // sum_i p_i sigma_i^2
  double lipschitz = 0.0;             // l
  std::size_t theta_samples = 0;
};

struct ConstantsOptions {
  std::size_t theta_samples = 64;
  // Per client and theta; all C(n_i, b) batches are used instead when there
  // are at most this many.
  std::size_t batches_per_theta = 16;
};

// Empirical bounds from theta drawn uniformly in the ball:
//  G       max minibatch gradient norm
//  sigma_i max root-mean-square deviation of minibatch from full gradient
//  l       max full-gradient norm
ProblemConstants estimate_constants(const LossModel& model, std::span<const ClientDataset> datasets,
                                    const ProjectionSet& set, std::size_t batch_size,
                                    const MarginalWeights& weights, Rng& rng, const ConstantsOptions& options = {});

// Uniform draw from the ball of the given radius in R^dim.
ParamVector sample_in_ball(std::size_t dim, double radius, Rng& rng);

// Number of size-k subsets of n items, saturating at `cap`.
std::uint64_t binomial_capped(std::size_t n, std::size_t k, std::uint64_t cap);

// Calls fn(batch) for every size-b subset of [0, n) in lexicographic order.
template <typename Fn>
void for_each_minibatch(std::size_t n, std::size_t b, Fn&& fn) {
  Minibatch batch;
  batch.indices.resize(b);
  for (std::size_t k = 0; k < b; ++k) batch.indices[k] = k;
  while (true) {
    fn(static_cast<const Minibatch&>(batch));
    std::size_t k = b;
    while (k > 0 && batch.indices[k - 1] == n - b + (k - 1)) --k;
    if (k == 0) return;
    ++batch.indices[k - 1];
    for (std::size_t j = k; j < b; ++j) batch.indices[j] = batch.indices[j - 1] + 1;
  }
}

}  // namespace agnofed
