#include "agnofed/optimization.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "agnofed/error.hpp"

namespace agnofed {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

void check_dims(const ParamVector& theta, const ClientDataset& data, const LossModel& model) {
  const std::size_t expected = model.param_dim(data.dim());
  if (static_cast<std::size_t>(theta.size()) != expected) {
    std::ostringstream msg;
    msg << "parameter dimension " << theta.size() << " does not match model dimension " << expected;
    throw ValidationError(msg.str());
  }
  if (data.targets.size() != data.features.rows()) throw ValidationError("features and targets disagree in length");
}

Eigen::Map<const RowMatrix> as_weight_matrix(const ParamVector& theta, const LossModel& model, std::size_t dim) {
  return Eigen::Map<const RowMatrix>(theta.data(), static_cast<Eigen::Index>(model.n_classes),
                                     static_cast<Eigen::Index>(dim));
}

// Per-row -log softmax(z)_y for a matrix of logits, and optionally the
// residual softmax(z) - onehot(y) written back into `logits`.
double cross_entropy_rows(RowMatrix& logits, const Eigen::Ref<const Eigen::VectorXd>& labels, bool want_residual) {
  double total = 0.0;
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    auto row = logits.row(r);
    const double peak = row.maxCoeff();
    const double norm = std::log((row.array() - peak).exp().sum()) + peak;
    const auto y = static_cast<Eigen::Index>(labels[r]);
    total += norm - row[y];
    if (want_residual) {
      row = (row.array() - norm).exp().matrix();
      row[y] -= 1.0;
    }
  }
  return total;
}

ParamVector gradient_on(const ParamVector& theta, const FeatureMatrix& x, const Eigen::VectorXd& y,
                        const LossModel& model) {
  const double scale = 1.0 / static_cast<double>(x.rows());
  if (model.kind == LossKind::kSquaredError) {
    const Eigen::VectorXd residual = x * theta - y;
    return (2.0 * scale) * (x.transpose() * residual);
  }
  const auto w = as_weight_matrix(theta, model, static_cast<std::size_t>(x.cols()));
  RowMatrix logits = x * w.transpose();
  cross_entropy_rows(logits, y, true);
  const RowMatrix grad = scale * (logits.transpose() * x);
  return Eigen::Map<const ParamVector>(grad.data(), grad.size());
}

double lambda_max(const Eigen::MatrixXd& a) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(a, Eigen::EigenvaluesOnly);
  return eig.eigenvalues().maxCoeff();
}

// sum_i (p_i / n_i) X_i^T X_i
Eigen::MatrixXd weighted_gram(const MarginalWeights& weights, std::span<const ClientDataset> datasets) {
  const std::size_t d = datasets.front().dim();
  Eigen::MatrixXd gram = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < datasets.size(); ++i) {
    if (weights.p[i] == 0.0) continue;
    const auto& x = datasets[i].features;
    gram.noalias() += (weights.p[i] / static_cast<double>(x.rows())) * (x.transpose() * x);
  }
  return gram;
}

void check_federation(const MarginalWeights& weights, std::span<const ClientDataset> datasets) {
  if (datasets.empty()) throw ValidationError("no client datasets");
  if (weights.size() != datasets.size()) {
    std::ostringstream msg;
    msg << "have " << weights.size() << " marginal weights for " << datasets.size() << " clients";
    throw ValidationError(msg.str());
  }
}

// Accelerated projected gradient with gradient-based restarts, step 1/L.
ReferenceOptimum projected_gradient(const MarginalWeights& weights, std::span<const ClientDataset> datasets,
                                    const LossModel& model, const ProjectionSet& set, double smoothness,
                                    ParamVector start, const SolverOptions& options) {
  const double step = 1.0 / smoothness;
  ParamVector x = project(start, set);
  ParamVector y = x;
  double momentum = 1.0;
  ReferenceOptimum out;
  out.method = "projected-gradient";
  out.converged = false;
  for (std::size_t k = 1; k <= options.max_iterations; ++k) {
    const ParamVector g = global_gradient(y, weights, datasets, model);
    ParamVector next = project(y - step * g, set);
    const double mapping = smoothness * (y - next).norm();
    out.iterations = k;
    out.gradient_mapping_norm = mapping;
    if (mapping < options.tolerance) {
      x = std::move(next);
      out.converged = true;
      break;
    }
    const double next_momentum = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * momentum * momentum));
    if ((y - next).dot(next - x) > 0.0) {
      // restart: momentum is pushing uphill
      momentum = 1.0;
      y = next;
    } else {
      y = next + ((momentum - 1.0) / next_momentum) * (next - x);
      momentum = next_momentum;
    }
    x = std::move(next);
  }
  out.theta = std::move(x);
  out.value = global_objective(out.theta, weights, datasets, model);
  return out;
}

}  // namespace

LossModel LossModel::multinomial_logistic(std::size_t classes) {
  if (classes < 2) throw ValidationError("multinomial logistic model needs at least 2 classes");
  return {LossKind::kMultinomialLogistic, classes};
}

ProjectionSet::ProjectionSet(double radius) : radius_(radius) {
  if (!(radius > 0.0) || !std::isfinite(radius)) throw ValidationError("projection radius must be finite and > 0");
}

void validate_dataset(const ClientDataset& data, const LossModel& model) {
  if (data.size() == 0) throw ValidationError("client dataset is empty");
  if (data.targets.size() != data.features.rows()) throw ValidationError("features and targets disagree in length");
  if (!data.features.allFinite() || !data.targets.allFinite()) throw ValidationError("client dataset has non-finite values");
  if (model.kind == LossKind::kMultinomialLogistic) {
    for (Eigen::Index j = 0; j < data.targets.size(); ++j) {
      const double y = data.targets[j];
      if (y < 0.0 || y >= static_cast<double>(model.n_classes) || y != std::floor(y)) {
        std::ostringstream msg;
        msg << "label " << y << " is not a class index below " << model.n_classes;
        throw ValidationError(msg.str());
      }
    }
  }
}

Minibatch sample_minibatch(std::size_t n, std::size_t b, Rng& rng) {
  if (b < 1 || b > n) {
    std::ostringstream msg;
    msg << "minibatch size " << b << " outside [1, " << n << "]";
    throw ValidationError(msg.str());
  }
  Minibatch batch;
  batch.indices.reserve(b);
  // selection sampling keeps the output sorted
  std::size_t needed = b;
  for (std::size_t i = 0; i < n && needed > 0; ++i) {
    const std::size_t left = n - i;
    if (std::uniform_int_distribution<std::size_t>(0, left - 1)(rng) < needed) {
      batch.indices.push_back(i);
      --needed;
    }
  }
  return batch;
}

Minibatch full_batch(std::size_t n) {
  Minibatch batch;
  batch.indices.resize(n);
  std::iota(batch.indices.begin(), batch.indices.end(), std::size_t{0});
  return batch;
}

double local_loss(const ParamVector& theta, const ClientDataset& data, const LossModel& model) {
  check_dims(theta, data, model);
  const double n = static_cast<double>(data.size());
  if (model.kind == LossKind::kSquaredError) {
    return (data.features * theta - data.targets).squaredNorm() / n;
  }
  const auto w = as_weight_matrix(theta, model, data.dim());
  RowMatrix logits = data.features * w.transpose();
  return cross_entropy_rows(logits, data.targets, false) / n;
}

ParamVector minibatch_gradient(const ParamVector& theta, const ClientDataset& data, const LossModel& model,
                               const Minibatch& batch) {
  check_dims(theta, data, model);
  if (batch.indices.empty()) throw ValidationError("empty minibatch");
  const auto rows = static_cast<Eigen::Index>(batch.indices.size());
  FeatureMatrix x(rows, data.features.cols());
  Eigen::VectorXd y(rows);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const std::size_t j = batch.indices[static_cast<std::size_t>(r)];
    if (j >= data.size()) throw ValidationError("minibatch index out of range");
    x.row(r) = data.features.row(static_cast<Eigen::Index>(j));
    y[r] = data.targets[static_cast<Eigen::Index>(j)];
  }
  return gradient_on(theta, x, y, model);
}

ParamVector full_gradient(const ParamVector& theta, const ClientDataset& data, const LossModel& model) {
  return minibatch_gradient(theta, data, model, full_batch(data.size()));
}

ParamVector project(const ParamVector& theta, const ProjectionSet& set) {
  const double norm = theta.norm();
  if (norm <= set.radius()) return theta;
  return theta * (set.radius() / norm);
}

ParamVector sgd_step(const ParamVector& theta, const ClientDataset& data, const LossModel& model,
                     const Minibatch& batch, double step, const ProjectionSet& set) {
  if (step < 0.0) throw ValidationError("step size must be >= 0");
  if (step == 0.0) return project(theta, set);
  return project(theta - step * minibatch_gradient(theta, data, model, batch), set);
}

double global_objective(const ParamVector& theta, const MarginalWeights& weights,
                        std::span<const ClientDataset> datasets, const LossModel& model) {
  check_federation(weights, datasets);
  double total = 0.0;
  for (std::size_t i = 0; i < datasets.size(); ++i) {
    if (weights.p[i] == 0.0) continue;
    total += weights.p[i] * local_loss(theta, datasets[i], model);
  }
  return total;
}

ParamVector global_gradient(const ParamVector& theta, const MarginalWeights& weights,
                            std::span<const ClientDataset> datasets, const LossModel& model) {
  check_federation(weights, datasets);
  ParamVector g = ParamVector::Zero(theta.size());
  for (std::size_t i = 0; i < datasets.size(); ++i) {
    if (weights.p[i] == 0.0) continue;
    g += weights.p[i] * full_gradient(theta, datasets[i], model);
  }
  return g;
}

ReferenceOptimum solve_reference_optimum(const MarginalWeights& weights, std::span<const ClientDataset> datasets,
                                         const LossModel& model, const ProjectionSet& set,
                                         const SolverOptions& options) {
  check_federation(weights, datasets);
  const std::size_t d = datasets.front().dim();
  const std::size_t dim = model.param_dim(d);
  const Eigen::MatrixXd gram = weighted_gram(weights, datasets);
  const double top = lambda_max(gram);

  if (model.kind == LossKind::kSquaredError) {
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(d));
    for (std::size_t i = 0; i < datasets.size(); ++i) {
      if (weights.p[i] == 0.0) continue;
      const auto& data = datasets[i];
      rhs.noalias() += (weights.p[i] / static_cast<double>(data.size())) * (data.features.transpose() * data.targets);
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(gram, Eigen::EigenvaluesOnly);
    const double bottom = eig.eigenvalues().minCoeff();
    const bool singular = !(top > 0.0) || bottom <= 1e-12 * top;
    if (!singular) {
      ParamVector theta = gram.ldlt().solve(rhs);
      if (theta.norm() <= set.radius()) {
        ReferenceOptimum out;
        out.method = "normal-equations";
        out.value = global_objective(theta, weights, datasets, model);
        out.gradient_mapping_norm = global_gradient(theta, weights, datasets, model).norm();
        out.theta = std::move(theta);
        return out;
      }
      // constraint active: warm start from the radial projection
      return projected_gradient(weights, datasets, model, set, 2.0 * top, theta, options);
    }
    const double smooth = top > 0.0 ? 2.0 * top : 1.0;
    auto out = projected_gradient(weights, datasets, model, set, smooth, ParamVector::Zero(static_cast<Eigen::Index>(dim)),
                                  options);
    out.method = "projected-gradient (fallback: singular normal equations)";
    return out;
  }

  // softmax Hessian has spectral norm at most 1/2
  const double smooth = top > 0.0 ? 0.5 * top : 1.0;
  return projected_gradient(weights, datasets, model, set, smooth, ParamVector::Zero(static_cast<Eigen::Index>(dim)),
                            options);
}

ParamVector sample_in_ball(std::size_t dim, double radius, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  ParamVector v(static_cast<Eigen::Index>(dim));
  double norm = 0.0;
  do {
    for (auto& x : v) x = normal(rng);
    norm = v.norm();
  } while (norm == 0.0);
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  return v * (radius * std::pow(u, 1.0 / static_cast<double>(dim)) / norm);
}

std::uint64_t binomial_capped(std::size_t n, std::size_t k, std::uint64_t cap) {
  if (k > n) return 0;
  k = std::min(k, n - k);
  // exact: result after step j is C(n - k + j, j)
  std::uint64_t result = 1;
  for (std::size_t j = 1; j <= k; ++j) {
    const auto num = static_cast<unsigned __int128>(result) * (n - k + j);
    result = static_cast<std::uint64_t>(num / j);
    if (result > cap) return cap;
  }
  return result;
}

ProblemConstants estimate_constants(const LossModel& model, std::span<const ClientDataset> datasets,
                                    const ProjectionSet& set, std::size_t batch_size,
                                    const MarginalWeights& weights, Rng& rng, const ConstantsOptions& options) {
  check_federation(weights, datasets);
  if (options.theta_samples == 0) throw ValidationError("estimate_constants needs at least one theta sample");
  const std::size_t dim = model.param_dim(datasets.front().dim());
  ProblemConstants out;
  out.client_sigma.assign(datasets.size(), 0.0);
  out.theta_samples = options.theta_samples;
  for (std::size_t s = 0; s < options.theta_samples; ++s) {
    const ParamVector theta = sample_in_ball(dim, set.radius(), rng);
    for (std::size_t i = 0; i < datasets.size(); ++i) {
      const auto& data = datasets[i];
      const std::size_t b = std::min(batch_size, data.size());
      const ParamVector full = full_gradient(theta, data, model);
      out.lipschitz = std::max(out.lipschitz, full.norm());
      double deviation = 0.0;
      std::size_t count = 0;
      auto visit = [&](const Minibatch& batch) {
        const ParamVector g = minibatch_gradient(theta, data, model, batch);
        out.gradient_bound = std::max(out.gradient_bound, g.norm());
        deviation += (g - full).squaredNorm();
        ++count;
      };
      if (binomial_capped(data.size(), b, options.batches_per_theta + 1) <= options.batches_per_theta) {
        for_each_minibatch(data.size(), b, visit);
      } else {
        for (std::size_t k = 0; k < options.batches_per_theta; ++k) visit(sample_minibatch(data.size(), b, rng));
      }
      out.client_sigma[i] = std::max(out.client_sigma[i], std::sqrt(deviation / static_cast<double>(count)));
    }
  }
  for (std::size_t i = 0; i < datasets.size(); ++i) {
    out.sigma_sq += weights.p[i] * out.client_sigma[i] * out.client_sigma[i];
  }
  return out;
}

}  // namespace agnofed
