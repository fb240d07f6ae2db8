// Posterior targets for the sampler and last-layer predictive bundles.

#pragma once

#include "llhmc/backbone.hpp"
#include "llhmc/core.hpp"

#include <nlohmann/json_fwd.hpp>

#include <span>
#include <vector>

namespace llhmc::model {

/**
 * Unnormalised log posterior over a flat parameter vector. Implementations
 * are immutable, so evaluations are reentrant across threads.
 */
class DifferentiableTarget {
 public:
  virtual ~DifferentiableTarget() = default;

  virtual Index dim() const = 0;
  virtual double log_density(const Vector& theta) const = 0;
  /// Returns log_density(theta) and writes its gradient into `grad`.
  virtual double log_density_gradient(const Vector& theta, Vector& grad) const = 0;
};

/// Isotropic zero-mean Gaussian prior shared by weights and biases.
struct GaussianPrior {
  double std = 1.0;

  void validate() const;
};

/// Normalised log density: -dim/2 log(2 pi s^2) - |theta|^2 / (2 s^2).
double log_prior(const Vector& theta, const GaussianPrior& prior);

/// Flat order: weights row-major (K x D), then the K biases.
struct LastLayerClassifier {
  Matrix weights;  // K x D
  Vector bias;     // K

  Index num_classes() const { return weights.rows(); }
  Index feature_dim() const { return weights.cols(); }
  Vector flatten() const;
  static LastLayerClassifier unflatten(const Vector& flat, Index num_classes, Index feature_dim);
  Matrix logits(const Matrix& features) const;
};

/// Number of flat parameters of a K-class head on D features.
inline Index last_layer_dim(Index num_classes, Index feature_dim) {
  return num_classes * feature_dim + num_classes;
}

struct RegressionHead {
  Vector weights;
  double bias = 0.0;
  double noise_std = 0.1;

  Vector flatten() const;
  static RegressionHead unflatten(const Vector& flat, double noise_std);
};

/// sum_i log softmax(W z_i + b)[y_i] via log-sum-exp.
double class_log_likelihood(const LastLayerClassifier& params, const LatentDataset& data);

class ClassificationPosterior final : public DifferentiableTarget {
 public:
  ClassificationPosterior(LatentDataset data, GaussianPrior prior);

  Index dim() const override;
  double log_density(const Vector& theta) const override;
  double log_density_gradient(const Vector& theta, Vector& grad) const override;

  const LatentDataset& data() const { return data_; }
  const GaussianPrior& prior() const { return prior_; }

 private:
  LatentDataset data_;
  GaussianPrior prior_;
};

class RegressionPosterior final : public DifferentiableTarget {
 public:
  RegressionPosterior(Matrix features, Vector targets, GaussianPrior prior, double noise_std);

  Index dim() const override;
  double log_density(const Vector& theta) const override;
  double log_density_gradient(const Vector& theta, Vector& grad) const override;

 private:
  Matrix features_;
  Vector targets_;
  GaussianPrior prior_;
  double noise_std_;
};

/// Posterior over every weight and bias of a small MLP.
class FullNetworkPosterior final : public DifferentiableTarget {
 public:
  static constexpr Index kDefaultMaxDim = 20000;

  /// Classification: `labels` are used. Regression: `targets` are used with
  /// Gaussian noise `noise_std`.
  FullNetworkPosterior(backbone::MlpSpec spec, Matrix inputs, std::vector<int> labels,
                       Vector targets, GaussianPrior prior, double noise_std = 0.1,
                       Index max_dim = kDefaultMaxDim);

  Index dim() const override;
  double log_density(const Vector& theta) const override;
  double log_density_gradient(const Vector& theta, Vector& grad) const override;

  const backbone::MlpSpec& spec() const { return spec_; }

 private:
  double log_likelihood(const Matrix& output) const;

  backbone::MlpSpec spec_;
  Matrix inputs_;
  std::vector<int> labels_;
  Vector targets_;
  GaussianPrior prior_;
  double noise_std_;
};

ClassificationPosterior posterior_target_classification(const LatentDataset& data,
                                                        const GaussianPrior& prior);
RegressionPosterior posterior_target_regression(const RegressionDataset& data,
                                                const GaussianPrior& prior, double noise_std);
FullNetworkPosterior posterior_target_full_network(const backbone::MlpSpec& spec,
                                                   const LatentDataset& data,
                                                   const GaussianPrior& prior,
                                                   Index max_dim = FullNetworkPosterior::kDefaultMaxDim);
FullNetworkPosterior posterior_target_full_network(const backbone::MlpSpec& spec,
                                                   const RegressionDataset& data,
                                                   const GaussianPrior& prior, double noise_std,
                                                   Index max_dim = FullNetworkPosterior::kDefaultMaxDim);

/// Draw of the flat parameters from the prior (cold start).
Vector sample_prior(Index dim, const GaussianPrior& prior, Rng& rng);

/**
 * Per-member class probabilities for a set of instances plus the
 * member-mean distribution and its entropy.
 */
struct PredictiveBundle {
  std::vector<Matrix> members;  // each N x K
  Matrix mean;                  // N x K
  Vector entropy;               // N, nats

  static PredictiveBundle from_members(std::vector<Matrix> members);
  std::size_t num_members() const { return members.size(); }
  Index num_instances() const { return mean.rows(); }
};

/// Concatenate member lists of bundles over the same instances.
PredictiveBundle merge_bundles(std::span<const PredictiveBundle> bundles);

PredictiveBundle predict_proba(const LastLayerClassifier& params, const Matrix& features);
/// One member per flat parameter vector of dimension K*D + K.
PredictiveBundle predict_proba(std::span<const Vector> members, const Matrix& features);

void to_json(nlohmann::json& j, const LastLayerClassifier& c);
void from_json(const nlohmann::json& j, LastLayerClassifier& c);

}  // namespace llhmc::model
