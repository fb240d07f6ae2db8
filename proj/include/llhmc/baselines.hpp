// Last-layer comparison methods: MAP softmax, Bayes-by-backprop, sub-ensembles
// and Gaussian discriminant feature densities.

#pragma once

#include "llhmc/backbone.hpp"
#include "llhmc/core.hpp"
#include "llhmc/model.hpp"
#include "llhmc/sampler.hpp"

#include <nlohmann/json_fwd.hpp>

#include <cstdint>
#include <optional>
#include <vector>

namespace llhmc::baselines {

/**
 * MAP estimate of a softmax head: minimizes the negative log posterior.
 * A full batch (batch_size 0 or >= N) runs L-BFGS until the gradient norm
 * drops below 1e-6 or `opt.epochs` iterations pass. Smaller batches run
 * Adam on the N/|B|-rescaled minibatch objective for `opt.epochs` epochs.
 * The starting point is a small random draw from `rng`.
 */
model::LastLayerClassifier fit_map_softmax(const LatentDataset& data,
                                           const model::GaussianPrior& prior,
                                           const backbone::OptimizerConfig& opt, Rng& rng);

/// Negative log posterior of a head, the quantity fit_map_softmax minimizes.
double map_objective(const model::LastLayerClassifier& params, const LatentDataset& data,
                     const model::GaussianPrior& prior);

/// Mean-field Gaussian over the flat head parameters; std = softplus(rho).
struct VariationalLastLayer {
  Vector mu;
  Vector rho;
  model::GaussianPrior prior;
  Index num_classes = 2;
  Index feature_dim = 1;

  Vector std() const;
  void validate() const;
  /// q equal to the prior: mu = 0, std = prior std.
  static VariationalLastLayer from_prior(Index num_classes, Index feature_dim,
                                         const model::GaussianPrior& prior);
};

double softplus(double x);
double inverse_softplus(double y);

/// KL(N(mu, diag(std^2)) || N(0, prior_std^2 I)) in closed form.
double gaussian_kl(const Vector& mu, const Vector& std, double prior_std);

struct BbbOptions {
  int mc_samples = 1;
  /// Initial std is min(prior std, init_std) unless init_from_prior is set.
  double init_std = 0.05;
  bool init_from_prior = false;
};

/**
 * Maximizes the ELBO with the reparameterization theta = mu + softplus(rho) xi.
 * Each minibatch step weights the likelihood by N/|B| and the KL by
 * 1/num_batches, so one epoch sees the KL exactly once.
 */
VariationalLastLayer fit_bbb_last_layer(const LatentDataset& data, const model::GaussianPrior& prior,
                                        const backbone::OptimizerConfig& opt,
                                        const BbbOptions& bbb, Rng& rng);

/// Monte Carlo ELBO estimate: mean log-likelihood over draws minus the KL.
double elbo(const VariationalLastLayer& q, const LatentDataset& data, int mc_samples, Rng& rng);

struct SubEnsemble {
  std::vector<model::LastLayerClassifier> members;
  std::vector<std::uint64_t> member_seeds;

  void validate() const;
};

/// M MAP heads; member m trains from the stream rng.split(m).
SubEnsemble fit_sub_ensemble(const LatentDataset& data, int num_members,
                             const model::GaussianPrior& prior,
                             const backbone::OptimizerConfig& opt, Rng& rng);

/// `n_members` fresh reparameterized draws.
model::PredictiveBundle sample_predictions(const VariationalLastLayer& q, const Matrix& features,
                                           int n_members, Rng& rng);
/// Uniform selection without replacement; n_members = M keeps every member in order.
model::PredictiveBundle sample_predictions(const SubEnsemble& ensemble, const Matrix& features,
                                           int n_members, Rng& rng);
/// Draws split evenly over chains, each chain sampled without replacement.
model::PredictiveBundle sample_predictions(const sampler::PosteriorSampleSet& samples,
                                           const Matrix& features, int n_members, Rng& rng);

/// Sorted row indices: n of [0, available) without replacement.
std::vector<std::size_t> choose_without_replacement(std::size_t available, std::size_t n, Rng& rng);

struct GdaOptions {
  /// Absolute ridge; when unset the ridge is relative_ridge * trace(cov) / D.
  std::optional<double> ridge;
  double relative_ridge = 1e-3;
  bool shared_covariance = false;
};

struct GdaModel {
  Matrix means;                      // K x D
  std::vector<Matrix> covariances;   // K of D x D, regularized
  Vector weights;                    // K, sums to 1
  std::vector<Matrix> cholesky;      // lower factors of the covariances
  Vector log_normalizers;            // -0.5 (D log 2 pi + log det)

  Index num_classes() const { return means.rows(); }
  Index feature_dim() const { return means.cols(); }
  /// Recomputes the factors and normalizers from the covariances.
  void factorize();
};

GdaModel fit_gda(const LatentDataset& train, const GdaOptions& options = {});

struct GdaScores {
  Matrix posterior;  // N x K
  Vector log_density;
  /// -log_density; larger means more out-of-distribution.
  Vector ood_score() const { return -log_density; }
};

GdaScores gda_scores(const GdaModel& model, const Matrix& features);

void to_json(nlohmann::json& j, const VariationalLastLayer& q);
void from_json(const nlohmann::json& j, VariationalLastLayer& q);
void to_json(nlohmann::json& j, const SubEnsemble& e);
void from_json(const nlohmann::json& j, SubEnsemble& e);
void to_json(nlohmann::json& j, const GdaModel& g);
void from_json(const nlohmann::json& j, GdaModel& g);

}  // namespace llhmc::baselines
