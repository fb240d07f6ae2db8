#include "llhmc/model.hpp"

#include "llhmc/metrics.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <numbers>

namespace llhmc::model {

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;

void check_dim(const Vector& theta, Index dim) {
  if (theta.size() != dim) {
    throw std::invalid_argument("parameter vector has " + std::to_string(theta.size()) +
                                " entries, target expects " + std::to_string(dim));
  }
}

}  // namespace

void GaussianPrior::validate() const {
  if (!(std > 0.0) || !std::isfinite(std)) throw std::invalid_argument("prior std must be positive");
}

double log_prior(const Vector& theta, const GaussianPrior& prior) {
  prior.validate();
  const double var = prior.std * prior.std;
  return -0.5 * static_cast<double>(theta.size()) * (kLog2Pi + std::log(var)) -
         theta.squaredNorm() / (2.0 * var);
}

Vector LastLayerClassifier::flatten() const {
  Vector flat(last_layer_dim(num_classes(), feature_dim()));
  Index pos = 0;
  for (Index k = 0; k < weights.rows(); ++k) {
    for (Index d = 0; d < weights.cols(); ++d) flat[pos++] = weights(k, d);
  }
  flat.tail(bias.size()) = bias;
  return flat;
}

LastLayerClassifier LastLayerClassifier::unflatten(const Vector& flat, Index num_classes,
                                                   Index feature_dim) {
  check_dim(flat, last_layer_dim(num_classes, feature_dim));
  LastLayerClassifier c{Matrix(num_classes, feature_dim), flat.tail(num_classes)};
  Index pos = 0;
  for (Index k = 0; k < num_classes; ++k) {
    for (Index d = 0; d < feature_dim; ++d) c.weights(k, d) = flat[pos++];
  }
  return c;
}

Matrix LastLayerClassifier::logits(const Matrix& features) const {
  if (features.cols() != feature_dim()) throw std::invalid_argument("feature width mismatch");
  Matrix out = features * weights.transpose();
  out.rowwise() += bias.transpose();
  return out;
}

Vector RegressionHead::flatten() const {
  Vector flat(weights.size() + 1);
  flat.head(weights.size()) = weights;
  flat[weights.size()] = bias;
  return flat;
}

RegressionHead RegressionHead::unflatten(const Vector& flat, double noise_std) {
  if (flat.size() < 2) throw std::invalid_argument("regression head needs at least two parameters");
  return {flat.head(flat.size() - 1), flat[flat.size() - 1], noise_std};
}

double class_log_likelihood(const LastLayerClassifier& params, const LatentDataset& data) {
  if (params.num_classes() != data.num_classes || params.feature_dim() != data.dim()) {
    throw std::invalid_argument("classifier shape does not match the dataset");
  }
  Matrix logits = params.logits(data.features);
  Vector lse = log_sum_exp_rows(logits);
  double total = 0.0;
  for (Index i = 0; i < logits.rows(); ++i) {
    total += logits(i, data.labels[static_cast<std::size_t>(i)]) - lse[i];
  }
  return total;
}

ClassificationPosterior::ClassificationPosterior(LatentDataset data, GaussianPrior prior)
    : data_(std::move(data)), prior_(prior) {
  data_.validate();
  prior_.validate();
}

Index ClassificationPosterior::dim() const {
  return last_layer_dim(data_.num_classes, data_.dim());
}

double ClassificationPosterior::log_density(const Vector& theta) const {
  check_dim(theta, dim());
  auto params = LastLayerClassifier::unflatten(theta, data_.num_classes, data_.dim());
  return class_log_likelihood(params, data_) + log_prior(theta, prior_);
}

double ClassificationPosterior::log_density_gradient(const Vector& theta, Vector& grad) const {
  check_dim(theta, dim());
  const Index k_classes = data_.num_classes;
  const Index d = data_.dim();
  auto params = LastLayerClassifier::unflatten(theta, k_classes, d);
  Matrix logits = params.logits(data_.features);
  Vector lse = log_sum_exp_rows(logits);

  // residual = one_hot(y) - softmax(logits)
  Matrix residual(logits.rows(), k_classes);
  double loglik = 0.0;
  for (Index i = 0; i < logits.rows(); ++i) {
    const int y = data_.labels[static_cast<std::size_t>(i)];
    loglik += logits(i, y) - lse[i];
    residual.row(i) = -(logits.row(i).array() - lse[i]).exp();
    residual(i, y) += 1.0;
  }
  Matrix grad_w = residual.transpose() * data_.features;  // K x D
  Vector grad_b = residual.colwise().sum().transpose();

  grad.resize(dim());
  Index pos = 0;
  for (Index k = 0; k < k_classes; ++k) {
    for (Index j = 0; j < d; ++j) grad[pos++] = grad_w(k, j);
  }
  grad.tail(k_classes) = grad_b;
  const double var = prior_.std * prior_.std;
  grad -= theta / var;
  return loglik + log_prior(theta, prior_);
}

RegressionPosterior::RegressionPosterior(Matrix features, Vector targets, GaussianPrior prior,
                                         double noise_std)
    : features_(std::move(features)), targets_(std::move(targets)), prior_(prior),
      noise_std_(noise_std) {
  prior_.validate();
  if (!(noise_std_ > 0.0)) throw std::invalid_argument("noise_std must be positive");
  if (features_.rows() != targets_.size()) throw std::invalid_argument("feature/target mismatch");
  if (features_.cols() < 1) throw std::invalid_argument("feature dimension must be at least 1");
}

Index RegressionPosterior::dim() const { return features_.cols() + 1; }

double RegressionPosterior::log_density(const Vector& theta) const {
  Vector grad;
  return log_density_gradient(theta, grad);
}

double RegressionPosterior::log_density_gradient(const Vector& theta, Vector& grad) const {
  check_dim(theta, dim());
  const Index d = features_.cols();
  const double noise_var = noise_std_ * noise_std_;
  Vector residual = targets_ - features_ * theta.head(d);
  residual.array() -= theta[d];
  const auto n = static_cast<double>(targets_.size());
  double loglik = -0.5 * n * (kLog2Pi + std::log(noise_var)) - residual.squaredNorm() / (2.0 * noise_var);
  grad.resize(dim());
  grad.head(d) = features_.transpose() * residual / noise_var;
  grad[d] = residual.sum() / noise_var;
  grad -= theta / (prior_.std * prior_.std);
  return loglik + log_prior(theta, prior_);
}

FullNetworkPosterior::FullNetworkPosterior(backbone::MlpSpec spec, Matrix inputs,
                                           std::vector<int> labels, Vector targets,
                                           GaussianPrior prior, double noise_std, Index max_dim)
    : spec_(std::move(spec)), inputs_(std::move(inputs)), labels_(std::move(labels)),
      targets_(std::move(targets)), prior_(prior), noise_std_(noise_std) {
  spec_.validate();
  prior_.validate();
  if (spec_.num_parameters() > max_dim) {
    throw std::invalid_argument("full-network posterior has " + std::to_string(spec_.num_parameters()) +
                                " parameters, above the cap of " + std::to_string(max_dim));
  }
  if (inputs_.cols() != spec_.input_dim()) throw std::invalid_argument("input width mismatch");
  if (spec_.task == backbone::Task::classification) {
    if (static_cast<std::size_t>(inputs_.rows()) != labels_.size()) throw std::invalid_argument("row/label mismatch");
    for (int y : labels_) {
      if (y < 0 || y >= spec_.output_dim()) throw std::invalid_argument("label outside output range");
    }
  } else {
    if (inputs_.rows() != targets_.size()) throw std::invalid_argument("row/target mismatch");
    if (!(noise_std_ > 0.0)) throw std::invalid_argument("noise_std must be positive");
  }
}

Index FullNetworkPosterior::dim() const { return spec_.num_parameters(); }

double FullNetworkPosterior::log_likelihood(const Matrix& output) const {
  if (spec_.task == backbone::Task::classification) {
    Vector lse = log_sum_exp_rows(output);
    double total = 0.0;
    for (Index i = 0; i < output.rows(); ++i) total += output(i, labels_[static_cast<std::size_t>(i)]) - lse[i];
    return total;
  }
  const double noise_var = noise_std_ * noise_std_;
  const auto n = static_cast<double>(targets_.size());
  return -0.5 * n * (kLog2Pi + std::log(noise_var)) -
         (targets_ - output.col(0)).squaredNorm() / (2.0 * noise_var);
}

double FullNetworkPosterior::log_density(const Vector& theta) const {
  check_dim(theta, dim());
  auto mlp = backbone::TrainedMlp::unflatten(spec_, theta);
  return log_likelihood(backbone::forward(mlp, inputs_)) + log_prior(theta, prior_);
}

double FullNetworkPosterior::log_density_gradient(const Vector& theta, Vector& grad) const {
  check_dim(theta, dim());
  auto mlp = backbone::TrainedMlp::unflatten(spec_, theta);
  auto cache = backbone::forward_with_cache(mlp, inputs_);
  // Gradient of the log-likelihood w.r.t. the network output.
  Matrix output_grad;
  if (spec_.task == backbone::Task::classification) {
    output_grad = -softmax_rows(cache.output);
    for (Index i = 0; i < output_grad.rows(); ++i) output_grad(i, labels_[static_cast<std::size_t>(i)]) += 1.0;
  } else {
    output_grad = (targets_ - cache.output.col(0)) / (noise_std_ * noise_std_);
  }
  grad = backbone::backpropagate(mlp, cache, output_grad);
  grad -= theta / (prior_.std * prior_.std);
  return log_likelihood(cache.output) + log_prior(theta, prior_);
}

ClassificationPosterior posterior_target_classification(const LatentDataset& data,
                                                        const GaussianPrior& prior) {
  return ClassificationPosterior(data, prior);
}

RegressionPosterior posterior_target_regression(const RegressionDataset& data,
                                                const GaussianPrior& prior, double noise_std) {
  return RegressionPosterior(data.inputs, data.targets, prior, noise_std);
}

FullNetworkPosterior posterior_target_full_network(const backbone::MlpSpec& spec,
                                                   const LatentDataset& data,
                                                   const GaussianPrior& prior, Index max_dim) {
  if (spec.task != backbone::Task::classification) throw std::invalid_argument("spec is not a classifier");
  if (spec.output_dim() != data.num_classes) throw std::invalid_argument("output width differs from K");
  return FullNetworkPosterior(spec, data.features, data.labels, Vector(), prior, 0.1, max_dim);
}

FullNetworkPosterior posterior_target_full_network(const backbone::MlpSpec& spec,
                                                   const RegressionDataset& data,
                                                   const GaussianPrior& prior, double noise_std,
                                                   Index max_dim) {
  if (spec.task != backbone::Task::regression) throw std::invalid_argument("spec is not a regressor");
  return FullNetworkPosterior(spec, data.inputs, {}, data.targets, prior, noise_std, max_dim);
}

Vector sample_prior(Index dim, const GaussianPrior& prior, Rng& rng) {
  prior.validate();
  return prior.std * rng.normal_vector(dim);
}

PredictiveBundle PredictiveBundle::from_members(std::vector<Matrix> members) {
  if (members.empty()) throw std::invalid_argument("a predictive bundle needs at least one member");
  PredictiveBundle b;
  b.mean = Matrix::Zero(members.front().rows(), members.front().cols());
  for (const auto& m : members) {
    if (m.rows() != b.mean.rows() || m.cols() != b.mean.cols()) {
      throw std::invalid_argument("bundle members differ in shape");
    }
    b.mean += m;
  }
  b.mean /= static_cast<double>(members.size());
  b.entropy.resize(b.mean.rows());
  for (Index i = 0; i < b.mean.rows(); ++i) {
    Vector row = b.mean.row(i).transpose();
    b.entropy[i] = metrics::predictive_entropy(row);
  }
  b.members = std::move(members);
  return b;
}

PredictiveBundle merge_bundles(std::span<const PredictiveBundle> bundles) {
  std::vector<Matrix> members;
  for (const auto& b : bundles) members.insert(members.end(), b.members.begin(), b.members.end());
  return PredictiveBundle::from_members(std::move(members));
}

PredictiveBundle predict_proba(const LastLayerClassifier& params, const Matrix& features) {
  return PredictiveBundle::from_members({softmax_rows(params.logits(features))});
}

PredictiveBundle predict_proba(std::span<const Vector> members, const Matrix& features) {
  if (members.empty()) throw std::invalid_argument("no parameter vectors supplied");
  const Index d = features.cols();
  std::vector<Matrix> probs;
  probs.reserve(members.size());
  for (const auto& theta : members) {
    if (theta.size() % (d + 1) != 0 || theta.size() / (d + 1) < 2) {
      throw std::invalid_argument("parameter dimension " + std::to_string(theta.size()) +
                                  " is not K*D+K for feature width " + std::to_string(d));
    }
    auto params = LastLayerClassifier::unflatten(theta, theta.size() / (d + 1), d);
    probs.push_back(softmax_rows(params.logits(features)));
  }
  return PredictiveBundle::from_members(std::move(probs));
}

void to_json(nlohmann::json& j, const LastLayerClassifier& c) {
  Vector flat = c.flatten();
  j = {{"num_classes", c.num_classes()},
       {"feature_dim", c.feature_dim()},
       {"parameters", std::vector<double>(flat.data(), flat.data() + flat.size())}};
}

void from_json(const nlohmann::json& j, LastLayerClassifier& c) {
  auto params = j.at("parameters").get<std::vector<double>>();
  c = LastLayerClassifier::unflatten(Eigen::Map<const Vector>(params.data(), static_cast<Index>(params.size())),
                                     j.at("num_classes").get<Index>(), j.at("feature_dim").get<Index>());
}

}  // namespace llhmc::model
