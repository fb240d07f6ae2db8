#include "llhmc/backbone.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <numeric>

namespace llhmc::backbone {

namespace {

Matrix activate(const Matrix& pre, Activation a) {
  if (a == Activation::relu) return pre.cwiseMax(0.0);
  return pre.array().tanh().matrix();
}

Matrix activation_derivative(const Matrix& pre, Activation a) {
  if (a == Activation::relu) return (pre.array() > 0.0).cast<double>().matrix();
  return (1.0 - pre.array().tanh().square()).matrix();
}

Matrix affine(const Matrix& in, const DenseLayer& layer) {
  Matrix out = in * layer.weights.transpose();
  out.rowwise() += layer.bias.transpose();
  return out;
}

void check_inputs(const TrainedMlp& mlp, const Matrix& inputs) {
  if (inputs.cols() != mlp.spec.input_dim()) {
    throw std::invalid_argument("input width " + std::to_string(inputs.cols()) +
                                " does not match network input " +
                                std::to_string(mlp.spec.input_dim()));
  }
}

Matrix classification_output_grad(const Matrix& logits, std::span<const int> labels) {
  Matrix g = softmax_rows(logits);
  for (Index i = 0; i < g.rows(); ++i) g(i, labels[static_cast<std::size_t>(i)]) -= 1.0;
  return g / static_cast<double>(g.rows());
}

Matrix regression_output_grad(const Matrix& predictions, const Vector& targets) {
  return 2.0 * (predictions.col(0) - targets) / static_cast<double>(targets.size());
}

double classification_loss(const Matrix& logits, std::span<const int> labels) {
  Vector lse = log_sum_exp_rows(logits);
  double total = 0.0;
  for (Index i = 0; i < logits.rows(); ++i) {
    total += lse[i] - logits(i, labels[static_cast<std::size_t>(i)]);
  }
  return total / static_cast<double>(logits.rows());
}

double regression_loss(const Matrix& predictions, const Vector& targets) {
  return (predictions.col(0) - targets).squaredNorm() / static_cast<double>(targets.size());
}

// Shared minibatch loop. `batch_grad` returns the mean-loss gradient for a
// row subset; `full_loss` evaluates the epoch loss.
template <typename BatchGrad, typename FullLoss>
TrainingResult run_training(TrainedMlp mlp, Index n, const OptimizerConfig& opt, Rng& rng,
                            BatchGrad&& batch_grad, FullLoss&& full_loss) {
  Vector theta = mlp.flatten();
  const Index dim = theta.size();
  Vector m = Vector::Zero(dim);
  Vector v = Vector::Zero(dim);
  constexpr double beta1 = 0.9;
  constexpr double beta2 = 0.999;
  constexpr double eps = 1e-8;
  long step = 0;

  const auto batch = (opt.batch_size <= 0 || opt.batch_size >= n) ? n : Index{opt.batch_size};
  std::vector<std::size_t> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);

  TrainingResult result;
  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    rng.shuffle(order);
    for (Index start = 0; start < n; start += batch) {
      const Index end = std::min(n, start + batch);
      std::span<const std::size_t> rows(order.data() + start, static_cast<std::size_t>(end - start));
      Vector grad = batch_grad(mlp, rows);
      if (opt.weight_decay > 0.0) grad += opt.weight_decay * theta;
      ++step;
      if (opt.method == OptimizerMethod::adam) {
        m = beta1 * m + (1.0 - beta1) * grad;
        v = beta2 * v + (1.0 - beta2) * grad.cwiseProduct(grad);
        const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
        const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
        theta.array() -= opt.learning_rate * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
      } else {
        theta -= opt.learning_rate * grad;
      }
      mlp = TrainedMlp::unflatten(mlp.spec, theta);
    }
    double loss = full_loss(mlp);
    if (!std::isfinite(loss)) {
      throw DivergenceError("training diverged at epoch " + std::to_string(epoch + 1));
    }
    result.loss_trace.push_back(loss);
  }
  result.mlp = std::move(mlp);
  return result;
}

Matrix gather_rows(const Matrix& m, std::span<const std::size_t> rows) {
  Matrix out(static_cast<Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Index>(i)) = m.row(static_cast<Index>(rows[i]));
  return out;
}

}  // namespace

std::string to_string(Activation a) { return a == Activation::relu ? "relu" : "tanh"; }
std::string to_string(Task t) {
  return t == Task::classification ? "classification" : "regression";
}
std::string to_string(OptimizerMethod m) { return m == OptimizerMethod::adam ? "adam" : "sgd"; }

Activation parse_activation(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "tanh") return Activation::tanh;
  throw std::invalid_argument("unknown activation '" + s + "'");
}

Task parse_task(const std::string& s) {
  if (s == "classification") return Task::classification;
  if (s == "regression") return Task::regression;
  throw std::invalid_argument("unknown task '" + s + "'");
}

OptimizerMethod parse_optimizer(const std::string& s) {
  if (s == "adam") return OptimizerMethod::adam;
  if (s == "sgd") return OptimizerMethod::sgd;
  throw std::invalid_argument("unknown optimizer '" + s + "'");
}

void MlpSpec::validate() const {
  if (layer_widths.size() < 3) {
    throw std::invalid_argument("an MLP needs an input, at least one hidden and an output layer");
  }
  for (int w : layer_widths) {
    if (w < 1) throw std::invalid_argument("layer widths must be positive");
  }
  if (task == Task::regression && output_dim() != 1) {
    throw std::invalid_argument("regression networks have a single output");
  }
}

Index MlpSpec::num_parameters() const {
  Index total = 0;
  for (std::size_t l = 0; l + 1 < layer_widths.size(); ++l) {
    total += Index{layer_widths[l + 1]} * (layer_widths[l] + 1);
  }
  return total;
}

TrainedMlp TrainedMlp::initialize(const MlpSpec& spec, Rng& rng) {
  spec.validate();
  TrainedMlp mlp{spec, {}};
  for (std::size_t l = 0; l + 1 < spec.layer_widths.size(); ++l) {
    const int fan_in = spec.layer_widths[l];
    const int fan_out = spec.layer_widths[l + 1];
    const double bound = spec.activation == Activation::relu
                             ? std::sqrt(6.0 / fan_in)
                             : std::sqrt(6.0 / (fan_in + fan_out));
    DenseLayer layer{Matrix(fan_out, fan_in), Vector::Zero(fan_out)};
    for (Index r = 0; r < fan_out; ++r) {
      for (Index c = 0; c < fan_in; ++c) layer.weights(r, c) = bound * (2.0 * rng.uniform() - 1.0);
    }
    mlp.layers.push_back(std::move(layer));
  }
  return mlp;
}

TrainedMlp TrainedMlp::unflatten(const MlpSpec& spec, const Vector& flat) {
  spec.validate();
  if (flat.size() != spec.num_parameters()) {
    throw std::invalid_argument("flat parameter vector has " + std::to_string(flat.size()) +
                                " entries, expected " + std::to_string(spec.num_parameters()));
  }
  TrainedMlp mlp{spec, {}};
  Index pos = 0;
  for (std::size_t l = 0; l + 1 < spec.layer_widths.size(); ++l) {
    const Index in = spec.layer_widths[l];
    const Index out = spec.layer_widths[l + 1];
    DenseLayer layer{Matrix(out, in), Vector(out)};
    for (Index r = 0; r < out; ++r) {
      for (Index c = 0; c < in; ++c) layer.weights(r, c) = flat[pos++];
    }
    for (Index r = 0; r < out; ++r) layer.bias[r] = flat[pos++];
    mlp.layers.push_back(std::move(layer));
  }
  return mlp;
}

Vector TrainedMlp::flatten() const {
  Vector flat(spec.num_parameters());
  Index pos = 0;
  for (const auto& layer : layers) {
    for (Index r = 0; r < layer.weights.rows(); ++r) {
      for (Index c = 0; c < layer.weights.cols(); ++c) flat[pos++] = layer.weights(r, c);
    }
    for (Index r = 0; r < layer.bias.size(); ++r) flat[pos++] = layer.bias[r];
  }
  return flat;
}

void TrainedMlp::validate() const {
  spec.validate();
  if (layers.size() + 1 != spec.layer_widths.size()) throw std::invalid_argument("layer count mismatch");
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& layer = layers[l];
    if (layer.weights.rows() != spec.layer_widths[l + 1] ||
        layer.weights.cols() != spec.layer_widths[l] ||
        layer.bias.size() != spec.layer_widths[l + 1]) {
      throw std::invalid_argument("layer " + std::to_string(l) + " shape mismatch");
    }
    if (!layer.weights.allFinite() || !layer.bias.allFinite()) {
      throw std::invalid_argument("non-finite network parameter");
    }
  }
}

void OptimizerConfig::validate() const {
  if (!(learning_rate >= 0.0)) throw std::invalid_argument("learning_rate must be non-negative");
  if (epochs < 1) throw std::invalid_argument("epochs must be at least 1");
  if (weight_decay < 0.0) throw std::invalid_argument("weight_decay must be non-negative");
}

ForwardCache forward_with_cache(const TrainedMlp& mlp, const Matrix& inputs) {
  check_inputs(mlp, inputs);
  ForwardCache cache;
  cache.activations.push_back(inputs);
  for (std::size_t l = 0; l + 1 < mlp.layers.size(); ++l) {
    cache.pre_activations.push_back(affine(cache.activations.back(), mlp.layers[l]));
    cache.activations.push_back(activate(cache.pre_activations.back(), mlp.spec.activation));
  }
  cache.output = apply_last_layer(mlp, cache.activations.back());
  return cache;
}

Vector backpropagate(const TrainedMlp& mlp, const ForwardCache& cache, const Matrix& output_grad) {
  const std::size_t n_layers = mlp.layers.size();
  std::vector<Matrix> weight_grads(n_layers);
  std::vector<Vector> bias_grads(n_layers);
  Matrix delta = output_grad;
  for (std::size_t l = n_layers; l-- > 0;) {
    weight_grads[l] = delta.transpose() * cache.activations[l];
    bias_grads[l] = delta.colwise().sum().transpose();
    if (l > 0) {
      delta = (delta * mlp.layers[l].weights)
                  .cwiseProduct(activation_derivative(cache.pre_activations[l - 1], mlp.spec.activation));
    }
  }
  Vector flat(mlp.spec.num_parameters());
  Index pos = 0;
  for (std::size_t l = 0; l < n_layers; ++l) {
    for (Index r = 0; r < weight_grads[l].rows(); ++r) {
      for (Index c = 0; c < weight_grads[l].cols(); ++c) flat[pos++] = weight_grads[l](r, c);
    }
    for (Index r = 0; r < bias_grads[l].size(); ++r) flat[pos++] = bias_grads[l][r];
  }
  return flat;
}

Matrix extract_features(const TrainedMlp& mlp, const Matrix& inputs) {
  check_inputs(mlp, inputs);
  Matrix a = inputs;
  for (std::size_t l = 0; l + 1 < mlp.layers.size(); ++l) {
    a = activate(affine(a, mlp.layers[l]), mlp.spec.activation);
  }
  return a;
}

Matrix apply_last_layer(const TrainedMlp& mlp, const Matrix& features) {
  if (features.cols() != mlp.spec.penultimate_dim()) {
    throw std::invalid_argument("feature width does not match the last layer");
  }
  return affine(features, mlp.last_layer());
}

Matrix forward(const TrainedMlp& mlp, const Matrix& inputs) {
  return apply_last_layer(mlp, extract_features(mlp, inputs));
}

double mlp_loss(const TrainedMlp& mlp, const Matrix& inputs, std::span<const int> labels) {
  if (static_cast<std::size_t>(inputs.rows()) != labels.size()) throw std::invalid_argument("row/label mismatch");
  return classification_loss(forward(mlp, inputs), labels);
}

double mlp_loss(const TrainedMlp& mlp, const Matrix& inputs, const Vector& targets) {
  if (inputs.rows() != targets.size()) throw std::invalid_argument("row/target mismatch");
  return regression_loss(forward(mlp, inputs), targets);
}

Vector mlp_gradient(const TrainedMlp& mlp, const Matrix& inputs, std::span<const int> labels) {
  if (inputs.rows() == 0) throw std::invalid_argument("empty batch");
  if (static_cast<std::size_t>(inputs.rows()) != labels.size()) throw std::invalid_argument("row/label mismatch");
  if (mlp.spec.task != Task::classification) throw std::invalid_argument("network is not a classifier");
  auto cache = forward_with_cache(mlp, inputs);
  return backpropagate(mlp, cache, classification_output_grad(cache.output, labels));
}

Vector mlp_gradient(const TrainedMlp& mlp, const Matrix& inputs, const Vector& targets) {
  if (inputs.rows() == 0) throw std::invalid_argument("empty batch");
  if (inputs.rows() != targets.size()) throw std::invalid_argument("row/target mismatch");
  if (mlp.spec.task != Task::regression) throw std::invalid_argument("network is not a regressor");
  auto cache = forward_with_cache(mlp, inputs);
  return backpropagate(mlp, cache, regression_output_grad(cache.output, targets));
}

TrainingResult train_mlp(const LatentDataset& data, const MlpSpec& spec,
                         const OptimizerConfig& opt, Rng& rng) {
  spec.validate();
  opt.validate();
  data.validate();
  if (spec.task != Task::classification) throw std::invalid_argument("spec is not a classifier");
  if (spec.input_dim() != data.dim()) throw std::invalid_argument("spec input width differs from data");
  if (spec.output_dim() != data.num_classes) throw std::invalid_argument("spec output width differs from K");
  if (data.size() == 0) throw std::invalid_argument("empty training set");
  TrainedMlp init = TrainedMlp::initialize(spec, rng);
  Rng shuffle_rng = rng.split(1);
  return run_training(
      std::move(init), data.size(), opt, shuffle_rng,
      [&](const TrainedMlp& mlp, std::span<const std::size_t> rows) {
        std::vector<int> labels(rows.size());
        for (std::size_t i = 0; i < rows.size(); ++i) labels[i] = data.labels[rows[i]];
        return mlp_gradient(mlp, gather_rows(data.features, rows), labels);
      },
      [&](const TrainedMlp& mlp) { return mlp_loss(mlp, data.features, data.labels); });
}

TrainingResult train_mlp(const RegressionDataset& data, const MlpSpec& spec,
                         const OptimizerConfig& opt, Rng& rng) {
  spec.validate();
  opt.validate();
  data.validate();
  if (spec.task != Task::regression) throw std::invalid_argument("spec is not a regressor");
  if (spec.input_dim() != data.dim()) throw std::invalid_argument("spec input width differs from data");
  if (data.size() == 0) throw std::invalid_argument("empty training set");
  TrainedMlp init = TrainedMlp::initialize(spec, rng);
  Rng shuffle_rng = rng.split(1);
  return run_training(
      std::move(init), data.size(), opt, shuffle_rng,
      [&](const TrainedMlp& mlp, std::span<const std::size_t> rows) {
        Vector targets(static_cast<Index>(rows.size()));
        for (std::size_t i = 0; i < rows.size(); ++i) targets[static_cast<Index>(i)] = data.targets[static_cast<Index>(rows[i])];
        return mlp_gradient(mlp, gather_rows(data.inputs, rows), targets);
      },
      [&](const TrainedMlp& mlp) { return mlp_loss(mlp, data.inputs, data.targets); });
}

void to_json(nlohmann::json& j, const MlpSpec& spec) {
  j = {{"layer_widths", spec.layer_widths},
       {"activation", to_string(spec.activation)},
       {"task", to_string(spec.task)}};
}

void from_json(const nlohmann::json& j, MlpSpec& spec) {
  spec.layer_widths = j.at("layer_widths").get<std::vector<int>>();
  spec.activation = parse_activation(j.at("activation").get<std::string>());
  spec.task = parse_task(j.at("task").get<std::string>());
  spec.validate();
}

void to_json(nlohmann::json& j, const TrainedMlp& mlp) {
  Vector flat = mlp.flatten();
  j = {{"spec", mlp.spec}, {"parameters", std::vector<double>(flat.data(), flat.data() + flat.size())}};
}

void from_json(const nlohmann::json& j, TrainedMlp& mlp) {
  auto spec = j.at("spec").get<MlpSpec>();
  auto params = j.at("parameters").get<std::vector<double>>();
  mlp = TrainedMlp::unflatten(spec, Eigen::Map<const Vector>(params.data(), static_cast<Index>(params.size())));
}

}  // namespace llhmc::backbone
