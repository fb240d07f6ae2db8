// Fully connected backbone: training with manual backpropagation and
// penultimate-layer feature extraction.

#pragma once

#include "llhmc/core.hpp"

#include <nlohmann/json_fwd.hpp>

#include <span>
#include <string>
#include <vector>

namespace llhmc::backbone {

enum class Activation { relu, tanh };
enum class Task { classification, regression };

std::string to_string(Activation a);
std::string to_string(Task t);
Activation parse_activation(const std::string& s);
Task parse_task(const std::string& s);

struct MlpSpec {
  /// Input width, hidden widths..., output width (K, or 1 for regression).
  std::vector<int> layer_widths;
  Activation activation = Activation::relu;
  Task task = Task::classification;

  void validate() const;
  int input_dim() const { return layer_widths.front(); }
  int output_dim() const { return layer_widths.back(); }
  int penultimate_dim() const { return layer_widths[layer_widths.size() - 2]; }
  Index num_parameters() const;
};

struct DenseLayer {
  Matrix weights;  // out x in
  Vector bias;     // out
};

/**
 * Network parameters. The flat parameter order is canonical: layer 0
 * weights row-major, layer 0 bias, layer 1 weights, and so on.
 */
struct TrainedMlp {
  MlpSpec spec;
  std::vector<DenseLayer> layers;

  /// Kaiming-uniform (relu) or Xavier-uniform (tanh) weights, zero biases.
  static TrainedMlp initialize(const MlpSpec& spec, Rng& rng);
  static TrainedMlp unflatten(const MlpSpec& spec, const Vector& flat);
  Vector flatten() const;
  void validate() const;
  const DenseLayer& last_layer() const { return layers.back(); }
};

enum class OptimizerMethod { sgd, adam };
std::string to_string(OptimizerMethod m);
OptimizerMethod parse_optimizer(const std::string& s);

struct OptimizerConfig {
  OptimizerMethod method = OptimizerMethod::adam;
  double learning_rate = 1e-2;
  int epochs = 200;
  /// Zero or >= N means full batch.
  int batch_size = 32;
  double weight_decay = 0.0;

  void validate() const;
};

struct TrainingResult {
  TrainedMlp mlp;
  /// Mean training loss over the full set after each epoch.
  std::vector<double> loss_trace;
};

/// Minibatch training on mean cross-entropy. Throws DivergenceError with
/// the epoch index on a non-finite loss.
TrainingResult train_mlp(const LatentDataset& data, const MlpSpec& spec,
                         const OptimizerConfig& opt, Rng& rng);
/// Minibatch training on mean squared error.
TrainingResult train_mlp(const RegressionDataset& data, const MlpSpec& spec,
                         const OptimizerConfig& opt, Rng& rng);

double mlp_loss(const TrainedMlp& mlp, const Matrix& inputs, std::span<const int> labels);
double mlp_loss(const TrainedMlp& mlp, const Matrix& inputs, const Vector& targets);

/// Gradient of the mean batch loss in canonical flat order.
Vector mlp_gradient(const TrainedMlp& mlp, const Matrix& inputs, std::span<const int> labels);
Vector mlp_gradient(const TrainedMlp& mlp, const Matrix& inputs, const Vector& targets);

/// Post-activation output of the last hidden layer (N x penultimate width).
Matrix extract_features(const TrainedMlp& mlp, const Matrix& inputs);
/// Affine map of the last layer applied to penultimate features.
Matrix apply_last_layer(const TrainedMlp& mlp, const Matrix& features);
/// Raw network output: logits or regression predictions (N x out).
Matrix forward(const TrainedMlp& mlp, const Matrix& inputs);

/// Activations kept for backpropagation; activations[0] is the input.
struct ForwardCache {
  std::vector<Matrix> activations;
  std::vector<Matrix> pre_activations;
  Matrix output;
};

ForwardCache forward_with_cache(const TrainedMlp& mlp, const Matrix& inputs);

/// Flat parameter gradient of sum_i <output_grad_i, output_i>.
Vector backpropagate(const TrainedMlp& mlp, const ForwardCache& cache, const Matrix& output_grad);

void to_json(nlohmann::json& j, const MlpSpec& spec);
void from_json(const nlohmann::json& j, MlpSpec& spec);
void to_json(nlohmann::json& j, const TrainedMlp& mlp);
void from_json(const nlohmann::json& j, TrainedMlp& mlp);

}  // namespace llhmc::backbone
