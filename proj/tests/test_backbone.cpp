#include "llhmc/backbone.hpp"
#include "llhmc/metrics.hpp"
#include "llhmc/toydata.hpp"

#include <doctest.h>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>

using namespace llhmc;
using namespace llhmc::backbone;

namespace {

LatentDataset blobs(int per_class, Rng& rng) {
  LatentDataset d;
  d.features = Matrix(2 * per_class, 2);
  for (int i = 0; i < 2 * per_class; ++i) {
    int y = i < per_class ? 0 : 1;
    double cx = y == 0 ? -3.0 : 3.0;
    d.features(i, 0) = cx + 0.5 * rng.normal();
    d.features(i, 1) = 0.5 * rng.normal();
    d.labels.push_back(y);
  }
  return d;
}

// Mean loss as a function of the flat parameters.
double loss_at(const MlpSpec& spec, const Vector& flat, const Matrix& x, const std::vector<int>& y) {
  return mlp_loss(TrainedMlp::unflatten(spec, flat), x, y);
}

double loss_at(const MlpSpec& spec, const Vector& flat, const Matrix& x, const Vector& t) {
  return mlp_loss(TrainedMlp::unflatten(spec, flat), x, t);
}

template <typename Targets>
double worst_fd_error(const TrainedMlp& mlp, const Matrix& x, const Targets& y) {
  Vector g = mlp_gradient(mlp, x, y);
  Vector flat = mlp.flatten();
  REQUIRE(g.size() == flat.size());
  const double h = 1e-5;
  double worst = 0.0;
  for (Index i = 0; i < flat.size(); ++i) {
    Vector up = flat, down = flat;
    up[i] += h;
    down[i] -= h;
    double fd = (loss_at(mlp.spec, up, x, y) - loss_at(mlp.spec, down, x, y)) / (2 * h);
    double diff = std::abs(fd - g[i]);
    if (diff < 1e-8) continue;
    worst = std::max(worst, diff / std::max(std::abs(fd), std::abs(g[i])));
  }
  return worst;
}

}  // namespace

TEST_CASE("separable blobs are fitted perfectly") {
  Rng rng(0);
  LatentDataset d = blobs(50, rng);
  MlpSpec spec{{2, 8, 2}, Activation::relu, Task::classification};
  OptimizerConfig opt;
  opt.epochs = 200;
  Rng train(1);
  TrainingResult r = train_mlp(d, spec, opt, train);
  CHECK(r.loss_trace.size() == 200);
  for (double l : r.loss_trace) CHECK(std::isfinite(l));
  auto pred = metrics::argmax_rows(forward(r.mlp, d.features));
  CHECK(metrics::accuracy_and_macro_f1(pred, d.labels, 2).accuracy == 100.0);
}

TEST_CASE("zero learning rate leaves the initialization unchanged") {
  Rng rng(0);
  LatentDataset d = blobs(10, rng);
  MlpSpec spec{{2, 5, 2}, Activation::tanh, Task::classification};
  for (auto method : {OptimizerMethod::sgd, OptimizerMethod::adam}) {
    OptimizerConfig opt;
    opt.method = method;
    opt.learning_rate = 0.0;
    opt.epochs = 5;
    Rng a(3), b(3);
    TrainedMlp init = TrainedMlp::initialize(spec, a);
    TrainingResult r = train_mlp(d, spec, opt, b);
    CHECK(r.mlp.flatten() == init.flatten());
  }
}

TEST_CASE("training is deterministic for a seed") {
  Rng rng(0);
  LatentDataset d = blobs(20, rng);
  MlpSpec spec{{2, 6, 6, 2}, Activation::relu, Task::classification};
  OptimizerConfig opt;
  opt.epochs = 20;
  opt.batch_size = 7;
  Rng a(11), b(11);
  CHECK(train_mlp(d, spec, opt, a).mlp.flatten() == train_mlp(d, spec, opt, b).mlp.flatten());
}

TEST_CASE("classification gradient matches finite differences") {
  for (auto act : {Activation::relu, Activation::tanh}) {
    MlpSpec spec{{3, 7, 5, 4}, act, Task::classification};
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      Rng rng(seed);
      TrainedMlp mlp = TrainedMlp::initialize(spec, rng);
      for (auto& layer : mlp.layers) layer.bias = rng.normal_vector(layer.bias.size()) * 0.3;
      Matrix x = Matrix::NullaryExpr(6, 3, [&] { return rng.normal(); });
      std::vector<int> y{0, 1, 2, 3, 1, 2};
      CHECK(worst_fd_error(mlp, x, y) < 1e-5);
    }
  }
}

TEST_CASE("regression gradient matches finite differences") {
  for (auto act : {Activation::relu, Activation::tanh}) {
    MlpSpec spec{{1, 6, 6, 1}, act, Task::regression};
    Rng rng(4);
    TrainedMlp mlp = TrainedMlp::initialize(spec, rng);
    // Nonzero biases keep relu pre-activations off the kink at zero.
    for (auto& layer : mlp.layers) layer.bias = rng.normal_vector(layer.bias.size()) * 0.3;
    Matrix x = Matrix::NullaryExpr(5, 1, [&] { return rng.normal(); });
    Vector t = rng.normal_vector(5);
    CHECK(worst_fd_error(mlp, x, t) < 1e-5);
  }
}

TEST_CASE("zero-weight network bias gradient is mean probability minus mean one-hot") {
  MlpSpec spec{{2, 3, 3}, Activation::relu, Task::classification};
  Vector flat = Vector::Zero(spec.num_parameters());
  TrainedMlp mlp = TrainedMlp::unflatten(spec, flat);
  Matrix x(4, 2);
  x << 1, 2, -1, -2, 0.5, -0.5, -0.5, 0.5;
  std::vector<int> y{0, 0, 1, 2};
  Vector g = mlp_gradient(mlp, x, y);
  // Output bias occupies the final K entries of the flat order.
  Vector bias_grad = g.tail(3);
  Vector expected(3);
  expected << 1.0 / 3 - 0.5, 1.0 / 3 - 0.25, 1.0 / 3 - 0.25;
  CHECK((bias_grad - expected).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("duplicating every row keeps the mean gradient") {
  MlpSpec spec{{2, 4, 2}, Activation::tanh, Task::classification};
  Rng rng(6);
  TrainedMlp mlp = TrainedMlp::initialize(spec, rng);
  Matrix x = Matrix::NullaryExpr(5, 2, [&] { return rng.normal(); });
  std::vector<int> y{0, 1, 1, 0, 1};
  Matrix xx(10, 2);
  xx << x, x;
  std::vector<int> yy = y;
  yy.insert(yy.end(), y.begin(), y.end());
  CHECK((mlp_gradient(mlp, x, y) - mlp_gradient(mlp, xx, yy)).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("features followed by the last layer reproduce the forward pass") {
  MlpSpec spec{{2, 9, 7, 3}, Activation::relu, Task::classification};
  Rng rng(8);
  TrainedMlp mlp = TrainedMlp::initialize(spec, rng);
  Matrix x = Matrix::NullaryExpr(11, 2, [&] { return rng.normal(); });
  Matrix z = extract_features(mlp, x);
  CHECK(z.rows() == 11);
  CHECK(z.cols() == 7);
  CHECK(apply_last_layer(mlp, z) == forward(mlp, x));
}

TEST_CASE("relu features vanish when every last-hidden pre-activation is negative") {
  MlpSpec spec{{2, 3, 2}, Activation::relu, Task::classification};
  Rng rng(2);
  TrainedMlp mlp = TrainedMlp::initialize(spec, rng);
  mlp.layers[0].weights.setZero();
  mlp.layers[0].bias.setConstant(-1.0);
  Matrix x(1, 2);
  x << 0.3, -0.7;
  CHECK(extract_features(mlp, x).isZero(0.0));
}

TEST_CASE("empty input gives an empty feature matrix") {
  MlpSpec spec{{2, 4, 2}, Activation::relu, Task::classification};
  Rng rng(2);
  TrainedMlp mlp = TrainedMlp::initialize(spec, rng);
  Matrix z = extract_features(mlp, Matrix(0, 2));
  CHECK(z.rows() == 0);
  CHECK(z.cols() == 4);
  CHECK_THROWS_AS(extract_features(mlp, Matrix(3, 5)), std::invalid_argument);
}

TEST_CASE("json round-trip and flat order") {
  MlpSpec spec{{2, 3, 2}, Activation::tanh, Task::classification};
  CHECK(spec.num_parameters() == 2 * 3 + 3 + 3 * 2 + 2);
  Rng rng(1);
  TrainedMlp mlp = TrainedMlp::initialize(spec, rng);
  Vector flat = mlp.flatten();
  CHECK(flat[1] == mlp.layers[0].weights(0, 1));
  CHECK(flat[2] == mlp.layers[0].weights(1, 0));
  CHECK(flat[6] == mlp.layers[0].bias[0]);
  nlohmann::json j = mlp;
  TrainedMlp back = j.get<TrainedMlp>();
  CHECK(back.flatten() == flat);
  CHECK(back.spec.activation == Activation::tanh);
}

TEST_CASE("regression training reduces the loss") {
  Rng rng(0);
  RegressionDataset d = toydata::sinusoid_regression(100, 0.05, {}, rng);
  MlpSpec spec{{1, 20, 20, 1}, Activation::tanh, Task::regression};
  OptimizerConfig opt;
  opt.epochs = 200;
  Rng train(2);
  TrainingResult r = train_mlp(d, spec, opt, train);
  CHECK(r.loss_trace.back() < 0.5 * r.loss_trace.front());
}

TEST_CASE("divergence reports the epoch") {
  Rng rng(0);
  LatentDataset d = blobs(10, rng);
  d.features *= 1e150;
  MlpSpec spec{{2, 4, 2}, Activation::relu, Task::classification};
  OptimizerConfig opt;
  opt.method = OptimizerMethod::sgd;
  opt.learning_rate = 1e10;
  opt.epochs = 50;
  Rng train(1);
  try {
    train_mlp(d, spec, opt, train);
    FAIL("expected divergence");
  } catch (const DivergenceError& e) {
    CHECK(std::string(e.what()).find("epoch") != std::string::npos);
  }
}
