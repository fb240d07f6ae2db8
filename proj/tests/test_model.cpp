#include "llhmc/model.hpp"

#include "oracles.hpp"

#include <doctest.h>
#include <nlohmann/json.hpp>

#include <cmath>
#include <numbers>

using namespace llhmc;
using namespace llhmc::model;

namespace {

LatentDataset random_latent(Index n, Index d, int k, Rng& rng) {
  LatentDataset data;
  data.num_classes = k;
  data.features = Matrix::NullaryExpr(n, d, [&] { return rng.normal(); });
  for (Index i = 0; i < n; ++i) data.labels.push_back(static_cast<int>(rng.uniform_index(static_cast<std::size_t>(k))));
  return data;
}

LatentDataset empty_latent(Index d, int k) {
  LatentDataset data;
  data.num_classes = k;
  data.features = Matrix(0, d);
  return data;
}

}  // namespace

TEST_CASE("log-likelihood of a zero head is uniform") {
  LatentDataset one;
  one.features = Matrix::Constant(1, 3, 0.7);
  one.labels = {1};
  LastLayerClassifier zero2{Matrix::Zero(2, 3), Vector::Zero(2)};
  CHECK(std::abs(class_log_likelihood(zero2, one) - std::log(0.5)) < 1e-12);
  CHECK(std::abs(class_log_likelihood(zero2, one) + 0.693147) < 1e-6);

  Rng rng(0);
  LatentDataset three = random_latent(3, 4, 5, rng);
  LastLayerClassifier zero5{Matrix::Zero(5, 4), Vector::Zero(5)};
  CHECK(std::abs(class_log_likelihood(zero5, three) - 3 * std::log(0.2)) < 1e-12);
  CHECK(std::abs(class_log_likelihood(zero5, three) + 4.828314) < 1e-6);
}

TEST_CASE("log-likelihood ignores a per-instance logit shift") {
  // A shared bias offset shifts every logit of every row by the same amount.
  Rng rng(1);
  LatentDataset d = random_latent(8, 3, 4, rng);
  LastLayerClassifier p{Matrix::NullaryExpr(4, 3, [&] { return rng.normal(); }), rng.normal_vector(4)};
  LastLayerClassifier shifted = p;
  shifted.bias.array() += 123.0;
  CHECK(std::abs(class_log_likelihood(p, d) - class_log_likelihood(shifted, d)) < 1e-9);
  CHECK(class_log_likelihood(p, d) < 0.0);
}

TEST_CASE("log prior closed forms") {
  GaussianPrior unit{1.0};
  CHECK(std::abs(log_prior(Vector::Zero(2), unit) + std::log(2 * std::numbers::pi)) < 1e-12);
  CHECK(std::abs(log_prior(Vector::Zero(2), unit) + 1.837877) < 1e-6);
  Vector e1(2);
  e1 << 1, 0;
  CHECK(std::abs(log_prior(e1, unit) - (-std::log(2 * std::numbers::pi) - 0.5)) < 1e-12);
}

TEST_CASE("doubling the prior scale raises the density of a far point") {
  for (double s : {0.1, 1.0, 3.0}) {
    const int dim = 4;
    // |theta|^2 above dim * s^2 * 2 ln 2 * (4/3) puts theta past the crossover.
    double r2 = dim * s * s * 2.0 * std::log(2.0) * 4.0 / 3.0 * 1.5;
    Vector theta = Vector::Constant(dim, std::sqrt(r2 / dim));
    double narrow = log_prior(theta, {s});
    double wide = log_prior(theta, {2 * s});
    double direct = -dim * std::log(2.0) + 3.0 * r2 / (8.0 * s * s);
    CHECK(wide > narrow);
    CHECK(std::abs((wide - narrow) - direct) < 1e-9 * std::max(1.0, std::abs(direct)));
  }
}

TEST_CASE("classification target gradient") {
  Rng rng(2);
  LatentDataset d = random_latent(15, 3, 3, rng);
  ClassificationPosterior target = posterior_target_classification(d, {0.8});
  CHECK(target.dim() == 12);
  for (int t = 0; t < 20; ++t) {
    Vector theta = rng.normal_vector(target.dim());
    CHECK(oracle::gradient_error(target, theta) < 1e-6);
  }
}

TEST_CASE("zero-data classification target is the prior") {
  ClassificationPosterior target = posterior_target_classification(empty_latent(3, 2), {1.5});
  Rng rng(3);
  for (int t = 0; t < 5; ++t) {
    Vector theta = rng.normal_vector(target.dim());
    CHECK(std::abs(target.log_density(theta) - log_prior(theta, {1.5})) < 1e-12);
  }
  Vector grad;
  target.log_density_gradient(Vector::Zero(target.dim()), grad);
  CHECK(grad.isZero(0.0));
}

TEST_CASE("a vague prior rewards scaling up a separating head") {
  LatentDataset d;
  d.features = Matrix(4, 1);
  d.features << -2, -1, 1, 2;
  d.labels = {0, 0, 1, 1};
  ClassificationPosterior target = posterior_target_classification(d, {1e6});
  Vector theta = Vector::Zero(4);
  Vector grad;
  target.log_density_gradient(theta, grad);
  double prev = target.log_density(theta);
  for (double step : {0.05, 0.1, 0.2, 0.4, 0.8}) {
    double next = target.log_density(theta + step * grad);
    CHECK(next > prev);
    prev = next;
  }
}

TEST_CASE("regression target") {
  Matrix z(4, 2);
  z << 1, 0, 0, 1, 1, 1, -1, 2;
  Vector w(2);
  w << 0.5, -0.25;
  double b = 0.1;
  Vector y = z * w + Vector::Constant(4, b);
  RegressionPosterior target(z, y, {1.0}, 1.0);
  Vector theta(3);
  theta << w, b;
  double like = target.log_density(theta) - log_prior(theta, {1.0});
  CHECK(std::abs(like + 4 * 0.5 * std::log(2 * std::numbers::pi)) < 1e-12);

  // Moving targets and predictions together keeps every residual.
  RegressionPosterior moved(z, y.array() + 5.0, {1.0}, 1.0);
  Vector theta_moved = theta;
  theta_moved[2] += 5.0;
  double like_moved = moved.log_density(theta_moved) - log_prior(theta_moved, {1.0});
  CHECK(std::abs(like_moved - like) < 1e-12);

  Rng rng(4);
  RegressionPosterior noisy(Matrix::NullaryExpr(12, 3, [&] { return rng.normal(); }), rng.normal_vector(12),
                            {0.7}, 0.3);
  for (int t = 0; t < 20; ++t) CHECK(oracle::gradient_error(noisy, rng.normal_vector(4)) < 1e-6);
}

TEST_CASE("full-network target gradient") {
  Rng rng(5);
  backbone::MlpSpec spec{{2, 5, 4, 3}, backbone::Activation::tanh, backbone::Task::classification};
  LatentDataset d = random_latent(10, 2, 3, rng);
  FullNetworkPosterior target = posterior_target_full_network(spec, d, {1.0});
  CHECK(target.dim() == spec.num_parameters());
  for (int t = 0; t < 20; ++t) CHECK(oracle::gradient_error(target, rng.normal_vector(target.dim()) * 0.5) < 1e-5);

  backbone::MlpSpec reg_spec{{1, 6, 1}, backbone::Activation::tanh, backbone::Task::regression};
  RegressionDataset rd;
  rd.inputs = Matrix::NullaryExpr(8, 1, [&] { return rng.normal(); });
  rd.targets = rng.normal_vector(8);
  FullNetworkPosterior reg = posterior_target_full_network(reg_spec, rd, {1.0}, 0.2);
  for (int t = 0; t < 20; ++t) CHECK(oracle::gradient_error(reg, rng.normal_vector(reg.dim()) * 0.5) < 1e-5);

  CHECK_THROWS_AS(posterior_target_full_network(spec, d, {1.0}, 10), std::invalid_argument);
}

TEST_CASE("full-network prior term matches the last-layer target") {
  backbone::MlpSpec spec{{2, 4, 3}, backbone::Activation::relu, backbone::Task::classification};
  LatentDataset none = empty_latent(2, 3);
  FullNetworkPosterior full = posterior_target_full_network(spec, none, {0.6});
  ClassificationPosterior head = posterior_target_classification(empty_latent(4, 3), {0.6});
  Rng rng(6);
  Vector theta = rng.normal_vector(full.dim());
  Vector g_full, g_head;
  CHECK(std::abs(full.log_density_gradient(theta, g_full) - log_prior(theta, {0.6})) < 1e-12);
  Vector tail = theta.tail(head.dim());
  head.log_density_gradient(tail, g_head);
  CHECK((g_full.tail(head.dim()) - g_head).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("flatten round-trip preserves the density") {
  Rng rng(7);
  LatentDataset d = random_latent(9, 3, 4, rng);
  LastLayerClassifier p{Matrix::NullaryExpr(4, 3, [&] { return rng.normal(); }), rng.normal_vector(4)};
  Vector flat = p.flatten();
  CHECK(flat[1] == p.weights(0, 1));
  CHECK(flat[12] == p.bias[0]);
  LastLayerClassifier back = LastLayerClassifier::unflatten(flat, 4, 3);
  CHECK(back.weights == p.weights);
  CHECK(back.bias == p.bias);
  ClassificationPosterior target = posterior_target_classification(d, {1.0});
  CHECK(target.log_density(flat) == class_log_likelihood(p, d) + log_prior(flat, {1.0}));
  nlohmann::json j = p;
  CHECK(j.get<LastLayerClassifier>().flatten() == flat);
}

TEST_CASE("predictive bundles") {
  Rng rng(8);
  Matrix z = Matrix::NullaryExpr(5, 3, [&] { return rng.normal(); });
  PredictiveBundle uniform = predict_proba(LastLayerClassifier{Matrix::Zero(4, 3), Vector::Zero(4)}, z);
  CHECK(uniform.num_members() == 1);
  CHECK((uniform.mean.array() - 0.25).abs().maxCoeff() == 0.0);

  Vector theta = rng.normal_vector(last_layer_dim(4, 3));
  std::vector<Vector> twins{theta, theta};
  PredictiveBundle twin = predict_proba(twins, z);
  CHECK(twin.num_members() == 2);
  CHECK((twin.mean - twin.members[0]).cwiseAbs().maxCoeff() < 1e-15);
  for (Index i = 0; i < 5; ++i) CHECK(std::abs(twin.members[0].row(i).sum() - 1.0) < 1e-12);

  Matrix a(1, 2), b(1, 2);
  a << 0.9, 0.1;
  b << 0.5, 0.5;
  PredictiveBundle hand = PredictiveBundle::from_members({a, b});
  CHECK(std::abs(hand.mean(0, 0) - 0.7) < 1e-15);
  CHECK(std::abs(hand.mean(0, 1) - 0.3) < 1e-15);
  CHECK(std::abs(hand.entropy[0] - (-0.7 * std::log(0.7) - 0.3 * std::log(0.3))) < 1e-12);

  std::vector<Vector> wrong{Vector::Zero(5)};
  CHECK_THROWS_AS(predict_proba(wrong, z), std::invalid_argument);

  std::vector<PredictiveBundle> parts{hand, PredictiveBundle::from_members({a})};
  PredictiveBundle merged = merge_bundles(parts);
  CHECK(merged.num_members() == 3);
  CHECK(std::abs(merged.mean(0, 0) - (0.9 + 0.5 + 0.9) / 3) < 1e-15);
}

TEST_CASE("prior draws have the prior scale") {
  Rng rng(9);
  Vector draw = sample_prior(20000, {2.5}, rng);
  CHECK(std::abs(draw.mean()) < 0.05);
  CHECK(std::sqrt(draw.squaredNorm() / 20000.0) == doctest::Approx(2.5).epsilon(0.02));
}
