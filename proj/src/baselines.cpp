#include "llhmc/baselines.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <deque>
#include <numbers>
#include <numeric>

namespace llhmc::baselines {

namespace {

// Log-likelihood of a flat head on `data` and its gradient.
double log_likelihood_gradient(const Vector& theta, const LatentDataset& data, Vector& grad) {
  const Index k_classes = data.num_classes;
  const Index d = data.dim();
  auto params = model::LastLayerClassifier::unflatten(theta, k_classes, d);
  Matrix logits = params.logits(data.features);
  Vector lse = log_sum_exp_rows(logits);
  Matrix residual(logits.rows(), k_classes);
  double loglik = 0.0;
  for (Index i = 0; i < logits.rows(); ++i) {
    const int y = data.labels[static_cast<std::size_t>(i)];
    loglik += logits(i, y) - lse[i];
    residual.row(i) = -(logits.row(i).array() - lse[i]).exp();
    residual(i, y) += 1.0;
  }
  Matrix grad_w = residual.transpose() * data.features;
  grad.resize(theta.size());
  Index pos = 0;
  for (Index k = 0; k < k_classes; ++k) {
    for (Index j = 0; j < d; ++j) grad[pos++] = grad_w(k, j);
  }
  grad.tail(k_classes) = residual.colwise().sum().transpose();
  return loglik;
}

struct Adam {
  Vector m;
  Vector v;
  int t = 0;
  double lr;

  Adam(Index n, double lr) : m(Vector::Zero(n)), v(Vector::Zero(n)), lr(lr) {}

  // Descent step on x for the gradient of a loss.
  void step(Vector& x, const Vector& g) {
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    ++t;
    m = b1 * m + (1.0 - b1) * g;
    v = b2 * v + (1.0 - b2) * g.cwiseProduct(g);
    const double c1 = 1.0 - std::pow(b1, t);
    const double c2 = 1.0 - std::pow(b2, t);
    x.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
  }
};

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch, Rng& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(order);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < n; start += batch) {
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, start + batch)));
  }
  return out;
}

bool full_batch(const backbone::OptimizerConfig& opt, Index n) {
  return opt.batch_size <= 0 || opt.batch_size >= n;
}

// Limited-memory BFGS with Armijo backtracking on f = -log posterior.
Vector minimize_lbfgs(const model::ClassificationPosterior& target, Vector x, int max_iter,
                      double tol) {
  constexpr std::size_t kMemory = 10;
  Vector g;
  double f = -target.log_density_gradient(x, g);
  g = -g;
  std::deque<std::pair<Vector, Vector>> history;
  for (int iter = 0; iter < max_iter && g.norm() >= tol; ++iter) {
    // Two-loop recursion for the search direction.
    Vector q = g;
    std::vector<double> alpha(history.size());
    for (std::size_t i = history.size(); i-- > 0;) {
      const auto& [s, y] = history[i];
      alpha[i] = s.dot(q) / y.dot(s);
      q -= alpha[i] * y;
    }
    if (!history.empty()) {
      const auto& [s, y] = history.back();
      q *= s.dot(y) / y.squaredNorm();
    } else {
      q /= std::max(1.0, g.norm());
    }
    for (std::size_t i = 0; i < history.size(); ++i) {
      const auto& [s, y] = history[i];
      const double beta = y.dot(q) / y.dot(s);
      q += (alpha[i] - beta) * s;
    }
    Vector dir = -q;
    double slope = g.dot(dir);
    if (!(slope < 0.0)) {
      history.clear();
      dir = -g;
      slope = -g.squaredNorm();
    }
    double step = 1.0;
    Vector x_new, g_new;
    double f_new = 0.0;
    bool accepted = false;
    for (int k = 0; k < 60; ++k) {
      x_new = x + step * dir;
      f_new = -target.log_density_gradient(x_new, g_new);
      if (std::isfinite(f_new) && f_new <= f + 1e-4 * step * slope) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) break;
    g_new = -g_new;
    Vector s = x_new - x;
    Vector y = g_new - g;
    if (s.dot(y) > 1e-12 * s.norm() * y.norm()) {
      history.emplace_back(std::move(s), std::move(y));
      if (history.size() > kMemory) history.pop_front();
    }
    x = std::move(x_new);
    g = std::move(g_new);
    f = f_new;
  }
  if (!std::isfinite(f) || !x.allFinite()) throw DivergenceError("MAP fit diverged");
  return x;
}

}  // namespace

model::LastLayerClassifier fit_map_softmax(const LatentDataset& data,
                                           const model::GaussianPrior& prior,
                                           const backbone::OptimizerConfig& opt, Rng& rng) {
  data.validate();
  prior.validate();
  opt.validate();
  const Index k_classes = data.num_classes;
  const Index d = data.dim();
  const Index dim = model::last_layer_dim(k_classes, d);
  Rng init_rng = rng.split(0);
  Vector theta = init_rng.normal_vector(dim) * (0.1 / std::sqrt(static_cast<double>(d)));

  if (full_batch(opt, data.size())) {
    model::ClassificationPosterior target(data, prior);
    theta = minimize_lbfgs(target, std::move(theta), opt.epochs, 1e-6);
    return model::LastLayerClassifier::unflatten(theta, k_classes, d);
  }

  Rng order_rng = rng.split(1);
  Adam adam(dim, opt.learning_rate);
  const double n = static_cast<double>(data.size());
  const double inv_var = 1.0 / (prior.std * prior.std);
  Vector grad;
  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    for (const auto& rows : epoch_batches(static_cast<std::size_t>(data.size()),
                                          static_cast<std::size_t>(opt.batch_size), order_rng)) {
      LatentDataset batch = data.subset(rows);
      const double ll = log_likelihood_gradient(theta, batch, grad);
      if (!std::isfinite(ll)) {
        throw DivergenceError("MAP fit diverged in epoch " + std::to_string(epoch));
      }
      const double scale = n / static_cast<double>(rows.size());
      Vector loss_grad = -scale * grad + inv_var * theta + opt.weight_decay * theta;
      adam.step(theta, loss_grad);
    }
  }
  if (!theta.allFinite()) throw DivergenceError("MAP fit diverged");
  return model::LastLayerClassifier::unflatten(theta, k_classes, d);
}

double map_objective(const model::LastLayerClassifier& params, const LatentDataset& data,
                     const model::GaussianPrior& prior) {
  return -(model::class_log_likelihood(params, data) + model::log_prior(params.flatten(), prior));
}

double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }

double inverse_softplus(double y) {
  if (!(y > 0.0)) throw std::invalid_argument("softplus output must be positive");
  return y > 30.0 ? y : std::log(std::expm1(y));
}

static double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

Vector VariationalLastLayer::std() const { return rho.unaryExpr([](double r) { return softplus(r); }); }

void VariationalLastLayer::validate() const {
  prior.validate();
  if (mu.size() != model::last_layer_dim(num_classes, feature_dim) || rho.size() != mu.size()) {
    throw std::invalid_argument("variational parameters do not match the head shape");
  }
  if (!mu.allFinite() || !rho.allFinite()) throw DataError("variational parameters are not finite");
  if (!(std().array() > 0.0).all()) throw DataError("variational std underflowed to zero");
}

VariationalLastLayer VariationalLastLayer::from_prior(Index num_classes, Index feature_dim,
                                                      const model::GaussianPrior& prior) {
  const Index dim = model::last_layer_dim(num_classes, feature_dim);
  return {Vector::Zero(dim), Vector::Constant(dim, inverse_softplus(prior.std)), prior,
          num_classes, feature_dim};
}

double gaussian_kl(const Vector& mu, const Vector& std, double prior_std) {
  if (mu.size() != std.size()) throw std::invalid_argument("mean and std differ in length");
  const double pv = prior_std * prior_std;
  double kl = 0.0;
  for (Index i = 0; i < mu.size(); ++i) {
    kl += std::log(prior_std / std[i]) + (std[i] * std[i] + mu[i] * mu[i]) / (2.0 * pv) - 0.5;
  }
  return kl;
}

VariationalLastLayer fit_bbb_last_layer(const LatentDataset& data, const model::GaussianPrior& prior,
                                        const backbone::OptimizerConfig& opt,
                                        const BbbOptions& bbb, Rng& rng) {
  data.validate();
  prior.validate();
  opt.validate();
  if (bbb.mc_samples < 1) throw std::invalid_argument("mc_samples must be at least 1");
  auto q = VariationalLastLayer::from_prior(data.num_classes, data.dim(), prior);
  if (!bbb.init_from_prior) {
    if (!(bbb.init_std > 0.0)) throw std::invalid_argument("init_std must be positive");
    q.rho.setConstant(inverse_softplus(std::min(prior.std, bbb.init_std)));
  }
  const Index dim = q.mu.size();
  const std::size_t n = static_cast<std::size_t>(data.size());
  const std::size_t batch = full_batch(opt, data.size()) ? std::max<std::size_t>(n, 1)
                                                          : static_cast<std::size_t>(opt.batch_size);
  Rng order_rng = rng.split(1);
  Rng noise_rng = rng.split(2);
  Vector params(2 * dim);
  params << q.mu, q.rho;
  Adam adam(2 * dim, opt.learning_rate);
  const double pv = prior.std * prior.std;
  Vector grad;
  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    auto batches = epoch_batches(n, batch, order_rng);
    const double kl_weight = 1.0 / static_cast<double>(batches.size());
    for (const auto& rows : batches) {
      LatentDataset mb = data.subset(rows);
      const double scale = static_cast<double>(n) / static_cast<double>(rows.size());
      Vector mu = params.head(dim);
      Vector rho = params.tail(dim);
      Vector s = rho.unaryExpr([](double r) { return softplus(r); });
      Vector ds = rho.unaryExpr([](double r) { return sigmoid(r); });
      // Gradient of the loss -ELBO_batch = -scale * E[loglik] + kl_weight * KL.
      Vector g_mu = kl_weight * mu / pv;
      Vector g_rho = (kl_weight * (s.array() / pv - 1.0 / s.array()) * ds.array()).matrix();
      for (int m = 0; m < bbb.mc_samples; ++m) {
        Vector xi = noise_rng.normal_vector(dim);
        Vector theta = mu + s.cwiseProduct(xi);
        const double ll = log_likelihood_gradient(theta, mb, grad);
        if (!std::isfinite(ll)) {
          throw DivergenceError("BBB fit diverged in epoch " + std::to_string(epoch));
        }
        const double w = scale / bbb.mc_samples;
        g_mu -= w * grad;
        g_rho -= (w * grad.array() * xi.array() * ds.array()).matrix();
      }
      Vector g(2 * dim);
      g << g_mu, g_rho;
      adam.step(params, g);
    }
  }
  if (!params.allFinite()) throw DivergenceError("BBB fit diverged");
  q.mu = params.head(dim);
  q.rho = params.tail(dim);
  q.validate();
  return q;
}

double elbo(const VariationalLastLayer& q, const LatentDataset& data, int mc_samples, Rng& rng) {
  q.validate();
  if (mc_samples < 1) throw std::invalid_argument("mc_samples must be at least 1");
  const Vector s = q.std();
  double ll = 0.0;
  for (int m = 0; m < mc_samples; ++m) {
    Vector theta = q.mu + s.cwiseProduct(rng.normal_vector(q.mu.size()));
    ll += model::class_log_likelihood(
        model::LastLayerClassifier::unflatten(theta, q.num_classes, q.feature_dim), data);
  }
  return ll / mc_samples - gaussian_kl(q.mu, s, q.prior.std);
}

void SubEnsemble::validate() const {
  if (members.size() < 2) throw std::invalid_argument("a sub-ensemble needs at least two members");
  if (member_seeds.size() != members.size()) throw std::invalid_argument("one seed per member expected");
  for (const auto& m : members) {
    if (m.weights.rows() != members.front().weights.rows() ||
        m.weights.cols() != members.front().weights.cols()) {
      throw std::invalid_argument("sub-ensemble members differ in shape");
    }
  }
}

SubEnsemble fit_sub_ensemble(const LatentDataset& data, int num_members,
                             const model::GaussianPrior& prior,
                             const backbone::OptimizerConfig& opt, Rng& rng) {
  if (num_members < 2) throw std::invalid_argument("a sub-ensemble needs at least two members");
  SubEnsemble e;
  for (int m = 0; m < num_members; ++m) {
    Rng member_rng = rng.split(static_cast<std::uint64_t>(m));
    e.member_seeds.push_back(member_rng.key());
    e.members.push_back(fit_map_softmax(data, prior, opt, member_rng));
  }
  return e;
}

std::vector<std::size_t> choose_without_replacement(std::size_t available, std::size_t n, Rng& rng) {
  if (n > available) throw std::invalid_argument("cannot choose more members than are available");
  std::vector<std::size_t> idx(available);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (n == available) return idx;
  // Partial Fisher-Yates.
  for (std::size_t i = 0; i < n; ++i) std::swap(idx[i], idx[i + rng.uniform_index(available - i)]);
  idx.resize(n);
  std::sort(idx.begin(), idx.end());
  return idx;
}

model::PredictiveBundle sample_predictions(const VariationalLastLayer& q, const Matrix& features,
                                           int n_members, Rng& rng) {
  q.validate();
  if (n_members < 1) throw std::invalid_argument("n_members must be positive");
  const Vector s = q.std();
  std::vector<Vector> draws;
  for (int m = 0; m < n_members; ++m) draws.push_back(q.mu + s.cwiseProduct(rng.normal_vector(q.mu.size())));
  return model::predict_proba(draws, features);
}

model::PredictiveBundle sample_predictions(const SubEnsemble& ensemble, const Matrix& features,
                                           int n_members, Rng& rng) {
  ensemble.validate();
  if (n_members < 1) throw std::invalid_argument("n_members must be positive");
  std::vector<Vector> chosen;
  for (auto i : choose_without_replacement(ensemble.members.size(),
                                           static_cast<std::size_t>(n_members), rng)) {
    chosen.push_back(ensemble.members[i].flatten());
  }
  return model::predict_proba(chosen, features);
}

model::PredictiveBundle sample_predictions(const sampler::PosteriorSampleSet& samples,
                                           const Matrix& features, int n_members, Rng& rng) {
  if (n_members < 1) throw std::invalid_argument("n_members must be positive");
  if (static_cast<std::size_t>(n_members) > samples.total_draws()) {
    throw std::invalid_argument("requested more members than the sample set holds");
  }
  const std::size_t chains = samples.chains.size();
  std::vector<Vector> chosen;
  for (std::size_t c = 0; c < chains; ++c) {
    const std::size_t want = static_cast<std::size_t>(n_members) / chains +
                             (c < static_cast<std::size_t>(n_members) % chains ? 1 : 0);
    const auto& draws = samples.chains[c].draws;
    Rng chain_rng = rng.split(c);
    for (auto i : choose_without_replacement(static_cast<std::size_t>(draws.rows()), want, chain_rng)) {
      chosen.emplace_back(draws.row(static_cast<Index>(i)).transpose());
    }
  }
  return model::predict_proba(chosen, features);
}

void GdaModel::factorize() {
  const Index k_classes = num_classes();
  const double d = static_cast<double>(feature_dim());
  cholesky.clear();
  log_normalizers.resize(k_classes);
  for (Index k = 0; k < k_classes; ++k) {
    Eigen::LLT<Matrix> llt(covariances[static_cast<std::size_t>(k)]);
    if (llt.info() != Eigen::Success) {
      throw Error("covariance of class " + std::to_string(k) + " is not positive definite");
    }
    Matrix l = llt.matrixL();
    const double log_det = 2.0 * l.diagonal().array().log().sum();
    cholesky.push_back(std::move(l));
    log_normalizers[k] = -0.5 * (d * std::log(2.0 * std::numbers::pi) + log_det);
  }
}

GdaModel fit_gda(const LatentDataset& train, const GdaOptions& options) {
  train.validate();
  if (options.ridge && !(*options.ridge >= 0.0)) throw std::invalid_argument("ridge must be non-negative");
  const Index k_classes = train.num_classes;
  const Index d = train.dim();
  const auto counts = train.class_counts();
  for (Index k = 0; k < k_classes; ++k) {
    if (counts[static_cast<std::size_t>(k)] < 2) {
      throw DataError("class " + std::to_string(k) + " has fewer than two training rows");
    }
  }
  GdaModel g;
  g.means = Matrix::Zero(k_classes, d);
  g.weights.resize(k_classes);
  for (Index i = 0; i < train.size(); ++i) g.means.row(train.labels[static_cast<std::size_t>(i)]) += train.features.row(i);
  for (Index k = 0; k < k_classes; ++k) {
    g.means.row(k) /= static_cast<double>(counts[static_cast<std::size_t>(k)]);
    g.weights[k] = static_cast<double>(counts[static_cast<std::size_t>(k)]) / static_cast<double>(train.size());
  }
  std::vector<Matrix> scatter(static_cast<std::size_t>(k_classes), Matrix::Zero(d, d));
  for (Index i = 0; i < train.size(); ++i) {
    const int y = train.labels[static_cast<std::size_t>(i)];
    Vector c = (train.features.row(i) - g.means.row(y)).transpose();
    scatter[static_cast<std::size_t>(y)] += c * c.transpose();
  }
  auto regularize = [&](Matrix cov) {
    const double lambda = options.ridge ? *options.ridge : options.relative_ridge * cov.trace() / static_cast<double>(d);
    cov.diagonal().array() += lambda;
    return cov;
  };
  if (options.shared_covariance) {
    Matrix pooled = Matrix::Zero(d, d);
    for (const auto& s : scatter) pooled += s;
    pooled /= static_cast<double>(train.size() - k_classes);
    g.covariances.assign(static_cast<std::size_t>(k_classes), regularize(pooled));
  } else {
    for (Index k = 0; k < k_classes; ++k) {
      g.covariances.push_back(regularize(scatter[static_cast<std::size_t>(k)] /
                                         static_cast<double>(counts[static_cast<std::size_t>(k)] - 1)));
    }
  }
  g.factorize();
  return g;
}

GdaScores gda_scores(const GdaModel& model, const Matrix& features) {
  if (features.cols() != model.feature_dim()) throw std::invalid_argument("feature width mismatch");
  if (model.cholesky.size() != static_cast<std::size_t>(model.num_classes())) {
    throw std::invalid_argument("GDA model is not factorized");
  }
  const Index n = features.rows();
  const Index k_classes = model.num_classes();
  Matrix joint(n, k_classes);  // log weight_k + log N(z | mu_k, Sigma_k)
  for (Index k = 0; k < k_classes; ++k) {
    Matrix centred = (features.rowwise() - model.means.row(k)).transpose();
    Matrix solved = model.cholesky[static_cast<std::size_t>(k)].triangularView<Eigen::Lower>().solve(centred);
    Vector maha = solved.colwise().squaredNorm().transpose();
    joint.col(k) = (std::log(model.weights[k]) + model.log_normalizers[k] - 0.5 * maha.array()).matrix();
  }
  GdaScores s;
  s.log_density = log_sum_exp_rows(joint);
  s.posterior = (joint.colwise() - s.log_density).array().exp().matrix();
  return s;
}

void to_json(nlohmann::json& j, const VariationalLastLayer& q) {
  j = {{"method", "bbb"},
       {"num_classes", q.num_classes},
       {"feature_dim", q.feature_dim},
       {"prior_std", q.prior.std},
       {"mu", std::vector<double>(q.mu.data(), q.mu.data() + q.mu.size())},
       {"rho", std::vector<double>(q.rho.data(), q.rho.data() + q.rho.size())}};
}

static void expect_method(const nlohmann::json& j, const std::string& tag) {
  if (j.at("method").get<std::string>() != tag) {
    throw DataError("expected a '" + tag + "' model, found '" + j.at("method").get<std::string>() + "'");
  }
}

static Vector to_vector(const nlohmann::json& j) {
  auto v = j.get<std::vector<double>>();
  return Eigen::Map<Vector>(v.data(), static_cast<Index>(v.size()));
}

void from_json(const nlohmann::json& j, VariationalLastLayer& q) {
  expect_method(j, "bbb");
  q.num_classes = j.at("num_classes").get<Index>();
  q.feature_dim = j.at("feature_dim").get<Index>();
  q.prior.std = j.at("prior_std").get<double>();
  q.mu = to_vector(j.at("mu"));
  q.rho = to_vector(j.at("rho"));
  q.validate();
}

void to_json(nlohmann::json& j, const SubEnsemble& e) {
  j = {{"method", "subensemble"}, {"member_seeds", e.member_seeds}, {"members", nlohmann::json::array()}};
  for (const auto& m : e.members) j["members"].push_back(m);
}

void from_json(const nlohmann::json& j, SubEnsemble& e) {
  expect_method(j, "subensemble");
  e.member_seeds = j.at("member_seeds").get<std::vector<std::uint64_t>>();
  e.members.clear();
  for (const auto& m : j.at("members")) e.members.push_back(m.get<model::LastLayerClassifier>());
  e.validate();
}

static nlohmann::json matrix_json(const Matrix& m) {
  auto rows = nlohmann::json::array();
  for (Index r = 0; r < m.rows(); ++r) {
    std::vector<double> row(static_cast<std::size_t>(m.cols()));
    for (Index c = 0; c < m.cols(); ++c) row[static_cast<std::size_t>(c)] = m(r, c);
    rows.push_back(std::move(row));
  }
  return rows;
}

static Matrix json_matrix(const nlohmann::json& j) {
  auto rows = j.get<std::vector<std::vector<double>>>();
  const Index cols = rows.empty() ? 0 : static_cast<Index>(rows.front().size());
  Matrix m(static_cast<Index>(rows.size()), cols);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (static_cast<Index>(rows[r].size()) != cols) throw DataError("ragged matrix");
    for (Index c = 0; c < cols; ++c) m(static_cast<Index>(r), c) = rows[r][static_cast<std::size_t>(c)];
  }
  return m;
}

void to_json(nlohmann::json& j, const GdaModel& g) {
  j = {{"method", "gda"},
       {"means", matrix_json(g.means)},
       {"weights", std::vector<double>(g.weights.data(), g.weights.data() + g.weights.size())},
       {"covariances", nlohmann::json::array()}};
  for (const auto& c : g.covariances) j["covariances"].push_back(matrix_json(c));
}

void from_json(const nlohmann::json& j, GdaModel& g) {
  expect_method(j, "gda");
  g.means = json_matrix(j.at("means"));
  g.weights = to_vector(j.at("weights"));
  g.covariances.clear();
  for (const auto& c : j.at("covariances")) g.covariances.push_back(json_matrix(c));
  if (g.weights.size() != g.means.rows() || g.covariances.size() != static_cast<std::size_t>(g.means.rows())) {
    throw DataError("GDA model shapes are inconsistent");
  }
  g.factorize();
}

}  // namespace llhmc::baselines
