#include "llhmc/sampler.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <future>
#include <limits>

namespace llhmc::sampler {

namespace {

// Phase point with the log density and gradient at its position cached.
struct Particle {
  Vector q;
  Vector p;
  Vector grad;
  double logp = 0.0;
};

double energy(const Particle& x) { return -x.logp + 0.5 * x.p.squaredNorm(); }

bool step(const model::DifferentiableTarget& target, Particle& x, double eps) {
  x.p += 0.5 * eps * x.grad;
  x.q += eps * x.p;
  x.logp = target.log_density_gradient(x.q, x.grad);
  x.p += 0.5 * eps * x.grad;
  return std::isfinite(x.logp) && x.grad.allFinite() && x.p.allFinite();
}

bool no_uturn(const Particle& minus, const Particle& plus) {
  Vector span = plus.q - minus.q;
  return span.dot(minus.p) >= 0.0 && span.dot(plus.p) >= 0.0;
}

struct Subtree {
  Particle minus;
  Particle plus;
  Particle candidate;
  double n_valid = 0.0;
  bool ok = true;
  bool divergent = false;
  double sum_accept = 0.0;
  int n_steps = 0;
};

struct TreeContext {
  const model::DifferentiableTarget& target;
  double step_size;
  double log_slice;
  double initial_energy;
  Rng& rng;
};

Subtree build_tree(TreeContext& ctx, const Particle& start, int direction, int depth) {
  if (depth == 0) {
    Particle x = start;
    const bool finite = step(ctx.target, x, direction * ctx.step_size);
    const double h = finite ? energy(x) : std::numeric_limits<double>::infinity();
    Subtree t{x, x, x};
    t.n_valid = (finite && ctx.log_slice <= -h) ? 1.0 : 0.0;
    t.ok = finite && (ctx.log_slice < -h + kDivergenceThreshold);
    t.divergent = !t.ok;
    t.sum_accept = finite ? std::min(1.0, std::exp(ctx.initial_energy - h)) : 0.0;
    t.n_steps = 1;
    return t;
  }
  Subtree t = build_tree(ctx, start, direction, depth - 1);
  if (!t.ok) return t;
  Subtree outer = build_tree(ctx, direction > 0 ? t.plus : t.minus, direction, depth - 1);
  if (direction > 0) {
    t.plus = std::move(outer.plus);
  } else {
    t.minus = std::move(outer.minus);
  }
  const double total = t.n_valid + outer.n_valid;
  if (total > 0.0 && ctx.rng.uniform() < outer.n_valid / total) {
    t.candidate = std::move(outer.candidate);
  }
  t.n_valid = total;
  t.sum_accept += outer.sum_accept;
  t.n_steps += outer.n_steps;
  t.divergent = t.divergent || outer.divergent;
  t.ok = outer.ok && no_uturn(t.minus, t.plus);
  return t;
}

}  // namespace

void SamplerConfig::validate() const {
  if (burn_in < 0) throw std::invalid_argument("burn_in must be non-negative");
  if (samples < 1) throw std::invalid_argument("samples must be at least 1");
  if (chains < 1) throw std::invalid_argument("chains must be at least 1");
  if (!(target_accept > 0.0 && target_accept < 1.0)) {
    throw std::invalid_argument("target_accept must lie in (0, 1)");
  }
  if (max_tree_depth < 1 || max_tree_depth > 15) {
    throw std::invalid_argument("max_tree_depth must lie in [1, 15]");
  }
  if (init_step_size && !(*init_step_size > 0.0)) {
    throw std::invalid_argument("init_step_size must be positive");
  }
}

int SamplerConfig::samples_for_chain(int c) const {
  return samples / chains + (c < samples % chains ? 1 : 0);
}

double hamiltonian(const model::DifferentiableTarget& target, const PhasePoint& point) {
  return -target.log_density(point.position) + 0.5 * point.momentum.squaredNorm();
}

std::optional<PhasePoint> leapfrog(const model::DifferentiableTarget& target,
                                   const PhasePoint& point, double step_size, int direction) {
  if (!(step_size > 0.0)) throw std::invalid_argument("step size must be positive");
  if (point.position.size() != point.momentum.size()) {
    throw std::invalid_argument("position and momentum differ in length");
  }
  Particle x{point.position, point.momentum, Vector()};
  x.logp = target.log_density_gradient(x.q, x.grad);
  if (!std::isfinite(x.logp) || !x.grad.allFinite()) return std::nullopt;
  if (!step(target, x, (direction >= 0 ? 1.0 : -1.0) * step_size)) return std::nullopt;
  return PhasePoint{std::move(x.q), std::move(x.p)};
}

Transition nuts_transition(const model::DifferentiableTarget& target, const Vector& current,
                           double step_size, int max_tree_depth, Rng& rng) {
  if (!(step_size > 0.0)) throw std::invalid_argument("step size must be positive");
  Particle start{current, rng.normal_vector(current.size()), Vector()};
  start.logp = target.log_density_gradient(start.q, start.grad);
  if (!std::isfinite(start.logp) || !start.grad.allFinite()) {
    throw std::invalid_argument("log density is not finite at the current position");
  }
  const double h0 = energy(start);
  // Slice variable u ~ U(0, exp(-H0)), kept in log space.
  const double log_slice = -h0 + std::log(1.0 - rng.uniform());

  TreeContext ctx{target, step_size, log_slice, h0, rng};
  Particle minus = start;
  Particle plus = start;
  Particle candidate = start;
  double n_valid = 1.0;
  bool ok = true;
  int depth = 0;
  double sum_accept = 0.0;
  int n_steps = 0;
  bool divergent = false;

  while (ok && depth < max_tree_depth) {
    const int direction = rng.uniform() < 0.5 ? -1 : 1;
    Subtree t = build_tree(ctx, direction > 0 ? plus : minus, direction, depth);
    if (direction > 0) {
      plus = t.plus;
    } else {
      minus = t.minus;
    }
    if (t.ok && rng.uniform() < t.n_valid / n_valid) candidate = std::move(t.candidate);
    n_valid += t.n_valid;
    sum_accept += t.sum_accept;
    n_steps += t.n_steps;
    divergent = divergent || t.divergent;
    ok = t.ok && no_uturn(minus, plus);
    ++depth;
  }

  Transition out;
  out.stats.accept_stat = n_steps > 0 ? sum_accept / n_steps : 0.0;
  out.stats.tree_depth = depth;
  out.stats.n_leapfrog = n_steps;
  out.stats.step_size = step_size;
  out.stats.energy = energy(candidate);
  out.stats.divergent = divergent;
  out.position = std::move(candidate.q);
  return out;
}

AdaptationState AdaptationState::start(double initial_step, double target_accept) {
  if (!(initial_step > 0.0)) throw std::invalid_argument("initial step size must be positive");
  AdaptationState s;
  s.mu = std::log(10.0 * initial_step);
  s.log_step = std::log(initial_step);
  s.target_accept = target_accept;
  return s;
}

double AdaptationState::step_size() const { return std::exp(log_step); }

double AdaptationState::averaged_step_size() const { return std::exp(log_step_bar); }

double adapt_step_size(AdaptationState& s, double accept_stat) {
  s.iteration += 1;
  const double m = s.iteration;
  const double eta = 1.0 / (m + s.t0);
  s.h_bar = (1.0 - eta) * s.h_bar + eta * (s.target_accept - accept_stat);
  s.log_step = s.mu - std::sqrt(m) / s.gamma * s.h_bar;
  const double w = std::pow(m, -s.kappa);
  s.log_step_bar = w * s.log_step + (1.0 - w) * s.log_step_bar;
  return s.step_size();
}

double find_reasonable_step_size(const model::DifferentiableTarget& target,
                                 const Vector& position, Rng& rng) {
  Particle start{position, rng.normal_vector(position.size()), Vector()};
  start.logp = target.log_density_gradient(start.q, start.grad);
  if (!std::isfinite(start.logp)) throw std::invalid_argument("log density is not finite at the initial position");
  const double h0 = energy(start);
  auto log_ratio = [&](double eps) {
    Particle x = start;
    if (!step(target, x, eps)) return -std::numeric_limits<double>::infinity();
    double r = h0 - energy(x);
    return std::isfinite(r) ? r : -std::numeric_limits<double>::infinity();
  };
  constexpr double kLogHalf = -0.69314718055994530942;
  double eps = 1.0;
  double r = log_ratio(eps);
  const double a = r > kLogHalf ? 1.0 : -1.0;
  for (int i = 0; i < 100 && a * r > a * kLogHalf; ++i) {
    eps *= std::pow(2.0, a);
    r = log_ratio(eps);
  }
  return eps;
}

namespace {

ChainDraws run_single_chain(const model::DifferentiableTarget& target, const SamplerConfig& config,
                            const Vector& init, int chain) {
  Rng rng = Rng(config.seed).split(static_cast<std::uint64_t>(chain));
  Vector theta = init;
  double eps = config.init_step_size ? *config.init_step_size
                                     : find_reasonable_step_size(target, theta, rng);
  ChainDraws out;
  auto adaptation = AdaptationState::start(eps, config.target_accept);
  for (int b = 0; b < config.burn_in; ++b) {
    Transition tr = nuts_transition(target, theta, eps, config.max_tree_depth, rng);
    theta = std::move(tr.position);
    if (tr.stats.divergent) ++out.warmup_divergences;
    eps = adapt_step_size(adaptation, tr.stats.accept_stat);
  }
  if (config.burn_in > 0) eps = adaptation.averaged_step_size();

  const int retained = config.samples_for_chain(chain);
  out.step_size = eps;
  out.draws.resize(retained, target.dim());
  out.stats.reserve(static_cast<std::size_t>(retained));
  for (int s = 0; s < retained; ++s) {
    Transition tr = nuts_transition(target, theta, eps, config.max_tree_depth, rng);
    theta = std::move(tr.position);
    out.draws.row(s) = theta.transpose();
    out.stats.push_back(tr.stats);
  }
  return out;
}

}  // namespace

PosteriorSampleSet run_chains(const model::DifferentiableTarget& target,
                              const SamplerConfig& config, std::span<const Vector> inits) {
  config.validate();
  if (inits.size() != static_cast<std::size_t>(config.chains)) {
    throw std::invalid_argument("expected one initial position per chain");
  }
  for (const auto& init : inits) {
    if (init.size() != target.dim()) throw std::invalid_argument("initial position has the wrong dimension");
    if (!std::isfinite(target.log_density(init))) {
      throw std::invalid_argument("log density is not finite at an initial position");
    }
  }
  PosteriorSampleSet set;
  set.config = config;
  if (config.chains == 1) {
    set.chains.push_back(run_single_chain(target, config, inits[0], 0));
    return set;
  }
  std::vector<std::future<ChainDraws>> jobs;
  for (int c = 0; c < config.chains; ++c) {
    jobs.push_back(std::async(std::launch::async, run_single_chain, std::cref(target),
                              std::cref(config), std::cref(inits[static_cast<std::size_t>(c)]), c));
  }
  for (auto& job : jobs) set.chains.push_back(job.get());
  return set;
}

Index PosteriorSampleSet::dim() const { return chains.empty() ? 0 : chains.front().draws.cols(); }

std::size_t PosteriorSampleSet::total_draws() const {
  std::size_t n = 0;
  for (const auto& c : chains) n += static_cast<std::size_t>(c.draws.rows());
  return n;
}

int PosteriorSampleSet::divergences() const {
  int n = 0;
  for (const auto& c : chains) {
    for (const auto& s : c.stats) n += s.divergent ? 1 : 0;
  }
  return n;
}

double PosteriorSampleSet::mean_accept_stat() const {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& c : chains) {
    for (const auto& s : c.stats) {
      sum += s.accept_stat;
      ++n;
    }
  }
  return n > 0 ? sum / static_cast<double>(n) : 0.0;
}

std::vector<Vector> PosteriorSampleSet::all_draws() const {
  std::vector<Vector> out;
  out.reserve(total_draws());
  for (const auto& c : chains) {
    for (Index s = 0; s < c.draws.rows(); ++s) out.emplace_back(c.draws.row(s).transpose());
  }
  return out;
}

std::vector<Vector> PosteriorSampleSet::leading_draws(std::size_t count) const {
  if (count > total_draws()) throw std::invalid_argument("requested more draws than the set holds");
  std::vector<Vector> out;
  out.reserve(count);
  for (Index s = 0; out.size() < count; ++s) {
    for (const auto& c : chains) {
      if (s < c.draws.rows() && out.size() < count) out.emplace_back(c.draws.row(s).transpose());
    }
  }
  return out;
}

std::vector<double> PosteriorSampleSet::trace(std::size_t chain, Index parameter) const {
  const auto& draws = chains.at(chain).draws;
  std::vector<double> out(static_cast<std::size_t>(draws.rows()));
  for (Index s = 0; s < draws.rows(); ++s) out[static_cast<std::size_t>(s)] = draws(s, parameter);
  return out;
}

model::PredictiveBundle predict_proba(const PosteriorSampleSet& samples, const Matrix& features) {
  auto draws = samples.all_draws();
  return model::predict_proba(draws, features);
}

void to_json(nlohmann::json& j, const SamplerConfig& c) {
  j = {{"burn_in", c.burn_in},
       {"samples", c.samples},
       {"chains", c.chains},
       {"target_accept", c.target_accept},
       {"max_tree_depth", c.max_tree_depth},
       {"seed", c.seed}};
  if (c.init_step_size) {
    j["init_step_size"] = *c.init_step_size;
  } else {
    j["init_step_size"] = "auto";
  }
}

void from_json(const nlohmann::json& j, SamplerConfig& c) {
  c.burn_in = j.at("burn_in").get<int>();
  c.samples = j.at("samples").get<int>();
  c.chains = j.at("chains").get<int>();
  c.target_accept = j.at("target_accept").get<double>();
  c.max_tree_depth = j.at("max_tree_depth").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  const auto& eps = j.at("init_step_size");
  if (eps.is_string()) {
    c.init_step_size.reset();
  } else {
    c.init_step_size = eps.get<double>();
  }
  c.validate();
}

void to_json(nlohmann::json& j, const PosteriorSampleSet& s) {
  j = nlohmann::json::object();
  j["config"] = s.config;
  auto chains = nlohmann::json::array();
  for (const auto& c : s.chains) {
    auto draws = nlohmann::json::array();
    for (Index r = 0; r < c.draws.rows(); ++r) {
      std::vector<double> row(c.draws.row(r).data(), c.draws.row(r).data() + 0);
      row.resize(static_cast<std::size_t>(c.draws.cols()));
      for (Index k = 0; k < c.draws.cols(); ++k) row[static_cast<std::size_t>(k)] = c.draws(r, k);
      draws.push_back(std::move(row));
    }
    nlohmann::json stats = {{"accept_stat", nlohmann::json::array()},
                            {"tree_depth", nlohmann::json::array()},
                            {"n_leapfrog", nlohmann::json::array()},
                            {"step_size", nlohmann::json::array()},
                            {"energy", nlohmann::json::array()},
                            {"divergent", nlohmann::json::array()}};
    for (const auto& st : c.stats) {
      stats["accept_stat"].push_back(st.accept_stat);
      stats["tree_depth"].push_back(st.tree_depth);
      stats["n_leapfrog"].push_back(st.n_leapfrog);
      stats["step_size"].push_back(st.step_size);
      stats["energy"].push_back(st.energy);
      stats["divergent"].push_back(st.divergent);
    }
    chains.push_back({{"draws", std::move(draws)},
                      {"stats", std::move(stats)},
                      {"step_size", c.step_size},
                      {"warmup_divergences", c.warmup_divergences}});
  }
  j["chains"] = std::move(chains);
}

void from_json(const nlohmann::json& j, PosteriorSampleSet& s) {
  s.config = j.at("config").get<SamplerConfig>();
  s.chains.clear();
  for (const auto& jc : j.at("chains")) {
    ChainDraws c;
    auto rows = jc.at("draws").get<std::vector<std::vector<double>>>();
    const Index dim = rows.empty() ? 0 : static_cast<Index>(rows.front().size());
    c.draws.resize(static_cast<Index>(rows.size()), dim);
    for (std::size_t r = 0; r < rows.size(); ++r) {
      if (static_cast<Index>(rows[r].size()) != dim) throw DataError("ragged draw matrix");
      for (Index k = 0; k < dim; ++k) c.draws(static_cast<Index>(r), k) = rows[r][static_cast<std::size_t>(k)];
    }
    const auto& st = jc.at("stats");
    const std::size_t n = st.at("accept_stat").size();
    if (n != rows.size()) throw DataError("draw and statistic counts differ");
    for (std::size_t i = 0; i < n; ++i) {
      TransitionStats t;
      t.accept_stat = st.at("accept_stat")[i].get<double>();
      t.tree_depth = st.at("tree_depth")[i].get<int>();
      t.n_leapfrog = st.at("n_leapfrog")[i].get<int>();
      t.step_size = st.at("step_size")[i].get<double>();
      t.energy = st.at("energy")[i].get<double>();
      t.divergent = st.at("divergent")[i].get<bool>();
      c.stats.push_back(t);
    }
    c.step_size = jc.at("step_size").get<double>();
    c.warmup_divergences = jc.at("warmup_divergences").get<int>();
    s.chains.push_back(std::move(c));
  }
}

}  // namespace llhmc::sampler
