// Hamiltonian Monte Carlo with the No-U-Turn Sampler and dual-averaging
// step-size adaptation, plus multi-chain orchestration.
//
// REFERENCE: Hoffman, M.D. and Gelman, A., 2014. The No-U-Turn sampler:
// adaptively setting path lengths in Hamiltonian Monte Carlo. JMLR 15.

#pragma once

#include "llhmc/core.hpp"
#include "llhmc/model.hpp"

#include <nlohmann/json_fwd.hpp>

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace llhmc::sampler {

struct SamplerConfig {
  int burn_in = 100;
  /// Total retained draws, split as evenly as possible over the chains.
  int samples = 50;
  int chains = 1;
  double target_accept = 0.8;
  int max_tree_depth = 10;
  /// nullopt selects the doubling/halving heuristic.
  std::optional<double> init_step_size;
  std::uint64_t seed = 0;

  void validate() const;
  /// Retained draws for chain `c`; the first samples % chains chains get one extra.
  int samples_for_chain(int c) const;
};

/// Energy error (in nats) beyond which a trajectory counts as divergent.
inline constexpr double kDivergenceThreshold = 1000.0;

struct PhasePoint {
  Vector position;
  Vector momentum;
};

/// H = -log p(position) + |momentum|^2 / 2 (identity mass matrix).
double hamiltonian(const model::DifferentiableTarget& target, const PhasePoint& point);

/// One leapfrog step of size direction * step_size. Returns nullopt when
/// the log density or its gradient becomes non-finite.
std::optional<PhasePoint> leapfrog(const model::DifferentiableTarget& target,
                                   const PhasePoint& point, double step_size, int direction);

struct TransitionStats {
  double accept_stat = 0.0;
  int tree_depth = 0;
  int n_leapfrog = 0;
  double step_size = 0.0;
  /// Hamiltonian of the selected phase point.
  double energy = 0.0;
  bool divergent = false;
};

struct Transition {
  Vector position;
  TransitionStats stats;
};

/**
 * One NUTS transition with slice-based selection. The trajectory doubles
 * in a random direction until a U-turn, a divergence or `max_tree_depth`.
 * The acceptance statistic is the mean of min(1, exp(H0 - H)) over every
 * leapfrog step of the trajectory.
 */
Transition nuts_transition(const model::DifferentiableTarget& target, const Vector& current,
                           double step_size, int max_tree_depth, Rng& rng);

/// Dual-averaging accumulators (gamma = 0.05, t0 = 10, kappa = 0.75).
struct AdaptationState {
  double mu = 0.0;
  double log_step = 0.0;
  double log_step_bar = 0.0;
  double h_bar = 0.0;
  int iteration = 0;
  double target_accept = 0.8;
  double gamma = 0.05;
  double t0 = 10.0;
  double kappa = 0.75;

  static AdaptationState start(double initial_step, double target_accept);
  double step_size() const;
  /// Step size to use once adaptation ends.
  double averaged_step_size() const;
};

/// Advances the adaptation by one observed acceptance statistic and returns
/// the step size for the next burn-in transition.
double adapt_step_size(AdaptationState& state, double accept_stat);

/// Doubles or halves from 1.0 until the one-step acceptance ratio crosses 1/2.
double find_reasonable_step_size(const model::DifferentiableTarget& target,
                                 const Vector& position, Rng& rng);

struct ChainDraws {
  Matrix draws;  // retained draws x dim
  std::vector<TransitionStats> stats;
  double step_size = 0.0;
  int warmup_divergences = 0;
};

struct PosteriorSampleSet {
  SamplerConfig config;
  std::vector<ChainDraws> chains;

  Index dim() const;
  std::size_t total_draws() const;
  /// Divergent retained transitions across chains.
  int divergences() const;
  double mean_accept_stat() const;
  /// Chain-major list of all retained draws.
  std::vector<Vector> all_draws() const;
  /// The first `count` draws, taken round-robin across chains.
  std::vector<Vector> leading_draws(std::size_t count) const;
  std::vector<double> trace(std::size_t chain, Index parameter) const;
};

/**
 * Runs `config.chains` independent chains from `inits`. Chain c uses the
 * stream Rng(config.seed).split(c); each adapts its own step size during
 * the burn-in, which is discarded. Chains execute concurrently.
 */
PosteriorSampleSet run_chains(const model::DifferentiableTarget& target,
                              const SamplerConfig& config, std::span<const Vector> inits);

/// Bundle over every retained draw of a last-layer sample set.
model::PredictiveBundle predict_proba(const PosteriorSampleSet& samples, const Matrix& features);

void to_json(nlohmann::json& j, const SamplerConfig& c);
void from_json(const nlohmann::json& j, SamplerConfig& c);
void to_json(nlohmann::json& j, const PosteriorSampleSet& s);
void from_json(const nlohmann::json& j, PosteriorSampleSet& s);

}  // namespace llhmc::sampler
