// Experiment orchestration: configuration, OOD scenarios, end-to-end runs,
// grid search with seed-level summaries, sample curves and uncertainty maps.

#pragma once

#include "llhmc/backbone.hpp"
#include "llhmc/baselines.hpp"
#include "llhmc/core.hpp"
#include "llhmc/metrics.hpp"
#include "llhmc/model.hpp"
#include "llhmc/sampler.hpp"
#include "llhmc/toydata.hpp"

#include <nlohmann/json_fwd.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

namespace llhmc::harness {

enum class Method { llhmc, full_hmc, map, bbb, subensemble, gda };

std::string to_string(Method m);
Method parse_method(const std::string& s);

/**
 * Every setting of one experiment. The text form is one `key = value`
 * pair per line with `#` comments; config_keys() lists the schema.
 */
struct ExperimentConfig {
  // Data source: moons, clusters or csv.
  std::string source = "moons";
  int n_samples = 200;
  double noise = 0.1;
  double test_fraction = 0.3;
  std::uint64_t data_seed = 0;
  int cluster_classes = 4;
  int cluster_per_class = 200;
  int cluster_dim = 8;
  double cluster_separation = 4.0;
  std::string csv;
  std::string manifest;
  /// Use the inputs as latent features and skip the backbone.
  bool latent_input = false;

  std::vector<int> hidden = {20, 20};
  std::string activation = "relu";
  std::string backbone_optimizer = "adam";
  double backbone_lr = 1e-2;
  int backbone_epochs = 300;
  int backbone_batch = 32;
  double backbone_weight_decay = 0.0;

  Method method = Method::llhmc;
  double prior_std = 1.0;
  int burn_in = 100;
  int samples = 50;
  int chains = 1;
  double target_accept = 0.8;
  int max_tree_depth = 10;
  std::optional<double> init_step_size;
  /// Chain start: uniform (each coordinate U(-2, 2)), prior (a prior draw)
  /// or trained (the backbone head, or a MAP head for latent input).
  std::string init_strategy = "prior";
  /// Members drawn for prediction; 0 uses every available member.
  int n_members = 0;
  int starts = 1;

  int ensemble_size = 10;
  std::string head_optimizer = "adam";
  double head_lr = 1e-2;
  int head_epochs = 100;
  int head_batch = 32;
  int bbb_mc_samples = 1;
  std::optional<double> gda_ridge;
  double gda_relative_ridge = 1e-3;
  bool gda_shared_covariance = false;
  int full_hmc_max_dim = 20000;

  // OOD scenario: none, min or max. A positive threshold removes every
  // class with fewer training rows (min mode only).
  std::string ood_mode = "none";
  int ood_threshold = 0;
  int ace_bins = 10;

  std::vector<std::uint64_t> seeds = {0};
  std::string output_dir = "results";

  void validate() const;
};

struct ConfigKey {
  std::string name;
  std::string help;
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&)> set;
};

/// The schema: every configurable key in canonical order.
const std::vector<ConfigKey>& config_keys();
void set_config_value(ExperimentConfig& config, const std::string& key, const std::string& value);
std::string get_config_value(const ExperimentConfig& config, const std::string& key);
ExperimentConfig parse_config_text(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);
/// Canonical text: every key in schema order.
std::string config_to_text(const ExperimentConfig& config);
/// Hash of the canonical text without `seeds` and `output_dir`; identifies a grid cell.
std::string config_hash(const ExperimentConfig& config);

/// Raw-input train/test split of the configured source.
struct DataSplit {
  LatentDataset train;
  LatentDataset test;
};

DataSplit load_data(const ExperimentConfig& config);

struct OodScenario {
  std::string mode;
  std::vector<int> removed_classes;  // original ids
  std::vector<int> label_map;        // original id -> new id, -1 when removed
  LatentDataset train;               // reduced, re-indexed
  LatentDataset id_test;
  Matrix ood_inputs;                 // removed-class rows of train and test
};

/**
 * Class removal by training-split prevalence. Mode max removes the most
 * frequent class and min the least frequent; ties go to the lowest id.
 * With mode min and a positive threshold, every class with fewer training
 * rows than the threshold is removed.
 */
OodScenario build_ood_scenario(const DataSplit& data, const std::string& mode, int threshold = 0);

/// Fitted state of one start (one backbone) of a method.
struct FullNetworkSamples {
  backbone::MlpSpec spec;
  sampler::PosteriorSampleSet samples;
};

using MethodState = std::variant<model::LastLayerClassifier, baselines::VariationalLastLayer,
                                 baselines::SubEnsemble, baselines::GdaModel,
                                 sampler::PosteriorSampleSet, FullNetworkSamples>;

struct StartModel {
  std::optional<backbone::TrainedMlp> backbone;
  MethodState state;
  std::string feature_hash;
  Index input_dim = 0;
};

/**
 * A fitted method over one or more starts. Predictions concatenate the
 * members of every start, so the mean distribution averages member
 * probabilities across starts.
 */
struct FittedMethod {
  Method method = Method::llhmc;
  int n_members = 0;
  std::uint64_t prediction_seed = 0;
  std::vector<StartModel> starts;

  model::PredictiveBundle predict(const Matrix& inputs) const;
  /// Entropy of the mean distribution, or -log density for gda.
  Vector ood_scores(const Matrix& inputs) const;
};

/// Fits the configured method on `train` with one backbone per seed.
FittedMethod fit_method(const ExperimentConfig& config, const LatentDataset& train,
                        std::uint64_t seed, std::span<const std::uint64_t> backbone_seeds);

/// Backbone seeds used by run_experiment for `config.starts` starts.
std::vector<std::uint64_t> default_backbone_seeds(std::uint64_t seed, int starts);

struct EssSummary {
  double min = 0.0;
  double median = 0.0;
  double mean = 0.0;
  double max = 0.0;
};

struct Diagnostics {
  std::optional<EssSummary> ess;
  /// One value per sampled parameter (and start) when C >= 2.
  std::vector<double> rhat;
  /// Counts for R-hat in [1, 1.01), [1.01, 1.05), [1.05, 1.1), [1.1, 1.2), [1.2, inf).
  std::vector<int> rhat_histogram;
  int divergences = 0;
  int warmup_divergences = 0;
  double mean_accept_stat = 0.0;
};

Diagnostics diagnose(const FittedMethod& fitted);

struct RunRecord {
  ExperimentConfig config;
  std::uint64_t seed = 0;
  std::string config_hash;
  metrics::EvaluationReport evaluation;
  std::optional<metrics::OodReport> ood;
  Diagnostics diagnostics;
  std::vector<std::string> feature_hashes;
  int members = 0;
  double wall_seconds = 0.0;
  /// Empty on success; otherwise the failing phase and message.
  std::string error_phase;
  std::string error;

  bool ok() const { return error_phase.empty(); }
};

/// Runs `config.starts` starts (one backbone each); never throws for
/// module errors, which are recorded with their phase instead.
RunRecord run_experiment(const ExperimentConfig& config, std::uint64_t seed);
/// One start per backbone seed.
RunRecord multi_start_run(const ExperimentConfig& config, std::uint64_t seed,
                          std::span<const std::uint64_t> backbone_seeds);

void to_json(nlohmann::json& j, const RunRecord& r);
void from_json(const nlohmann::json& j, RunRecord& r);
/// JSON without wall-clock time, for determinism comparisons.
std::string record_fingerprint(const RunRecord& r);
std::string csv_header();
std::string csv_row(const RunRecord& r);
/// Writes <dir>/records/<hash>_<seed>.json atomically.
std::filesystem::path save_record(const RunRecord& r, const std::filesystem::path& dir);
RunRecord load_record(const std::filesystem::path& path);

struct GridAxis {
  std::string key;
  std::vector<std::string> values;
};

struct GridSpace {
  std::vector<GridAxis> axes;

  /// Cartesian product in lexicographic order of the value lists, with
  /// the last axis varying fastest.
  std::vector<ExperimentConfig> cells(const ExperimentConfig& base) const;
  std::size_t size() const;
};

/// prior_std x burn_in x target_accept x chains x samples.
GridSpace default_llhmc_space();

struct MetricSummary {
  double mean = 0.0;
  double two_sem = 0.0;  // NaN for a single seed
};

struct SeedChoice {
  std::uint64_t seed = 0;
  std::size_t cell = 0;
};

struct GridSummary {
  /// Per-seed best cells (summary A) or the single chosen cell (summary B).
  std::vector<SeedChoice> choices;
  std::map<std::string, MetricSummary> metrics;
};

/// Best cell: highest F1, then lower ACE, then lower cell index.
GridSummary summarize_per_seed_best(const std::vector<RunRecord>& records,
                                    const std::vector<std::string>& cell_hashes);
GridSummary summarize_best_average(const std::vector<RunRecord>& records,
                                   const std::vector<std::string>& cell_hashes);

struct GridResult {
  std::vector<std::string> cell_hashes;
  std::vector<RunRecord> records;  // cell-major, then seed order
  GridSummary per_seed_best;
  GridSummary best_average;
  int failures = 0;
  int reused = 0;
};

/**
 * One record per (cell, seed). Records already present in
 * `output_dir/records` are reused, so an interrupted sweep resumes. New
 * rows are appended to `output_dir/results.csv` and both summaries are
 * written as JSON.
 */
GridResult grid_search(const ExperimentConfig& base, const GridSpace& space,
                       std::span<const std::uint64_t> seeds,
                       const std::filesystem::path& output_dir, int workers = 1);

void to_json(nlohmann::json& j, const GridSummary& s);

struct CurveInput {
  sampler::PosteriorSampleSet samples;
  Matrix test_features;
  std::vector<int> test_labels;
  int num_classes = 2;
  /// Optional OOD rows for PR-AUC; empty when absent.
  Matrix ood_features;
};

struct CurvePoint {
  int draws = 0;
  double f1_mean = 0.0;
  double f1_std = 0.0;
  double pr_auc_mean = 0.0;  // NaN without OOD rows
  double pr_auc_std = 0.0;
};

/// Metrics of the first s draws (round-robin over chains) for every s,
/// with mean and sample std across inputs.
std::vector<CurvePoint> dependent_sample_curve(std::span<const CurveInput> inputs);

struct UncertaintyGrid {
  Matrix points;  // rows in Grid2D order
  Vector p1;
  Vector entropy;
  Vector normalized_entropy;
};

/// Min-max normalization; constant input maps to all zeros.
Vector min_max_normalize(const Vector& v);
UncertaintyGrid uncertainty_grid(const FittedMethod& fitted, const toydata::Grid2D& grid);
/// CSV columns x,y,p1,entropy,normalized_entropy.
void emit_uncertainty_grid(const FittedMethod& fitted, const toydata::Grid2D& grid,
                           const std::filesystem::path& out);

struct RegressionBand {
  Vector x;
  Vector mean;
  Vector std;  // predictive std including observation noise
};

struct RegressionToyConfig {
  int n_samples = 200;
  double noise = 0.1;
  toydata::SinusoidConfig sinusoid;
  std::vector<int> hidden = {50, 50, 50, 50, 50};
  std::string activation = "tanh";
  double lr = 1e-2;
  int epochs = 2000;
  int batch = 32;
  double prior_std = 1.0;
  double noise_std = 0.1;
  int burn_in = 100;
  int samples = 50;
  double target_accept = 0.8;
  int ensemble_size = 5;
  int resolution = 200;
  double x_min = -0.5;
  double x_max = 1.5;
};

/// Predictive band of llhmc, full_hmc or subensemble (retrained networks)
/// on the sinusoid toy task.
RegressionBand regression_band(const RegressionToyConfig& config, Method method, std::uint64_t seed);
void emit_regression_band(const RegressionBand& band, const std::filesystem::path& out);

}  // namespace llhmc::harness
