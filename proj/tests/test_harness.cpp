#include "llhmc/harness.hpp"

#include <doctest.h>
#include <nlohmann/json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>

using namespace llhmc;
using namespace llhmc::harness;

namespace {

// A fast moons configuration: tiny backbone, short chains.
ExperimentConfig quick_config() {
  ExperimentConfig c;
  c.n_samples = 120;
  c.hidden = {8, 8};
  c.backbone_epochs = 40;
  c.burn_in = 30;
  c.samples = 20;
  c.head_epochs = 20;
  c.ensemble_size = 3;
  return c;
}

std::filesystem::path fresh_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("llhmc_harness_" + name);
  std::filesystem::remove_all(dir);
  return dir;
}

LatentDataset labelled(const std::vector<int>& counts, Index dim, Rng& rng) {
  LatentDataset d;
  d.num_classes = static_cast<int>(counts.size());
  Index n = 0;
  for (int c : counts) n += c;
  d.features = Matrix(n, dim);
  Index row = 0;
  for (std::size_t k = 0; k < counts.size(); ++k) {
    for (int i = 0; i < counts[k]; ++i, ++row) {
      d.features.row(row) = rng.normal_vector(dim).transpose();
      d.features(row, 0) += 4.0 * static_cast<double>(k);
      d.labels.push_back(static_cast<int>(k));
    }
  }
  return d;
}

std::size_t count_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  std::size_t n = 0;
  std::string line;
  while (std::getline(in, line)) n += line.empty() ? 0 : 1;
  return n;
}

RunRecord fake_record(const std::string& hash, std::uint64_t seed, double f1, double ace) {
  RunRecord r;
  r.config_hash = hash;
  r.seed = seed;
  r.evaluation.macro_f1 = f1;
  r.evaluation.accuracy = f1 + 1.0;
  r.evaluation.ace = ace;
  r.evaluation.raulc = 0.1;
  r.evaluation.mean_entropy = 0.2;
  return r;
}

}  // namespace

TEST_CASE("OOD scenarios remove classes by training prevalence") {
  Rng rng(0);
  DataSplit split{labelled({5, 3, 10}, 2, rng), labelled({2, 2, 2}, 2, rng)};

  OodScenario min = build_ood_scenario(split, "min");
  CHECK(min.removed_classes == std::vector<int>{1});
  CHECK(min.label_map == std::vector<int>{0, -1, 1});
  CHECK(min.train.size() == 15);
  CHECK(min.train.num_classes == 2);
  CHECK(min.id_test.size() == 4);
  CHECK(min.ood_inputs.rows() == 5);

  OodScenario max = build_ood_scenario(split, "max");
  CHECK(max.removed_classes == std::vector<int>{2});
  CHECK(max.ood_inputs.rows() == 12);

  OodScenario threshold = build_ood_scenario(split, "min", 4);
  CHECK(threshold.removed_classes == std::vector<int>{1});

  // Ties go to the lowest class id.
  DataSplit tied{labelled({4, 4, 6}, 2, rng), labelled({1, 1, 1}, 2, rng)};
  CHECK(build_ood_scenario(tied, "min").removed_classes == std::vector<int>{0});

  DataSplit two{labelled({5, 3}, 2, rng), labelled({2, 2}, 2, rng)};
  CHECK_THROWS_AS(build_ood_scenario(two, "min"), std::invalid_argument);
  CHECK_THROWS_AS(build_ood_scenario(split, "min", 11), Error);
}

TEST_CASE("OOD rows never leak into the reduced sets") {
  Rng rng(1);
  DataSplit split{labelled({6, 9, 7, 8}, 3, rng), labelled({3, 3, 3, 3}, 3, rng)};
  OodScenario s = build_ood_scenario(split, "max");
  CHECK(s.removed_classes == std::vector<int>{1});
  // Class k is shifted by 4k along the first axis, so class 1 rows sit near 4.
  for (Index i = 0; i < s.train.size(); ++i) CHECK(std::abs(s.train.features(i, 0) - 4.0) > 0.0);
  for (int y : s.train.labels) CHECK(y < 3);
  for (Index i = 0; i < s.ood_inputs.rows(); ++i) {
    bool from_class_one = false;
    for (Index j = 0; j < split.train.size(); ++j) {
      if (split.train.labels[static_cast<std::size_t>(j)] == 1 && split.train.features.row(j) == s.ood_inputs.row(i)) from_class_one = true;
    }
    for (Index j = 0; j < split.test.size(); ++j) {
      if (split.test.labels[static_cast<std::size_t>(j)] == 1 && split.test.features.row(j) == s.ood_inputs.row(i)) from_class_one = true;
    }
    CHECK(from_class_one);
  }
}

TEST_CASE("a run is reproducible from its config and seed") {
  ExperimentConfig c = quick_config();
  RunRecord a = run_experiment(c, 3);
  RunRecord b = run_experiment(c, 3);
  REQUIRE(a.ok());
  CHECK(record_fingerprint(a) == record_fingerprint(b));
  CHECK(a.evaluation.macro_f1 == b.evaluation.macro_f1);
  CHECK(a.members == 20);
  RunRecord other = run_experiment(c, 4);
  CHECK(record_fingerprint(a) != record_fingerprint(other));
}

TEST_CASE("MAP predicts with one member") {
  ExperimentConfig c = quick_config();
  c.method = Method::map;
  RunRecord r = run_experiment(c, 0);
  REQUIRE(r.ok());
  CHECK(r.members == 1);
  CHECK(r.diagnostics.rhat.empty());
}

TEST_CASE("two chains give one R-hat per last-layer parameter") {
  ExperimentConfig c = quick_config();
  c.chains = 2;
  RunRecord r = run_experiment(c, 0);
  REQUIRE(r.ok());
  CHECK(r.diagnostics.rhat.size() == 2 * 8 + 2);
  int histogram_total = 0;
  for (int h : r.diagnostics.rhat_histogram) histogram_total += h;
  CHECK(histogram_total == 18);
  REQUIRE(r.diagnostics.ess);
  CHECK(r.diagnostics.ess->min <= r.diagnostics.ess->max);
}

TEST_CASE("every method runs end to end with an OOD scenario") {
  ExperimentConfig c = quick_config();
  c.source = "clusters";
  c.cluster_classes = 3;
  c.cluster_per_class = 40;
  c.cluster_dim = 4;
  c.latent_input = true;
  c.ood_mode = "min";
  for (Method m : {Method::llhmc, Method::map, Method::bbb, Method::subensemble, Method::gda}) {
    c.method = m;
    RunRecord r = run_experiment(c, 1);
    INFO(to_string(m), " ", r.error);
    REQUIRE(r.ok());
    REQUIRE(r.ood);
    CHECK(r.ood->roc_auc >= 0.0);
    CHECK(r.ood->roc_auc <= 1.0);
  }
  c.latent_input = false;
  c.method = Method::full_hmc;
  c.hidden = {4};
  c.samples = 4;
  c.burn_in = 4;
  c.max_tree_depth = 4;
  RunRecord full = run_experiment(c, 1);
  INFO(full.error);
  CHECK(full.ok());
}

TEST_CASE("module errors are recorded with their phase") {
  ExperimentConfig c = quick_config();
  c.source = "csv";
  c.csv = "/nonexistent/latent.csv";
  RunRecord r = run_experiment(c, 0);
  CHECK_FALSE(r.ok());
  CHECK(r.error_phase == "data");
  CHECK_FALSE(r.error.empty());
}

TEST_CASE("config text round-trip and hashing") {
  ExperimentConfig c = quick_config();
  c.prior_std = 2.5;
  c.init_step_size = 0.125;
  c.seeds = {4, 5};
  std::string text = config_to_text(c);
  ExperimentConfig back = parse_config_text(text);
  CHECK(config_to_text(back) == text);
  CHECK(config_hash(back) == config_hash(c));

  ExperimentConfig reseeded = c;
  reseeded.seeds = {9};
  reseeded.output_dir = "elsewhere";
  CHECK(config_hash(reseeded) == config_hash(c));
  reseeded.prior_std = 1.0;
  CHECK(config_hash(reseeded) != config_hash(c));

  ExperimentConfig parsed = parse_config_text("# comment\nmethod = map\n  prior_std=0.5  \nhidden = 4,5\n");
  CHECK(parsed.method == Method::map);
  CHECK(parsed.prior_std == 0.5);
  CHECK(parsed.hidden == std::vector<int>{4, 5});
  CHECK_THROWS(parse_config_text("no_such_key = 1\n"));
  CHECK_THROWS(parse_config_text("prior_std = abc\n"));
  CHECK(config_keys().size() > 30);
}

TEST_CASE("csv and manifest sources") {
  Rng rng(2);
  LatentDataset d = labelled({6, 6, 6}, 3, rng);
  auto dir = fresh_dir("csv");
  std::filesystem::create_directories(dir);
  save_latent_dataset(d, dir / "z.csv");
  DatasetManifest m;
  m.num_classes = 3;
  for (std::size_t i = 0; i < 18; ++i) (i % 3 == 0 ? m.test : m.train).push_back(i);
  save_manifest(m, dir / "z.json");
  ExperimentConfig c;
  c.source = "csv";
  c.csv = (dir / "z.csv").string();
  c.manifest = (dir / "z.json").string();
  DataSplit split = load_data(c);
  CHECK(split.train.size() == 12);
  CHECK(split.test.size() == 6);
  CHECK(split.test.features.row(1) == d.features.row(3));
}

TEST_CASE("grid search writes one record per cell and seed and resumes") {
  ExperimentConfig base = quick_config();
  base.samples = 6;
  base.burn_in = 10;
  GridSpace space{{{"prior_std", {"0.1", "1", "5"}}}};
  CHECK(space.size() == 3);
  auto cells = space.cells(base);
  CHECK(cells[2].prior_std == 5.0);
  std::vector<std::uint64_t> seeds{0, 1};
  auto dir = fresh_dir("grid");
  GridResult first = grid_search(base, space, seeds, dir, 2);
  CHECK(first.records.size() == 6);
  CHECK(first.failures == 0);
  CHECK(first.reused == 0);
  CHECK(count_lines(dir / "results.csv") == 7);
  std::size_t files = 0;
  for (const auto& e : std::filesystem::directory_iterator(dir / "records")) files += e.path().extension() == ".json";
  CHECK(files == 6);
  CHECK(first.records[1].seed == 1);
  CHECK(first.records[1].config_hash == first.cell_hashes[0]);

  GridResult second = grid_search(base, space, seeds, dir, 1);
  CHECK(second.reused == 6);
  CHECK(count_lines(dir / "results.csv") == 7);
  for (std::size_t i = 0; i < 6; ++i) CHECK(record_fingerprint(second.records[i]) == record_fingerprint(first.records[i]));
  CHECK(nlohmann::json(second.per_seed_best).dump() == nlohmann::json(first.per_seed_best).dump());
  CHECK(nlohmann::json(second.best_average).dump() == nlohmann::json(first.best_average).dump());

  // A rerun of one cell outside the sweep reproduces its stored record.
  CHECK(record_fingerprint(run_experiment(cells[1], 0)) == record_fingerprint(first.records[2]));
}

TEST_CASE("the default grid uses the published value sets") {
  GridSpace s = default_llhmc_space();
  REQUIRE(s.axes.size() == 5);
  CHECK(s.axes[0].key == "prior_std");
  CHECK(s.axes[0].values == std::vector<std::string>{"0.01", "0.1", "1", "2.5", "5", "10"});
  CHECK(s.axes[1].key == "burn_in");
  CHECK(s.axes[1].values == std::vector<std::string>{"10", "25", "50", "100", "200"});
  CHECK(s.axes[2].key == "target_accept");
  CHECK(s.axes[2].values == std::vector<std::string>{"0.6", "0.7", "0.8"});
  CHECK(s.axes[3].key == "chains");
  CHECK(s.axes[3].values == std::vector<std::string>{"1", "2"});
  CHECK(s.axes[4].key == "samples");
  CHECK(s.axes[4].values.front() == "2");
  CHECK(s.axes[4].values[1] == "5");
  CHECK(s.axes[4].values[2] == "10");
  CHECK(s.axes[4].values.back() == "50");
}

TEST_CASE("grid cells enumerate with the last axis fastest") {
  GridSpace s{{{"prior_std", {"1", "2"}}, {"chains", {"1", "2", "3"}}}};
  auto cells = s.cells(ExperimentConfig{});
  REQUIRE(cells.size() == 6);
  CHECK(cells[0].prior_std == 1.0);
  CHECK(cells[0].chains == 1);
  CHECK(cells[1].chains == 2);
  CHECK(cells[3].prior_std == 2.0);
  CHECK(cells[3].chains == 1);
}

TEST_CASE("summary B picks the best mean F1 with ACE and cell order as tie-breaks") {
  std::vector<std::string> hashes{"a", "b", "c"};
  std::vector<RunRecord> records{
      fake_record("a", 0, 90, 0.10), fake_record("a", 1, 80, 0.10),
      fake_record("b", 0, 85, 0.05), fake_record("b", 1, 85, 0.05),
      fake_record("c", 0, 70, 0.01), fake_record("c", 1, 95, 0.01),
  };
  GridSummary b = summarize_best_average(records, hashes);
  REQUIRE(b.choices.size() == 2);
  CHECK(b.choices[0].cell == 1);
  CHECK(b.metrics.at("macro_f1").mean == 85.0);
  CHECK(b.metrics.at("macro_f1").two_sem == 0.0);
  CHECK(b.metrics.count("roc_auc") == 0);

  // Equal F1 and ACE falls back to the lower cell index.
  records[2].evaluation.ace = records[3].evaluation.ace = 0.10;
  CHECK(summarize_best_average(records, hashes).choices[0].cell == 0);

  GridSummary a = summarize_per_seed_best(records, hashes);
  REQUIRE(a.choices.size() == 2);
  CHECK(a.choices[0].cell == 0);
  CHECK(a.choices[1].cell == 2);
  CHECK(a.metrics.at("macro_f1").mean == 92.5);
  CHECK(std::abs(a.metrics.at("macro_f1").two_sem - 2.0 * std::sqrt(12.5) / std::sqrt(2.0)) < 1e-12);

  records[5].error_phase = "fit";
  GridSummary skip = summarize_per_seed_best(records, hashes);
  CHECK(skip.choices[1].cell == 1);
}

TEST_CASE("dependent sample curves") {
  ExperimentConfig c = quick_config();
  c.latent_input = true;
  DataSplit split = load_data(c);
  std::vector<std::uint64_t> seeds{0};
  FittedMethod fitted = fit_method(c, split.train, 0, seeds);
  const auto& set = std::get<sampler::PosteriorSampleSet>(fitted.starts[0].state);
  CurveInput in{set, split.test.features, split.test.labels, 2, Matrix()};
  std::vector<CurveInput> one{in};
  auto curve = dependent_sample_curve(one);
  REQUIRE(curve.size() == 20);
  auto full = sampler::predict_proba(set, split.test.features);
  double full_f1 = metrics::accuracy_and_macro_f1(metrics::argmax_rows(full.mean), split.test.labels, 2).macro_f1;
  CHECK(curve.back().f1_mean == full_f1);
  for (const auto& p : curve) CHECK(p.f1_std == 0.0);
  CHECK(std::isnan(curve.back().pr_auc_mean));

  CurveInput frozen = in;
  for (auto& ch : frozen.samples.chains) {
    for (Index r = 1; r < ch.draws.rows(); ++r) ch.draws.row(r) = ch.draws.row(0);
  }
  frozen.ood_features = Matrix::Constant(5, 2, 3.0);
  std::vector<CurveInput> flat{frozen};
  auto constant = dependent_sample_curve(flat);
  for (const auto& p : constant) {
    CHECK(p.f1_mean == constant.front().f1_mean);
    CHECK(p.pr_auc_mean == constant.front().pr_auc_mean);
  }
}

TEST_CASE("uncertainty grids") {
  FittedMethod uniform;
  uniform.method = Method::map;
  StartModel s;
  s.state = model::LastLayerClassifier{Matrix::Zero(2, 2), Vector::Zero(2)};
  s.input_dim = 2;
  uniform.starts.push_back(s);
  auto grid = toydata::make_grid({-1, 1}, {-1, 1}, 3);
  UncertaintyGrid g = uncertainty_grid(uniform, grid);
  CHECK(g.points.rows() == 9);
  for (Index i = 0; i < 9; ++i) {
    CHECK(std::abs(g.entropy[i] - std::log(2.0)) < 1e-15);
    CHECK(g.normalized_entropy[i] == 0.0);
  }
  auto dir = fresh_dir("grid_csv");
  std::filesystem::create_directories(dir);
  emit_uncertainty_grid(uniform, grid, dir / "g.csv");
  CHECK(count_lines(dir / "g.csv") == 10);

  FittedMethod tilted = uniform;
  std::get<model::LastLayerClassifier>(tilted.starts[0].state).weights << 1, 2, -1, 0.5;
  UncertaintyGrid t = uncertainty_grid(tilted, toydata::make_grid({-2, 2}, {-2, 2}, 7));
  CHECK(t.normalized_entropy.minCoeff() == 0.0);
  CHECK(t.normalized_entropy.maxCoeff() == 1.0);

  Vector v(3);
  v << 2, 4, 3;
  Vector n = min_max_normalize(v);
  CHECK(n[0] == 0.0);
  CHECK(n[1] == 1.0);
  CHECK(n[2] == 0.5);

  tilted.starts[0].input_dim = 3;
  CHECK_THROWS_AS(uncertainty_grid(tilted, grid), std::invalid_argument);
}

TEST_CASE("multiple starts") {
  ExperimentConfig c = quick_config();
  std::vector<std::uint64_t> single = default_backbone_seeds(5, 1);
  CHECK(record_fingerprint(multi_start_run(c, 5, single)) == record_fingerprint(run_experiment(c, 5)));

  c.chains = 2;
  DataSplit split = load_data(c);
  std::vector<std::uint64_t> two = default_backbone_seeds(5, 2);
  FittedMethod fitted = fit_method(c, split.train, 5, two);
  REQUIRE(fitted.starts.size() == 2);
  int chains = 0;
  for (const auto& s : fitted.starts) {
    const auto& set = std::get<sampler::PosteriorSampleSet>(s.state);
    chains += static_cast<int>(set.chains.size());
    for (const auto& ch : set.chains) CHECK(ch.draws.rows() == 5);
  }
  CHECK(chains == 4);
  CHECK(fitted.predict(split.test.features).num_members() == 20);

  c.starts = 2;
  RunRecord r = run_experiment(c, 5);
  REQUIRE(r.ok());
  REQUIRE(r.feature_hashes.size() == 2);
  CHECK(r.feature_hashes[0] != r.feature_hashes[1]);
  CHECK(r.diagnostics.rhat.size() == 2 * 18);
}

TEST_CASE("records survive a JSON round-trip") {
  ExperimentConfig c = quick_config();
  c.source = "clusters";
  c.cluster_classes = 3;
  c.cluster_per_class = 30;
  c.cluster_dim = 3;
  c.latent_input = true;
  c.ood_mode = "max";
  RunRecord r = run_experiment(c, 2);
  REQUIRE(r.ok());
  auto dir = fresh_dir("records");
  auto path = save_record(r, dir);
  RunRecord back = load_record(path);
  CHECK(record_fingerprint(back) == record_fingerprint(r));
  CHECK(back.ood->roc_auc == r.ood->roc_auc);
  const std::string header = csv_header();
  std::size_t commas_header = static_cast<std::size_t>(std::count(header.begin(), header.end(), ','));
  std::string row = csv_row(r);
  CHECK(static_cast<std::size_t>(std::count(row.begin(), row.end(), ',')) == commas_header);
}

TEST_CASE("regression bands widen with observation noise") {
  RegressionToyConfig rc;
  rc.n_samples = 60;
  rc.hidden = {10, 10};
  rc.epochs = 200;
  rc.burn_in = 20;
  rc.samples = 10;
  rc.ensemble_size = 2;
  rc.resolution = 11;
  for (Method m : {Method::llhmc, Method::subensemble}) {
    RegressionBand band = regression_band(rc, m, 0);
    CHECK(band.x.size() == 11);
    CHECK(band.x[0] == rc.x_min);
    CHECK(band.x[10] == rc.x_max);
    for (Index i = 0; i < 11; ++i) {
      CHECK(std::isfinite(band.mean[i]));
      CHECK(band.std[i] >= rc.noise_std);
    }
  }
  CHECK_THROWS_AS(regression_band(rc, Method::gda, 0), std::invalid_argument);
}
