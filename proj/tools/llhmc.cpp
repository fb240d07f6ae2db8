// Command-line entry point for data generation, training, sampling,
// evaluation and experiment sweeps.

#include "llhmc/backbone.hpp"
#include "llhmc/baselines.hpp"
#include "llhmc/harness.hpp"
#include "llhmc/metrics.hpp"
#include "llhmc/model.hpp"
#include "llhmc/sampler.hpp"
#include "llhmc/toydata.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cmath>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

using namespace llhmc;
using nlohmann::json;

namespace {

json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  return json::parse(in);
}

void write_json(const std::string& path, const json& j) { write_file_atomic(path, j.dump(2) + "\n"); }

json num(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

json report_json(const metrics::EvaluationReport& r) {
  return {{"accuracy", num(r.accuracy)}, {"macro_f1", num(r.macro_f1)}, {"ace", num(r.ace)},
          {"raulc", num(r.raulc)}, {"mean_entropy", num(r.mean_entropy)}};
}

// Training rows of a dataset: the manifest's train split when given.
LatentDataset training_rows(const LatentDataset& all, const std::string& manifest) {
  if (manifest.empty()) return all;
  auto m = load_manifest(manifest);
  return m.train.empty() ? all : all.subset(m.train);
}

// Every configuration key as a --key flag, applied over an optional file.
struct ConfigFlags {
  std::string file;
  std::map<std::string, std::string> values;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", file, "key = value configuration file");
    for (const auto& k : harness::config_keys()) {
      cmd->add_option("--" + k.name, values[k.name], k.help);
    }
  }

  harness::ExperimentConfig resolve(CLI::App* cmd) const {
    harness::ExperimentConfig c = file.empty() ? harness::ExperimentConfig{} : harness::load_config(file);
    for (const auto& [key, value] : values) {
      if (cmd->count("--" + key) > 0) harness::set_config_value(c, key, value);
    }
    c.validate();
    return c;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Last-layer HMC toolkit"};
  app.require_subcommand(1);

  // toy
  auto* toy = app.add_subcommand("toy", "generate a toy dataset as CSV");
  toy->require_subcommand(1);
  int toy_n = 200;
  double toy_noise = 0.1;
  std::uint64_t toy_seed = 0;
  std::string toy_out;
  double toy_amplitude = 1.0;
  int cl_classes = 4, cl_per_class = 200, cl_dim = 8;
  double cl_sep = 4.0;
  auto* moons = toy->add_subcommand("moons", "two interleaving half circles");
  auto* sinus = toy->add_subcommand("sinusoid", "noisy sinusoid over two disjoint intervals");
  auto* clusters = toy->add_subcommand("clusters", "Gaussian clusters on a regular simplex");
  for (auto* cmd : {moons, sinus, clusters}) {
    cmd->add_option("--seed", toy_seed, "generator seed")->required();
    cmd->add_option("--out", toy_out, "output CSV")->required();
  }
  for (auto* cmd : {moons, sinus}) {
    cmd->add_option("--n", toy_n, "sample count");
    cmd->add_option("--noise", toy_noise, "Gaussian noise std");
  }
  sinus->add_option("--amplitude", toy_amplitude, "sinusoid amplitude");
  clusters->add_option("--classes", cl_classes, "class count");
  clusters->add_option("--per-class", cl_per_class, "rows per class");
  clusters->add_option("--dim", cl_dim, "dimension");
  clusters->add_option("--separation", cl_sep, "distance between centres");

  // train-backbone
  auto* train = app.add_subcommand("train-backbone", "train an MLP classifier backbone");
  std::string tb_data, tb_manifest, tb_out, tb_activation = "relu", tb_optimizer = "adam";
  std::vector<int> tb_hidden = {20, 20};
  double tb_lr = 1e-2, tb_wd = 0.0;
  int tb_epochs = 300, tb_batch = 32;
  std::uint64_t tb_seed = 0;
  train->add_option("--data", tb_data, "dataset CSV")->required();
  train->add_option("--manifest", tb_manifest, "optional split manifest");
  train->add_option("--hidden", tb_hidden, "hidden widths")->delimiter(',');
  train->add_option("--activation", tb_activation, "relu or tanh");
  train->add_option("--optimizer", tb_optimizer, "adam or sgd");
  train->add_option("--lr", tb_lr, "learning rate");
  train->add_option("--epochs", tb_epochs, "epochs");
  train->add_option("--batch", tb_batch, "batch size (0 = full batch)");
  train->add_option("--weight-decay", tb_wd, "L2 weight decay");
  train->add_option("--seed", tb_seed, "training seed")->required();
  train->add_option("--out", tb_out, "output JSON")->required();

  // extract
  auto* extract = app.add_subcommand("extract", "write penultimate-layer features as CSV");
  std::string ex_backbone, ex_data, ex_out;
  extract->add_option("--backbone", ex_backbone, "backbone JSON")->required();
  extract->add_option("--data", ex_data, "dataset CSV")->required();
  extract->add_option("--out", ex_out, "feature CSV")->required();

  // sample
  auto* sample = app.add_subcommand("sample", "run NUTS on the last-layer posterior");
  std::string sm_features, sm_manifest, sm_out, sm_init = "uniform", sm_step = "auto";
  sampler::SamplerConfig sm_cfg;
  double sm_prior = 1.0;
  sample->add_option("--features", sm_features, "latent CSV")->required();
  sample->add_option("--manifest", sm_manifest, "optional split manifest");
  sample->add_option("--prior-std", sm_prior, "prior std");
  sample->add_option("--burn-in", sm_cfg.burn_in, "burn-in transitions per chain");
  sample->add_option("--samples", sm_cfg.samples, "retained draws in total");
  sample->add_option("--chains", sm_cfg.chains, "chains");
  sample->add_option("--target-accept", sm_cfg.target_accept, "dual-averaging target");
  sample->add_option("--max-tree-depth", sm_cfg.max_tree_depth, "maximum tree depth");
  sample->add_option("--init-step-size", sm_step, "initial step size or auto");
  sample->add_option("--init", sm_init, "chain start: uniform or prior");
  sample->add_option("--seed", sm_cfg.seed, "sampler seed")->required();
  sample->add_option("--out", sm_out, "sample-set JSON")->required();

  // fit
  auto* fit = app.add_subcommand("fit", "fit a baseline head: map, bbb, subensemble or gda");
  std::string ft_method, ft_features, ft_manifest, ft_out, ft_optimizer = "adam";
  double ft_prior = 1.0, ft_lr = 1e-2, ft_ridge = -1.0;
  int ft_epochs = 100, ft_batch = 32, ft_members = 10, ft_mc = 1;
  bool ft_shared = false;
  std::uint64_t ft_seed = 0;
  fit->add_option("--method", ft_method, "map, bbb, subensemble or gda")->required();
  fit->add_option("--features", ft_features, "latent CSV")->required();
  fit->add_option("--manifest", ft_manifest, "optional split manifest");
  fit->add_option("--prior-std", ft_prior, "prior std");
  fit->add_option("--optimizer", ft_optimizer, "adam or sgd");
  fit->add_option("--lr", ft_lr, "learning rate");
  fit->add_option("--epochs", ft_epochs, "epochs (L-BFGS iterations for map)");
  fit->add_option("--batch", ft_batch, "batch size (0 = full batch)");
  fit->add_option("--members", ft_members, "sub-ensemble size");
  fit->add_option("--mc-samples", ft_mc, "BBB draws per step");
  fit->add_option("--ridge", ft_ridge, "absolute GDA ridge (default relative)");
  fit->add_flag("--shared-covariance", ft_shared, "pooled GDA covariance");
  fit->add_option("--seed", ft_seed, "fit seed")->required();
  fit->add_option("--out", ft_out, "model JSON")->required();

  // evaluate
  auto* evaluate = app.add_subcommand("evaluate", "evaluate a fitted head or sample set on features");
  std::string ev_model, ev_features, ev_out;
  int ev_members = 0, ev_bins = 10;
  std::uint64_t ev_seed = 0;
  evaluate->add_option("--model", ev_model, "model or sample-set JSON")->required();
  evaluate->add_option("--features", ev_features, "latent CSV with labels")->required();
  evaluate->add_option("--n-members", ev_members, "members to draw (0 = all)");
  evaluate->add_option("--bins", ev_bins, "ACE bins");
  evaluate->add_option("--seed", ev_seed, "member-selection seed")->required();
  evaluate->add_option("--out", ev_out, "report JSON (stdout when omitted)");

  // Experiment-level commands share the configuration flags.
  ConfigFlags run_flags, ood_flags, grid_flags, curve_flags, heat_flags;
  std::uint64_t run_seed = 0, ood_seed = 0, heat_seed = 0;
  std::string run_out, ood_out, grid_out, curve_out, heat_out;

  auto* run = app.add_subcommand("run", "one end-to-end experiment");
  run_flags.attach(run);
  run->add_option("--seed", run_seed, "run seed")->required();
  run->add_option("--out", run_out, "record JSON (stdout when omitted)");

  auto* ood = app.add_subcommand("ood", "experiment on an OOD class-removal scenario");
  ood_flags.attach(ood);
  ood->add_option("--seed", ood_seed, "run seed")->required();
  ood->add_option("--out", ood_out, "record JSON (stdout when omitted)");

  auto* grid = app.add_subcommand("grid", "seeded grid search with summaries");
  grid_flags.attach(grid);
  std::vector<std::string> grid_axes;
  int grid_workers = 1;
  bool grid_default = false;
  grid->add_option("--axis", grid_axes, "axis as key=v1,v2,...; repeatable");
  grid->add_flag("--default-space", grid_default, "use the full LL-HMC hyperparameter space");
  grid->add_option("--workers", grid_workers, "concurrent runs");
  grid->add_option("--out", grid_out, "output directory (default: output_dir key)");

  auto* curve = app.add_subcommand("curve", "metrics versus number of dependent draws");
  curve_flags.attach(curve);
  curve->add_option("--out", curve_out, "curve CSV")->required();

  auto* heat = app.add_subcommand("heatmap", "uncertainty grid (classification) or band (regression)");
  heat_flags.attach(heat);
  int heat_res = 100;
  double hx0 = -2, hx1 = 3, hy0 = -1.5, hy1 = 2;
  std::string heat_task = "classification";
  heat->add_option("--task", heat_task, "classification or regression");
  heat->add_option("--resolution", heat_res, "points per axis");
  heat->add_option("--x-min", hx0, "grid x lower bound");
  heat->add_option("--x-max", hx1, "grid x upper bound");
  heat->add_option("--y-min", hy0, "grid y lower bound");
  heat->add_option("--y-max", hy1, "grid y upper bound");
  heat->add_option("--seed", heat_seed, "run seed")->required();
  heat->add_option("--out", heat_out, "output CSV")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*toy) {
      Rng rng(toy_seed);
      if (*moons) {
        save_latent_dataset(toydata::two_moons(toy_n, toy_noise, rng), toy_out);
      } else if (*sinus) {
        toydata::SinusoidConfig cfg;
        cfg.amplitude = toy_amplitude;
        save_regression_dataset(toydata::sinusoid_regression(toy_n, toy_noise, cfg, rng), toy_out);
      } else {
        save_latent_dataset(toydata::gaussian_clusters(cl_classes, cl_per_class, cl_dim, cl_sep, rng), toy_out);
      }
    } else if (*train) {
      auto data = training_rows(load_latent_dataset(tb_data), tb_manifest);
      backbone::MlpSpec spec;
      spec.layer_widths.push_back(static_cast<int>(data.dim()));
      spec.layer_widths.insert(spec.layer_widths.end(), tb_hidden.begin(), tb_hidden.end());
      spec.layer_widths.push_back(data.num_classes);
      spec.activation = backbone::parse_activation(tb_activation);
      backbone::OptimizerConfig opt;
      opt.method = backbone::parse_optimizer(tb_optimizer);
      opt.learning_rate = tb_lr;
      opt.epochs = tb_epochs;
      opt.batch_size = tb_batch;
      opt.weight_decay = tb_wd;
      Rng rng(tb_seed);
      auto result = backbone::train_mlp(data, spec, opt, rng);
      json j = result.mlp;
      j["loss_trace"] = result.loss_trace;
      write_json(tb_out, j);
    } else if (*extract) {
      auto mlp = read_json(ex_backbone).get<backbone::TrainedMlp>();
      auto data = load_latent_dataset(ex_data, mlp.spec.output_dim());
      save_latent_dataset({backbone::extract_features(mlp, data.features), data.labels, data.num_classes}, ex_out);
    } else if (*sample) {
      auto data = training_rows(load_latent_dataset(sm_features), sm_manifest);
      if (sm_step != "auto") sm_cfg.init_step_size = std::stod(sm_step);
      const model::GaussianPrior prior{sm_prior};
      auto target = model::posterior_target_classification(data, prior);
      std::vector<Vector> inits;
      Rng init_rng = Rng(sm_cfg.seed).split(1000);
      for (int c = 0; c < sm_cfg.chains; ++c) {
        Rng r = init_rng.split(static_cast<std::uint64_t>(c));
        if (sm_init == "prior") {
          inits.push_back(model::sample_prior(target.dim(), prior, r));
        } else if (sm_init == "uniform") {
          Vector v(target.dim());
          for (Index k = 0; k < v.size(); ++k) v[k] = -2.0 + 4.0 * r.uniform();
          inits.push_back(std::move(v));
        } else {
          throw std::invalid_argument("--init must be uniform or prior");
        }
      }
      auto set = sampler::run_chains(target, sm_cfg, inits);
      json j = set;
      j["method"] = "llhmc";
      j["num_classes"] = data.num_classes;
      j["feature_dim"] = data.dim();
      j["prior_std"] = sm_prior;
      write_json(sm_out, j);
      std::cerr << "draws " << set.total_draws() << ", divergences " << set.divergences()
                << ", mean acceptance " << set.mean_accept_stat() << "\n";
    } else if (*fit) {
      auto data = training_rows(load_latent_dataset(ft_features), ft_manifest);
      const model::GaussianPrior prior{ft_prior};
      backbone::OptimizerConfig opt;
      opt.method = backbone::parse_optimizer(ft_optimizer);
      opt.learning_rate = ft_lr;
      opt.epochs = ft_epochs;
      opt.batch_size = ft_batch;
      Rng rng(ft_seed);
      json j;
      if (ft_method == "map") {
        opt.batch_size = 0;
        j = {{"method", "map"}, {"head", baselines::fit_map_softmax(data, prior, opt, rng)}};
      } else if (ft_method == "bbb") {
        baselines::BbbOptions bbb;
        bbb.mc_samples = ft_mc;
        j = baselines::fit_bbb_last_layer(data, prior, opt, bbb, rng);
      } else if (ft_method == "subensemble") {
        j = baselines::fit_sub_ensemble(data, ft_members, prior, opt, rng);
      } else if (ft_method == "gda") {
        baselines::GdaOptions g;
        if (ft_ridge >= 0.0) g.ridge = ft_ridge;
        g.shared_covariance = ft_shared;
        j = baselines::fit_gda(data, g);
      } else {
        throw std::invalid_argument("unknown method '" + ft_method + "'");
      }
      write_json(ft_out, j);
    } else if (*evaluate) {
      json m = read_json(ev_model);
      const std::string method = m.at("method").get<std::string>();
      auto data = load_latent_dataset(ev_features);
      Rng rng(ev_seed);
      model::PredictiveBundle bundle;
      std::optional<Vector> density_scores;
      if (method == "map") {
        bundle = model::predict_proba(m.at("head").get<model::LastLayerClassifier>(), data.features);
      } else if (method == "bbb") {
        auto q = m.get<baselines::VariationalLastLayer>();
        bundle = baselines::sample_predictions(q, data.features, ev_members > 0 ? ev_members : 50, rng);
      } else if (method == "subensemble") {
        auto e = m.get<baselines::SubEnsemble>();
        bundle = baselines::sample_predictions(e, data.features,
                                               ev_members > 0 ? ev_members : static_cast<int>(e.members.size()), rng);
      } else if (method == "gda") {
        auto s = baselines::gda_scores(m.get<baselines::GdaModel>(), data.features);
        bundle = model::PredictiveBundle::from_members({s.posterior});
        density_scores = s.ood_score();
      } else if (method == "llhmc") {
        auto set = m.get<sampler::PosteriorSampleSet>();
        bundle = ev_members > 0 ? baselines::sample_predictions(set, data.features, ev_members, rng)
                                : sampler::predict_proba(set, data.features);
      } else {
        throw std::invalid_argument("unknown method tag '" + method + "'");
      }
      std::vector<int> labels = data.labels;
      const int k = static_cast<int>(bundle.mean.cols());
      for (int y : labels) {
        if (y >= k) throw DataError("label exceeds the model's class count");
      }
      json out = report_json(metrics::evaluate(bundle.mean, labels, ev_bins));
      out["members"] = bundle.num_members();
      if (density_scores) out["mean_ood_score"] = density_scores->mean();
      if (ev_out.empty()) {
        std::cout << out.dump(2) << "\n";
      } else {
        write_json(ev_out, out);
      }
    } else if (*run || *ood) {
      auto* cmd = *run ? run : ood;
      auto config = (*run ? run_flags : ood_flags).resolve(cmd);
      if (*ood && config.ood_mode == "none") throw std::invalid_argument("ood needs --ood_mode min or max");
      auto record = harness::run_experiment(config, *run ? run_seed : ood_seed);
      json j = record;
      const std::string& out = *run ? run_out : ood_out;
      if (out.empty()) {
        std::cout << j.dump(2) << "\n";
      } else {
        write_json(out, j);
      }
      if (!record.ok()) {
        std::cerr << "failed in " << record.error_phase << ": " << record.error << "\n";
        return 1;
      }
    } else if (*grid) {
      auto config = grid_flags.resolve(grid);
      harness::GridSpace space;
      if (grid_default) space = harness::default_llhmc_space();
      for (const auto& a : grid_axes) {
        const auto eq = a.find('=');
        if (eq == std::string::npos) throw std::invalid_argument("--axis expects key=v1,v2,...");
        harness::GridAxis axis{a.substr(0, eq), {}};
        std::stringstream ss(a.substr(eq + 1));
        std::string v;
        while (std::getline(ss, v, ',')) axis.values.push_back(v);
        space.axes.push_back(std::move(axis));
      }
      const std::string dir = grid_out.empty() ? config.output_dir : grid_out;
      auto result = harness::grid_search(config, space, config.seeds, dir, grid_workers);
      std::cerr << result.records.size() << " records (" << result.reused << " reused), "
                << result.failures << " failed\n";
      json summary = {{"per_seed_best", result.per_seed_best}, {"best_average", result.best_average}};
      std::cout << summary.dump(2) << "\n";
      return result.failures == 0 ? 0 : 1;
    } else if (*curve) {
      auto config = curve_flags.resolve(curve);
      if (config.method != harness::Method::llhmc) throw std::invalid_argument("curve needs method=llhmc");
      std::vector<harness::CurveInput> inputs;
      for (auto seed : config.seeds) {
        auto split = harness::load_data(config);
        LatentDataset tr = split.train, te = split.test;
        Matrix ood_inputs;
        if (config.ood_mode != "none") {
          auto s = harness::build_ood_scenario(split, config.ood_mode, config.ood_threshold);
          tr = s.train;
          te = s.id_test;
          ood_inputs = s.ood_inputs;
        }
        auto fitted = harness::fit_method(config, tr, seed, harness::default_backbone_seeds(seed, 1));
        const auto& start = fitted.starts.front();
        auto features = [&](const Matrix& x) {
          return start.backbone ? backbone::extract_features(*start.backbone, x) : x;
        };
        harness::CurveInput in;
        in.samples = std::get<sampler::PosteriorSampleSet>(start.state);
        in.test_features = features(te.features);
        in.test_labels = te.labels;
        in.num_classes = te.num_classes;
        if (ood_inputs.rows() > 0) in.ood_features = features(ood_inputs);
        inputs.push_back(std::move(in));
      }
      auto points = harness::dependent_sample_curve(inputs);
      std::ostringstream o;
      o.precision(17);
      o << "draws,f1_mean,f1_std,pr_auc_mean,pr_auc_std\n";
      for (const auto& p : points) {
        o << p.draws << ',' << p.f1_mean << ',' << p.f1_std << ',';
        if (std::isfinite(p.pr_auc_mean)) o << p.pr_auc_mean << ',' << p.pr_auc_std;
        else o << ',';
        o << '\n';
      }
      write_file_atomic(curve_out, o.str());
    } else if (*heat) {
      auto config = heat_flags.resolve(heat);
      if (heat_task == "regression") {
        harness::RegressionToyConfig rc;
        rc.prior_std = config.prior_std;
        rc.burn_in = config.burn_in;
        rc.samples = config.samples;
        rc.target_accept = config.target_accept;
        rc.resolution = heat_res;
        auto band = harness::regression_band(rc, config.method, heat_seed);
        harness::emit_regression_band(band, heat_out);
      } else if (heat_task == "classification") {
        auto split = harness::load_data(config);
        auto fitted = harness::fit_method(config, split.train, heat_seed,
                                          harness::default_backbone_seeds(heat_seed, config.starts));
        harness::emit_uncertainty_grid(fitted, toydata::make_grid({hx0, hx1}, {hy0, hy1}, heat_res), heat_out);
      } else {
        throw std::invalid_argument("--task must be classification or regression");
      }
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
