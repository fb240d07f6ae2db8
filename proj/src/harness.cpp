#include "llhmc/harness.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <mutex>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

namespace llhmc::harness {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// Stream ids under the run seed.
constexpr std::uint64_t kBackboneStream = 1;
constexpr std::uint64_t kMethodStream = 2;
constexpr std::uint64_t kPredictStream = 3;

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

double parse_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto s = trim(v);
  auto res = std::from_chars(s.data(), s.data() + s.size(), out);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw std::invalid_argument("key '" + key + "': '" + v + "' is not a number");
  }
  return out;
}

template <typename Int>
Int parse_int(const std::string& key, const std::string& v) {
  Int out = 0;
  const auto s = trim(v);
  auto res = std::from_chars(s.data(), s.data() + s.size(), out);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw std::invalid_argument("key '" + key + "': '" + v + "' is not an integer");
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  const auto s = trim(v);
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw std::invalid_argument("key '" + key + "': '" + v + "' is not a boolean");
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <typename T>
std::string join(const std::vector<T>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(v[i]);
  }
  return out;
}

std::string fnv_hex(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::vector<ConfigKey> build_keys() {
  using C = ExperimentConfig;
  std::vector<ConfigKey> keys;
  auto add = [&](std::string name, std::string help, auto get, auto set) {
    keys.push_back({std::move(name), std::move(help), get, set});
  };
#define LLHMC_STR(field, help)                                              \
  add(#field, help, [](const C& c) { return c.field; },                     \
      [](C& c, const std::string& v) { c.field = trim(v); })
#define LLHMC_INT(field, help)                                              \
  add(#field, help, [](const C& c) { return std::to_string(c.field); },     \
      [](C& c, const std::string& v) { c.field = parse_int<int>(#field, v); })
#define LLHMC_U64(field, help)                                              \
  add(#field, help, [](const C& c) { return std::to_string(c.field); },     \
      [](C& c, const std::string& v) { c.field = parse_int<std::uint64_t>(#field, v); })
#define LLHMC_DBL(field, help)                                              \
  add(#field, help, [](const C& c) { return format_double(c.field); },      \
      [](C& c, const std::string& v) { c.field = parse_double(#field, v); })
#define LLHMC_BOOL(field, help)                                             \
  add(#field, help, [](const C& c) { return std::string(c.field ? "true" : "false"); }, \
      [](C& c, const std::string& v) { c.field = parse_bool(#field, v); })
#define LLHMC_OPT(field, help)                                              \
  add(#field, help,                                                         \
      [](const C& c) { return c.field ? format_double(*c.field) : std::string("auto"); }, \
      [](C& c, const std::string& v) {                                      \
        if (trim(v) == "auto") c.field.reset(); else c.field = parse_double(#field, v); })

  LLHMC_STR(source, "data source: moons, clusters or csv");
  LLHMC_INT(n_samples, "two-moons sample count");
  LLHMC_DBL(noise, "two-moons noise std");
  LLHMC_DBL(test_fraction, "stratified test fraction when no manifest is given");
  LLHMC_U64(data_seed, "seed of the data generator and split");
  LLHMC_INT(cluster_classes, "Gaussian-cluster class count");
  LLHMC_INT(cluster_per_class, "Gaussian-cluster rows per class");
  LLHMC_INT(cluster_dim, "Gaussian-cluster dimension");
  LLHMC_DBL(cluster_separation, "distance between cluster centres");
  LLHMC_STR(csv, "dataset CSV for source=csv");
  LLHMC_STR(manifest, "optional JSON manifest with the split");
  LLHMC_BOOL(latent_input, "treat inputs as latent features (no backbone)");
  add("hidden", "backbone hidden widths, comma separated",
      [](const C& c) { return join(c.hidden); },
      [](C& c, const std::string& v) {
        c.hidden.clear();
        for (const auto& s : split_list(v)) c.hidden.push_back(parse_int<int>("hidden", s));
      });
  LLHMC_STR(activation, "backbone activation: relu or tanh");
  LLHMC_STR(backbone_optimizer, "backbone optimizer: adam or sgd");
  LLHMC_DBL(backbone_lr, "backbone learning rate");
  LLHMC_INT(backbone_epochs, "backbone epochs");
  LLHMC_INT(backbone_batch, "backbone batch size (0 = full batch)");
  LLHMC_DBL(backbone_weight_decay, "backbone L2 weight decay");
  add("method", "llhmc, full_hmc, map, bbb, subensemble or gda",
      [](const C& c) { return to_string(c.method); },
      [](C& c, const std::string& v) { c.method = parse_method(trim(v)); });
  LLHMC_DBL(prior_std, "Gaussian prior std of the sampled or fitted parameters");
  LLHMC_INT(burn_in, "burn-in transitions per chain");
  LLHMC_INT(samples, "retained draws, split over starts and chains");
  LLHMC_INT(chains, "chains per start");
  LLHMC_DBL(target_accept, "dual-averaging target acceptance");
  LLHMC_INT(max_tree_depth, "NUTS maximum tree depth");
  LLHMC_OPT(init_step_size, "initial step size or auto");
  LLHMC_STR(init_strategy, "chain start: uniform, prior or trained");
  LLHMC_INT(n_members, "members used for prediction (0 = all)");
  LLHMC_INT(starts, "starting positions (independent backbones)");
  LLHMC_INT(ensemble_size, "sub-ensemble member count");
  LLHMC_STR(head_optimizer, "head optimizer for bbb and subensemble: adam or sgd");
  LLHMC_DBL(head_lr, "head learning rate");
  LLHMC_INT(head_epochs, "head epochs (L-BFGS iterations for map)");
  LLHMC_INT(head_batch, "head batch size (0 = full batch)");
  LLHMC_INT(bbb_mc_samples, "reparameterized draws per BBB step");
  LLHMC_OPT(gda_ridge, "absolute GDA ridge or auto (relative)");
  LLHMC_DBL(gda_relative_ridge, "GDA ridge as a fraction of trace/D");
  LLHMC_BOOL(gda_shared_covariance, "one pooled GDA covariance");
  LLHMC_INT(full_hmc_max_dim, "parameter cap for full-network HMC");
  LLHMC_STR(ood_mode, "OOD scenario: none, min or max");
  LLHMC_INT(ood_threshold, "min mode: remove classes with fewer training rows (0 = off)");
  LLHMC_INT(ace_bins, "ACE bin count");
  add("seeds", "run seeds, comma separated",
      [](const C& c) { return join(c.seeds); },
      [](C& c, const std::string& v) {
        c.seeds.clear();
        for (const auto& s : split_list(v)) c.seeds.push_back(parse_int<std::uint64_t>("seeds", s));
      });
  LLHMC_STR(output_dir, "directory for records and tables");
#undef LLHMC_STR
#undef LLHMC_INT
#undef LLHMC_U64
#undef LLHMC_DBL
#undef LLHMC_BOOL
#undef LLHMC_OPT
  return keys;
}

const ConfigKey& find_key(const std::string& key) {
  for (const auto& k : config_keys()) {
    if (k.name == key) return k;
  }
  throw std::invalid_argument("unknown configuration key '" + key + "'");
}

}  // namespace

std::string to_string(Method m) {
  switch (m) {
    case Method::llhmc: return "llhmc";
    case Method::full_hmc: return "full_hmc";
    case Method::map: return "map";
    case Method::bbb: return "bbb";
    case Method::subensemble: return "subensemble";
    case Method::gda: return "gda";
  }
  return "unknown";
}

Method parse_method(const std::string& s) {
  for (Method m : {Method::llhmc, Method::full_hmc, Method::map, Method::bbb, Method::subensemble,
                   Method::gda}) {
    if (to_string(m) == s) return m;
  }
  throw std::invalid_argument("unknown method '" + s + "'");
}

void ExperimentConfig::validate() const {
  if (source != "moons" && source != "clusters" && source != "csv") {
    throw std::invalid_argument("source must be moons, clusters or csv");
  }
  if (source == "csv" && csv.empty()) throw std::invalid_argument("source=csv needs a csv path");
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw std::invalid_argument("test_fraction must lie in (0, 1)");
  if (hidden.empty() && !latent_input) throw std::invalid_argument("hidden needs at least one width");
  for (int h : hidden) {
    if (h < 1) throw std::invalid_argument("hidden widths must be positive");
  }
  backbone::parse_activation(activation);
  backbone::parse_optimizer(backbone_optimizer);
  backbone::parse_optimizer(head_optimizer);
  if (!(prior_std > 0.0)) throw std::invalid_argument("prior_std must be positive");
  if (init_strategy != "uniform" && init_strategy != "prior" && init_strategy != "trained") {
    throw std::invalid_argument("init_strategy must be uniform, prior or trained");
  }
  if (starts < 1) throw std::invalid_argument("starts must be at least 1");
  if (samples < starts) throw std::invalid_argument("samples must be at least starts");
  if (n_members < 0) throw std::invalid_argument("n_members must be non-negative");
  if (method == Method::full_hmc && latent_input) {
    throw std::invalid_argument("full_hmc needs a backbone (latent_input=false)");
  }
  if (ood_mode != "none" && ood_mode != "min" && ood_mode != "max") {
    throw std::invalid_argument("ood_mode must be none, min or max");
  }
  if (ood_threshold < 0) throw std::invalid_argument("ood_threshold must be non-negative");
  if (ood_threshold > 0 && ood_mode != "min") throw std::invalid_argument("ood_threshold needs ood_mode=min");
  if (ace_bins < 1) throw std::invalid_argument("ace_bins must be positive");
  if (seeds.empty()) throw std::invalid_argument("seeds must not be empty");
  sampler::SamplerConfig sc;
  sc.burn_in = burn_in;
  sc.samples = samples;
  sc.chains = chains;
  sc.target_accept = target_accept;
  sc.max_tree_depth = max_tree_depth;
  sc.init_step_size = init_step_size;
  sc.validate();
}

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = build_keys();
  return keys;
}

void set_config_value(ExperimentConfig& config, const std::string& key, const std::string& value) {
  find_key(key).set(config, value);
}

std::string get_config_value(const ExperimentConfig& config, const std::string& key) {
  return find_key(key).get(config);
}

ExperimentConfig parse_config_text(const std::string& text) {
  ExperimentConfig config;
  std::stringstream ss(text);
  std::string line;
  int line_no = 0;
  while (std::getline(ss, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw DataError("config line " + std::to_string(line_no) + ": expected key = value");
    }
    try {
      set_config_value(config, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const std::invalid_argument& e) {
      throw DataError("config line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return config;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

std::string config_to_text(const ExperimentConfig& config) {
  std::string out;
  for (const auto& k : config_keys()) out += k.name + " = " + k.get(config) + "\n";
  return out;
}

std::string config_hash(const ExperimentConfig& config) {
  std::string text;
  for (const auto& k : config_keys()) {
    if (k.name == "seeds" || k.name == "output_dir") continue;
    text += k.name + "=" + k.get(config) + "\n";
  }
  return fnv_hex(text);
}

DataSplit load_data(const ExperimentConfig& config) {
  Rng data_rng(config.data_seed);
  LatentDataset all;
  std::optional<DatasetManifest> manifest;
  if (config.source == "moons") {
    Rng gen = data_rng.split(0);
    all = toydata::two_moons(config.n_samples, config.noise, gen);
  } else if (config.source == "clusters") {
    Rng gen = data_rng.split(0);
    all = toydata::gaussian_clusters(config.cluster_classes, config.cluster_per_class,
                                     config.cluster_dim, config.cluster_separation, gen);
  } else {
    std::optional<int> k;
    if (!config.manifest.empty()) {
      manifest = load_manifest(config.manifest);
      k = manifest->num_classes;
    }
    all = load_latent_dataset(config.csv, k);
  }
  toydata::Split split;
  if (manifest && !manifest->train.empty()) {
    for (auto i : manifest->train) {
      if (i >= static_cast<std::size_t>(all.size())) throw DataError("manifest index out of range");
    }
    for (auto i : manifest->test) {
      if (i >= static_cast<std::size_t>(all.size())) throw DataError("manifest index out of range");
    }
    split.train = manifest->train;
    split.test = manifest->test;
  } else {
    Rng split_rng = data_rng.split(1);
    split = toydata::stratified_split(all, config.test_fraction, split_rng);
  }
  return {all.subset(split.train), all.subset(split.test)};
}

OodScenario build_ood_scenario(const DataSplit& data, const std::string& mode, int threshold) {
  const int k_classes = data.train.num_classes;
  if (k_classes < 3) throw std::invalid_argument("an OOD scenario needs at least three classes");
  if (data.test.num_classes != k_classes) throw std::invalid_argument("train and test class counts differ");
  if (mode != "min" && mode != "max") throw std::invalid_argument("OOD mode must be min or max");
  if (threshold < 0) throw std::invalid_argument("threshold must be non-negative");
  if (threshold > 0 && mode != "min") throw std::invalid_argument("a threshold applies to min mode only");
  const auto counts = data.train.class_counts();

  OodScenario s;
  s.mode = mode;
  if (threshold > 0) {
    for (int k = 0; k < k_classes; ++k) {
      if (counts[static_cast<std::size_t>(k)] < static_cast<std::size_t>(threshold)) s.removed_classes.push_back(k);
    }
    if (s.removed_classes.empty()) throw Error("no class has fewer training rows than the threshold");
  } else {
    int pick = 0;
    for (int k = 1; k < k_classes; ++k) {
      const auto c = counts[static_cast<std::size_t>(k)];
      const auto best = counts[static_cast<std::size_t>(pick)];
      if (mode == "max" ? c > best : c < best) pick = k;
    }
    s.removed_classes.push_back(pick);
  }
  if (k_classes - static_cast<int>(s.removed_classes.size()) < 2) {
    throw Error("class removal leaves fewer than two classes");
  }
  s.label_map.assign(static_cast<std::size_t>(k_classes), -1);
  int next = 0;
  for (int k = 0; k < k_classes; ++k) {
    if (std::find(s.removed_classes.begin(), s.removed_classes.end(), k) == s.removed_classes.end()) {
      s.label_map[static_cast<std::size_t>(k)] = next++;
    }
  }
  std::vector<Index> ood_rows_train, ood_rows_test;
  auto reduce = [&](const LatentDataset& d, std::vector<Index>& ood_rows) {
    std::vector<std::size_t> keep;
    for (Index i = 0; i < d.size(); ++i) {
      if (s.label_map[static_cast<std::size_t>(d.labels[static_cast<std::size_t>(i)])] >= 0) {
        keep.push_back(static_cast<std::size_t>(i));
      } else {
        ood_rows.push_back(i);
      }
    }
    LatentDataset out = d.subset(keep);
    for (auto& y : out.labels) y = s.label_map[static_cast<std::size_t>(y)];
    out.num_classes = next;
    return out;
  };
  s.train = reduce(data.train, ood_rows_train);
  s.id_test = reduce(data.test, ood_rows_test);
  const Index d = data.train.dim();
  s.ood_inputs.resize(static_cast<Index>(ood_rows_train.size() + ood_rows_test.size()), d);
  Index r = 0;
  for (Index i : ood_rows_train) s.ood_inputs.row(r++) = data.train.features.row(i);
  for (Index i : ood_rows_test) s.ood_inputs.row(r++) = data.test.features.row(i);
  if (s.ood_inputs.rows() == 0) throw Error("the OOD set is empty");
  for (int y : s.train.labels) {
    if (y < 0 || y >= next) throw Error("removed-class row leaked into the reduced train set");
  }
  for (int y : s.id_test.labels) {
    if (y < 0 || y >= next) throw Error("removed-class row leaked into the ID test set");
  }
  return s;
}

namespace {

backbone::OptimizerConfig head_optimizer(const ExperimentConfig& c) {
  backbone::OptimizerConfig opt;
  opt.method = backbone::parse_optimizer(c.head_optimizer);
  opt.learning_rate = c.head_lr;
  opt.epochs = c.head_epochs;
  opt.batch_size = c.head_batch;
  return opt;
}

int share(int total, int parts, int i) { return total / parts + (i < total % parts ? 1 : 0); }

// Draws of a sample set used for prediction: every draw when n == 0,
// otherwise n draws split over chains and chosen without replacement.
std::vector<Vector> selected_draws(const sampler::PosteriorSampleSet& set, int n, Rng& rng) {
  if (n == 0) return set.all_draws();
  if (static_cast<std::size_t>(n) > set.total_draws()) {
    throw std::invalid_argument("requested more members than the sample set holds");
  }
  std::vector<Vector> out;
  const int chains = static_cast<int>(set.chains.size());
  for (int c = 0; c < chains; ++c) {
    const auto& draws = set.chains[static_cast<std::size_t>(c)].draws;
    Rng chain_rng = rng.split(static_cast<std::uint64_t>(c));
    for (auto i : baselines::choose_without_replacement(static_cast<std::size_t>(draws.rows()),
                                                        static_cast<std::size_t>(share(n, chains, c)),
                                                        chain_rng)) {
      out.emplace_back(draws.row(static_cast<Index>(i)).transpose());
    }
  }
  return out;
}

Matrix start_features(const StartModel& s, const Matrix& inputs) {
  return s.backbone ? backbone::extract_features(*s.backbone, inputs) : inputs;
}

}  // namespace

std::vector<std::uint64_t> default_backbone_seeds(std::uint64_t seed, int starts) {
  std::vector<std::uint64_t> out;
  Rng root = Rng(seed).split(kBackboneStream);
  for (int i = 0; i < starts; ++i) out.push_back(root.split(static_cast<std::uint64_t>(i)).key());
  return out;
}

FittedMethod fit_method(const ExperimentConfig& config, const LatentDataset& train,
                        std::uint64_t seed, std::span<const std::uint64_t> backbone_seeds) {
  config.validate();
  train.validate();
  if (backbone_seeds.empty()) throw std::invalid_argument("at least one backbone seed is required");
  const int n_starts = static_cast<int>(backbone_seeds.size());
  if (config.samples < n_starts) throw std::invalid_argument("samples must be at least the number of starts");
  const model::GaussianPrior prior{config.prior_std};

  FittedMethod fitted;
  fitted.method = config.method;
  fitted.prediction_seed = Rng(seed).split(kPredictStream).key();
  fitted.n_members = config.n_members;
  if (config.method == Method::bbb && fitted.n_members == 0) fitted.n_members = config.samples;

  for (int i = 0; i < n_starts; ++i) {
    StartModel start;
    start.input_dim = train.dim();
    Rng method_rng = Rng(seed).split(kMethodStream).split(static_cast<std::uint64_t>(i));
    backbone::MlpSpec spec;
    Matrix features = train.features;
    if (!config.latent_input) {
      spec.layer_widths.push_back(static_cast<int>(train.dim()));
      for (int h : config.hidden) spec.layer_widths.push_back(h);
      spec.layer_widths.push_back(train.num_classes);
      spec.activation = backbone::parse_activation(config.activation);
      spec.task = backbone::Task::classification;
      backbone::OptimizerConfig opt;
      opt.method = backbone::parse_optimizer(config.backbone_optimizer);
      opt.learning_rate = config.backbone_lr;
      opt.epochs = config.backbone_epochs;
      opt.batch_size = config.backbone_batch;
      opt.weight_decay = config.backbone_weight_decay;
      Rng backbone_rng(backbone_seeds[static_cast<std::size_t>(i)]);
      start.backbone = backbone::train_mlp(train, spec, opt, backbone_rng).mlp;
      features = backbone::extract_features(*start.backbone, train.features);
    }
    LatentDataset latent{features, train.labels, train.num_classes};
    start.feature_hash = dataset_hash(latent);

    const bool sampled = config.method == Method::llhmc || config.method == Method::full_hmc;
    if (sampled) {
      sampler::SamplerConfig sc;
      sc.burn_in = config.burn_in;
      sc.samples = share(config.samples, n_starts, i);
      sc.chains = config.chains;
      sc.target_accept = config.target_accept;
      sc.max_tree_depth = config.max_tree_depth;
      sc.init_step_size = config.init_step_size;
      sc.seed = method_rng.split(0).key();
      if (sc.samples < 1) throw std::invalid_argument("a start received no draws");

      std::unique_ptr<model::DifferentiableTarget> target;
      Vector trained;
      if (config.method == Method::llhmc) {
        target = std::make_unique<model::ClassificationPosterior>(latent, prior);
        if (config.init_strategy == "trained") {
          if (start.backbone) {
            const auto& last = start.backbone->last_layer();
            trained = model::LastLayerClassifier{last.weights, last.bias}.flatten();
          } else {
            backbone::OptimizerConfig map_opt = head_optimizer(config);
            map_opt.batch_size = 0;
            Rng map_rng = method_rng.split(1);
            trained = baselines::fit_map_softmax(latent, prior, map_opt, map_rng).flatten();
          }
        }
      } else {
        target = std::make_unique<model::FullNetworkPosterior>(
            spec, train.features, train.labels, Vector(), prior, 0.1,
            static_cast<Index>(config.full_hmc_max_dim));
        trained = start.backbone->flatten();
      }
      std::vector<Vector> inits;
      for (int c = 0; c < config.chains; ++c) {
        Rng init_rng = method_rng.split(2).split(static_cast<std::uint64_t>(c));
        if (config.init_strategy == "trained") {
          inits.push_back(trained);
        } else if (config.init_strategy == "prior") {
          inits.push_back(model::sample_prior(target->dim(), prior, init_rng));
        } else {
          Vector v(target->dim());
          for (Index k = 0; k < v.size(); ++k) v[k] = -2.0 + 4.0 * init_rng.uniform();
          inits.push_back(std::move(v));
        }
      }
      auto set = sampler::run_chains(*target, sc, inits);
      if (config.method == Method::llhmc) {
        start.state = std::move(set);
      } else {
        start.state = FullNetworkSamples{spec, std::move(set)};
      }
    } else if (config.method == Method::map) {
      backbone::OptimizerConfig opt = head_optimizer(config);
      opt.batch_size = 0;
      start.state = baselines::fit_map_softmax(latent, prior, opt, method_rng);
    } else if (config.method == Method::bbb) {
      baselines::BbbOptions bbb;
      bbb.mc_samples = config.bbb_mc_samples;
      start.state = baselines::fit_bbb_last_layer(latent, prior, head_optimizer(config), bbb, method_rng);
    } else if (config.method == Method::subensemble) {
      start.state = baselines::fit_sub_ensemble(latent, config.ensemble_size, prior,
                                                head_optimizer(config), method_rng);
    } else {
      baselines::GdaOptions g;
      g.ridge = config.gda_ridge;
      g.relative_ridge = config.gda_relative_ridge;
      g.shared_covariance = config.gda_shared_covariance;
      start.state = baselines::fit_gda(latent, g);
    }
    fitted.starts.push_back(std::move(start));
  }
  return fitted;
}

model::PredictiveBundle FittedMethod::predict(const Matrix& inputs) const {
  std::vector<model::PredictiveBundle> bundles;
  const int n_starts = static_cast<int>(starts.size());
  for (int i = 0; i < n_starts; ++i) {
    const auto& s = starts[static_cast<std::size_t>(i)];
    Rng rng = Rng(prediction_seed).split(static_cast<std::uint64_t>(i));
    const int n = n_members > 0 ? share(n_members, n_starts, i) : 0;
    if (n_members > 0 && n < 1) throw std::invalid_argument("n_members must be at least the number of starts");
    const Matrix features = start_features(s, inputs);
    bundles.push_back(std::visit(
        [&](const auto& st) -> model::PredictiveBundle {
          using T = std::decay_t<decltype(st)>;
          if constexpr (std::is_same_v<T, model::LastLayerClassifier>) {
            return model::predict_proba(st, features);
          } else if constexpr (std::is_same_v<T, baselines::VariationalLastLayer>) {
            return baselines::sample_predictions(st, features, n, rng);
          } else if constexpr (std::is_same_v<T, baselines::SubEnsemble>) {
            return baselines::sample_predictions(st, features,
                                                 n > 0 ? n : static_cast<int>(st.members.size()), rng);
          } else if constexpr (std::is_same_v<T, baselines::GdaModel>) {
            return model::PredictiveBundle::from_members({baselines::gda_scores(st, features).posterior});
          } else if constexpr (std::is_same_v<T, sampler::PosteriorSampleSet>) {
            auto draws = selected_draws(st, n, rng);
            return model::predict_proba(draws, features);
          } else {
            std::vector<Matrix> members;
            for (const auto& theta : selected_draws(st.samples, n, rng)) {
              auto mlp = backbone::TrainedMlp::unflatten(st.spec, theta);
              members.push_back(softmax_rows(backbone::forward(mlp, inputs)));
            }
            return model::PredictiveBundle::from_members(std::move(members));
          }
        },
        s.state));
  }
  return model::merge_bundles(bundles);
}

Vector FittedMethod::ood_scores(const Matrix& inputs) const {
  if (method != Method::gda) return predict(inputs).entropy;
  Vector total = Vector::Zero(inputs.rows());
  for (const auto& s : starts) {
    total += baselines::gda_scores(std::get<baselines::GdaModel>(s.state), start_features(s, inputs)).ood_score();
  }
  return total / static_cast<double>(starts.size());
}

Diagnostics diagnose(const FittedMethod& fitted) {
  Diagnostics d;
  d.rhat_histogram.assign(5, 0);
  std::vector<double> ess_values;
  double accept_sum = 0.0;
  std::size_t accept_n = 0;
  for (const auto& s : fitted.starts) {
    const sampler::PosteriorSampleSet* set = nullptr;
    if (const auto* p = std::get_if<sampler::PosteriorSampleSet>(&s.state)) set = p;
    if (const auto* p = std::get_if<FullNetworkSamples>(&s.state)) set = &p->samples;
    if (set == nullptr) continue;
    d.divergences += set->divergences();
    for (const auto& c : set->chains) {
      d.warmup_divergences += c.warmup_divergences;
      for (const auto& st : c.stats) {
        accept_sum += st.accept_stat;
        ++accept_n;
      }
    }
    const std::size_t n_chains = set->chains.size();
    bool rhat_ok = n_chains >= 2;
    for (const auto& c : set->chains) rhat_ok = rhat_ok && c.draws.rows() >= 2;
    for (Index p = 0; p < set->dim(); ++p) {
      std::vector<std::vector<double>> traces;
      double ess = 0.0;
      bool ess_ok = true;
      for (std::size_t c = 0; c < n_chains; ++c) {
        traces.push_back(set->trace(c, p));
        try {
          ess += metrics::effective_sample_size(traces.back());
        } catch (const std::exception&) {
          ess_ok = false;
        }
      }
      if (ess_ok) ess_values.push_back(ess);
      if (rhat_ok) {
        try {
          const double r = metrics::gelman_rhat(traces);
          d.rhat.push_back(r);
          const int bin = r < 1.01 ? 0 : r < 1.05 ? 1 : r < 1.1 ? 2 : r < 1.2 ? 3 : 4;
          ++d.rhat_histogram[static_cast<std::size_t>(bin)];
        } catch (const MetricUndefined&) {
        }
      }
    }
  }
  if (!ess_values.empty()) {
    std::sort(ess_values.begin(), ess_values.end());
    const std::size_t n = ess_values.size();
    EssSummary e;
    e.min = ess_values.front();
    e.max = ess_values.back();
    e.median = n % 2 ? ess_values[n / 2] : 0.5 * (ess_values[n / 2 - 1] + ess_values[n / 2]);
    e.mean = metrics::mean(ess_values);
    d.ess = e;
  }
  d.mean_accept_stat = accept_n > 0 ? accept_sum / static_cast<double>(accept_n) : 0.0;
  return d;
}

RunRecord multi_start_run(const ExperimentConfig& config, std::uint64_t seed,
                          std::span<const std::uint64_t> backbone_seeds) {
  const auto t0 = std::chrono::steady_clock::now();
  RunRecord r;
  r.config = config;
  r.seed = seed;
  std::string phase = "config";
  try {
    r.config_hash = config_hash(config);
    config.validate();
    phase = "data";
    DataSplit split = load_data(config);
    LatentDataset train = std::move(split.train);
    LatentDataset test = std::move(split.test);
    Matrix ood_inputs;
    const bool with_ood = config.ood_mode != "none";
    if (with_ood) {
      phase = "ood_scenario";
      auto scenario = build_ood_scenario({train, test}, config.ood_mode, config.ood_threshold);
      train = std::move(scenario.train);
      test = std::move(scenario.id_test);
      ood_inputs = std::move(scenario.ood_inputs);
    }
    phase = "fit";
    FittedMethod fitted = fit_method(config, train, seed, backbone_seeds);
    for (const auto& s : fitted.starts) r.feature_hashes.push_back(s.feature_hash);
    phase = "predict";
    auto bundle = fitted.predict(test.features);
    r.members = static_cast<int>(bundle.num_members());
    phase = "evaluate";
    r.evaluation = metrics::evaluate(bundle.mean, test.labels, config.ace_bins);
    if (with_ood) {
      Vector id_scores = config.method == Method::gda ? fitted.ood_scores(test.features) : bundle.entropy;
      Vector ood_scores = fitted.ood_scores(ood_inputs);
      std::vector<double> scores(id_scores.data(), id_scores.data() + id_scores.size());
      scores.insert(scores.end(), ood_scores.data(), ood_scores.data() + ood_scores.size());
      std::vector<bool> is_ood(static_cast<std::size_t>(id_scores.size()), false);
      is_ood.resize(scores.size(), true);
      r.ood = metrics::roc_pr_fpr95(scores, is_ood);
    }
    phase = "diagnostics";
    r.diagnostics = diagnose(fitted);
  } catch (const std::exception& e) {
    r.error_phase = phase;
    r.error = e.what();
  }
  r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

RunRecord run_experiment(const ExperimentConfig& config, std::uint64_t seed) {
  const auto seeds = default_backbone_seeds(seed, std::max(1, config.starts));
  return multi_start_run(config, seed, seeds);
}

namespace {

nlohmann::json num(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

double get_num(const nlohmann::json& j, const char* key) {
  const auto& v = j.at(key);
  return v.is_null() ? kNaN : v.get<double>();
}

}  // namespace

void to_json(nlohmann::json& j, const RunRecord& r) {
  nlohmann::json cfg = nlohmann::json::object();
  for (const auto& k : config_keys()) cfg[k.name] = k.get(r.config);
  j = nlohmann::json::object();
  j["config"] = std::move(cfg);
  j["seed"] = r.seed;
  j["config_hash"] = r.config_hash;
  j["evaluation"] = {{"accuracy", num(r.evaluation.accuracy)},
                     {"macro_f1", num(r.evaluation.macro_f1)},
                     {"ace", num(r.evaluation.ace)},
                     {"raulc", num(r.evaluation.raulc)},
                     {"mean_entropy", num(r.evaluation.mean_entropy)}};
  if (r.ood) {
    j["ood"] = {{"roc_auc", num(r.ood->roc_auc)}, {"pr_auc", num(r.ood->pr_auc)}, {"fpr95", num(r.ood->fpr95)}};
  } else {
    j["ood"] = nullptr;
  }
  nlohmann::json diag = {{"divergences", r.diagnostics.divergences},
                         {"warmup_divergences", r.diagnostics.warmup_divergences},
                         {"mean_accept_stat", num(r.diagnostics.mean_accept_stat)},
                         {"rhat_histogram", r.diagnostics.rhat_histogram}};
  auto rhat = nlohmann::json::array();
  for (double v : r.diagnostics.rhat) rhat.push_back(num(v));
  diag["rhat"] = std::move(rhat);
  if (r.diagnostics.ess) {
    const auto& e = *r.diagnostics.ess;
    diag["ess"] = {{"min", num(e.min)}, {"median", num(e.median)}, {"mean", num(e.mean)}, {"max", num(e.max)}};
  } else {
    diag["ess"] = nullptr;
  }
  j["diagnostics"] = std::move(diag);
  j["feature_hashes"] = r.feature_hashes;
  j["members"] = r.members;
  j["wall_seconds"] = r.wall_seconds;
  j["error_phase"] = r.error_phase;
  j["error"] = r.error;
}

void from_json(const nlohmann::json& j, RunRecord& r) {
  r.config = ExperimentConfig{};
  for (const auto& [key, value] : j.at("config").items()) set_config_value(r.config, key, value.get<std::string>());
  r.seed = j.at("seed").get<std::uint64_t>();
  r.config_hash = j.at("config_hash").get<std::string>();
  const auto& ev = j.at("evaluation");
  r.evaluation = {get_num(ev, "accuracy"), get_num(ev, "macro_f1"), get_num(ev, "ace"),
                  get_num(ev, "raulc"), get_num(ev, "mean_entropy")};
  if (j.at("ood").is_null()) {
    r.ood.reset();
  } else {
    const auto& o = j.at("ood");
    r.ood = metrics::OodReport{get_num(o, "roc_auc"), get_num(o, "pr_auc"), get_num(o, "fpr95")};
  }
  const auto& d = j.at("diagnostics");
  r.diagnostics.divergences = d.at("divergences").get<int>();
  r.diagnostics.warmup_divergences = d.at("warmup_divergences").get<int>();
  r.diagnostics.mean_accept_stat = get_num(d, "mean_accept_stat");
  r.diagnostics.rhat_histogram = d.at("rhat_histogram").get<std::vector<int>>();
  r.diagnostics.rhat.clear();
  for (const auto& v : d.at("rhat")) r.diagnostics.rhat.push_back(v.is_null() ? kNaN : v.get<double>());
  if (d.at("ess").is_null()) {
    r.diagnostics.ess.reset();
  } else {
    const auto& e = d.at("ess");
    r.diagnostics.ess = EssSummary{get_num(e, "min"), get_num(e, "median"), get_num(e, "mean"), get_num(e, "max")};
  }
  r.feature_hashes = j.at("feature_hashes").get<std::vector<std::string>>();
  r.members = j.at("members").get<int>();
  r.wall_seconds = j.at("wall_seconds").get<double>();
  r.error_phase = j.at("error_phase").get<std::string>();
  r.error = j.at("error").get<std::string>();
}

std::string record_fingerprint(const RunRecord& r) {
  nlohmann::json j = r;
  j.erase("wall_seconds");
  return j.dump();
}

std::string csv_header() {
  return "config_hash,seed,method,prior_std,burn_in,target_accept,chains,samples,accuracy,macro_f1,"
         "ace,raulc,mean_entropy,roc_auc,pr_auc,fpr95,divergences,rhat_below_1_1,ess_min,members,"
         "wall_seconds,error_phase,error";
}

std::string csv_row(const RunRecord& r) {
  auto f = [](double v) { return std::isfinite(v) ? format_double(v) : std::string(); };
  std::string rhat_frac;
  if (!r.diagnostics.rhat.empty()) {
    std::size_t below = 0;
    for (double v : r.diagnostics.rhat) below += v < 1.1 ? 1 : 0;
    rhat_frac = f(static_cast<double>(below) / static_cast<double>(r.diagnostics.rhat.size()));
  }
  std::string error = r.error;
  std::replace(error.begin(), error.end(), ',', ';');
  std::replace(error.begin(), error.end(), '\n', ' ');
  std::ostringstream o;
  o << r.config_hash << ',' << r.seed << ',' << to_string(r.config.method) << ','
    << f(r.config.prior_std) << ',' << r.config.burn_in << ',' << f(r.config.target_accept) << ','
    << r.config.chains << ',' << r.config.samples << ',' << f(r.evaluation.accuracy) << ','
    << f(r.evaluation.macro_f1) << ',' << f(r.evaluation.ace) << ',' << f(r.evaluation.raulc) << ','
    << f(r.evaluation.mean_entropy) << ',' << (r.ood ? f(r.ood->roc_auc) : "") << ','
    << (r.ood ? f(r.ood->pr_auc) : "") << ',' << (r.ood ? f(r.ood->fpr95) : "") << ','
    << r.diagnostics.divergences << ',' << rhat_frac << ','
    << (r.diagnostics.ess ? f(r.diagnostics.ess->min) : "") << ',' << r.members << ','
    << f(r.wall_seconds) << ',' << r.error_phase << ',' << error;
  return o.str();
}

std::filesystem::path save_record(const RunRecord& r, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "records");
  auto path = dir / "records" / (r.config_hash + "_" + std::to_string(r.seed) + ".json");
  nlohmann::json j = r;
  write_file_atomic(path, j.dump(2) + "\n");
  return path;
}

RunRecord load_record(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open record " + path.string());
  return nlohmann::json::parse(in).get<RunRecord>();
}

std::size_t GridSpace::size() const {
  std::size_t n = 1;
  for (const auto& a : axes) n *= a.values.size();
  return axes.empty() ? 1 : n;
}

std::vector<ExperimentConfig> GridSpace::cells(const ExperimentConfig& base) const {
  for (const auto& a : axes) {
    if (a.values.empty()) throw std::invalid_argument("grid axis '" + a.key + "' has no values");
    find_key(a.key);
  }
  std::vector<ExperimentConfig> out;
  std::vector<std::size_t> idx(axes.size(), 0);
  for (std::size_t n = 0; n < size(); ++n) {
    ExperimentConfig c = base;
    for (std::size_t a = 0; a < axes.size(); ++a) set_config_value(c, axes[a].key, axes[a].values[idx[a]]);
    out.push_back(std::move(c));
    for (std::size_t a = axes.size(); a-- > 0;) {
      if (++idx[a] < axes[a].values.size()) break;
      idx[a] = 0;
    }
  }
  return out;
}

GridSpace default_llhmc_space() {
  return {{{"prior_std", {"0.01", "0.1", "1", "2.5", "5", "10"}},
           {"burn_in", {"10", "25", "50", "100", "200"}},
           {"target_accept", {"0.6", "0.7", "0.8"}},
           {"chains", {"1", "2"}},
           {"samples", {"2", "5", "10", "15", "20", "25", "30", "35", "40", "45", "50"}}}};
}

namespace {

const std::vector<std::string> kSummaryMetrics = {"accuracy", "macro_f1", "ace", "raulc",
                                                  "mean_entropy", "roc_auc", "pr_auc", "fpr95"};

double metric_of(const RunRecord& r, const std::string& name) {
  if (name == "accuracy") return r.evaluation.accuracy;
  if (name == "macro_f1") return r.evaluation.macro_f1;
  if (name == "ace") return r.evaluation.ace;
  if (name == "raulc") return r.evaluation.raulc;
  if (name == "mean_entropy") return r.evaluation.mean_entropy;
  if (!r.ood) return kNaN;
  if (name == "roc_auc") return r.ood->roc_auc;
  if (name == "pr_auc") return r.ood->pr_auc;
  return r.ood->fpr95;
}

// Ordering key: higher F1, then lower ACE (NaN last), then lower cell index.
bool better(double f1_a, double ace_a, std::size_t cell_a, double f1_b, double ace_b, std::size_t cell_b) {
  auto ace_key = [](double v) { return std::isnan(v) ? std::numeric_limits<double>::infinity() : v; };
  if (f1_a != f1_b) return f1_a > f1_b;
  if (ace_key(ace_a) != ace_key(ace_b)) return ace_key(ace_a) < ace_key(ace_b);
  return cell_a < cell_b;
}

std::size_t cell_index(const std::vector<std::string>& hashes, const std::string& h) {
  auto it = std::find(hashes.begin(), hashes.end(), h);
  if (it == hashes.end()) throw std::invalid_argument("record belongs to no grid cell");
  return static_cast<std::size_t>(it - hashes.begin());
}

GridSummary summarize(const std::vector<const RunRecord*>& chosen, std::vector<SeedChoice> choices) {
  GridSummary s;
  s.choices = std::move(choices);
  for (const auto& name : kSummaryMetrics) {
    std::vector<double> values;
    for (const auto* r : chosen) values.push_back(metric_of(*r, name));
    if (values.empty()) continue;
    const bool all_nan = std::all_of(values.begin(), values.end(), [](double v) { return std::isnan(v); });
    if (all_nan) continue;
    MetricSummary m;
    m.mean = metrics::mean(values);
    m.two_sem = values.size() >= 2 ? metrics::two_sem(values) : kNaN;
    s.metrics[name] = m;
  }
  return s;
}

}  // namespace

GridSummary summarize_per_seed_best(const std::vector<RunRecord>& records,
                                    const std::vector<std::string>& cell_hashes) {
  std::set<std::uint64_t> seeds;
  for (const auto& r : records) {
    if (r.ok()) seeds.insert(r.seed);
  }
  std::vector<const RunRecord*> chosen;
  std::vector<SeedChoice> choices;
  for (auto seed : seeds) {
    const RunRecord* best = nullptr;
    std::size_t best_cell = 0;
    for (const auto& r : records) {
      if (!r.ok() || r.seed != seed) continue;
      const std::size_t cell = cell_index(cell_hashes, r.config_hash);
      if (best == nullptr || better(r.evaluation.macro_f1, r.evaluation.ace, cell,
                                    best->evaluation.macro_f1, best->evaluation.ace, best_cell)) {
        best = &r;
        best_cell = cell;
      }
    }
    chosen.push_back(best);
    choices.push_back({seed, best_cell});
  }
  return summarize(chosen, std::move(choices));
}

GridSummary summarize_best_average(const std::vector<RunRecord>& records,
                                   const std::vector<std::string>& cell_hashes) {
  std::optional<std::size_t> best_cell;
  double best_f1 = 0.0, best_ace = 0.0;
  for (std::size_t cell = 0; cell < cell_hashes.size(); ++cell) {
    std::vector<double> f1, ace;
    for (const auto& r : records) {
      if (r.ok() && r.config_hash == cell_hashes[cell]) {
        f1.push_back(r.evaluation.macro_f1);
        ace.push_back(r.evaluation.ace);
      }
    }
    if (f1.empty()) continue;
    const double mf1 = metrics::mean(f1);
    const double mace = metrics::mean(ace);
    if (!best_cell || better(mf1, mace, cell, best_f1, best_ace, *best_cell)) {
      best_cell = cell;
      best_f1 = mf1;
      best_ace = mace;
    }
  }
  if (!best_cell) return {};
  std::vector<const RunRecord*> chosen;
  std::vector<SeedChoice> choices;
  std::vector<const RunRecord*> in_cell;
  for (const auto& r : records) {
    if (r.ok() && r.config_hash == cell_hashes[*best_cell]) in_cell.push_back(&r);
  }
  std::sort(in_cell.begin(), in_cell.end(), [](const RunRecord* a, const RunRecord* b) { return a->seed < b->seed; });
  for (const auto* r : in_cell) {
    chosen.push_back(r);
    choices.push_back({r->seed, *best_cell});
  }
  return summarize(chosen, std::move(choices));
}

void to_json(nlohmann::json& j, const GridSummary& s) {
  j = nlohmann::json::object();
  auto choices = nlohmann::json::array();
  for (const auto& c : s.choices) choices.push_back({{"seed", c.seed}, {"cell", c.cell}});
  j["choices"] = std::move(choices);
  auto m = nlohmann::json::object();
  for (const auto& [name, v] : s.metrics) m[name] = {{"mean", num(v.mean)}, {"two_sem", num(v.two_sem)}};
  j["metrics"] = std::move(m);
}

GridResult grid_search(const ExperimentConfig& base, const GridSpace& space,
                       std::span<const std::uint64_t> seeds,
                       const std::filesystem::path& output_dir, int workers) {
  if (seeds.empty()) throw std::invalid_argument("grid search needs at least one seed");
  const auto cells = space.cells(base);
  if (cells.empty()) throw std::invalid_argument("the grid has no cells");
  GridResult result;
  for (const auto& c : cells) result.cell_hashes.push_back(config_hash(c));
  {
    std::set<std::string> unique(result.cell_hashes.begin(), result.cell_hashes.end());
    if (unique.size() != result.cell_hashes.size()) throw std::invalid_argument("grid contains duplicate cells");
  }
  std::filesystem::create_directories(output_dir / "records");
  const auto csv_path = output_dir / "results.csv";
  if (!std::filesystem::exists(csv_path)) {
    std::ofstream(csv_path) << csv_header() << "\n";
  }

  const std::size_t n_jobs = cells.size() * seeds.size();
  result.records.resize(n_jobs);
  std::vector<bool> reused(n_jobs, false);
  std::mutex csv_mutex;
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (std::size_t job = next++; job < n_jobs; job = next++) {
      const std::size_t cell = job / seeds.size();
      const std::uint64_t seed = seeds[job % seeds.size()];
      const auto path = output_dir / "records" / (result.cell_hashes[cell] + "_" + std::to_string(seed) + ".json");
      if (std::filesystem::exists(path)) {
        result.records[job] = load_record(path);
        reused[job] = true;
        continue;
      }
      RunRecord r = run_experiment(cells[cell], seed);
      save_record(r, output_dir);
      {
        std::lock_guard<std::mutex> lock(csv_mutex);
        std::ofstream(csv_path, std::ios::app) << csv_row(r) << "\n";
      }
      result.records[job] = std::move(r);
    }
  };
  const int n_workers = std::max(1, std::min<int>(workers, static_cast<int>(n_jobs)));
  if (n_workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < n_workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (std::size_t i = 0; i < n_jobs; ++i) {
    result.reused += reused[i] ? 1 : 0;
    result.failures += result.records[i].ok() ? 0 : 1;
  }
  result.per_seed_best = summarize_per_seed_best(result.records, result.cell_hashes);
  result.best_average = summarize_best_average(result.records, result.cell_hashes);
  nlohmann::json a = result.per_seed_best;
  nlohmann::json b = result.best_average;
  nlohmann::json cells_json = nlohmann::json::array();
  for (std::size_t i = 0; i < cells.size(); ++i) {
    nlohmann::json cj = {{"index", i}, {"config_hash", result.cell_hashes[i]}};
    for (const auto& axis : space.axes) cj[axis.key] = get_config_value(cells[i], axis.key);
    cells_json.push_back(std::move(cj));
  }
  write_file_atomic(output_dir / "summary_per_seed_best.json", a.dump(2) + "\n");
  write_file_atomic(output_dir / "summary_best_average.json", b.dump(2) + "\n");
  write_file_atomic(output_dir / "cells.json", cells_json.dump(2) + "\n");
  return result;
}

std::vector<CurvePoint> dependent_sample_curve(std::span<const CurveInput> inputs) {
  if (inputs.empty()) throw std::invalid_argument("curve needs at least one input");
  std::size_t s_max = std::numeric_limits<std::size_t>::max();
  for (const auto& in : inputs) s_max = std::min(s_max, in.samples.total_draws());
  if (s_max < 2) throw std::invalid_argument("curve needs at least two draws per input");

  // Per input: running sums of member probabilities over test (+ OOD) rows.
  std::vector<std::vector<double>> f1(inputs.size()), pr(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const auto& in = inputs[i];
    const bool with_ood = in.ood_features.rows() > 0;
    Matrix all = in.test_features;
    if (with_ood) {
      all.resize(in.test_features.rows() + in.ood_features.rows(), in.test_features.cols());
      all << in.test_features, in.ood_features;
    }
    const Index n_test = in.test_features.rows();
    std::vector<bool> is_ood(static_cast<std::size_t>(all.rows()), false);
    std::fill(is_ood.begin() + n_test, is_ood.end(), true);
    const auto draws = in.samples.leading_draws(s_max);
    Matrix sum = Matrix::Zero(all.rows(), in.num_classes);
    for (std::size_t s = 0; s < s_max; ++s) {
      auto head = model::LastLayerClassifier::unflatten(draws[s], in.num_classes, all.cols());
      sum += softmax_rows(head.logits(all));
      const Matrix mean = sum / static_cast<double>(s + 1);
      const auto pred = metrics::argmax_rows(mean.topRows(n_test));
      f1[i].push_back(metrics::accuracy_and_macro_f1(pred, in.test_labels, in.num_classes).macro_f1);
      if (with_ood) {
        std::vector<double> scores(static_cast<std::size_t>(all.rows()));
        for (Index r = 0; r < all.rows(); ++r) scores[static_cast<std::size_t>(r)] = metrics::predictive_entropy(Vector(mean.row(r).transpose()));
        pr[i].push_back(metrics::pr_auc(scores, is_ood));
      } else {
        pr[i].push_back(kNaN);
      }
    }
  }
  std::vector<CurvePoint> out;
  for (std::size_t s = 0; s < s_max; ++s) {
    std::vector<double> fv, pv;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      fv.push_back(f1[i][s]);
      pv.push_back(pr[i][s]);
    }
    CurvePoint p;
    p.draws = static_cast<int>(s + 1);
    p.f1_mean = metrics::mean(fv);
    p.f1_std = metrics::sample_std(fv);
    p.pr_auc_mean = metrics::mean(pv);
    p.pr_auc_std = std::isnan(p.pr_auc_mean) ? kNaN : metrics::sample_std(pv);
    out.push_back(p);
  }
  return out;
}

Vector min_max_normalize(const Vector& v) {
  if (v.size() == 0) return v;
  const double lo = v.minCoeff();
  const double hi = v.maxCoeff();
  if (!(hi > lo)) return Vector::Zero(v.size());
  return ((v.array() - lo) / (hi - lo)).matrix();
}

UncertaintyGrid uncertainty_grid(const FittedMethod& fitted, const toydata::Grid2D& grid) {
  for (const auto& s : fitted.starts) {
    if (s.input_dim != 2) throw std::invalid_argument("uncertainty grids need a 2-D input method");
  }
  auto bundle = fitted.predict(grid.points);
  UncertaintyGrid g;
  g.points = grid.points;
  g.p1 = bundle.mean.col(1);
  g.entropy = bundle.entropy;
  g.normalized_entropy = min_max_normalize(bundle.entropy);
  return g;
}

void emit_uncertainty_grid(const FittedMethod& fitted, const toydata::Grid2D& grid,
                           const std::filesystem::path& out) {
  auto g = uncertainty_grid(fitted, grid);
  std::string text = "x,y,p1,entropy,normalized_entropy\n";
  for (Index i = 0; i < g.points.rows(); ++i) {
    text += format_double(g.points(i, 0)) + "," + format_double(g.points(i, 1)) + "," +
            format_double(g.p1[i]) + "," + format_double(g.entropy[i]) + "," +
            format_double(g.normalized_entropy[i]) + "\n";
  }
  write_file_atomic(out, text);
}

RegressionBand regression_band(const RegressionToyConfig& config, Method method, std::uint64_t seed) {
  if (method != Method::llhmc && method != Method::full_hmc && method != Method::subensemble) {
    throw std::invalid_argument("regression bands support llhmc, full_hmc and subensemble");
  }
  if (config.resolution < 2 || !(config.x_max > config.x_min)) throw std::invalid_argument("invalid band grid");
  Rng root(seed);
  Rng data_rng = root.split(0);
  const auto data = toydata::sinusoid_regression(config.n_samples, config.noise, config.sinusoid, data_rng);
  backbone::MlpSpec spec;
  spec.layer_widths.push_back(1);
  for (int h : config.hidden) spec.layer_widths.push_back(h);
  spec.layer_widths.push_back(1);
  spec.activation = backbone::parse_activation(config.activation);
  spec.task = backbone::Task::regression;
  backbone::OptimizerConfig opt;
  opt.learning_rate = config.lr;
  opt.epochs = config.epochs;
  opt.batch_size = config.batch;

  RegressionBand band;
  band.x = Vector::LinSpaced(config.resolution, config.x_min, config.x_max);
  const Matrix grid_inputs = band.x;
  std::vector<Vector> predictions;
  if (method == Method::subensemble) {
    for (int m = 0; m < config.ensemble_size; ++m) {
      Rng member_rng = root.split(10 + static_cast<std::uint64_t>(m));
      auto mlp = backbone::train_mlp(data, spec, opt, member_rng).mlp;
      predictions.push_back(backbone::forward(mlp, grid_inputs).col(0));
    }
  } else {
    Rng train_rng = root.split(1);
    auto mlp = backbone::train_mlp(data, spec, opt, train_rng).mlp;
    sampler::SamplerConfig sc;
    sc.burn_in = config.burn_in;
    sc.samples = config.samples;
    sc.target_accept = config.target_accept;
    sc.seed = root.split(2).key();
    const model::GaussianPrior prior{config.prior_std};
    if (method == Method::llhmc) {
      RegressionDataset latent{backbone::extract_features(mlp, data.inputs), data.targets};
      auto target = model::posterior_target_regression(latent, prior, config.noise_std);
      const auto& last = mlp.last_layer();
      std::vector<Vector> inits{model::RegressionHead{last.weights.row(0).transpose(), last.bias[0],
                                                      config.noise_std}.flatten()};
      auto set = sampler::run_chains(target, sc, inits);
      const Matrix grid_features = backbone::extract_features(mlp, grid_inputs);
      for (const auto& theta : set.all_draws()) {
        auto head = model::RegressionHead::unflatten(theta, config.noise_std);
        predictions.push_back((grid_features * head.weights).array() + head.bias);
      }
    } else {
      auto target = model::posterior_target_full_network(spec, data, prior, config.noise_std);
      std::vector<Vector> inits{mlp.flatten()};
      auto set = sampler::run_chains(target, sc, inits);
      for (const auto& theta : set.all_draws()) {
        predictions.push_back(backbone::forward(backbone::TrainedMlp::unflatten(spec, theta), grid_inputs).col(0));
      }
    }
  }
  const double m = static_cast<double>(predictions.size());
  band.mean = Vector::Zero(config.resolution);
  for (const auto& p : predictions) band.mean += p;
  band.mean /= m;
  Vector var = Vector::Zero(config.resolution);
  for (const auto& p : predictions) var += (p - band.mean).cwiseAbs2();
  var /= m;
  band.std = (var.array() + config.noise_std * config.noise_std).sqrt();
  return band;
}

void emit_regression_band(const RegressionBand& band, const std::filesystem::path& out) {
  std::string text = "x,mean,std,lower,upper\n";
  for (Index i = 0; i < band.x.size(); ++i) {
    text += format_double(band.x[i]) + "," + format_double(band.mean[i]) + "," + format_double(band.std[i]) +
            "," + format_double(band.mean[i] - 2.0 * band.std[i]) + "," +
            format_double(band.mean[i] + 2.0 * band.std[i]) + "\n";
  }
  write_file_atomic(out, text);
}

}  // namespace llhmc::harness
