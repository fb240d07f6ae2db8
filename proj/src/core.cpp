#include "llhmc/core.hpp"

#include <nlohmann/json.hpp>

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>

namespace llhmc {

namespace {

constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ULL;

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) {
    s.remove_suffix(1);
  }
  return s;
}

std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    std::size_t pos = line.find(',', start);
    out.push_back(trim(line.substr(start, pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

std::string line_error(const std::filesystem::path& path, std::size_t line,
                       const std::string& what) {
  return path.string() + ":" + std::to_string(line) + ": " + what;
}

double parse_real(std::string_view field, const std::filesystem::path& path,
                  std::size_t line) {
  double value = 0.0;
  auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), value);
  if (ec != std::errc{} || ptr != field.data() + field.size() || !std::isfinite(value)) {
    throw DataError(line_error(path, line, "non-numeric feature '" + std::string(field) + "'"));
  }
  return value;
}

// Calls fn(line number, fields) for each non-empty line; '#' starts a comment line.
template <typename F>
void for_each_csv_row(const std::filesystem::path& path, F&& fn) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string_view view = trim(line);
    if (view.empty() || view.front() == '#') continue;
    fn(lineno, split_commas(view));
  }
}

// K recorded by save_latent_dataset in a leading "# num_classes=K" line.
std::optional<int> header_num_classes(const std::filesystem::path& path) {
  std::ifstream in(path);
  std::string line;
  if (!std::getline(in, line)) return std::nullopt;
  constexpr std::string_view prefix = "# num_classes=";
  std::string_view view = trim(line);
  if (!view.starts_with(prefix)) return std::nullopt;
  view.remove_prefix(prefix.size());
  int k = 0;
  auto [ptr, ec] = std::from_chars(view.data(), view.data() + view.size(), k);
  if (ec != std::errc{} || ptr != view.data() + view.size() || k < 1) {
    throw DataError(line_error(path, 1, "malformed num_classes header"));
  }
  return k;
}

std::string format_real(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

std::uint64_t mix64(std::uint64_t x) {
  x ^= x >> 30;
  x *= 0xbf58476d1ce4e5b9ULL;
  x ^= x >> 27;
  x *= 0x94d049bb133111ebULL;
  x ^= x >> 31;
  return x;
}

Rng::Rng(std::uint64_t seed) : key_(mix64(seed + kGolden)) {}

Rng Rng::split(std::uint64_t stream) const {
  Rng child(0);
  child.key_ = mix64(key_ ^ mix64(stream * kGolden + 0x632be59bd9b4e019ULL));
  return child;
}

std::uint64_t Rng::next_u64() {
  ++counter_;
  return mix64(key_ + counter_ * kGolden);
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double Rng::normal() {
  if (spare_normal_) {
    double v = *spare_normal_;
    spare_normal_.reset();
    return v;
  }
  // 1 - u lies in (0, 1], so the log is finite.
  double u1 = 1.0 - uniform();
  double u2 = uniform();
  double radius = std::sqrt(-2.0 * std::log(u1));
  double angle = 2.0 * std::numbers::pi * u2;
  spare_normal_ = radius * std::sin(angle);
  return radius * std::cos(angle);
}

std::size_t Rng::uniform_index(std::size_t n) {
  if (n == 0) throw std::invalid_argument("uniform_index: empty range");
  auto wide = static_cast<unsigned __int128>(next_u64()) * n;
  return static_cast<std::size_t>(wide >> 64);
}

Vector Rng::normal_vector(Index n) {
  Vector v(n);
  for (Index i = 0; i < n; ++i) v[i] = normal();
  return v;
}

Vector log_sum_exp_rows(const Matrix& logits) {
  Vector out(logits.rows());
  for (Index i = 0; i < logits.rows(); ++i) {
    double m = logits.row(i).maxCoeff();
    out[i] = m + std::log((logits.row(i).array() - m).exp().sum());
  }
  return out;
}

Matrix softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Index i = 0; i < logits.rows(); ++i) {
    double m = logits.row(i).maxCoeff();
    out.row(i) = (logits.row(i).array() - m).exp();
    out.row(i) /= out.row(i).sum();
  }
  return out;
}

void LatentDataset::validate() const {
  if (num_classes < 2) throw DataError("num_classes must be at least 2");
  if (features.cols() < 1) throw DataError("feature dimension must be at least 1");
  if (static_cast<std::size_t>(features.rows()) != labels.size()) {
    throw DataError("feature rows and label count differ");
  }
  if (!features.allFinite()) throw DataError("non-finite feature value");
  for (int y : labels) {
    if (y < 0 || y >= num_classes) {
      throw DataError("label " + std::to_string(y) + " outside [0, " +
                      std::to_string(num_classes) + ")");
    }
  }
}

LatentDataset LatentDataset::subset(std::span<const std::size_t> rows) const {
  LatentDataset out;
  out.num_classes = num_classes;
  out.features.resize(static_cast<Index>(rows.size()), features.cols());
  out.labels.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.features.row(static_cast<Index>(i)) = features.row(static_cast<Index>(rows[i]));
    out.labels.push_back(labels.at(rows[i]));
  }
  return out;
}

std::vector<std::size_t> LatentDataset::class_counts() const {
  std::vector<std::size_t> counts(static_cast<std::size_t>(num_classes), 0);
  for (int y : labels) ++counts.at(static_cast<std::size_t>(y));
  return counts;
}

void RegressionDataset::validate() const {
  if (inputs.cols() < 1) throw DataError("input dimension must be at least 1");
  if (inputs.rows() != targets.size()) throw DataError("input rows and target count differ");
  if (!inputs.allFinite() || !targets.allFinite()) throw DataError("non-finite value");
}

RegressionDataset RegressionDataset::subset(std::span<const std::size_t> rows) const {
  RegressionDataset out;
  out.inputs.resize(static_cast<Index>(rows.size()), inputs.cols());
  out.targets.resize(static_cast<Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.inputs.row(static_cast<Index>(i)) = inputs.row(static_cast<Index>(rows[i]));
    out.targets[static_cast<Index>(i)] = targets[static_cast<Index>(rows[i])];
  }
  return out;
}

LatentDataset load_latent_dataset(const std::filesystem::path& path,
                                  std::optional<int> num_classes) {
  std::vector<double> values;
  std::vector<int> labels;
  std::size_t width = 0;
  for_each_csv_row(path, [&](std::size_t lineno, const std::vector<std::string_view>& fields) {
    if (fields.size() < 2) {
      throw DataError(line_error(path, lineno, "expected at least one feature and a label"));
    }
    if (width == 0) width = fields.size();
    if (fields.size() != width) {
      throw DataError(line_error(path, lineno,
                                 "expected " + std::to_string(width) + " columns, got " +
                                     std::to_string(fields.size())));
    }
    for (std::size_t j = 0; j + 1 < fields.size(); ++j) {
      values.push_back(parse_real(fields[j], path, lineno));
    }
    std::string_view lf = fields.back();
    int label = 0;
    auto [ptr, ec] = std::from_chars(lf.data(), lf.data() + lf.size(), label);
    if (ec != std::errc{} || ptr != lf.data() + lf.size()) {
      throw DataError(line_error(path, lineno, "non-integer label '" + std::string(lf) + "'"));
    }
    if (label < 0) throw DataError(line_error(path, lineno, "negative label"));
    labels.push_back(label);
  });
  if (labels.empty()) throw DataError("'" + path.string() + "' holds no data rows");

  LatentDataset data;
  const auto n = static_cast<Index>(labels.size());
  const auto d = static_cast<Index>(width - 1);
  data.features = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                           Eigen::RowMajor>>(values.data(), n, d);
  int max_label = 0;
  for (int y : labels) max_label = std::max(max_label, y);
  data.labels = std::move(labels);
  if (!num_classes) num_classes = header_num_classes(path);
  data.num_classes = num_classes.value_or(max_label + 1);
  if (data.num_classes < 2) data.num_classes = 2;
  data.validate();
  return data;
}

void save_latent_dataset(const LatentDataset& data, const std::filesystem::path& path) {
  data.validate();
  if (data.size() < 1) throw DataError("cannot save an empty dataset");
  std::ostringstream out;
  out << "# num_classes=" << data.num_classes << '\n';
  for (Index i = 0; i < data.size(); ++i) {
    for (Index j = 0; j < data.dim(); ++j) out << format_real(data.features(i, j)) << ',';
    out << data.labels[static_cast<std::size_t>(i)] << '\n';
  }
  write_file_atomic(path, out.str());
}

RegressionDataset load_regression_dataset(const std::filesystem::path& path) {
  std::vector<double> values;
  std::vector<double> targets;
  std::size_t width = 0;
  for_each_csv_row(path, [&](std::size_t lineno, const std::vector<std::string_view>& fields) {
    if (fields.size() < 2) {
      throw DataError(line_error(path, lineno, "expected at least one input and a target"));
    }
    if (width == 0) width = fields.size();
    if (fields.size() != width) {
      throw DataError(line_error(path, lineno, "inconsistent column count"));
    }
    for (std::size_t j = 0; j + 1 < fields.size(); ++j) {
      values.push_back(parse_real(fields[j], path, lineno));
    }
    targets.push_back(parse_real(fields.back(), path, lineno));
  });
  if (targets.empty()) throw DataError("'" + path.string() + "' holds no data rows");
  RegressionDataset data;
  const auto n = static_cast<Index>(targets.size());
  data.inputs = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                         Eigen::RowMajor>>(values.data(), n,
                                                           static_cast<Index>(width - 1));
  data.targets = Eigen::Map<Vector>(targets.data(), n);
  return data;
}

void save_regression_dataset(const RegressionDataset& data,
                             const std::filesystem::path& path) {
  data.validate();
  if (data.size() < 1) throw DataError("cannot save an empty dataset");
  std::ostringstream out;
  for (Index i = 0; i < data.size(); ++i) {
    for (Index j = 0; j < data.dim(); ++j) out << format_real(data.inputs(i, j)) << ',';
    out << format_real(data.targets[i]) << '\n';
  }
  write_file_atomic(path, out.str());
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("invalid manifest '" + path.string() + "': " + e.what());
  }
  DatasetManifest m;
  if (j.contains("num_classes")) m.num_classes = j.at("num_classes").get<int>();
  if (j.contains("splits")) {
    const auto& s = j.at("splits");
    if (s.contains("train")) m.train = s.at("train").get<std::vector<std::size_t>>();
    if (s.contains("test")) m.test = s.at("test").get<std::vector<std::size_t>>();
  }
  return m;
}

void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path) {
  nlohmann::json j;
  if (manifest.num_classes) j["num_classes"] = *manifest.num_classes;
  j["splits"] = {{"train", manifest.train}, {"test", manifest.test}};
  write_file_atomic(path, j.dump(2) + "\n");
}

std::string dataset_hash(const LatentDataset& data) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&h](const void* p, std::size_t n) {
    const auto* bytes = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (Index i = 0; i < data.size(); ++i) {
    for (Index j = 0; j < data.dim(); ++j) {
      double v = data.features(i, j);
      feed(&v, sizeof v);
    }
  }
  feed(data.labels.data(), data.labels.size() * sizeof(int));
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write '" + tmp.string() + "'");
    out << contents;
    if (!out) throw Error("write failed for '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace llhmc
