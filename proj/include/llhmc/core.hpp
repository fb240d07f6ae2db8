// Shared numeric types, datasets, RNG and dataset file I/O.

#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace llhmc {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed input data or file contents.
class DataError : public Error {
 public:
  using Error::Error;
};

/// A metric whose value is mathematically undefined for the given input.
class MetricUndefined : public Error {
 public:
  using Error::Error;
};

/// Non-finite loss or objective during optimization.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

/**
 * Counter-based splittable random number generator.
 *
 * Output i of a stream with key k is mix64(k + i * golden). Splitting
 * derives a new key from (key, stream id) only, so a child stream does
 * not depend on how many values the parent has already produced.
 */
class Rng {
 public:
  using result_type = std::uint64_t;

  explicit Rng(std::uint64_t seed = 0);

  /// Independent child stream identified by `stream`.
  Rng split(std::uint64_t stream) const;

  std::uint64_t next_u64();
  /// Uniform in [0, 1).
  double uniform();
  /// Standard normal via Box-Muller.
  double normal();
  /// Uniform integer in [0, n).
  std::size_t uniform_index(std::size_t n);
  Vector normal_vector(Index n);

  /// Fisher-Yates shuffle; the result depends only on the stream.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[uniform_index(i)]);
    }
  }

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return ~result_type{0}; }
  result_type operator()() { return next_u64(); }

  std::uint64_t key() const { return key_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  std::optional<double> spare_normal_;
};

std::uint64_t mix64(std::uint64_t x);

/// Row-wise log-sum-exp, stabilised by the row maximum.
Vector log_sum_exp_rows(const Matrix& logits);
/// Row-wise softmax; every row sums to one.
Matrix softmax_rows(const Matrix& logits);

/// Penultimate-layer features (or raw inputs) with dense class labels.
struct LatentDataset {
  Matrix features;          // N x D
  std::vector<int> labels;  // length N, each in [0, num_classes)
  int num_classes = 2;

  Index size() const { return features.rows(); }
  Index dim() const { return features.cols(); }

  /// Throws DataError when an invariant is violated. N may be zero.
  void validate() const;
  LatentDataset subset(std::span<const std::size_t> rows) const;
  std::vector<std::size_t> class_counts() const;
};

struct RegressionDataset {
  Matrix inputs;   // N x D
  Vector targets;  // N

  Index size() const { return inputs.rows(); }
  Index dim() const { return inputs.cols(); }

  void validate() const;
  RegressionDataset subset(std::span<const std::size_t> rows) const;
};

/// Optional JSON side-car describing the class count and train/test split.
struct DatasetManifest {
  std::optional<int> num_classes;
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

/**
 * Reads a latent dataset: each row holds D comma-separated features
 * followed by one integer label. K is 1 + max(label) unless
 * `num_classes` overrides it. Errors carry the 1-based line number.
 */
LatentDataset load_latent_dataset(const std::filesystem::path& path,
                                  std::optional<int> num_classes = std::nullopt);

/// Writes features with 17 significant digits so a reload is bit-exact.
void save_latent_dataset(const LatentDataset& data, const std::filesystem::path& path);

/// Rows of D inputs followed by one real target.
RegressionDataset load_regression_dataset(const std::filesystem::path& path);
void save_regression_dataset(const RegressionDataset& data,
                             const std::filesystem::path& path);

DatasetManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

/// FNV-1a over the raw bytes of the feature matrix and labels, as hex.
std::string dataset_hash(const LatentDataset& data);

/// Writes `contents` to a temporary sibling and renames it into place.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);

}  // namespace llhmc
