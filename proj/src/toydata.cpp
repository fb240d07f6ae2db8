#include "llhmc/toydata.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

namespace llhmc::toydata {

LatentDataset two_moons(int n, double noise, Rng& rng) {
  if (n < 2) throw std::invalid_argument("two_moons needs n >= 2");
  if (noise < 0.0) throw std::invalid_argument("noise must be non-negative");
  const int n_upper = (n + 1) / 2;
  const int n_lower = n / 2;
  LatentDataset data;
  data.num_classes = 2;
  data.features.resize(n, 2);
  data.labels.resize(static_cast<std::size_t>(n));
  auto angle = [](int i, int count) {
    return count > 1 ? std::numbers::pi * i / (count - 1) : 0.0;
  };
  for (int i = 0; i < n_upper; ++i) {
    double t = angle(i, n_upper);
    data.features(i, 0) = std::cos(t);
    data.features(i, 1) = std::sin(t);
    data.labels[static_cast<std::size_t>(i)] = 0;
  }
  for (int i = 0; i < n_lower; ++i) {
    double t = angle(i, n_lower);
    data.features(n_upper + i, 0) = 1.0 - std::cos(t);
    data.features(n_upper + i, 1) = 0.5 - std::sin(t);
    data.labels[static_cast<std::size_t>(n_upper + i)] = 1;
  }
  if (noise > 0.0) {
    for (Index i = 0; i < data.features.rows(); ++i) {
      data.features(i, 0) += noise * rng.normal();
      data.features(i, 1) += noise * rng.normal();
    }
  }
  return data;
}

double sinusoid(double x, double amplitude) {
  return amplitude * std::sin(2.0 * std::numbers::pi * x);
}

RegressionDataset sinusoid_regression(int n, double noise, const SinusoidConfig& config,
                                      Rng& rng) {
  if (n < 1) throw std::invalid_argument("sinusoid_regression needs n >= 1");
  if (noise < 0.0) throw std::invalid_argument("noise must be non-negative");
  if (config.ranges.empty()) throw std::invalid_argument("at least one x range is required");
  auto ranges = config.ranges;
  std::sort(ranges.begin(), ranges.end());
  double total = 0.0;
  for (std::size_t i = 0; i < ranges.size(); ++i) {
    if (!(ranges[i].second > ranges[i].first)) throw std::invalid_argument("degenerate x range");
    if (i > 0 && ranges[i].first < ranges[i - 1].second) {
      throw std::invalid_argument("x ranges overlap");
    }
    total += ranges[i].second - ranges[i].first;
  }

  RegressionDataset data;
  data.inputs.resize(n, 1);
  data.targets.resize(n);
  for (int i = 0; i < n; ++i) {
    // Pick a position along the concatenated intervals, then map it back.
    double u = rng.uniform() * total;
    double x = ranges.back().second;
    for (const auto& [lo, hi] : ranges) {
      if (u < hi - lo) {
        x = lo + u;
        break;
      }
      u -= hi - lo;
    }
    data.inputs(i, 0) = x;
    data.targets[i] = sinusoid(x, config.amplitude) + noise * rng.normal();
  }
  return data;
}

LatentDataset gaussian_clusters(int classes, int per_class, int dim, double separation,
                                Rng& rng) {
  if (classes < 2) throw std::invalid_argument("need at least two clusters");
  if (per_class < 1) throw std::invalid_argument("per_class must be positive");
  if (dim < classes - 1) throw std::invalid_argument("dim must be at least classes - 1");
  // Scaled basis vectors in R^classes have pairwise distance `separation`;
  // a Helmert basis maps their centred versions into R^(classes - 1).
  Matrix centres = Matrix::Zero(classes, dim);
  const double scale = separation / std::sqrt(2.0);
  for (int j = 1; j < classes; ++j) {
    const double norm = std::sqrt(static_cast<double>(j) * (j + 1));
    for (int k = 0; k < classes; ++k) {
      double h = k < j ? 1.0 : (k == j ? -static_cast<double>(j) : 0.0);
      centres(k, j - 1) = scale * h / norm;
    }
  }
  LatentDataset data;
  data.num_classes = classes;
  data.features.resize(static_cast<Index>(classes) * per_class, dim);
  data.labels.reserve(static_cast<std::size_t>(classes * per_class));
  Index row = 0;
  for (int k = 0; k < classes; ++k) {
    for (int i = 0; i < per_class; ++i, ++row) {
      data.features.row(row) = centres.row(k) + rng.normal_vector(dim).transpose();
      data.labels.push_back(k);
    }
  }
  return data;
}

Grid2D make_grid(Interval x_bounds, Interval y_bounds, int resolution) {
  if (resolution < 2) throw std::invalid_argument("grid resolution must be at least 2");
  if (!(x_bounds.second > x_bounds.first) || !(y_bounds.second > y_bounds.first)) {
    throw std::invalid_argument("grid bounds must be increasing");
  }
  Grid2D grid{x_bounds, y_bounds, resolution, Matrix(resolution * resolution, 2)};
  auto axis = [resolution](Interval b, int i) {
    // Pin the last point to the upper bound exactly.
    if (i == resolution - 1) return b.second;
    return b.first + (b.second - b.first) * i / (resolution - 1);
  };
  Index row = 0;
  for (int iy = 0; iy < resolution; ++iy) {
    for (int ix = 0; ix < resolution; ++ix, ++row) {
      grid.points(row, 0) = axis(x_bounds, ix);
      grid.points(row, 1) = axis(y_bounds, iy);
    }
  }
  return grid;
}

Split stratified_split(const LatentDataset& data, double test_fraction, Rng& rng) {
  if (!(test_fraction >= 0.0 && test_fraction < 1.0)) {
    throw std::invalid_argument("test_fraction must lie in [0, 1)");
  }
  Split split;
  for (int k = 0; k < data.num_classes; ++k) {
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < data.labels.size(); ++i) {
      if (data.labels[i] == k) rows.push_back(i);
    }
    rng.shuffle(rows);
    auto n_test = static_cast<std::size_t>(std::lround(test_fraction * static_cast<double>(rows.size())));
    split.test.insert(split.test.end(), rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(n_test));
    split.train.insert(split.train.end(), rows.begin() + static_cast<std::ptrdiff_t>(n_test), rows.end());
  }
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.test.begin(), split.test.end());
  return split;
}

}  // namespace llhmc::toydata
