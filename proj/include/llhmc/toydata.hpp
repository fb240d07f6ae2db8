// Toy classification/regression generators and 2-D evaluation grids.

#pragma once

#include "llhmc/core.hpp"

#include <utility>
#include <vector>

namespace llhmc::toydata {

using Interval = std::pair<double, double>;

/// Cartesian product of two linspaced axes, y-outer / x-inner.
struct Grid2D {
  Interval x_bounds;
  Interval y_bounds;
  int resolution = 0;
  Matrix points;  // resolution^2 x 2
};

/**
 * Two interleaved half circles. The first ceil(n/2) points lie on the
 * upper unit arc centred at the origin (label 0); the rest on the lower
 * arc centred at (1, 0.5) (label 1). Each point gets isotropic Gaussian
 * noise of standard deviation `noise`.
 */
LatentDataset two_moons(int n, double noise, Rng& rng);

struct SinusoidConfig {
  double amplitude = 1.0;
  std::vector<Interval> ranges = {{-0.1, 0.4}, {0.7, 1.2}};
};

/// y = amplitude * sin(2 pi x) + noise * xi, with x uniform over the union
/// of `ranges` (sampled proportionally to interval length).
RegressionDataset sinusoid_regression(int n, double noise, const SinusoidConfig& config,
                                      Rng& rng);

/// Noise-free sinusoid value at x.
double sinusoid(double x, double amplitude = 1.0);

/**
 * `classes` isotropic Gaussian clusters with unit standard deviation whose
 * centres form a regular simplex with pairwise distance `separation`.
 * The simplex puts every centre equidistant from all others, so any one
 * removed class sits on the shared decision boundary of the rest.
 */
LatentDataset gaussian_clusters(int classes, int per_class, int dim, double separation,
                                Rng& rng);

Grid2D make_grid(Interval x_bounds, Interval y_bounds, int resolution);

/// Train/test index split stratified per class; each class contributes
/// round(count * test_fraction) test rows. Indices keep ascending order.
struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};
Split stratified_split(const LatentDataset& data, double test_fraction, Rng& rng);

}  // namespace llhmc::toydata
