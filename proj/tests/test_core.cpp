#include "llhmc/core.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>

using namespace llhmc;

namespace {

std::filesystem::path temp_file(const std::string& name, const std::string& contents = {}) {
  auto path = std::filesystem::temp_directory_path() / ("llhmc_core_" + name);
  if (!contents.empty()) {
    std::ofstream out(path);
    out << contents;
  }
  return path;
}

std::string read_all(const std::filesystem::path& path) {
  std::ifstream in(path);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST_CASE("load parses features and labels") {
  auto path = temp_file("two_rows.csv", "0.5,1.0,0\n-0.5,2.0,1\n");
  LatentDataset d = load_latent_dataset(path);
  CHECK(d.size() == 2);
  CHECK(d.dim() == 2);
  CHECK(d.num_classes == 2);
  CHECK(d.features(0, 0) == 0.5);
  CHECK(d.features(0, 1) == 1.0);
  CHECK(d.features(1, 0) == -0.5);
  CHECK(d.features(1, 1) == 2.0);
  CHECK(d.labels == std::vector<int>{0, 1});
}

TEST_CASE("class count is one plus the largest label") {
  auto path = temp_file("gap.csv", "1,0\n2,0\n3,2\n");
  LatentDataset d = load_latent_dataset(path);
  CHECK(d.num_classes == 3);
  CHECK(d.class_counts() == std::vector<std::size_t>{2, 0, 1});
  CHECK(load_latent_dataset(path, 5).num_classes == 5);
}

TEST_CASE("malformed rows report their line") {
  auto nan = temp_file("nan.csv", "0.5,1.0,0\nNaN,2.0,1\n");
  try {
    load_latent_dataset(nan);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find(":2") != std::string::npos);
  }
  CHECK_THROWS_AS(load_latent_dataset(temp_file("cols.csv", "1,2,0\n1,0\n")), DataError);
  CHECK_THROWS_AS(load_latent_dataset(temp_file("neg.csv", "1,2,-1\n")), DataError);
  CHECK_THROWS_AS(load_latent_dataset(temp_file("text.csv", "1,x,0\n")), DataError);
  CHECK_THROWS_AS(load_latent_dataset(temp_file("missing_file.csv")), DataError);
}

TEST_CASE("save then load is bit-exact") {
  Rng rng(3);
  LatentDataset d;
  d.num_classes = 4;
  d.features = Matrix(7, 3);
  for (Index i = 0; i < 7; ++i) {
    for (Index j = 0; j < 3; ++j) d.features(i, j) = rng.normal() * 1e3 + rng.uniform() * 1e-7;
    d.labels.push_back(static_cast<int>(i % 3));  // class 3 stays empty
  }
  auto path = temp_file("roundtrip.csv");
  save_latent_dataset(d, path);
  LatentDataset back = load_latent_dataset(path);
  CHECK(back.num_classes == 4);
  CHECK(back.labels == d.labels);
  CHECK(back.features == d.features);
  CHECK(dataset_hash(back) == dataset_hash(d));
}

TEST_CASE("save rejects an empty feature dimension") {
  LatentDataset d;
  d.features = Matrix(2, 0);
  d.labels = {0, 1};
  auto path = temp_file("d0.csv");
  std::filesystem::remove(path);
  CHECK_THROWS_AS(save_latent_dataset(d, path), DataError);
  CHECK_FALSE(std::filesystem::exists(path));
}

TEST_CASE("single-row dataset writes one data line after the header") {
  LatentDataset d;
  d.features = Matrix(1, 2);
  d.features << 0.25, -1.5;
  d.labels = {1};
  auto path = temp_file("n1.csv");
  save_latent_dataset(d, path);
  std::string text = read_all(path);
  std::size_t lines = 0;
  std::size_t data_lines = 0;
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    std::string line = text.substr(start, end - start);
    ++lines;
    if (!line.empty() && line.front() != '#') ++data_lines;
    start = end + 1;
  }
  CHECK(lines == 2);
  CHECK(data_lines == 1);
  CHECK(text.front() == '#');
}

TEST_CASE("regression dataset round-trip") {
  RegressionDataset d;
  d.inputs = Matrix(3, 1);
  d.inputs << 0.1, 0.2, 1.0 / 3.0;
  d.targets = Vector(3);
  d.targets << -1.0, 2.5, std::sqrt(2.0);
  auto path = temp_file("reg.csv");
  save_regression_dataset(d, path);
  RegressionDataset back = load_regression_dataset(path);
  CHECK(back.inputs == d.inputs);
  CHECK(back.targets == d.targets);
}

TEST_CASE("manifest round-trip") {
  DatasetManifest m;
  m.num_classes = 3;
  m.train = {0, 2, 4};
  m.test = {1, 3};
  auto path = temp_file("manifest.json");
  save_manifest(m, path);
  DatasetManifest back = load_manifest(path);
  CHECK(back.num_classes == 3);
  CHECK(back.train == m.train);
  CHECK(back.test == m.test);
}

TEST_CASE("rng streams are reproducible and split independently") {
  Rng a(42), b(42), c(43);
  std::vector<std::uint64_t> xa, xb, xc;
  for (int i = 0; i < 16; ++i) {
    xa.push_back(a.next_u64());
    xb.push_back(b.next_u64());
    xc.push_back(c.next_u64());
  }
  CHECK(xa == xb);
  CHECK(xa != xc);

  Rng parent(7);
  Rng early = parent.split(1);
  for (int i = 0; i < 100; ++i) parent.next_u64();
  Rng late = parent.split(1);
  CHECK(early.next_u64() == late.next_u64());
  CHECK(parent.split(1).key() != parent.split(2).key());

  std::set<std::uint64_t> keys;
  for (std::uint64_t s = 0; s < 1000; ++s) keys.insert(Rng(0).split(s).key());
  CHECK(keys.size() == 1000);
}

TEST_CASE("rng uniform and normal moments") {
  Rng rng(11);
  const int n = 200000;
  double su = 0, sn = 0, sn2 = 0;
  for (int i = 0; i < n; ++i) {
    double u = rng.uniform();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
    su += u;
    double z = rng.normal();
    sn += z;
    sn2 += z * z;
  }
  CHECK(su / n == doctest::Approx(0.5).epsilon(0.01));
  CHECK(std::abs(sn / n) < 0.01);
  CHECK(sn2 / n == doctest::Approx(1.0).epsilon(0.01));
}

TEST_CASE("softmax rows sum to one and survive large logits") {
  Matrix logits(2, 3);
  logits << 1000, 1001, 1002, -5, 0, 5;
  Matrix p = softmax_rows(logits);
  for (Index i = 0; i < 2; ++i) CHECK(std::abs(p.row(i).sum() - 1.0) < 1e-12);
  Vector lse = log_sum_exp_rows(logits);
  CHECK(lse[0] == doctest::Approx(1002 + std::log(1 + std::exp(-1.0) + std::exp(-2.0))));
}

TEST_CASE("validate rejects out-of-range labels") {
  LatentDataset d;
  d.features = Matrix::Zero(2, 1);
  d.labels = {0, 2};
  CHECK_THROWS_AS(d.validate(), DataError);
}
