#pragma once

// Helpers shared by the test binaries: tiny datasets, random networks and
// naive reference implementations written without Eigen expressions.

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <string>
#include <vector>

#include "archforge/data.hpp"
#include "archforge/network.hpp"
#include "archforge/numerics.hpp"
#include "archforge/training.hpp"

namespace archforge::testing {

inline Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = rng.uniform(lo, hi);
  return m;
}

inline Vector random_vector(Eigen::Index n, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Vector v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = rng.uniform(lo, hi);
  return v;
}

inline std::vector<int> random_labels(std::size_t n, int classes, Rng& rng) {
  std::vector<int> y(n);
  for (auto& v : y) v = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(classes)));
  return y;
}

inline Dataset random_dataset(std::size_t n, Eigen::Index d, int classes, Rng& rng) {
  return make_dataset(random_matrix(static_cast<Eigen::Index>(n), d, rng, 0.0, 1.0), random_labels(n, classes, rng), classes);
}

/// Polygon task split into train/val/test with fixed seeds.
inline DataSplits polygon_splits(std::size_t n, std::uint64_t seed) {
  DataSplits s;
  std::tie(s.train, s.val) = split(synthetic_polygons(n, seed), {0.2, seed + 1});
  s.test = synthetic_polygons(n / 4, seed + 2);
  return s;
}

/// Naive double loop for S = sum_o | sum_p (V_p - mean V)(E_po - mean E_o) |.
inline double naive_error_correlation(const std::vector<double>& v, const std::vector<std::vector<double>>& e) {
  const std::size_t p = v.size();
  const std::size_t o = e.front().size();
  double vbar = 0.0;
  for (double x : v) vbar += x;
  vbar /= static_cast<double>(p);
  double s = 0.0;
  for (std::size_t k = 0; k < o; ++k) {
    double ebar = 0.0;
    for (std::size_t i = 0; i < p; ++i) ebar += e[i][k];
    ebar /= static_cast<double>(p);
    double acc = 0.0;
    for (std::size_t i = 0; i < p; ++i) acc += (v[i] - vbar) * (e[i][k] - ebar);
    s += std::abs(acc);
  }
  return s;
}

/// Mean crossentropy of a network on (x, onehot), used as the loss for finite differences.
template <FeedforwardNetwork Net>
double network_loss(const Net& net, const Matrix& x, const Matrix& onehot) {
  return crossentropy(net.predict(x), onehot);
}

/// Relative error |a - b| / max(|a|, |b|, floor), taken elementwise and maximised.
inline double max_relative_error(const Vector& a, const Vector& b, double floor = 1e-6) {
  double worst = 0.0;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    const double scale = std::max({std::abs(a(i)), std::abs(b(i)), floor});
    worst = std::max(worst, std::abs(a(i) - b(i)) / scale);
  }
  return worst;
}

/// Scratch directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("archforge_" + tag + "_" + std::to_string(static_cast<unsigned long long>(std::rand())) + "_" +
             std::to_string(reinterpret_cast<std::uintptr_t>(this)));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace archforge::testing
