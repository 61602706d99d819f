#pragma once

// Dense linear algebra, activations, the project-wide PRNG and a
// central-difference gradient oracle. Everything works in 64-bit floating point.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <utility>

#include "archforge/errors.hpp"

namespace archforge {

// Batches are stored one pattern per row.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

template <typename Derived>
bool all_finite(const Eigen::DenseBase<Derived>& m) {
  return m.allFinite();
}

// ---------------------------------------------------------------------------
// Rng

// SplitMix64 finalizer; used both to mix child seeds and to whiten user seeds.
constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

// Child seed for parallel task `index` of a parent seeded with `parent`.
constexpr std::uint64_t derive_seed(std::uint64_t parent, std::uint64_t index) {
  return splitmix64(parent ^ splitmix64(index + 0x632BE59BD9B4E019ULL));
}

/// Seedable generator behind every random decision in the library.
///
/// The engine is std::mt19937_64, whose output sequence is fixed by the C++
/// standard. The distributions below are implemented here rather than taken
/// from <random>, since the standard distributions are not portable across
/// library implementations. Same seed, same stream, on every platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64() { return engine_(); }

  // Uniform on [0, 1) with 53 random bits.
  double uniform01() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // Uniform on {0, ..., n-1}; rejection sampling keeps it unbiased.
  std::uint64_t uniform_index(std::uint64_t n) {
    require(n > 0, "uniform_index: empty range");
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t x = engine_();
    while (x >= limit) x = engine_();
    return x % n;
  }

  bool bernoulli(double p) { return uniform01() < p; }

  template <typename T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const std::size_t j = uniform_index(i);
      std::swap(items[i - 1], items[j]);
    }
  }

  // Independent generator for sub-task `index`; does not advance this one.
  Rng derive(std::uint64_t index) const { return Rng(derive_seed(seed_, index)); }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

// ---------------------------------------------------------------------------
// Affine map and activations

/// Returns W x + b.
inline Vector affine_forward(const Matrix& weights, const Vector& x, const Vector& bias) {
  require(weights.cols() == x.size(), "affine_forward: W has " + std::to_string(weights.cols()) +
                                          " columns but x has " + std::to_string(x.size()) + " entries");
  require(weights.rows() == bias.size(), "affine_forward: W rows and bias length differ");
  require(all_finite(weights) && all_finite(x) && all_finite(bias), "affine_forward: non-finite input");
  return weights * x + bias;
}

enum class Activation { relu, tanh };

inline std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::relu: return "relu";
    case Activation::tanh: return "tanh";
  }
  throw ConfigError("unknown activation kind");
}

inline Activation parse_activation(std::string_view name) {
  if (name == "relu") return Activation::relu;
  if (name == "tanh") return Activation::tanh;
  throw ConfigError("unknown activation '" + std::string(name) + "' (expected relu or tanh)");
}

template <typename Derived>
auto activation(Activation kind, const Eigen::MatrixBase<Derived>& v) {
  using Plain = typename Derived::PlainObject;
  switch (kind) {
    case Activation::relu: return Plain(v.cwiseMax(0.0));
    case Activation::tanh: return Plain(v.array().tanh().matrix());
  }
  throw ConfigError("unknown activation kind");
}

// Derivative at the pre-activation v. relu'(0) is taken as 0.
template <typename Derived>
auto activation_grad(Activation kind, const Eigen::MatrixBase<Derived>& v) {
  using Plain = typename Derived::PlainObject;
  switch (kind) {
    case Activation::relu: return Plain((v.array() > 0.0).template cast<double>().matrix());
    case Activation::tanh: return Plain((1.0 - v.array().tanh().square()).matrix());
  }
  throw ConfigError("unknown activation kind");
}

// Same derivative expressed through the activation output a = f(v); avoids
// recomputing tanh in the backward pass. For relu, a > 0 exactly when v > 0.
template <typename Derived>
auto activation_grad_from_output(Activation kind, const Eigen::MatrixBase<Derived>& a) {
  using Plain = typename Derived::PlainObject;
  switch (kind) {
    case Activation::relu: return Plain((a.array() > 0.0).template cast<double>().matrix());
    case Activation::tanh: return Plain((1.0 - a.array().square()).matrix());
  }
  throw ConfigError("unknown activation kind");
}

/// Softmax of a single vector, computed after subtracting the maximum.
inline Vector softmax(const Vector& z) {
  require(z.size() >= 1, "softmax: empty vector");
  require(all_finite(z), "softmax: non-finite input");
  Vector e = (z.array() - z.maxCoeff()).exp().matrix();
  return e / e.sum();
}

// Row-wise softmax of a batch of logits, in place.
inline void softmax_rows_inplace(Matrix& logits) {
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    auto row = logits.row(r);
    const double m = row.maxCoeff();
    row = (row.array() - m).exp().matrix();
    row /= row.sum();
  }
}

// ---------------------------------------------------------------------------
// Finite differences

/// Central-difference gradient of `f` at `theta`.
template <typename F>
Vector fd_gradient(F&& f, const Vector& theta, double eps) {
  require(eps > 0.0, "fd_gradient: eps must be positive");
  Vector probe = theta;
  Vector grad(theta.size());
  for (Eigen::Index i = 0; i < theta.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + eps;
    const double up = f(static_cast<const Vector&>(probe));
    probe[i] = orig - eps;
    const double down = f(static_cast<const Vector&>(probe));
    probe[i] = orig;
    if (!std::isfinite(up) || !std::isfinite(down))
      throw NumericalError("fd_gradient: non-finite evaluation at coordinate " + std::to_string(i));
    grad[i] = (up - down) / (2.0 * eps);
  }
  return grad;
}

}  // namespace archforge
