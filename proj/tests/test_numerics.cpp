#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "archforge/errors.hpp"
#include "archforge/numerics.hpp"
#include "support.hpp"

using namespace archforge;
using archforge::testing::random_vector;

namespace {

Matrix mat(std::initializer_list<std::initializer_list<double>> rows) {
  Matrix m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.begin()->size()));
  Eigen::Index i = 0;
  for (const auto& r : rows) {
    Eigen::Index j = 0;
    for (double v : r) m(i, j++) = v;
    ++i;
  }
  return m;
}

Vector vec(std::initializer_list<double> v) {
  Vector out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out(i++) = x;
  return out;
}

}  // namespace

TEST(Affine, IdentityWithZeroBiasReturnsInput) {
  EXPECT_EQ(affine_forward(Matrix::Identity(2, 2), vec({3, 4}), Vector::Zero(2)), vec({3, 4}));
}

TEST(Affine, HandComputedExample) {
  EXPECT_EQ(affine_forward(mat({{1, 2}, {3, 4}}), vec({1, 1}), vec({1, -1})), vec({4, 6}));
}

TEST(Affine, ZeroWeightsReturnBias) {
  Rng rng(1);
  const Vector b = random_vector(3, rng);
  EXPECT_EQ(affine_forward(Matrix::Zero(3, 5), random_vector(5, rng), b), b);
}

TEST(Affine, DimensionMismatchIsContractViolation) {
  EXPECT_THROW(affine_forward(Matrix::Zero(2, 3), Vector::Zero(2), Vector::Zero(2)), ContractViolation);
  EXPECT_THROW(affine_forward(Matrix::Zero(2, 3), Vector::Zero(3), Vector::Zero(3)), ContractViolation);
}

TEST(Affine, NonFiniteInputIsRejected) {
  EXPECT_THROW(affine_forward(Matrix::Identity(2, 2), vec({NAN, 1}), Vector::Zero(2)), ContractViolation);
}

TEST(Activation, ReluClampsNegatives) {
  EXPECT_EQ(Vector(activation(Activation::relu, vec({-2, 3}))), vec({0, 3}));
}

TEST(Activation, TanhAtOrigin) {
  EXPECT_EQ(Vector(activation(Activation::tanh, vec({0})))(0), 0.0);
  EXPECT_EQ(Vector(activation_grad(Activation::tanh, vec({0})))(0), 1.0);
}

TEST(Activation, ReluGradientIsZeroAtZero) {
  EXPECT_EQ(Vector(activation_grad(Activation::relu, vec({-1, 2, 0}))), vec({0, 1, 0}));
}

TEST(Activation, GradientFromOutputAgreesWithPreActivationForm) {
  Rng rng(3);
  const Vector z = random_vector(50, rng, -3, 3);
  for (Activation a : {Activation::relu, Activation::tanh}) {
    const Vector out = activation(a, z);
    EXPECT_LT((Vector(activation_grad(a, z)) - Vector(activation_grad_from_output(a, out))).cwiseAbs().maxCoeff(), 1e-15);
  }
}

TEST(Activation, ParseRoundTripsAndRejectsUnknown) {
  for (Activation a : {Activation::relu, Activation::tanh}) EXPECT_EQ(parse_activation(to_string(a)), a);
  EXPECT_THROW(parse_activation("sigmoid"), ConfigError);
}

TEST(Softmax, ZeroVectorIsUniform) {
  const Vector p = softmax(Vector::Zero(4));
  for (Eigen::Index i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(p(i), 0.25);
}

TEST(Softmax, HugeLogitsStayFinite) {
  const Vector p = softmax(vec({1000, 0}));
  EXPECT_TRUE(all_finite(p));
  EXPECT_NEAR(p(0), 1.0, 1e-12);
  EXPECT_GE(p(1), 0.0);
}

TEST(Softmax, ShiftInvariant) {
  Rng rng(5);
  const Vector z = random_vector(7, rng, -5, 5);
  const Vector shifted = (z.array() + 123.0).matrix();
  EXPECT_LT((softmax(z) - softmax(shifted)).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Softmax, PropertyPositiveAndNormalised) {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const auto k = static_cast<Eigen::Index>(1 + rng.uniform_index(12));
    const Vector p = softmax(random_vector(k, rng, -50, 50));
    EXPECT_NEAR(p.sum(), 1.0, 1e-12);
    EXPECT_GE(p.minCoeff(), 0.0);
  }
}

TEST(Softmax, EmptyIsContractViolation) { EXPECT_THROW(softmax(Vector(0)), ContractViolation); }

TEST(Softmax, RowwiseMatchesVectorForm) {
  Rng rng(2);
  Matrix logits = archforge::testing::random_matrix(5, 3, rng, -4, 4);
  const Matrix original = logits;
  softmax_rows_inplace(logits);
  for (Eigen::Index r = 0; r < 5; ++r)
    EXPECT_LT((Vector(logits.row(r).transpose()) - softmax(original.row(r).transpose())).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(FiniteDifference, QuadraticHasExactCentralDifference) {
  // f(x) = sum c_i x_i^2 has gradient 2 c_i x_i; central differences are exact for quadratics.
  const Vector c = vec({1, -2, 0.5});
  auto f = [&](const Vector& x) { return (c.array() * x.array().square()).sum(); };
  const Vector x = vec({0.3, -1.2, 2.0});
  const Vector g = fd_gradient(f, x, 1e-3);
  const Vector expected = (2.0 * c.array() * x.array()).matrix();
  EXPECT_LT((g - expected).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(FiniteDifference, NonFiniteEvaluationRaisesNumericalError) {
  auto f = [](const Vector& x) { return x(0) > 0.5 ? std::numeric_limits<double>::infinity() : x(0); };
  EXPECT_THROW(fd_gradient(f, vec({0.5}), 1e-3), NumericalError);
}

TEST(Rng, SameSeedSameStream) {
  Rng a(42), b(42);
  for (int i = 0; i < 1000; ++i) ASSERT_EQ(a.next_u64(), b.next_u64());
}

TEST(Rng, MatchesReferenceMersenneTwisterStream) {
  // The 10000th output of mt19937_64 default-seeded is fixed by the C++ standard.
  Rng r(5489u);
  std::uint64_t x = 0;
  for (int i = 0; i < 10000; ++i) x = r.next_u64();
  EXPECT_EQ(x, 9981545732273789042ull);
}

TEST(Rng, Uniform01InHalfOpenRange) {
  Rng r(9);
  double lo = 1.0, hi = 0.0, sum = 0.0;
  for (int i = 0; i < 100000; ++i) {
    const double u = r.uniform01();
    lo = std::min(lo, u);
    hi = std::max(hi, u);
    sum += u;
  }
  EXPECT_GE(lo, 0.0);
  EXPECT_LT(hi, 1.0);
  EXPECT_NEAR(sum / 100000, 0.5, 5 * std::sqrt(1.0 / 12 / 100000));
}

TEST(Rng, UniformIndexCoversRangeUniformly) {
  Rng r(17);
  std::vector<int> counts(7, 0);
  const int n = 70000;
  for (int i = 0; i < n; ++i) ++counts[r.uniform_index(7)];
  const double p = 1.0 / 7, sigma = std::sqrt(n * p * (1 - p));
  for (int c : counts) EXPECT_NEAR(c, n * p, 5 * sigma);
  EXPECT_THROW(r.uniform_index(0), ContractViolation);
}

TEST(Rng, ShuffleIsAPermutation) {
  Rng r(4);
  std::vector<int> v(100);
  std::iota(v.begin(), v.end(), 0);
  r.shuffle(std::span<int>(v));
  std::vector<int> sorted = v;
  std::sort(sorted.begin(), sorted.end());
  for (int i = 0; i < 100; ++i) EXPECT_EQ(sorted[static_cast<std::size_t>(i)], i);
  EXPECT_FALSE(std::is_sorted(v.begin(), v.end()));
}

TEST(Rng, DerivedSeedsAreDistinctAndDoNotAdvanceParent) {
  Rng parent(123);
  std::set<std::uint64_t> seeds;
  for (std::uint64_t i = 0; i < 1000; ++i) seeds.insert(parent.derive(i).seed());
  EXPECT_EQ(seeds.size(), 1000u);
  Rng fresh(123);
  EXPECT_EQ(parent.next_u64(), fresh.next_u64());
  EXPECT_NE(derive_seed(1, 0), derive_seed(0, 1));
}
