#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>

namespace lora {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

/// Relative threshold factor for numerical rank decisions.
inline constexpr double kDefaultRankTol = 1e-10;
/// Condition-number ceiling above which a matrix counts as singular.
inline constexpr double kConditionCeiling = 1e12;
/// Absolute tolerance under which "exact" claims are asserted.
inline constexpr double kExactnessTol = 1e-8;

/// A matrix required to be invertible failed its condition check.
class NonSingularityViolation : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class SvdError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct SvdResult {
  Matrix u;                 // orthonormal columns
  Vector singular_values;   // nonincreasing, >= 0
  Matrix v;                 // orthonormal columns

  Matrix reconstruct() const { return u * singular_values.asDiagonal() * v.transpose(); }
};

struct RankReport {
  Index numerical_rank = 0;
  double threshold = 0.0;
  Vector singular_values;
};

void require_finite(const Matrix& m, const std::string& name);

SvdResult svd(const Matrix& m, const std::string& label = "matrix");

/// Best rank-r approximation via truncated SVD. Returns m itself when
/// r >= min(rows, cols).
Matrix best_rank_approx(const Matrix& m, Index r);

RankReport numerical_rank(const Matrix& m, double tol_factor = kDefaultRankTol);

/// Product W_L * ... * W_1 of an ordered layer sequence (ws[0] applied first).
/// The empty product is the identity; dim_if_empty supplies its size.
Matrix chain_product(std::span<const Matrix> ws, Index dim_if_empty = -1);

/// X with a * X = b, via LU. Throws NonSingularityViolation when the
/// condition estimate of `a` exceeds kConditionCeiling.
Matrix solve(const Matrix& a, const Matrix& b, const std::string& label = "A");

/// X with X * a = b.
Matrix solve_right(const Matrix& b, const Matrix& a, const std::string& label = "A");

double spectral_norm(const Matrix& m);

template <typename Derived>
double frobenius_norm(const Eigen::MatrixBase<Derived>& m) {
  return m.norm();
}

/// k-th largest singular value (1-indexed); zero for k beyond the dimension.
double sigma_k(const Matrix& m, Index k);

/// sigma_1 / sigma_min; +inf when sigma_min == 0.
double condition_estimate(const Matrix& m);

enum class Scheme { XavierUniform, StandardGaussian };

/// Deterministic generator: identical seeds give identical streams on every
/// platform (draws are mapped from raw 64-bit output, not through
/// std::*_distribution).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64();
  double uniform();   // [0, 1)
  double gaussian();  // N(0, 1)

 private:
  std::uint64_t state_;
};

/// Hash-combines a base seed with a path of stream identifiers so that
/// independent streams (per cell, per sample, per purpose) never collide.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0,
                          std::uint64_t c = 0);

Matrix random_matrix(Index rows, Index cols, Scheme scheme, std::uint64_t seed);
Vector random_vector(Index n, Scheme scheme, std::uint64_t seed);

}  // namespace lora
