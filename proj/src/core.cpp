#include "lora/core.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

namespace lora {

void require_finite(const Matrix& m, const std::string& name) {
  if (!m.allFinite()) {
    throw DimensionError(name + " contains non-finite entries");
  }
}

SvdResult svd(const Matrix& m, const std::string& label) {
  Eigen::BDCSVD<Matrix> dec(m, Eigen::ComputeThinU | Eigen::ComputeThinV);
  if (dec.info() != Eigen::Success) {
    std::ostringstream os;
    os << "SVD did not converge for " << label << " (" << m.rows() << "x" << m.cols()
       << ", condition estimate ";
    const auto& s = dec.singularValues();
    if (s.size() > 0 && s(s.size() - 1) > 0) {
      os << s(0) / s(s.size() - 1);
    } else {
      os << "inf";
    }
    os << ")";
    throw SvdError(os.str());
  }
  return SvdResult{dec.matrixU(), dec.singularValues(), dec.matrixV()};
}

Matrix best_rank_approx(const Matrix& m, Index r) {
  if (r < 0) throw DimensionError("rank must be nonnegative");
  const Index full = std::min(m.rows(), m.cols());
  if (r >= full) return m;
  if (r == 0) return Matrix::Zero(m.rows(), m.cols());
  const SvdResult s = svd(m);
  return s.u.leftCols(r) * s.singular_values.head(r).asDiagonal() *
         s.v.leftCols(r).transpose();
}

RankReport numerical_rank(const Matrix& m, double tol_factor) {
  if (tol_factor <= 0) throw DimensionError("tol_factor must be positive");
  const SvdResult s = svd(m);
  const double sigma1 = s.singular_values.size() > 0 ? s.singular_values(0) : 0.0;
  const double threshold =
      tol_factor * sigma1 * static_cast<double>(std::max(m.rows(), m.cols()));
  Index rank = 0;
  for (Index i = 0; i < s.singular_values.size(); ++i) {
    if (s.singular_values(i) > threshold) ++rank;
  }
  return RankReport{rank, threshold, s.singular_values};
}

Matrix chain_product(std::span<const Matrix> ws, Index dim_if_empty) {
  if (ws.empty()) {
    if (dim_if_empty < 0) {
      throw DimensionError("empty chain product needs an explicit dimension");
    }
    return Matrix::Identity(dim_if_empty, dim_if_empty);
  }
  const Index dim = ws.front().rows();
  for (const Matrix& w : ws) {
    if (w.rows() != dim || w.cols() != dim) {
      throw DimensionError("chain product requires equal square factors");
    }
  }
  Matrix acc = ws.front();
  for (std::size_t l = 1; l < ws.size(); ++l) {
    acc = ws[l] * acc;
  }
  return acc;
}

namespace {

Eigen::PartialPivLU<Matrix> checked_lu(const Matrix& a, const std::string& label) {
  if (a.rows() != a.cols()) throw DimensionError("solve requires a square matrix");
  Eigen::PartialPivLU<Matrix> lu(a);
  const double rcond = lu.rcond();
  if (!(rcond > 1.0 / kConditionCeiling)) {
    std::ostringstream os;
    os << label << " is numerically singular (condition estimate "
       << (rcond > 0 ? 1.0 / rcond : std::numeric_limits<double>::infinity()) << ")";
    throw NonSingularityViolation(os.str());
  }
  return lu;
}

}  // namespace

Matrix solve(const Matrix& a, const Matrix& b, const std::string& label) {
  if (a.rows() != b.rows()) throw DimensionError("solve: incompatible right-hand side");
  return checked_lu(a, label).solve(b);
}

Matrix solve_right(const Matrix& b, const Matrix& a, const std::string& label) {
  if (a.cols() != b.cols()) throw DimensionError("solve_right: incompatible left-hand side");
  return checked_lu(a.transpose(), label).solve(b.transpose()).transpose();
}

double spectral_norm(const Matrix& m) {
  if (m.size() == 0) return 0.0;
  return svd(m).singular_values(0);
}

double sigma_k(const Matrix& m, Index k) {
  if (k < 1) throw DimensionError("singular value index is 1-based");
  const SvdResult s = svd(m);
  if (k > s.singular_values.size()) return 0.0;
  return s.singular_values(k - 1);
}

double condition_estimate(const Matrix& m) {
  const SvdResult s = svd(m);
  const Index n = s.singular_values.size();
  if (n == 0) return std::numeric_limits<double>::infinity();
  const double smin = s.singular_values(n - 1);
  if (smin <= 0) return std::numeric_limits<double>::infinity();
  return s.singular_values(0) / smin;
}

namespace {

inline std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9E3779B97F4A7C15ULL;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace

std::uint64_t Rng::next_u64() { return splitmix64(state_); }

double Rng::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::gaussian() {
  const double u1 = 1.0 - uniform();  // (0, 1]
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b,
                          std::uint64_t c) {
  std::uint64_t state = base;
  splitmix64(state);
  state ^= 0xA24BAED4963EE407ULL + a;
  splitmix64(state);
  state ^= 0x9FB21C651E98DF25ULL + b;
  splitmix64(state);
  state ^= 0xE7037ED1A0B428DBULL + c;
  return splitmix64(state);
}

Matrix random_matrix(Index rows, Index cols, Scheme scheme, std::uint64_t seed) {
  Rng rng(seed);
  Matrix m(rows, cols);
  if (scheme == Scheme::XavierUniform) {
    const double a = std::sqrt(6.0 / static_cast<double>(rows + cols));
    for (Index i = 0; i < rows; ++i)
      for (Index j = 0; j < cols; ++j) m(i, j) = (2.0 * rng.uniform() - 1.0) * a;
  } else {
    for (Index i = 0; i < rows; ++i)
      for (Index j = 0; j < cols; ++j) m(i, j) = rng.gaussian();
  }
  return m;
}

Vector random_vector(Index n, Scheme scheme, std::uint64_t seed) {
  return random_matrix(n, 1, scheme, seed).col(0);
}

}  // namespace lora
