#pragma once

#include <optional>
#include <vector>

#include "lora/core.hpp"

namespace lora {

/// Ordered square weight matrices; weights[0] is the first layer applied,
/// so the realized map is weights[L-1] * ... * weights[0].
class LinearChain {
 public:
  explicit LinearChain(std::vector<Matrix> weights);

  Index dim() const { return weights_[0].rows(); }
  std::size_t depth() const { return weights_.size(); }
  const std::vector<Matrix>& weights() const { return weights_; }
  const Matrix& weight(std::size_t l) const { return weights_[l]; }  // 0-based

  Matrix product() const { return chain_product(weights_, dim()); }

 private:
  std::vector<Matrix> weights_;
};

/// Per-layer rank caps for the adapters. A uniform budget is stored as a
/// constant per-layer sequence.
class RankBudget {
 public:
  static RankBudget uniform(Index r, std::size_t layers);
  static RankBudget per_layer(std::vector<Index> ranks);

  Index at(std::size_t l) const { return ranks_[l]; }  // 0-based
  std::size_t layers() const { return ranks_.size(); }
  Index total() const;
  /// Sum over all but the last layer; the assumption set ranges over
  /// r = 1..this.
  Index assumption_limit() const;

 private:
  explicit RankBudget(std::vector<Index> ranks) : ranks_(std::move(ranks)) {}
  std::vector<Index> ranks_;
};

struct LinearAdapterPlan {
  std::vector<Matrix> deltas;
  double achieved_spectral_error = 0.0;
  double predicted_spectral_error = 0.0;
  Index effective_rank_used = 0;
};

struct CheckedMatrix {
  std::string name;
  double condition = 0.0;
  bool ok = false;
};

struct AssumptionReport {
  std::vector<CheckedMatrix> checked_matrices;
  /// min over checked matrices of ceiling / condition; > 1 iff satisfied.
  double min_condition_margin = 0.0;
  bool satisfied = false;

  const CheckedMatrix* worst() const;
};

struct SynthesisOptions {
  /// When > 0 and the assumption check fails, retry once after adding
  /// jitter-scaled Gaussian noise to the frozen chain.
  double jitter = 0.0;
  std::uint64_t jitter_seed = 0;
};

Matrix error_matrix(const LinearChain& chain, const Matrix& target);

/// The smallest achievable spectral error for the given budget:
/// sigma_{sum(R_l)+1} of the error matrix (zero past the dimension).
double optimal_error(const LinearChain& chain, const Matrix& target, const RankBudget& budget);

AssumptionReport check_assumptions(const LinearChain& chain, const Matrix& target,
                                   const RankBudget& budget);

/// Closed-form optimal adapters: the adapted product equals the frozen
/// product plus the best rank-(sum R_l) approximation of the error matrix.
LinearAdapterPlan synthesize(const LinearChain& chain, const Matrix& target,
                             const RankBudget& budget, const SynthesisOptions& opts = {});

/// Pads a smaller target up to the frozen dimension: the leading block is the
/// target, remaining entries copy the frozen product, so the error matrix has
/// rank at most the target dimension.
Matrix embed_wider_target(const Matrix& target, const LinearChain& chain);

std::vector<Matrix> adapted_weights(const LinearChain& chain, const LinearAdapterPlan& plan);

}  // namespace lora
