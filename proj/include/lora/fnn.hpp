#pragma once

#include <optional>
#include <utility>
#include <vector>

#include "lora/linear.hpp"

namespace lora {

/// Fully connected ReLU network: z_l = ReLU(W_l z_{l-1} + b_l).
class FnnModel {
 public:
  FnnModel(std::vector<Matrix> weights, std::vector<Vector> biases);

  Index dim() const { return weights_[0].rows(); }
  std::size_t depth() const { return weights_.size(); }
  const std::vector<Matrix>& weights() const { return weights_; }
  const std::vector<Vector>& biases() const { return biases_; }
  const Matrix& weight(std::size_t l) const { return weights_[l]; }
  const Vector& bias(std::size_t l) const { return biases_[l]; }

 private:
  std::vector<Matrix> weights_;
  std::vector<Vector> biases_;
};

Vector fnn_forward(const FnnModel& model, const Vector& x);
/// Columns of X are independent inputs.
Matrix fnn_forward(const FnnModel& model, const Matrix& x);

/// Ordered consecutive ranges of frozen layers, one per target layer.
struct Partition {
  struct Block {
    std::size_t first = 0;  // 1-based, inclusive
    std::size_t last = 0;
    std::size_t size() const { return last - first + 1; }
  };
  std::vector<Block> blocks;

  std::size_t target_depth() const { return blocks.size(); }
  std::size_t frozen_depth() const { return blocks.empty() ? 0 : blocks.back().last; }
};

/// Blocks of size floor(L/Lbar); the last block absorbs the remainder.
Partition uniform_partition(std::size_t frozen_depth, std::size_t target_depth);

void validate_partition(const Partition& partition, std::size_t frozen_depth);

struct FnnBlockPlan {
  std::vector<Matrix> deltas;
  std::vector<Vector> new_biases;
  /// Constant bias offsets keeping every non-final layer active on the
  /// certified input set; indexed per non-final layer.
  std::vector<double> activation_offsets;
  double predicted_error = 0.0;  // spectral error of the block's linear match
  double input_bound = 0.0;
};

/// Adapts one frozen block so that on inputs with norm <= input_bound it
/// behaves as ReLU((prod(W) + alpha(E)) x + target_bias): the first layers are
/// driven into their linear regions by large offsets, the final bias realigns.
FnnBlockPlan synthesize_block(const LinearChain& frozen_layers, const Matrix& target_weight,
                              const Vector& target_bias, const RankBudget& budget,
                              double input_bound, const SynthesisOptions& opts = {});

struct FnnAdapterPlan {
  std::vector<Matrix> deltas;
  std::vector<Vector> new_biases;
  double input_radius = 0.0;
  /// Per frozen layer; zero at the last layer of each block.
  std::vector<double> activation_offsets;
  std::vector<double> per_block_predicted_error;
};

FnnAdapterPlan synthesize(const FnnModel& frozen, const FnnModel& target,
                          const Partition& partition, const RankBudget& budget, double rho,
                          const SynthesisOptions& opts = {});

FnnModel apply_plan(const FnnModel& frozen, const FnnAdapterPlan& plan);

struct RequiredRankReport {
  std::vector<Index> per_block;
  Index overall = 0;
};

/// ceil(rank(target_i - prod of block weights) / block size) per block.
RequiredRankReport required_rank(const FnnModel& frozen, const FnnModel& target,
                                 const Partition& partition);

struct ErrorBoundReport {
  double beta = 0.0;
  std::vector<double> per_block_error;
  double bound = 0.0;
};

/// Upper bound on E||f(x) - target(x)|| for the constructed adapters, with
/// sigma = E[x x^T].
ErrorBoundReport error_bound(const FnnModel& frozen, const FnnModel& target,
                             const Partition& partition, const RankBudget& budget,
                             const Matrix& sigma);

/// Searches for a pair of inputs on which the frozen first layer is fully
/// inactive while the one-layer target is fully active. Such a pair proves
/// that no tuning of the later layers can reproduce the target. Returns
/// nothing after search_budget seeds without a verified pair.
std::optional<std::pair<Vector, Vector>> final_layer_witness(const FnnModel& frozen,
                                                             const FnnModel& target,
                                                             std::size_t search_budget,
                                                             std::uint64_t seed = 0);

}  // namespace lora
