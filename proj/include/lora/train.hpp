#pragma once

#include <functional>
#include <limits>
#include <optional>
#include <vector>

#include "lora/fnn.hpp"
#include "lora/linear.hpp"
#include "lora/tape.hpp"
#include "lora/tfn.hpp"

namespace lora {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  std::vector<double> learning_rates{1e-2, 1e-3, 1e-4};
  std::vector<double> weight_decays{0.0, 1e-2, 1e-3, 1e-4};
  int iterations = 5000;
  int batch = 256;
  int validation_size = 256;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t seed = 0;
  int threads = 0;  // 0 picks the hardware concurrency
  /// When set, batches are drawn from a fixed pregenerated pool of this size
  /// instead of fresh samples.
  std::optional<int> finite_train_set;
};

enum class LossKind { Mse, CrossEntropy };

struct TrainOptions {
  bool train_biases = true;
  LossKind loss = LossKind::Mse;
  /// Frozen classification head applied on top of the network output.
  std::optional<Matrix> fixed_output_layer;
};

/// Factored adapter ABᵀ; B starts at zero so the realized update vanishes at
/// initialization.
struct LoraParam {
  Matrix a;
  Matrix b;
  Matrix delta() const { return a * b.transpose(); }
};

LoraParam init_lora_param(Index dim, Index rank, std::uint64_t seed);

/// A differentiable supervised objective over a flat parameter list.
class SupervisedProblem {
 public:
  virtual ~SupervisedProblem() = default;
  virtual Index input_dim() const = 0;
  virtual std::vector<Matrix> initial_params(std::uint64_t seed) const = 0;
  virtual Tape::NodeId build_loss(Tape& tape, const std::vector<Tape::NodeId>& params,
                                  const Matrix& inputs) const = 0;
  double eval_loss(const std::vector<Matrix>& params, const Matrix& inputs) const;
};

struct GridCellResult {
  double learning_rate = 0.0;
  double weight_decay = 0.0;
  bool diverged = false;
  double validation_loss = std::numeric_limits<double>::infinity();
  double final_train_loss = std::numeric_limits<double>::infinity();
  std::vector<Matrix> params;
  std::vector<double> losses;  // per-iteration training loss
};

struct TrainOutcome {
  std::size_t best_cell = 0;
  std::vector<GridCellResult> cells;

  const GridCellResult& best() const { return cells[best_cell]; }
};

/// Runs the full learning-rate x weight-decay grid, selects by validation
/// loss on an independent sample set, and returns every cell. Deterministic
/// per (config, seed) regardless of thread count.
TrainOutcome train(const SupervisedProblem& problem, const TrainConfig& config);

// ---- linear chains ----

struct LinearLoraProblem final : SupervisedProblem {
  LinearLoraProblem(LinearChain frozen, LinearChain target, Index rank);
  Index input_dim() const override { return frozen.dim(); }
  std::vector<Matrix> initial_params(std::uint64_t seed) const override;
  Tape::NodeId build_loss(Tape& tape, const std::vector<Tape::NodeId>& params,
                          const Matrix& inputs) const override;
  LinearChain adapted(const std::vector<Matrix>& params) const;

  LinearChain frozen;
  LinearChain target;
  Index rank;
};

// ---- ReLU networks ----

struct FnnLoraProblem final : SupervisedProblem {
  FnnLoraProblem(FnnModel frozen, FnnModel target, Index rank, TrainOptions options = {});
  Index input_dim() const override { return frozen.dim(); }
  std::vector<Matrix> initial_params(std::uint64_t seed) const override;
  Tape::NodeId build_loss(Tape& tape, const std::vector<Tape::NodeId>& params,
                          const Matrix& inputs) const override;
  FnnModel adapted(const std::vector<Matrix>& params) const;

  FnnModel frozen;
  FnnModel target;
  Index rank;
  TrainOptions options;
};

/// Full-weight tuning of the last tuned_layers layers; the earlier layers
/// stay frozen.
struct FnnFinalLayersProblem final : SupervisedProblem {
  FnnFinalLayersProblem(FnnModel frozen, FnnModel target, std::size_t tuned_layers,
                        TrainOptions options = {});
  Index input_dim() const override { return frozen.dim(); }
  std::vector<Matrix> initial_params(std::uint64_t seed) const override;
  Tape::NodeId build_loss(Tape& tape, const std::vector<Tape::NodeId>& params,
                          const Matrix& inputs) const override;
  FnnModel adapted(const std::vector<Matrix>& params) const;

  FnnModel frozen;
  FnnModel target;
  std::size_t tuned_layers;
  TrainOptions options;
};

// ---- transformers ----

struct TfnLoraProblem final : SupervisedProblem {
  TfnLoraProblem(TfnModel frozen, TfnModel target, Index rank, TrainOptions options = {});
  Index input_dim() const override { return frozen.dim(); }
  std::vector<Matrix> initial_params(std::uint64_t seed) const override;
  Tape::NodeId build_loss(Tape& tape, const std::vector<Tape::NodeId>& params,
                          const Matrix& inputs) const override;
  TfnModel adapted(const std::vector<Matrix>& params) const;
  /// Builds the adapted network on the tape up to the softmax output.
  Tape::NodeId build_output(Tape& tape, const std::vector<Tape::NodeId>& params,
                            const Matrix& inputs) const;

  TfnModel frozen;
  TfnModel target;
  Index rank;
  TrainOptions options;
  int tokens = 10;  // N per training sample
};

// ---- pretraining ----

struct PretrainResult {
  int iterations_used = 0;
  /// Running best validation-MSE ratio at each logged checkpoint.
  std::vector<double> checkpoint_ratios;
};

/// Full-rank updates on all weights until the validation MSE drops to
/// (1 - reduction_factor) of its initial value. Throws TrainingError with the
/// achieved ratio when the iteration cap (50000) is exceeded.
LinearChain pretrain_toward(const LinearChain& frozen, const LinearChain& target,
                            double reduction_factor, const TrainConfig& config,
                            PretrainResult* info = nullptr);
FnnModel pretrain_toward(const FnnModel& frozen, const FnnModel& target,
                         double reduction_factor, const TrainConfig& config,
                         PretrainResult* info = nullptr);
TfnModel pretrain_toward(const TfnModel& frozen, const TfnModel& target,
                         double reduction_factor, const TrainConfig& config,
                         PretrainResult* info = nullptr);

/// Column index of the largest coordinate per sample.
std::vector<int> argmax_labels(const Matrix& outputs);

/// Standard-Gaussian batch with one sample per column.
Matrix gaussian_inputs(Index dim, Index count, std::uint64_t seed);

}  // namespace lora
