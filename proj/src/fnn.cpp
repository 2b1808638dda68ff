#include "lora/fnn.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace lora {

FnnModel::FnnModel(std::vector<Matrix> weights, std::vector<Vector> biases)
    : weights_(std::move(weights)), biases_(std::move(biases)) {
  if (weights_.empty() || weights_.size() != biases_.size()) {
    throw DimensionError("weights and biases must be nonempty and equally long");
  }
  const Index d = weights_[0].rows();
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    if (weights_[l].rows() != d || weights_[l].cols() != d || biases_[l].size() != d) {
      throw DimensionError("layer " + std::to_string(l + 1) + " has mismatched shapes");
    }
    require_finite(weights_[l], "W_" + std::to_string(l + 1));
    require_finite(biases_[l], "b_" + std::to_string(l + 1));
  }
}

Vector fnn_forward(const FnnModel& model, const Vector& x) {
  if (x.size() != model.dim()) throw DimensionError("input length must match the model");
  Vector z = x;
  for (std::size_t l = 0; l < model.depth(); ++l) {
    z = ((model.weight(l) * z + model.bias(l)).array().max(0.0)).matrix();
  }
  return z;
}

Matrix fnn_forward(const FnnModel& model, const Matrix& x) {
  if (x.rows() != model.dim()) throw DimensionError("input rows must match the model");
  Matrix z = x;
  for (std::size_t l = 0; l < model.depth(); ++l) {
    z = (((model.weight(l) * z).colwise() + model.bias(l)).array().max(0.0)).matrix();
  }
  return z;
}

Partition uniform_partition(std::size_t frozen_depth, std::size_t target_depth) {
  if (target_depth < 1 || frozen_depth < target_depth) {
    throw DimensionError("partition requires frozen depth >= target depth >= 1");
  }
  const std::size_t m = frozen_depth / target_depth;
  Partition partition;
  for (std::size_t i = 0; i < target_depth; ++i) {
    const std::size_t first = i * m + 1;
    const std::size_t last = (i + 1 == target_depth) ? frozen_depth : (i + 1) * m;
    partition.blocks.push_back({first, last});
  }
  return partition;
}

void validate_partition(const Partition& partition, std::size_t frozen_depth) {
  if (partition.blocks.empty()) throw DimensionError("partition has no blocks");
  std::size_t expected = 1;
  for (const auto& block : partition.blocks) {
    if (block.first != expected || block.last < block.first) {
      throw DimensionError("partition blocks must be consecutive and ordered");
    }
    expected = block.last + 1;
  }
  if (expected != frozen_depth + 1) {
    throw DimensionError("partition must cover every frozen layer exactly once");
  }
}

namespace {

double max_row_norm(const Matrix& m) { return m.rowwise().norm().maxCoeff(); }

LinearChain block_chain(const FnnModel& model, const Partition::Block& block) {
  std::vector<Matrix> ws(model.weights().begin() + static_cast<long>(block.first) - 1,
                         model.weights().begin() + static_cast<long>(block.last));
  return LinearChain(std::move(ws));
}

}  // namespace

FnnBlockPlan synthesize_block(const LinearChain& frozen_layers, const Matrix& target_weight,
                              const Vector& target_bias, const RankBudget& budget,
                              double input_bound, const SynthesisOptions& opts) {
  if (!(input_bound > 0)) throw DimensionError("input bound must be positive");
  const std::size_t depth = frozen_layers.depth();
  const Index d = frozen_layers.dim();
  if (target_bias.size() != d) throw DimensionError("target bias has the wrong length");

  const LinearAdapterPlan linear = synthesize(frozen_layers, target_weight, budget, opts);
  const std::vector<Matrix> adapted = adapted_weights(frozen_layers, linear);

  FnnBlockPlan plan;
  plan.deltas = linear.deltas;
  plan.predicted_error = linear.predicted_spectral_error;
  plan.input_bound = input_bound;
  plan.new_biases.resize(depth);

  // Offsets keep every pre-activation of layers 1..depth-1 strictly positive
  // for inputs with ||x|| <= input_bound; the running bound tracks ||z_l||.
  double bound = input_bound;
  for (std::size_t l = 0; l + 1 < depth; ++l) {
    double c = 1.1 * max_row_norm(adapted[l]) * bound;
    if (c <= 0) c = 1.0;
    plan.activation_offsets.push_back(c);
    plan.new_biases[l] = Vector::Constant(d, c);
    bound = spectral_norm(adapted[l]) * bound + c * std::sqrt(static_cast<double>(d));
  }

  // Final bias realigns the accumulated offsets with the target bias.
  Vector aligned = target_bias;
  Matrix suffix = Matrix::Identity(d, d);  // product adapted[depth-1] .. adapted[l+1]
  for (std::size_t l = depth - 1; l > 0; --l) {
    suffix = suffix * adapted[l];
    aligned -= suffix * plan.new_biases[l - 1];
  }
  plan.new_biases[depth - 1] = aligned;
  return plan;
}

FnnAdapterPlan synthesize(const FnnModel& frozen, const FnnModel& target,
                          const Partition& partition, const RankBudget& budget, double rho,
                          const SynthesisOptions& opts) {
  validate_partition(partition, frozen.depth());
  if (partition.target_depth() != target.depth()) {
    throw DimensionError("partition block count must equal the target depth");
  }
  if (frozen.dim() != target.dim()) throw DimensionError("model dimensions differ");
  if (budget.layers() != frozen.depth()) {
    throw DimensionError("budget length must match the frozen depth");
  }
  if (!(rho > 0)) throw DimensionError("input radius must be positive");

  FnnAdapterPlan plan;
  plan.input_radius = rho;

  double target_bound = rho;  // bound on ||z_i|| through the target model
  double drift = 0.0;         // worst-case deviation of the adapted trajectory
  for (std::size_t i = 0; i < partition.blocks.size(); ++i) {
    const auto& block = partition.blocks[i];
    const LinearChain chain = block_chain(frozen, block);
    std::vector<Index> ranks;
    for (std::size_t l = block.first; l <= block.last; ++l) ranks.push_back(budget.at(l - 1));

    const double input_bound = target_bound + drift;
    FnnBlockPlan piece;
    try {
      piece = synthesize_block(chain, target.weight(i), target.bias(i),
                               RankBudget::per_layer(ranks), input_bound, opts);
    } catch (const NonSingularityViolation& err) {
      throw NonSingularityViolation("block " + std::to_string(i + 1) + ": " + err.what());
    }

    for (std::size_t l = 0; l < block.size(); ++l) {
      plan.deltas.push_back(piece.deltas[l]);
      plan.new_biases.push_back(piece.new_biases[l]);
      plan.activation_offsets.push_back(l + 1 < block.size() ? piece.activation_offsets[l]
                                                             : 0.0);
    }
    plan.per_block_predicted_error.push_back(piece.predicted_error);

    // The adapted block acts as one linear layer with weight prod(W + dW).
    Matrix effective = Matrix::Identity(frozen.dim(), frozen.dim());
    for (std::size_t l = 0; l < block.size(); ++l) {
      effective = (chain.weight(l) + piece.deltas[l]) * effective;
    }
    drift = spectral_norm(effective) * drift + piece.predicted_error * target_bound;
    target_bound = frobenius_norm(target.weight(i)) * target_bound + target.bias(i).norm();
  }
  return plan;
}

FnnModel apply_plan(const FnnModel& frozen, const FnnAdapterPlan& plan) {
  if (plan.deltas.size() != frozen.depth() || plan.new_biases.size() != frozen.depth()) {
    throw DimensionError("plan does not match the frozen model");
  }
  std::vector<Matrix> ws;
  std::vector<Vector> bs;
  for (std::size_t l = 0; l < frozen.depth(); ++l) {
    ws.push_back(frozen.weight(l) + plan.deltas[l]);
    bs.push_back(plan.new_biases[l]);
  }
  return FnnModel(std::move(ws), std::move(bs));
}

RequiredRankReport required_rank(const FnnModel& frozen, const FnnModel& target,
                                 const Partition& partition) {
  validate_partition(partition, frozen.depth());
  if (partition.target_depth() != target.depth()) {
    throw DimensionError("partition block count must equal the target depth");
  }
  RequiredRankReport report;
  for (std::size_t i = 0; i < partition.blocks.size(); ++i) {
    const LinearChain chain = block_chain(frozen, partition.blocks[i]);
    const Index gap_rank =
        numerical_rank(target.weight(i) - chain.product()).numerical_rank;
    const auto size = static_cast<Index>(partition.blocks[i].size());
    const Index need = (gap_rank + size - 1) / size;
    report.per_block.push_back(need);
    report.overall = std::max(report.overall, need);
  }
  return report;
}

ErrorBoundReport error_bound(const FnnModel& frozen, const FnnModel& target,
                             const Partition& partition, const RankBudget& budget,
                             const Matrix& sigma) {
  validate_partition(partition, frozen.depth());
  if (partition.target_depth() != target.depth()) {
    throw DimensionError("partition block count must equal the target depth");
  }
  if (budget.layers() != frozen.depth()) {
    throw DimensionError("budget length must match the frozen depth");
  }
  if (sigma.rows() != frozen.dim() || sigma.cols() != frozen.dim()) {
    throw DimensionError("sigma must be D x D");
  }

  ErrorBoundReport report;
  const std::size_t lbar = target.depth();
  for (std::size_t i = 0; i < lbar; ++i) {
    const auto& block = partition.blocks[i];
    const LinearChain chain = block_chain(frozen, block);
    Index total = 0;
    for (std::size_t l = block.first; l <= block.last; ++l) total += budget.at(l - 1);
    report.per_block_error.push_back(
        sigma_k(target.weight(i) - chain.product(), total + 1));
  }

  const double root_sigma = std::sqrt(frobenius_norm(sigma));
  double beta = root_sigma;
  for (std::size_t i = 1; i <= lbar; ++i) {
    double weight_prod = 1.0;
    for (std::size_t j = 1; j <= i; ++j) weight_prod *= frobenius_norm(target.weight(j - 1));
    double bias_sum = 0.0;
    for (std::size_t j = 1; j <= i; ++j) {
      double inner = 1.0;
      for (std::size_t k = j + 1; k + 1 <= i; ++k) inner *= frobenius_norm(target.weight(k - 1));
      bias_sum += inner * target.bias(j - 1).norm();
    }
    beta = std::max(beta, root_sigma * weight_prod + bias_sum);
  }
  report.beta = beta;

  double alpha = 0.0;
  for (std::size_t k = 0; k < lbar; ++k) {
    alpha = std::max(alpha, frobenius_norm(target.weight(k)) + report.per_block_error[k]);
  }
  double bound = 0.0;
  for (std::size_t i = 1; i <= lbar; ++i) {
    bound += std::pow(alpha, static_cast<double>(lbar - i)) * report.per_block_error[i - 1];
  }
  report.bound = beta * bound;
  return report;
}

namespace {

// One input strictly inside both half-space systems: W x + b < 0, Wbar x + bbar > 0.
std::optional<Vector> witness_point(const Matrix& w_frozen, const Vector& b_frozen,
                                    const Matrix& w_target, const Vector& b_target,
                                    Rng& rng, std::size_t max_refinements) {
  const Index d = w_frozen.rows();
  Vector p(d);
  for (Index i = 0; i < d; ++i) p(i) = -std::abs(rng.gaussian()) - 1e-3;

  const Eigen::PartialPivLU<Matrix> lu_frozen(w_frozen);
  const Eigen::PartialPivLU<Matrix> lu_target(w_target);

  Vector direction;
  bool found = false;
  for (std::size_t it = 0; it < max_refinements && !found; ++it) {
    // Direction with frozen pre-activation exactly p (negative orthant).
    Vector w = lu_frozen.solve(p);
    Vector v = w_target * w;
    if (v.minCoeff() > 0) {
      direction = w;
      found = true;
      break;
    }
    // Clamp the target side into the positive orthant and map back.
    const double floor_v = 1e-3 * (v.cwiseAbs().maxCoeff() + 1.0);
    for (Index i = 0; i < d; ++i) v(i) = std::abs(v(i)) + floor_v;
    w = lu_target.solve(v);
    p = w_frozen * w;
    if (p.maxCoeff() < 0) {
      direction = w;
      found = true;
      break;
    }
    const double floor_p = 1e-3 * (p.cwiseAbs().maxCoeff() + 1.0);
    for (Index i = 0; i < d; ++i) p(i) = -std::abs(p(i)) - floor_p;
  }
  if (!found) return std::nullopt;

  // Scale until the biases are dominated.
  const Vector fp = w_frozen * direction;   // entrywise < 0
  const Vector tp = w_target * direction;   // entrywise > 0
  double scale = 1.0;
  for (Index i = 0; i < d; ++i) {
    if (b_frozen(i) > 0) scale = std::max(scale, b_frozen(i) / -fp(i));
    if (b_target(i) < 0) scale = std::max(scale, -b_target(i) / tp(i));
  }
  scale *= 2.0;

  const Vector x = scale * direction;
  const bool valid = ((w_frozen * x + b_frozen).maxCoeff() <= 0) &&
                     ((w_target * x + b_target).minCoeff() > 0);
  if (!valid) return std::nullopt;
  return x;
}

}  // namespace

std::optional<std::pair<Vector, Vector>> final_layer_witness(const FnnModel& frozen,
                                                             const FnnModel& target,
                                                             std::size_t search_budget,
                                                             std::uint64_t seed) {
  if (frozen.dim() < 2) throw DimensionError("witness search needs dimension >= 2");
  if (target.depth() != 1) throw DimensionError("witness search expects a one-layer target");
  if (!(condition_estimate(target.weight(0)) < kConditionCeiling)) {
    throw NonSingularityViolation("target weight matrix is numerically singular");
  }
  if (!(condition_estimate(frozen.weight(0)) < kConditionCeiling)) {
    throw NonSingularityViolation("frozen first-layer weight matrix is numerically singular");
  }

  const Matrix& w1 = frozen.weight(0);
  const Vector& b1 = frozen.bias(0);
  const Matrix& wt = target.weight(0);
  const Vector& bt = target.bias(0);

  Rng rng(derive_seed(seed, 0x57u));
  for (std::size_t attempt = 0; attempt < search_budget; ++attempt) {
    const auto x1 = witness_point(w1, b1, wt, bt, rng, 64);
    if (!x1) continue;
    // The feasible region is a scaled cone: doubling stays inside.
    const Vector x2 = 2.0 * (*x1);
    const bool x2_valid = ((w1 * x2 + b1).maxCoeff() <= 0) && ((wt * x2 + bt).minCoeff() > 0);
    if (!x2_valid) continue;
    return std::make_pair(*x1, x2);
  }
  return std::nullopt;
}

}  // namespace lora
