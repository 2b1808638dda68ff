#include "lora/linear.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace lora {

LinearChain::LinearChain(std::vector<Matrix> weights) : weights_(std::move(weights)) {
  if (weights_.empty()) throw DimensionError("a chain needs at least one layer");
  const Index d = weights_[0].rows();
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    const Matrix& w = weights_[l];
    if (w.rows() != d || w.cols() != d) {
      throw DimensionError("chain weights must be square and equally sized");
    }
    require_finite(w, "W_" + std::to_string(l + 1));
  }
}

RankBudget RankBudget::uniform(Index r, std::size_t layers) {
  if (r < 0) throw DimensionError("rank budget must be nonnegative");
  if (layers == 0) throw DimensionError("budget needs at least one layer");
  return RankBudget(std::vector<Index>(layers, r));
}

RankBudget RankBudget::per_layer(std::vector<Index> ranks) {
  if (ranks.empty()) throw DimensionError("budget needs at least one layer");
  for (Index r : ranks) {
    if (r < 0) throw DimensionError("rank budget must be nonnegative");
  }
  return RankBudget(std::move(ranks));
}

Index RankBudget::total() const {
  return std::accumulate(ranks_.begin(), ranks_.end(), Index{0});
}

Index RankBudget::assumption_limit() const {
  return total() - ranks_.back();
}

const CheckedMatrix* AssumptionReport::worst() const {
  const CheckedMatrix* out = nullptr;
  for (const auto& c : checked_matrices) {
    if (out == nullptr || c.condition > out->condition) out = &c;
  }
  return out;
}

Matrix error_matrix(const LinearChain& chain, const Matrix& target) {
  if (target.rows() != chain.dim() || target.cols() != chain.dim()) {
    throw DimensionError("target must match the chain dimension");
  }
  return target - chain.product();
}

namespace {

void validate_budget(const LinearChain& chain, const RankBudget& budget) {
  if (budget.layers() != chain.depth()) {
    throw DimensionError("budget length must match the chain depth");
  }
  for (std::size_t l = 0; l < budget.layers(); ++l) {
    if (budget.at(l) > chain.dim()) {
      throw DimensionError("per-layer rank cannot exceed the dimension");
    }
  }
}

}  // namespace

double optimal_error(const LinearChain& chain, const Matrix& target, const RankBudget& budget) {
  validate_budget(chain, budget);
  return sigma_k(error_matrix(chain, target), budget.total() + 1);
}

AssumptionReport check_assumptions(const LinearChain& chain, const Matrix& target,
                                   const RankBudget& budget) {
  validate_budget(chain, budget);
  AssumptionReport report;
  auto record = [&report](std::string name, double cond) {
    report.checked_matrices.push_back({std::move(name), cond, cond < kConditionCeiling});
  };

  for (std::size_t l = 0; l < chain.depth(); ++l) {
    record("W_" + std::to_string(l + 1), condition_estimate(chain.weight(l)));
  }

  const Matrix product = chain.product();
  const Matrix e = target - product;
  const SvdResult es = svd(e, "error matrix");
  const Index limit = std::min<Index>(budget.assumption_limit(), chain.dim());
  for (Index r = 1; r <= limit; ++r) {
    const Matrix perturbed =
        product + es.u.leftCols(r) * es.singular_values.head(r).asDiagonal() *
                      es.v.leftCols(r).transpose();
    record("prod(W) + alpha_" + std::to_string(r) + "(E)", condition_estimate(perturbed));
  }

  report.satisfied = true;
  report.min_condition_margin = std::numeric_limits<double>::infinity();
  for (const auto& c : report.checked_matrices) {
    report.satisfied = report.satisfied && c.ok;
    const double margin = c.condition > 0 ? kConditionCeiling / c.condition : 0.0;
    report.min_condition_margin = std::min(report.min_condition_margin, margin);
  }
  return report;
}

namespace {

LinearAdapterPlan synthesize_impl(const LinearChain& chain, const Matrix& target,
                                  const RankBudget& budget) {
  const std::size_t depth = chain.depth();
  const Index d = chain.dim();

  const Matrix e = target - chain.product();
  const SvdResult es = svd(e, "error matrix");
  const Index e_rank = numerical_rank(e).numerical_rank;
  const Index total = budget.total();
  const Index effective = std::min(total, e_rank);

  // Suffix products W_L ... W_{l+2} * W_{l+1} (0-based: factors after layer l).
  std::vector<Matrix> suffix(depth);
  suffix[depth - 1] = Matrix::Identity(d, d);
  for (std::size_t l = depth - 1; l > 0; --l) {
    suffix[l - 1] = suffix[l] * chain.weight(l);
  }

  LinearAdapterPlan plan;
  plan.deltas.reserve(depth);
  plan.effective_rank_used = effective;

  Matrix prefix = Matrix::Identity(d, d);  // product of adapted layers so far
  Index used = 0;                          // singular directions consumed
  for (std::size_t l = 0; l < depth; ++l) {
    const Index lo = used;                                    // 0-based window
    const Index hi = std::min(used + budget.at(l), effective);
    Matrix delta;
    if (lo >= hi) {
      delta = Matrix::Zero(d, d);
    } else {
      const Index n = hi - lo;
      // E' Q_l keeps exactly the singular directions lo..hi-1 of E.
      Matrix eq = es.u.middleCols(lo, n) * es.singular_values.segment(lo, n).asDiagonal() *
                  es.v.middleCols(lo, n).transpose();
      if (l + 1 < depth) {
        eq = solve(suffix[l], eq, "prod(W_" + std::to_string(l + 2) + "..W_" +
                                      std::to_string(depth) + ")");
      }
      delta = (l == 0) ? std::move(eq)
                       : solve_right(eq, prefix,
                                     "adapted prefix through layer " + std::to_string(l));
    }
    used = hi;

    const Matrix adapted = chain.weight(l) + delta;
    if (l + 1 < depth) {
      const double cond = condition_estimate(adapted);
      if (!(cond < kConditionCeiling)) {
        std::ostringstream os;
        os << "W_" << (l + 1) << " + dW_" << (l + 1) << " became singular (r = " << used
           << ", condition estimate " << cond << ")";
        throw NonSingularityViolation(os.str());
      }
    }
    prefix = adapted * prefix;
    plan.deltas.push_back(std::move(delta));
  }

  plan.predicted_spectral_error =
      total < d ? es.singular_values(total) : 0.0;
  plan.achieved_spectral_error = spectral_norm(prefix - target);
  return plan;
}

}  // namespace

LinearAdapterPlan synthesize(const LinearChain& chain, const Matrix& target,
                             const RankBudget& budget, const SynthesisOptions& opts) {
  validate_budget(chain, budget);
  require_finite(target, "target");

  AssumptionReport report = check_assumptions(chain, target, budget);
  if (report.satisfied) {
    return synthesize_impl(chain, target, budget);
  }
  if (opts.jitter > 0.0) {
    std::vector<Matrix> jittered = chain.weights();
    for (std::size_t l = 0; l < jittered.size(); ++l) {
      jittered[l] += opts.jitter * random_matrix(chain.dim(), chain.dim(),
                                                 Scheme::StandardGaussian,
                                                 derive_seed(opts.jitter_seed, l));
    }
    const LinearChain retry(std::move(jittered));
    AssumptionReport retried = check_assumptions(retry, target, budget);
    if (retried.satisfied) {
      return synthesize_impl(retry, target, budget);
    }
    report = std::move(retried);
  }
  const CheckedMatrix* worst = report.worst();
  std::ostringstream os;
  os << "assumption check failed";
  if (worst != nullptr) {
    os << ": " << worst->name << " has condition estimate " << worst->condition;
  }
  throw NonSingularityViolation(os.str());
}

Matrix embed_wider_target(const Matrix& target, const LinearChain& chain) {
  if (target.rows() != target.cols()) throw DimensionError("target must be square");
  const Index small = target.rows();
  const Index d = chain.dim();
  if (small > d) throw DimensionError("target dimension exceeds the chain dimension");
  Matrix expanded = chain.product();
  expanded.topLeftCorner(small, small) = target;
  return expanded;
}

std::vector<Matrix> adapted_weights(const LinearChain& chain, const LinearAdapterPlan& plan) {
  if (plan.deltas.size() != chain.depth()) {
    throw DimensionError("plan does not match the chain depth");
  }
  std::vector<Matrix> out;
  out.reserve(chain.depth());
  for (std::size_t l = 0; l < chain.depth(); ++l) {
    out.push_back(chain.weight(l) + plan.deltas[l]);
  }
  return out;
}

}  // namespace lora
