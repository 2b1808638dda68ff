#include "lora/tfn.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace lora {

namespace {

void validate_square(const Matrix& m, Index d, const std::string& name) {
  if (m.rows() != d || m.cols() != d) throw DimensionError(name + " must be D x D");
  require_finite(m, name);
}

}  // namespace

TfnModel::TfnModel(HeadType head_type, std::vector<TfnBlock> blocks, Matrix w_out)
    : head_type_(head_type), blocks_(std::move(blocks)), w_out_(std::move(w_out)) {
  if (blocks_.empty()) throw DimensionError("a transformer needs at least one block");
  const Index d = w_out_.rows();
  validate_square(w_out_, d, "W_o");
  const std::size_t heads = blocks_[0].w_k.size();
  if (heads == 0) throw DimensionError("blocks need at least one head");
  if (head_type_ == HeadType::Single && heads != 1) {
    throw DimensionError("single-head models must have exactly one head");
  }
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    const TfnBlock& blk = blocks_[l];
    const std::string tag = "block " + std::to_string(l + 1);
    if (blk.w_k.size() != heads || blk.w_q.size() != heads || blk.w_v.size() != heads) {
      throw DimensionError(tag + " has inconsistent head counts");
    }
    if (head_type_ == HeadType::Multi && blk.w_o.size() != heads) {
      throw DimensionError(tag + " is missing output projections");
    }
    if (head_type_ == HeadType::Single && !blk.w_o.empty()) {
      throw DimensionError(tag + " must not carry output projections");
    }
    for (std::size_t h = 0; h < heads; ++h) {
      validate_square(blk.w_k[h], d, tag + " W_K");
      validate_square(blk.w_q[h], d, tag + " W_Q");
      validate_square(blk.w_v[h], d, tag + " W_V");
      if (head_type_ == HeadType::Multi) validate_square(blk.w_o[h], d, tag + " W_O");
    }
    validate_square(blk.w1, d, tag + " W_1");
    validate_square(blk.w2, d, tag + " W_2");
    if (blk.b1.size() != d || blk.b2.size() != d) {
      throw DimensionError(tag + " biases must have length D");
    }
  }
}

Matrix col_softmax(const Matrix& scores) {
  Matrix out(scores.rows(), scores.cols());
  for (Index j = 0; j < scores.cols(); ++j) {
    const Vector col = scores.col(j);
    const Vector shifted = (col.array() - col.maxCoeff()).exp();
    out.col(j) = shifted / shifted.sum();
  }
  return out;
}

namespace {

Matrix attention(const TfnModel& model, const TfnBlock& blk, const Matrix& z) {
  const Index d = model.dim();
  Matrix acc = Matrix::Zero(d, z.cols());
  for (std::size_t h = 0; h < model.heads(); ++h) {
    const Matrix scores = (blk.w_k[h] * z).transpose() * (blk.w_q[h] * z);
    Matrix head = blk.w_v[h] * z * col_softmax(scores);
    if (model.head_type() == HeadType::Multi) head = blk.w_o[h] * head;
    acc += head;
  }
  return acc;
}

}  // namespace

TfnTrace tfn_forward_trace(const TfnModel& model, const Matrix& x) {
  if (x.rows() != model.dim() || x.cols() < 1) {
    throw DimensionError("input must be D x N with N >= 1");
  }
  TfnTrace trace;
  Matrix z = x;
  for (std::size_t l = 0; l < model.depth(); ++l) {
    const TfnBlock& blk = model.block(l);
    const Matrix pre = (blk.w1 * attention(model, blk, z)).colwise() + blk.b1;
    Matrix h = pre.array().max(0.0).matrix();
    z = (blk.w2 * h).colwise() + blk.b2;
    trace.h.push_back(std::move(h));
    trace.z.push_back(z);
  }
  trace.output = col_softmax(model.w_out() * z);
  return trace;
}

Matrix tfn_forward(const TfnModel& model, const Matrix& x) {
  return tfn_forward_trace(model, x).output;
}

namespace {

struct PairTargets {
  Matrix kq;  // desired (W_K + dK)^T (W_Q + dQ)
  Matrix vp;  // desired value-path product
};

void check_compatible(const TfnModel& frozen, const TfnModel& target) {
  if (frozen.head_type() != target.head_type() || frozen.dim() != target.dim() ||
      frozen.depth() != target.depth() || frozen.heads() != target.heads()) {
    throw DimensionError("frozen and target transformers must share shape");
  }
}

/// Right conjugation factor for blocks past the first:
/// M = Wbar_{2,l-1} * W_{2,l-1}^{-1}.
Matrix right_conjugation(const TfnBlock& frozen_prev, const TfnBlock& target_prev,
                         std::size_t block_index) {
  return solve_right(target_prev.w2, frozen_prev.w2,
                     "W_2," + std::to_string(block_index));
}

Index rank_of(const Matrix& m) { return numerical_rank(m).numerical_rank; }

}  // namespace

GapReport compute_gaps(const TfnModel& frozen, const TfnModel& target) {
  check_compatible(frozen, target);
  const std::size_t depth = frozen.depth();
  GapReport report;

  for (std::size_t l = 0; l < depth; ++l) {
    const TfnBlock& fb = frozen.block(l);
    const TfnBlock& tb = target.block(l);
    Index gap = 0;
    for (std::size_t h = 0; h < frozen.heads(); ++h) {
      Matrix f_kq = fb.w_k[h].transpose() * fb.w_q[h];
      Matrix t_kq = tb.w_k[h].transpose() * tb.w_q[h];
      Matrix f_vp = fb.w1 * fb.w_v[h];
      Matrix t_vp = tb.w1 * tb.w_v[h];
      if (frozen.head_type() == HeadType::Multi) {
        f_vp = fb.w1 * fb.w_o[h] * fb.w_v[h];
        t_vp = tb.w1 * tb.w_o[h] * tb.w_v[h];
      }
      if (l > 0) {
        const Matrix& f2 = frozen.block(l - 1).w2;
        const Matrix& t2 = target.block(l - 1).w2;
        for (const Matrix* m : {&f2, &t2}) {
          if (!(condition_estimate(*m) < kConditionCeiling)) {
            throw NonSingularityViolation("W_2," + std::to_string(l) +
                                          " is numerically singular");
          }
        }
        f_kq = f2.transpose() * f_kq * f2;
        t_kq = t2.transpose() * t_kq * t2;
        f_vp = f_vp * f2;
        t_vp = t_vp * t2;
      }
      gap = std::max({gap, rank_of(t_kq - f_kq), rank_of(t_vp - f_vp)});
    }
    report.gaps.push_back(gap);
  }

  report.gaps.push_back(
      rank_of(target.w_out() * target.block(depth - 1).w2 -
              frozen.w_out() * frozen.block(depth - 1).w2));
  const Index worst = *std::max_element(report.gaps.begin(), report.gaps.end());
  report.required_rank = (worst + 1) / 2;
  return report;
}

namespace {

PairTargets block_targets(const TfnModel& frozen, const TfnModel& target, std::size_t l,
                          std::size_t h) {
  const TfnBlock& fb = frozen.block(l);
  const TfnBlock& tb = target.block(l);
  PairTargets out;
  Matrix kq = tb.w_k[h].transpose() * tb.w_q[h];
  Matrix vp;
  if (frozen.head_type() == HeadType::Multi) {
    // The frozen W_1 stays fixed, so fold it into the desired product.
    vp = solve(fb.w1, tb.w1 * tb.w_o[h] * tb.w_v[h], "W_1," + std::to_string(l + 1));
  } else {
    vp = tb.w1 * tb.w_v[h];
  }
  if (l > 0) {
    const Matrix m = right_conjugation(frozen.block(l - 1), target.block(l - 1), l);
    kq = m.transpose() * kq * m;
    vp = vp * m;
  }
  out.kq = std::move(kq);
  out.vp = std::move(vp);
  return out;
}

struct PairResult {
  Matrix d_first;   // adapter on the right (first-applied) factor
  Matrix d_second;  // adapter on the left factor
};

/// Matches (second + d2)(first + d1) = desired with rank <= budget per factor.
PairResult match_pair(const Matrix& first, const Matrix& second, const Matrix& desired,
                      Index budget, const SynthesisOptions& opts, const std::string& tag) {
  const LinearChain chain({first, second});
  try {
    LinearAdapterPlan plan =
        synthesize(chain, desired, RankBudget::uniform(budget, 2), opts);
    return PairResult{std::move(plan.deltas[0]), std::move(plan.deltas[1])};
  } catch (const NonSingularityViolation& err) {
    throw NonSingularityViolation(tag + ": " + err.what());
  }
}

}  // namespace

TfnAdapterPlan synthesize(const TfnModel& frozen, const TfnModel& target, Index rank,
                          const SynthesisOptions& opts) {
  check_compatible(frozen, target);
  if (rank < 0 || rank > frozen.dim()) throw DimensionError("rank must lie in [0, D]");
  const std::size_t depth = frozen.depth();
  const std::size_t heads = frozen.heads();
  const Index d = frozen.dim();

  TfnAdapterPlan plan;
  for (std::size_t l = 0; l < depth; ++l) {
    const TfnBlock& fb = frozen.block(l);
    const TfnBlock& tb = target.block(l);
    const std::string tag = "block " + std::to_string(l + 1);

    TfnBlockDeltas deltas;
    deltas.d_w1 = Matrix::Zero(d, d);
    deltas.d_w2 = Matrix::Zero(d, d);
    for (std::size_t h = 0; h < heads; ++h) {
      const PairTargets targets = block_targets(frozen, target, l, h);
      const std::string head_tag = tag + ", head " + std::to_string(h + 1);

      // Score product: (W_K + dK)^T (W_Q + dQ). Chain order (W_Q first,
      // W_K^T second); the left-factor delta transposes back onto W_K.
      PairResult kq = match_pair(fb.w_q[h], fb.w_k[h].transpose(), targets.kq, rank, opts,
                                 head_tag + " key/query");
      deltas.d_q.push_back(std::move(kq.d_first));
      deltas.d_k.push_back(kq.d_second.transpose());

      if (frozen.head_type() == HeadType::Multi) {
        PairResult ov = match_pair(fb.w_v[h], fb.w_o[h], targets.vp, rank, opts,
                                   head_tag + " value/output");
        deltas.d_v.push_back(std::move(ov.d_first));
        deltas.d_o.push_back(std::move(ov.d_second));
      } else {
        PairResult vf = match_pair(fb.w_v[h], fb.w1, targets.vp, rank, opts,
                                   head_tag + " value/feedforward");
        deltas.d_v.push_back(std::move(vf.d_first));
        deltas.d_w1 = std::move(vf.d_second);
      }
    }

    deltas.b1 = tb.b1;
    if (l + 1 < depth) {
      // Keeps the adapted block output a fixed invertible transform of the
      // target block output.
      deltas.b2 = fb.w2 * solve(tb.w2, tb.b2, "target W_2," + std::to_string(l + 1));
    } else {
      deltas.b2 = Vector::Zero(d);  // set after the output stage below
    }
    plan.blocks.push_back(std::move(deltas));
  }

  // Output stage: (W_o + dW_o)(W_2L + dW_2L) = Wbar_o Wbar_2L.
  const TfnBlock& last_f = frozen.block(depth - 1);
  const TfnBlock& last_t = target.block(depth - 1);
  PairResult out = match_pair(last_f.w2, frozen.w_out(),
                              target.w_out() * last_t.w2, rank, opts, "output layer");
  plan.blocks.back().d_w2 = std::move(out.d_first);
  plan.d_out = std::move(out.d_second);
  plan.blocks.back().b2 =
      solve(frozen.w_out() + plan.d_out, target.w_out() * last_t.b2, "W_o + dW_o");
  return plan;
}

TfnModel apply_plan(const TfnModel& frozen, const TfnAdapterPlan& plan) {
  if (plan.blocks.size() != frozen.depth()) {
    throw DimensionError("plan does not match the frozen model");
  }
  std::vector<TfnBlock> blocks;
  for (std::size_t l = 0; l < frozen.depth(); ++l) {
    const TfnBlock& fb = frozen.block(l);
    const TfnBlockDeltas& dl = plan.blocks[l];
    TfnBlock blk;
    for (std::size_t h = 0; h < frozen.heads(); ++h) {
      blk.w_k.push_back(fb.w_k[h] + dl.d_k[h]);
      blk.w_q.push_back(fb.w_q[h] + dl.d_q[h]);
      blk.w_v.push_back(fb.w_v[h] + dl.d_v[h]);
      if (frozen.head_type() == HeadType::Multi) blk.w_o.push_back(fb.w_o[h] + dl.d_o[h]);
    }
    blk.w1 = fb.w1 + dl.d_w1;
    blk.w2 = fb.w2 + dl.d_w2;
    blk.b1 = dl.b1;
    blk.b2 = dl.b2;
    blocks.push_back(std::move(blk));
  }
  return TfnModel(frozen.head_type(), std::move(blocks), frozen.w_out() + plan.d_out);
}

AssumptionReport check_assumptions(const TfnModel& frozen, const TfnModel& target,
                                   Index rank) {
  check_compatible(frozen, target);
  AssumptionReport report;
  auto record = [&report](std::string name, double cond) {
    report.checked_matrices.push_back({std::move(name), cond, cond < kConditionCeiling});
  };

  auto record_weights = [&](const TfnModel& model, const std::string& who) {
    for (std::size_t l = 0; l < model.depth(); ++l) {
      const TfnBlock& blk = model.block(l);
      const std::string tag = who + " block " + std::to_string(l + 1) + " ";
      for (std::size_t h = 0; h < model.heads(); ++h) {
        const std::string head = "_" + std::to_string(h + 1);
        record(tag + "W_K" + head, condition_estimate(blk.w_k[h]));
        record(tag + "W_Q" + head, condition_estimate(blk.w_q[h]));
        record(tag + "W_V" + head, condition_estimate(blk.w_v[h]));
        if (model.head_type() == HeadType::Multi) {
          record(tag + "W_O" + head, condition_estimate(blk.w_o[h]));
        }
      }
      record(tag + "W_1", condition_estimate(blk.w1));
      record(tag + "W_2", condition_estimate(blk.w2));
    }
    record(who + " W_o", condition_estimate(model.w_out()));
  };
  record_weights(frozen, "frozen");
  record_weights(target, "target");

  bool formable = true;
  for (const auto& c : report.checked_matrices) formable = formable && c.ok;

  if (formable) {
    auto record_pair = [&](const Matrix& base, const Matrix& desired, const std::string& tag) {
      const Matrix gap = desired - base;
      const SvdResult gs = svd(gap, tag);
      for (Index r = 1; r <= std::min(rank, frozen.dim()); ++r) {
        const Matrix perturbed = base + gs.u.leftCols(r) *
                                            gs.singular_values.head(r).asDiagonal() *
                                            gs.v.leftCols(r).transpose();
        record(tag + " + alpha_" + std::to_string(r), condition_estimate(perturbed));
      }
    };

    for (std::size_t l = 0; l < frozen.depth(); ++l) {
      const TfnBlock& fb = frozen.block(l);
      const std::string tag = "block " + std::to_string(l + 1);
      for (std::size_t h = 0; h < frozen.heads(); ++h) {
        const PairTargets targets = block_targets(frozen, target, l, h);
        const std::string head_tag = tag + " head " + std::to_string(h + 1);
        record_pair(fb.w_k[h].transpose() * fb.w_q[h], targets.kq, head_tag + " K^T Q");
        if (frozen.head_type() == HeadType::Multi) {
          record_pair(fb.w_o[h] * fb.w_v[h], targets.vp, head_tag + " O V");
        } else {
          record_pair(fb.w1 * fb.w_v[h], targets.vp, head_tag + " W_1 V");
        }
      }
    }
    record_pair(frozen.w_out() * frozen.block(frozen.depth() - 1).w2,
                target.w_out() * target.block(frozen.depth() - 1).w2, "W_o W_2L");
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

std::vector<double> intermediate_deviation(const TfnModel& frozen, const TfnAdapterPlan& plan,
                                           const TfnModel& target, const Matrix& x) {
  const TfnModel adapted = apply_plan(frozen, plan);
  const TfnTrace at = tfn_forward_trace(adapted, x);
  const TfnTrace tt = tfn_forward_trace(target, x);
  std::vector<double> deviations;
  for (std::size_t l = 0; l < frozen.depth(); ++l) {
    deviations.push_back((at.h[l] - tt.h[l]).cwiseAbs().maxCoeff());
  }
  return deviations;
}

}  // namespace lora
