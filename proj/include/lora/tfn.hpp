#pragma once

#include <vector>

#include "lora/linear.hpp"

namespace lora {

enum class HeadType { Single, Multi };

/// One transformer block: H-head self-attention followed by a two-layer
/// ReLU feedforward. Single-head blocks carry no output projections.
struct TfnBlock {
  std::vector<Matrix> w_o;  // per head; empty for single-head models
  std::vector<Matrix> w_v;
  std::vector<Matrix> w_k;
  std::vector<Matrix> w_q;
  Matrix w1, w2;
  Vector b1, b2;
};

class TfnModel {
 public:
  TfnModel(HeadType head_type, std::vector<TfnBlock> blocks, Matrix w_out);

  HeadType head_type() const { return head_type_; }
  Index dim() const { return w_out_.rows(); }
  std::size_t depth() const { return blocks_.size(); }
  std::size_t heads() const { return blocks_[0].w_k.size(); }
  const std::vector<TfnBlock>& blocks() const { return blocks_; }
  const TfnBlock& block(std::size_t l) const { return blocks_[l]; }
  const Matrix& w_out() const { return w_out_; }

 private:
  HeadType head_type_;
  std::vector<TfnBlock> blocks_;
  Matrix w_out_;
};

/// Column-wise softmax (max-shifted).
Matrix col_softmax(const Matrix& scores);

struct TfnTrace {
  std::vector<Matrix> h;  // first-feedforward outputs per block
  std::vector<Matrix> z;  // block outputs
  Matrix output;          // softmax(W_o Z_L)
};

Matrix tfn_forward(const TfnModel& model, const Matrix& x);
TfnTrace tfn_forward_trace(const TfnModel& model, const Matrix& x);

struct GapReport {
  /// gaps[i-1] for blocks i in [L]; gaps[L] for the output layer.
  std::vector<Index> gaps;
  Index required_rank = 0;  // ceil(max gap / 2)
};

/// Rank of the mismatch between the attention / feedforward matrix products
/// of the two models, per block and for the output pair.
GapReport compute_gaps(const TfnModel& frozen, const TfnModel& target);

struct TfnBlockDeltas {
  std::vector<Matrix> d_o;  // empty for single-head
  std::vector<Matrix> d_v;
  std::vector<Matrix> d_k;
  std::vector<Matrix> d_q;
  Matrix d_w1;  // zero unless single-head
  Matrix d_w2;  // zero except for the last block
  Vector b1, b2;
};

struct TfnAdapterPlan {
  std::vector<TfnBlockDeltas> blocks;
  Matrix d_out;
};

/// Closed-form adapters matching each attention score product, each
/// value-path product, and the output product of the target model.
TfnAdapterPlan synthesize(const TfnModel& frozen, const TfnModel& target, Index rank,
                          const SynthesisOptions& opts = {});

TfnModel apply_plan(const TfnModel& frozen, const TfnAdapterPlan& plan);

AssumptionReport check_assumptions(const TfnModel& frozen, const TfnModel& target, Index rank);

/// Max-abs deviation of the adapted model's first-feedforward outputs from
/// the target's, per block; localizes which block broke a construction.
std::vector<double> intermediate_deviation(const TfnModel& frozen, const TfnAdapterPlan& plan,
                                           const TfnModel& target, const Matrix& x);

}  // namespace lora
