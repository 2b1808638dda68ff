#pragma once

#include <vector>

#include "lora/core.hpp"

namespace lora {

/// Append-only reverse-mode tape over the matrix primitives the model
/// families need. Build a graph per evaluation, call backward once, read
/// adjoints off the parameter nodes.
class Tape {
 public:
  using NodeId = int;

  NodeId input(Matrix value);
  NodeId matmul(NodeId a, NodeId b, bool trans_a = false, bool trans_b = false);
  NodeId add(NodeId a, NodeId b);
  NodeId scale(NodeId a, double factor);
  /// value(a) with value(bias) (a D x 1 node) added to every column.
  NodeId add_bias(NodeId a, NodeId bias);
  NodeId relu(NodeId a);
  NodeId col_softmax(NodeId a);
  /// ||value(a) - target||_F^2 / target.size(); scalar node.
  NodeId mse(NodeId a, Matrix target);
  /// Column-wise softmax cross-entropy against integer labels; scalar node.
  NodeId cross_entropy(NodeId logits, std::vector<int> labels);

  void backward(NodeId loss);

  const Matrix& value(NodeId id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  const Matrix& adjoint(NodeId id) const {
    return nodes_[static_cast<std::size_t>(id)].adjoint;
  }
  std::size_t size() const { return nodes_.size(); }

 private:
  enum class Op { Input, MatMul, Add, Scale, AddBias, Relu, ColSoftmax, Mse, CrossEntropy };

  struct Node {
    Op op;
    NodeId a = -1;
    NodeId b = -1;
    bool trans_a = false;
    bool trans_b = false;
    double factor = 1.0;
    Matrix value;
    Matrix adjoint;
    Matrix aux;               // mse target / cached softmax
    std::vector<int> labels;  // cross-entropy
  };

  NodeId push(Node node);
  std::vector<Node> nodes_;
};

}  // namespace lora
