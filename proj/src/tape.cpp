#include "lora/tape.hpp"

#include <cmath>

namespace lora {

Tape::NodeId Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return static_cast<NodeId>(nodes_.size() - 1);
}

Tape::NodeId Tape::input(Matrix value) {
  Node n;
  n.op = Op::Input;
  n.value = std::move(value);
  return push(std::move(n));
}

Tape::NodeId Tape::matmul(NodeId a, NodeId b, bool trans_a, bool trans_b) {
  Node n;
  n.op = Op::MatMul;
  n.a = a;
  n.b = b;
  n.trans_a = trans_a;
  n.trans_b = trans_b;
  const Matrix& va = value(a);
  const Matrix& vb = value(b);
  const Index inner_a = trans_a ? va.rows() : va.cols();
  const Index inner_b = trans_b ? vb.cols() : vb.rows();
  if (inner_a != inner_b) throw DimensionError("matmul: inner dimensions differ");
  if (!trans_a && !trans_b) n.value = va * vb;
  else if (trans_a && !trans_b) n.value = va.transpose() * vb;
  else if (!trans_a && trans_b) n.value = va * vb.transpose();
  else n.value = va.transpose() * vb.transpose();
  return push(std::move(n));
}

Tape::NodeId Tape::add(NodeId a, NodeId b) {
  Node n;
  n.op = Op::Add;
  n.a = a;
  n.b = b;
  if (value(a).rows() != value(b).rows() || value(a).cols() != value(b).cols()) {
    throw DimensionError("add: shapes differ");
  }
  n.value = value(a) + value(b);
  return push(std::move(n));
}

Tape::NodeId Tape::scale(NodeId a, double factor) {
  Node n;
  n.op = Op::Scale;
  n.a = a;
  n.factor = factor;
  n.value = factor * value(a);
  return push(std::move(n));
}

Tape::NodeId Tape::add_bias(NodeId a, NodeId bias) {
  Node n;
  n.op = Op::AddBias;
  n.a = a;
  n.b = bias;
  if (value(bias).cols() != 1 || value(bias).rows() != value(a).rows()) {
    throw DimensionError("add_bias: bias must be a column matching the rows");
  }
  n.value = value(a).colwise() + value(bias).col(0);
  return push(std::move(n));
}

Tape::NodeId Tape::relu(NodeId a) {
  Node n;
  n.op = Op::Relu;
  n.a = a;
  n.value = value(a).array().max(0.0).matrix();
  return push(std::move(n));
}

Tape::NodeId Tape::col_softmax(NodeId a) {
  Node n;
  n.op = Op::ColSoftmax;
  n.a = a;
  const Matrix& v = value(a);
  Matrix out(v.rows(), v.cols());
  for (Index j = 0; j < v.cols(); ++j) {
    const Vector shifted = (v.col(j).array() - v.col(j).maxCoeff()).exp();
    out.col(j) = shifted / shifted.sum();
  }
  n.value = out;
  n.aux = std::move(out);
  return push(std::move(n));
}

Tape::NodeId Tape::mse(NodeId a, Matrix target) {
  Node n;
  n.op = Op::Mse;
  n.a = a;
  if (value(a).rows() != target.rows() || value(a).cols() != target.cols()) {
    throw DimensionError("mse: shapes differ");
  }
  const double denom = static_cast<double>(target.size());
  Matrix scalar(1, 1);
  scalar(0, 0) = (value(a) - target).squaredNorm() / denom;
  n.value = std::move(scalar);
  n.aux = std::move(target);
  return push(std::move(n));
}

Tape::NodeId Tape::cross_entropy(NodeId logits, std::vector<int> labels) {
  Node n;
  n.op = Op::CrossEntropy;
  n.a = logits;
  const Matrix& v = value(logits);
  if (static_cast<Index>(labels.size()) != v.cols()) {
    throw DimensionError("cross_entropy: one label per column required");
  }
  Matrix probs(v.rows(), v.cols());
  double loss = 0.0;
  for (Index j = 0; j < v.cols(); ++j) {
    const int label = labels[static_cast<std::size_t>(j)];
    if (label < 0 || label >= v.rows()) throw DimensionError("cross_entropy: label out of range");
    const double max = v.col(j).maxCoeff();
    const Vector shifted = (v.col(j).array() - max).exp();
    const double total = shifted.sum();
    probs.col(j) = shifted / total;
    loss -= (v(label, j) - max) - std::log(total);
  }
  Matrix scalar(1, 1);
  scalar(0, 0) = loss / static_cast<double>(v.cols());
  n.value = std::move(scalar);
  n.aux = std::move(probs);
  n.labels = std::move(labels);
  return push(std::move(n));
}

void Tape::backward(NodeId loss) {
  if (value(loss).size() != 1) throw DimensionError("backward expects a scalar loss node");
  for (Node& n : nodes_) n.adjoint = Matrix::Zero(n.value.rows(), n.value.cols());
  nodes_[static_cast<std::size_t>(loss)].adjoint(0, 0) = 1.0;

  for (NodeId id = loss; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.adjoint.isZero(0.0)) continue;
    const Matrix& g = n.adjoint;
    switch (n.op) {
      case Op::Input:
        break;
      case Op::MatMul: {
        Node& na = nodes_[static_cast<std::size_t>(n.a)];
        Node& nb = nodes_[static_cast<std::size_t>(n.b)];
        const Matrix& va = na.value;
        const Matrix& vb = nb.value;
        if (!n.trans_a && !n.trans_b) {
          na.adjoint.noalias() += g * vb.transpose();
          nb.adjoint.noalias() += va.transpose() * g;
        } else if (n.trans_a && !n.trans_b) {
          na.adjoint.noalias() += vb * g.transpose();
          nb.adjoint.noalias() += va * g;
        } else if (!n.trans_a && n.trans_b) {
          na.adjoint.noalias() += g * vb;
          nb.adjoint.noalias() += g.transpose() * va;
        } else {
          na.adjoint.noalias() += vb.transpose() * g.transpose();
          nb.adjoint.noalias() += g.transpose() * va.transpose();
        }
        break;
      }
      case Op::Add:
        nodes_[static_cast<std::size_t>(n.a)].adjoint += g;
        nodes_[static_cast<std::size_t>(n.b)].adjoint += g;
        break;
      case Op::Scale:
        nodes_[static_cast<std::size_t>(n.a)].adjoint += n.factor * g;
        break;
      case Op::AddBias:
        nodes_[static_cast<std::size_t>(n.a)].adjoint += g;
        nodes_[static_cast<std::size_t>(n.b)].adjoint.col(0) += g.rowwise().sum();
        break;
      case Op::Relu: {
        Node& na = nodes_[static_cast<std::size_t>(n.a)];
        na.adjoint += (na.value.array() > 0.0).cast<double>().matrix().cwiseProduct(g);
        break;
      }
      case Op::ColSoftmax: {
        Node& na = nodes_[static_cast<std::size_t>(n.a)];
        const Matrix& y = n.aux;
        for (Index j = 0; j < y.cols(); ++j) {
          const double dot = y.col(j).dot(g.col(j));
          na.adjoint.col(j) += y.col(j).cwiseProduct(g.col(j)) - dot * y.col(j);
        }
        break;
      }
      case Op::Mse: {
        Node& na = nodes_[static_cast<std::size_t>(n.a)];
        const double denom = static_cast<double>(n.aux.size());
        na.adjoint += g(0, 0) * 2.0 / denom * (na.value - n.aux);
        break;
      }
      case Op::CrossEntropy: {
        Node& na = nodes_[static_cast<std::size_t>(n.a)];
        Matrix grad = n.aux;
        for (Index j = 0; j < grad.cols(); ++j) {
          grad(n.labels[static_cast<std::size_t>(j)], j) -= 1.0;
        }
        na.adjoint += g(0, 0) / static_cast<double>(grad.cols()) * grad;
        break;
      }
    }
  }
}

}  // namespace lora
