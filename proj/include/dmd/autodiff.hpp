#pragma once

#include "dmd/core.hpp"

#include <cstdint>
#include <cstring>
#include <functional>
#include <string>
#include <utility>
#include <vector>

namespace dmd {

enum class Activation { identity, tanh, silu };

inline const char* to_string(Activation a) {
  switch (a) {
    case Activation::identity: return "identity";
    case Activation::tanh: return "tanh";
    case Activation::silu: return "silu";
  }
  return "?";
}

inline Activation activation_from_string(const std::string& name) {
  if (name == "identity") return Activation::identity;
  if (name == "tanh") return Activation::tanh;
  if (name == "silu") return Activation::silu;
  throw DomainError("unknown activation '" + name + "'");
}

template <typename Scalar>
Matrix<Scalar> activate(const Matrix<Scalar>& x, Activation a) {
  switch (a) {
    case Activation::identity: return x;
    case Activation::tanh: return x.array().tanh().matrix();
    case Activation::silu: return (x.array() / (Scalar(1) + (-x.array()).exp())).matrix();
  }
  return x;
}

/// Derivative of the activation, given its input and output.
template <typename Scalar>
Matrix<Scalar> activation_slope(const Matrix<Scalar>& x, const Matrix<Scalar>& y, Activation a) {
  switch (a) {
    case Activation::identity: return Matrix<Scalar>::Ones(x.rows(), x.cols());
    case Activation::tanh: return (Scalar(1) - y.array().square()).matrix();
    case Activation::silu: {
      auto s = Scalar(1) / (Scalar(1) + (-x.array()).exp());
      return (s * (Scalar(1) + x.array() * (Scalar(1) - s))).matrix();
    }
  }
  return Matrix<Scalar>::Ones(x.rows(), x.cols());
}

struct NodeId {
  std::uint32_t index = 0;
  friend bool operator==(NodeId, NodeId) = default;
};

enum class OpKind {
  add,
  sub,
  mul,
  scale,
  matmul,
  add_bias,
  mul_rows,
  activation,
  sum,
  mean,
  mse,
  concat_cols,
  custom,
};

/// Reverse-mode tape over dense 2-D batches.
///
/// Every recorded op appends one output node whose inputs were created
/// earlier, so the op list is already in topological order. A tape supports
/// exactly one backward sweep; call reset() before reusing it.
template <typename Scalar>
class Tape {
 public:
  using Mat = Matrix<Scalar>;
  /// Receives (output gradient, input values, output value) and returns one
  /// gradient per input.
  using CustomBackward =
      std::function<std::vector<Mat>(const Mat&, const std::vector<const Mat*>&, const Mat&)>;
  using CustomForward = std::function<Mat(const std::vector<const Mat*>&)>;

  NodeId variable(Mat value) { return push_leaf(std::move(value), true); }
  NodeId constant(Mat value) { return push_leaf(std::move(value), false); }
  NodeId stop_gradient(NodeId x) { return constant(value(x)); }

  NodeId add(NodeId a, NodeId b) {
    require_same_shape(a, b, "add");
    return record(OpKind::add, {a, b});
  }
  NodeId sub(NodeId a, NodeId b) {
    require_same_shape(a, b, "sub");
    return record(OpKind::sub, {a, b});
  }
  NodeId mul(NodeId a, NodeId b) {
    require_same_shape(a, b, "mul");
    return record(OpKind::mul, {a, b});
  }
  NodeId scale(NodeId a, Scalar s) { return record(OpKind::scale, {a}, s); }

  NodeId matmul(NodeId a, NodeId b) {
    if (value(a).cols() != value(b).rows())
      throw ShapeError("matmul: " + shape_of(a) + " x " + shape_of(b));
    return record(OpKind::matmul, {a, b});
  }

  /// a (B x n) plus a broadcast row bias (1 x n).
  NodeId add_bias(NodeId a, NodeId bias) {
    if (value(bias).rows() != 1 || value(bias).cols() != value(a).cols())
      throw ShapeError("add_bias: " + shape_of(a) + " + " + shape_of(bias));
    return record(OpKind::add_bias, {a, bias});
  }

  /// a (B x n) with row i scaled by w(i) for a column of weights w (B x 1).
  NodeId mul_rows(NodeId a, NodeId w) {
    if (value(w).cols() != 1 || value(w).rows() != value(a).rows())
      throw ShapeError("mul_rows: " + shape_of(a) + " * " + shape_of(w));
    return record(OpKind::mul_rows, {a, w});
  }

  NodeId activation(NodeId a, Activation kind) {
    return record(OpKind::activation, {a}, Scalar(0), kind);
  }

  NodeId sum(NodeId a) { return record(OpKind::sum, {a}); }
  NodeId mean(NodeId a) { return record(OpKind::mean, {a}); }

  /// Mean of squared differences over every element.
  NodeId mse(NodeId a, NodeId b) {
    require_same_shape(a, b, "mse");
    return record(OpKind::mse, {a, b});
  }

  NodeId concat_cols(NodeId a, NodeId b) {
    if (value(a).rows() != value(b).rows())
      throw ShapeError("concat_cols: " + shape_of(a) + " | " + shape_of(b));
    return record(OpKind::concat_cols, {a, b});
  }

  NodeId custom(std::vector<NodeId> inputs, CustomForward forward, CustomBackward backward,
                std::string name = "custom") {
    Op op;
    op.kind = OpKind::custom;
    op.inputs = std::move(inputs);
    op.forward = std::move(forward);
    op.backward = std::move(backward);
    op.name = std::move(name);
    return finish_record(std::move(op));
  }

  const Mat& value(NodeId id) const { return nodes_.at(id.index).value; }

  /// Gradient accumulated by the last backward sweep (zeros if unreached).
  Mat grad(NodeId id) const {
    const auto& n = nodes_.at(id.index);
    if (n.grad.size() == 0) return Mat::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  bool requires_grad(NodeId id) const { return nodes_.at(id.index).requires_grad; }
  std::size_t size() const { return nodes_.size(); }
  std::size_t op_count() const { return ops_.size(); }

  void backward(NodeId output) {
    const auto& v = value(output);
    backward(output, Mat::Ones(v.rows(), v.cols()));
  }

  void backward(NodeId output, const Mat& seed) {
    if (consumed_) throw Error("tape: backward already ran; reset() before replaying");
    if (seed.rows() != value(output).rows() || seed.cols() != value(output).cols())
      throw ShapeError("tape: seed shape does not match output " + shape_of(output));
    consumed_ = true;
    accumulate(output, seed);
    for (std::size_t k = ops_.size(); k-- > 0;) {
      const Op& op = ops_[k];
      Node& out = nodes_[op.output.index];
      if (out.grad.size() == 0) continue;
      backward_op(op, out.grad);
    }
  }

  /// Recomputes every op from the current leaf values; true when each
  /// recomputed output is bit-identical to the recorded one.
  bool replay_matches() const {
    for (const Op& op : ops_) {
      Mat again = forward_op(op);
      const Mat& recorded = nodes_[op.output.index].value;
      if (again.rows() != recorded.rows() || again.cols() != recorded.cols()) return false;
      if (std::memcmp(again.data(), recorded.data(), sizeof(Scalar) * again.size()) != 0)
        return false;
    }
    return true;
  }

  void reset() {
    nodes_.clear();
    ops_.clear();
    consumed_ = false;
  }

  std::string shape_of(NodeId id) const {
    const auto& v = value(id);
    return "(" + std::to_string(v.rows()) + "x" + std::to_string(v.cols()) + ")";
  }

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool requires_grad = false;
  };

  struct Op {
    OpKind kind{};
    std::vector<NodeId> inputs;
    NodeId output;
    Scalar scalar = Scalar(0);
    Activation act = Activation::identity;
    CustomForward forward;
    CustomBackward backward;
    std::string name;
  };

  void require_same_shape(NodeId a, NodeId b, const char* op) const {
    if (value(a).rows() != value(b).rows() || value(a).cols() != value(b).cols())
      throw ShapeError(std::string(op) + ": " + shape_of(a) + " vs " + shape_of(b));
  }

  NodeId push_leaf(Mat value, bool requires_grad) {
    if (!value.allFinite()) throw NumericError("tape: non-finite leaf value");
    nodes_.push_back(Node{std::move(value), Mat(), requires_grad});
    return NodeId{static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  NodeId record(OpKind kind, std::vector<NodeId> inputs, Scalar s = Scalar(0),
                Activation act = Activation::identity) {
    Op op;
    op.kind = kind;
    op.inputs = std::move(inputs);
    op.scalar = s;
    op.act = act;
    return finish_record(std::move(op));
  }

  NodeId finish_record(Op op) {
    if (consumed_) throw Error("tape: cannot record after backward; reset() first");
    bool needs = false;
    for (NodeId in : op.inputs) {
      if (in.index >= nodes_.size()) throw Error("tape: input node out of range");
      needs = needs || nodes_[in.index].requires_grad;
    }
    Mat out = forward_op(op);
    if (!out.allFinite()) throw NumericError("tape: non-finite output in op " + op_name(op));
    nodes_.push_back(Node{std::move(out), Mat(), needs});
    op.output = NodeId{static_cast<std::uint32_t>(nodes_.size() - 1)};
    ops_.push_back(std::move(op));
    return ops_.back().output;
  }

  static std::string op_name(const Op& op) {
    switch (op.kind) {
      case OpKind::add: return "add";
      case OpKind::sub: return "sub";
      case OpKind::mul: return "mul";
      case OpKind::scale: return "scale";
      case OpKind::matmul: return "matmul";
      case OpKind::add_bias: return "add_bias";
      case OpKind::mul_rows: return "mul_rows";
      case OpKind::activation: return std::string("activation:") + to_string(op.act);
      case OpKind::sum: return "sum";
      case OpKind::mean: return "mean";
      case OpKind::mse: return "mse";
      case OpKind::concat_cols: return "concat_cols";
      case OpKind::custom: return op.name;
    }
    return "?";
  }

  Mat forward_op(const Op& op) const {
    auto in = [&](std::size_t i) -> const Mat& { return nodes_[op.inputs[i].index].value; };
    switch (op.kind) {
      case OpKind::add: return in(0) + in(1);
      case OpKind::sub: return in(0) - in(1);
      case OpKind::mul: return in(0).cwiseProduct(in(1));
      case OpKind::scale: return op.scalar * in(0);
      case OpKind::matmul: return in(0) * in(1);
      case OpKind::add_bias: return in(0).rowwise() + in(1).row(0);
      case OpKind::mul_rows: return (in(0).array().colwise() * in(1).col(0).array()).matrix();
      case OpKind::activation: return activate<Scalar>(in(0), op.act);
      case OpKind::sum: return Mat::Constant(1, 1, in(0).sum());
      case OpKind::mean: return Mat::Constant(1, 1, in(0).mean());
      case OpKind::mse:
        return Mat::Constant(1, 1, (in(0) - in(1)).squaredNorm() / Scalar(in(0).size()));
      case OpKind::concat_cols: {
        Mat out(in(0).rows(), in(0).cols() + in(1).cols());
        out << in(0), in(1);
        return out;
      }
      case OpKind::custom: {
        std::vector<const Mat*> values;
        for (NodeId id : op.inputs) values.push_back(&nodes_[id.index].value);
        return op.forward(values);
      }
    }
    throw Error("tape: unknown op");
  }

  void accumulate(NodeId id, const Mat& g) {
    Node& n = nodes_[id.index];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0)
      n.grad = g;
    else
      n.grad += g;
  }

  void backward_op(const Op& op, const Mat& g) {
    auto in = [&](std::size_t i) -> const Mat& { return nodes_[op.inputs[i].index].value; };
    auto needs = [&](std::size_t i) { return nodes_[op.inputs[i].index].requires_grad; };
    switch (op.kind) {
      case OpKind::add:
        accumulate(op.inputs[0], g);
        accumulate(op.inputs[1], g);
        return;
      case OpKind::sub:
        accumulate(op.inputs[0], g);
        if (needs(1)) accumulate(op.inputs[1], -g);
        return;
      case OpKind::mul:
        if (needs(0)) accumulate(op.inputs[0], g.cwiseProduct(in(1)));
        if (needs(1)) accumulate(op.inputs[1], g.cwiseProduct(in(0)));
        return;
      case OpKind::scale:
        if (needs(0)) accumulate(op.inputs[0], op.scalar * g);
        return;
      case OpKind::matmul:
        if (needs(0)) accumulate(op.inputs[0], g * in(1).transpose());
        if (needs(1)) accumulate(op.inputs[1], in(0).transpose() * g);
        return;
      case OpKind::add_bias:
        accumulate(op.inputs[0], g);
        if (needs(1)) accumulate(op.inputs[1], g.colwise().sum());
        return;
      case OpKind::mul_rows:
        if (needs(0)) accumulate(op.inputs[0], (g.array().colwise() * in(1).col(0).array()).matrix());
        if (needs(1)) accumulate(op.inputs[1], g.cwiseProduct(in(0)).rowwise().sum());
        return;
      case OpKind::activation:
        if (needs(0)) {
          const Mat& y = nodes_[op.output.index].value;
          accumulate(op.inputs[0], g.cwiseProduct(activation_slope<Scalar>(in(0), y, op.act)));
        }
        return;
      case OpKind::sum:
        if (needs(0)) accumulate(op.inputs[0], Mat::Constant(in(0).rows(), in(0).cols(), g(0, 0)));
        return;
      case OpKind::mean:
        if (needs(0))
          accumulate(op.inputs[0],
                     Mat::Constant(in(0).rows(), in(0).cols(), g(0, 0) / Scalar(in(0).size())));
        return;
      case OpKind::mse: {
        Mat d = (Scalar(2) * g(0, 0) / Scalar(in(0).size())) * (in(0) - in(1));
        if (needs(0)) accumulate(op.inputs[0], d);
        if (needs(1)) accumulate(op.inputs[1], -d);
        return;
      }
      case OpKind::concat_cols: {
        const auto left = in(0).cols();
        if (needs(0)) accumulate(op.inputs[0], g.leftCols(left));
        if (needs(1)) accumulate(op.inputs[1], g.rightCols(in(1).cols()));
        return;
      }
      case OpKind::custom: {
        std::vector<const Mat*> values;
        for (NodeId id : op.inputs) values.push_back(&nodes_[id.index].value);
        auto grads = op.backward(g, values, nodes_[op.output.index].value);
        if (grads.size() != op.inputs.size())
          throw Error("tape: custom op '" + op.name + "' returned wrong gradient count");
        for (std::size_t i = 0; i < grads.size(); ++i)
          if (needs(i)) accumulate(op.inputs[i], grads[i]);
        return;
      }
    }
  }

  std::vector<Node> nodes_;
  std::vector<Op> ops_;
  bool consumed_ = false;
};

}  // namespace dmd
