#pragma once

#include "dmd/autodiff.hpp"

#include <string>
#include <vector>

namespace dmd {

/// Fully connected network stored as one flat parameter vector.
///
/// Layout is layer-major; within a layer the weight matrix (fan_in x fan_out,
/// row-major) precedes the bias (fan_out). Hidden layers apply their
/// activation, the output layer is affine.
template <typename Scalar>
class Mlp {
 public:
  using Mat = Matrix<Scalar>;
  using Vec = Vector<Scalar>;

  Mlp() = default;

  Mlp(std::vector<int> widths, std::vector<Activation> hidden)
      : widths_(std::move(widths)), hidden_(std::move(hidden)) {
    if (widths_.size() < 2) throw ShapeError("mlp: need at least input and output widths");
    for (int w : widths_)
      if (w <= 0) throw ShapeError("mlp: layer widths must be positive");
    if (hidden_.size() != widths_.size() - 2)
      throw ShapeError("mlp: expected " + std::to_string(widths_.size() - 2) +
                       " hidden activations, got " + std::to_string(hidden_.size()));
    params_ = Vec::Zero(parameter_count(widths_));
  }

  Mlp(std::vector<int> widths, Activation hidden)
      : Mlp(widths, std::vector<Activation>(widths.size() >= 2 ? widths.size() - 2 : 0, hidden)) {}

  static Eigen::Index parameter_count(const std::vector<int>& widths) {
    Eigen::Index n = 0;
    for (std::size_t l = 0; l + 1 < widths.size(); ++l)
      n += Eigen::Index(widths[l] + 1) * widths[l + 1];
    return n;
  }

  /// LeCun-normal weights, zero biases.
  void initialize(Rng& rng) {
    std::normal_distribution<Scalar> normal(Scalar(0), Scalar(1));
    for (std::size_t l = 0; l < layer_count(); ++l) {
      auto w = weight(l);
      const Scalar s = Scalar(1) / std::sqrt(Scalar(widths_[l]));
      for (Eigen::Index i = 0; i < w.rows(); ++i)
        for (Eigen::Index j = 0; j < w.cols(); ++j) w(i, j) = s * normal(rng);
      bias(l).setZero();
    }
  }

  std::size_t layer_count() const { return widths_.empty() ? 0 : widths_.size() - 1; }
  int input_width() const { return widths_.front(); }
  int output_width() const { return widths_.back(); }
  const std::vector<int>& widths() const { return widths_; }
  const std::vector<Activation>& hidden_activations() const { return hidden_; }
  Activation layer_activation(std::size_t l) const {
    return l + 1 < layer_count() ? hidden_[l] : Activation::identity;
  }

  const Vec& parameters() const { return params_; }
  Vec& parameters() { return params_; }

  void set_parameters(const Vec& p) {
    if (p.size() != params_.size())
      throw ShapeError("mlp: parameter vector has " + std::to_string(p.size()) + " entries, expected " +
                       std::to_string(params_.size()));
    params_ = p;
  }

  Eigen::Index weight_offset(std::size_t l) const {
    Eigen::Index off = 0;
    for (std::size_t k = 0; k < l; ++k) off += Eigen::Index(widths_[k] + 1) * widths_[k + 1];
    return off;
  }
  Eigen::Index bias_offset(std::size_t l) const {
    return weight_offset(l) + Eigen::Index(widths_[l]) * widths_[l + 1];
  }

  Eigen::Map<Mat> weight(std::size_t l) {
    return {params_.data() + weight_offset(l), widths_[l], widths_[l + 1]};
  }
  Eigen::Map<const Mat> weight(std::size_t l) const {
    return {params_.data() + weight_offset(l), widths_[l], widths_[l + 1]};
  }
  Eigen::Map<RowVector<Scalar>> bias(std::size_t l) {
    return {params_.data() + bias_offset(l), widths_[l + 1]};
  }
  Eigen::Map<const RowVector<Scalar>> bias(std::size_t l) const {
    return {params_.data() + bias_offset(l), widths_[l + 1]};
  }

  /// Gradient-free evaluation. Uses a coefficient-wise product so that each
  /// output row depends only on its own input row, bit for bit.
  Mat forward(const Mat& input) const {
    check_input(input.cols());
    Mat h = input;
    for (std::size_t l = 0; l < layer_count(); ++l) {
      Mat z = h.lazyProduct(weight(l));
      z.rowwise() += bias(l);
      h = activate<Scalar>(z, layer_activation(l));
    }
    return h;
  }

  void check_input(Eigen::Index cols) const {
    if (cols != widths_.front())
      throw ShapeError("mlp layer 0: input has " + std::to_string(cols) + " features, expected " +
                       std::to_string(widths_.front()));
  }

 private:
  std::vector<int> widths_;
  std::vector<Activation> hidden_;
  Vec params_;
};

/// Node ids produced by recording an Mlp on a tape.
struct MlpTrace {
  NodeId output;
  std::vector<NodeId> weights;
  std::vector<NodeId> biases;
};

/// Records the forward pass on the tape. With trainable = false the weights
/// enter as constants and only the input can receive gradient.
template <typename Scalar>
MlpTrace mlp_forward(const Mlp<Scalar>& net, NodeId input, Tape<Scalar>& tape, bool trainable = true) {
  net.check_input(tape.value(input).cols());
  MlpTrace trace;
  NodeId h = input;
  for (std::size_t l = 0; l < net.layer_count(); ++l) {
    Matrix<Scalar> w = net.weight(l);
    Matrix<Scalar> b = net.bias(l);
    NodeId wn = trainable ? tape.variable(std::move(w)) : tape.constant(std::move(w));
    NodeId bn = trainable ? tape.variable(std::move(b)) : tape.constant(std::move(b));
    if (tape.value(h).cols() != tape.value(wn).rows())
      throw ShapeError("mlp layer " + std::to_string(l) + ": width mismatch");
    NodeId z = tape.add_bias(tape.matmul(h, wn), bn);
    h = net.layer_activation(l) == Activation::identity ? z : tape.activation(z, net.layer_activation(l));
    trace.weights.push_back(wn);
    trace.biases.push_back(bn);
  }
  trace.output = h;
  return trace;
}

/// Gathers the gradients of a recorded pass into the flat parameter layout.
template <typename Scalar>
Vector<Scalar> parameter_gradient(const Mlp<Scalar>& net, const Tape<Scalar>& tape, const MlpTrace& trace) {
  Vector<Scalar> g(net.parameters().size());
  for (std::size_t l = 0; l < net.layer_count(); ++l) {
    Matrix<Scalar> gw = tape.grad(trace.weights[l]);
    Matrix<Scalar> gb = tape.grad(trace.biases[l]);
    std::copy(gw.data(), gw.data() + gw.size(), g.data() + net.weight_offset(l));
    std::copy(gb.data(), gb.data() + gb.size(), g.data() + net.bias_offset(l));
  }
  return g;
}

}  // namespace dmd
