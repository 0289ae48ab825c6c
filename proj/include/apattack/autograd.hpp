#pragma once

// Minimal reverse-mode automatic differentiation over dense 64-bit tensors.
//
// A Var is a handle to a node in a dynamically built graph. Leaves are either
// constants or trainable parameters; every op records a backward closure when
// at least one of its inputs requires a gradient. All arithmetic is double
// precision so finite-difference checks are meaningful at 1e-4 relative error.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace apattack::ag {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(Shape s, double fill = 0.0);
  Tensor(Shape s, std::vector<double> values);

  std::size_t numel() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t dim(std::size_t axis) const { return shape.at(axis); }
};

struct Node {
  Tensor value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  void ensure_grad();
};

using NodePtr = std::shared_ptr<Node>;

class Var {
 public:
  Var() = default;

  static Var constant(Tensor t);
  static Var leaf(Tensor t, bool requires_grad);

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor& value() const;
  // Optimizers write parameters in place through this.
  Tensor& mutable_value();
  const Shape& shape() const { return value().shape; }
  std::size_t numel() const { return value().numel(); }
  double item() const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  // Empty span until a backward pass reached this node.
  std::span<const double> grad() const;
  void zero_grad();

  const NodePtr& node() const { return node_; }
  explicit Var(NodePtr node) : node_(std::move(node)) {}

 private:
  NodePtr node_;
};

// Seeds d(root)/d(root) = 1 and accumulates gradients into every reachable
// node that requires them. root must be a scalar.
void backward(const Var& root);

// Elementwise, identical shapes.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double factor);
Var add_scalar(const Var& a, double offset);
Var tanh(const Var& a);
Var silu(const Var& a);
Var relu(const Var& a);
// Gradient is passed through only where lo < a < hi.
Var clamp(const Var& a, double lo, double hi);

Var sum(const Var& a);
Var mean(const Var& a);
// sum_i weights[i] * a[i]; weights are constants.
Var weighted_sum(const Var& a, std::span<const double> weights);

Var reshape(const Var& a, Shape shape);
Var transpose(const Var& a);
Var matmul(const Var& a, const Var& b);
// x:[N,in], weight:[out,in], bias:[out] (bias may be undefined).
Var linear(const Var& x, const Var& weight, const Var& bias);
// x:[N,M] + bias:[M] broadcast over rows.
Var add_row_bias(const Var& x, const Var& bias);

// Row-wise ops on [N,D].
Var l2_normalize_rows(const Var& a);
Var log_softmax_rows(const Var& a);
Var row_norms(const Var& a);
Var gather_rows(const Var& a, std::span<const std::size_t> rows);

// Image ops on [N,C,H,W].
Var conv2d(const Var& x, const Var& weight, const Var& bias, std::size_t stride,
           std::size_t padding);
Var upsample_nearest2x(const Var& x);
// Non-overlapping average pooling; H and W must be divisible by the kernel.
Var avg_pool2d(const Var& x, std::size_t kernel_h, std::size_t kernel_w);

struct PixelBox {
  std::size_t y0, y1, x0, x1;  // half-open
};
// Mean of every channel inside each box: [N, boxes*C], box-major.
Var box_means(const Var& x, std::span<const PixelBox> boxes);

// Sequence ops.
// base:[L,E] constant rows; parts[i]:[N,E] written at row positions[i] of
// every sample. Result [N,L,E].
Var assemble_sequence(const Tensor& base, std::span<const std::size_t> positions,
                      std::span<const Var> parts);
// x:[N,L,E] -> [N,E] mean over L.
Var mean_over_sequence(const Var& x);
// x:[N,L,E], proj:[Lmax,D,E] with L <= Lmax -> [N,D], sum_k proj[k] * x[:,k].
Var positional_project(const Var& x, const Var& proj);
// x:[N,L,E] + rows:[Lmax,E] (first L rows) broadcast over N.
Var add_sequence_rows(const Var& x, const Var& rows);

}  // namespace apattack::ag
