#include "apattack/autograd.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "apattack/errors.hpp"

namespace apattack::ag {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

void require(bool cond, const std::string& what) {
  if (!cond) throw InputError(what);
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw InputError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                     " vs " + shape_string(b.shape()));
  }
}

// Creates the output node; the backward closure is only kept when some input
// needs a gradient, so constant subgraphs cost nothing extra.
Var make_node(Tensor value, std::vector<NodePtr> inputs, std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  bool needs = false;
  for (const auto& in : inputs) needs = needs || in->requires_grad;
  node->requires_grad = needs;
  if (needs) {
    node->inputs = std::move(inputs);
    node->backward = std::move(backward);
  }
  return Var(std::move(node));
}

bool wants(const Node& self, std::size_t i) { return self.inputs[i]->requires_grad; }

std::vector<double>& grad_of(Node& self, std::size_t i) {
  self.inputs[i]->ensure_grad();
  return self.inputs[i]->grad;
}

template <typename Fwd, typename Deriv>
Var unary(const Var& a, Fwd fwd, Deriv deriv) {
  const Tensor& av = a.value();
  Tensor out(av.shape);
  for (std::size_t i = 0; i < av.numel(); ++i) out.data[i] = fwd(av.data[i]);
  return make_node(std::move(out), {a.node()}, [deriv](Node& self) {
    const auto& x = self.inputs[0]->value.data;
    auto& g = grad_of(self, 0);
    for (std::size_t i = 0; i < x.size(); ++i) g[i] += self.grad[i] * deriv(x[i], self.value.data[i]);
  });
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape s, double fill) : shape(std::move(s)), data(shape_numel(shape), fill) {}

Tensor::Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
  if (data.size() != shape_numel(shape)) {
    throw InputError("tensor of shape " + shape_string(shape) + " given " +
                     std::to_string(data.size()) + " values");
  }
}

void Node::ensure_grad() {
  if (grad.size() != value.numel()) grad.assign(value.numel(), 0.0);
}

Var Var::constant(Tensor t) { return leaf(std::move(t), false); }

Var Var::leaf(Tensor t, bool requires_grad) {
  auto node = std::make_shared<Node>();
  node->value = std::move(t);
  node->requires_grad = requires_grad;
  return Var(std::move(node));
}

const Tensor& Var::value() const {
  if (!node_) throw InputError("use of undefined Var");
  return node_->value;
}

Tensor& Var::mutable_value() {
  if (!node_) throw InputError("use of undefined Var");
  return node_->value;
}

double Var::item() const {
  if (numel() != 1) throw InputError("item() on non-scalar " + shape_string(shape()));
  return value().data[0];
}

bool Var::requires_grad() const { return node_ && node_->requires_grad; }

void Var::set_requires_grad(bool flag) {
  if (!node_) throw InputError("use of undefined Var");
  node_->requires_grad = flag;
}

std::span<const double> Var::grad() const {
  if (!node_) return {};
  return node_->grad;
}

void Var::zero_grad() {
  if (node_) node_->grad.clear();
}

void backward(const Var& root) {
  if (root.numel() != 1) throw InputError("backward() needs a scalar root");
  if (!root.requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.node().get(), 0}};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  Node* top = root.node().get();
  top->ensure_grad();
  top->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  Tensor out(a.shape());
  const auto& x = a.value().data;
  const auto& y = b.value().data;
  for (std::size_t i = 0; i < x.size(); ++i) out.data[i] = x[i] + y[i];
  return make_node(std::move(out), {a.node(), b.node()}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (!wants(self, k)) continue;
      auto& g = grad_of(self, k);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  Tensor out(a.shape());
  const auto& x = a.value().data;
  const auto& y = b.value().data;
  for (std::size_t i = 0; i < x.size(); ++i) out.data[i] = x[i] - y[i];
  return make_node(std::move(out), {a.node(), b.node()}, [](Node& self) {
    if (wants(self, 0)) {
      auto& g = grad_of(self, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (wants(self, 1)) {
      auto& g = grad_of(self, 1);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  Tensor out(a.shape());
  const auto& x = a.value().data;
  const auto& y = b.value().data;
  for (std::size_t i = 0; i < x.size(); ++i) out.data[i] = x[i] * y[i];
  return make_node(std::move(out), {a.node(), b.node()}, [](Node& self) {
    const auto& x = self.inputs[0]->value.data;
    const auto& y = self.inputs[1]->value.data;
    if (wants(self, 0)) {
      auto& g = grad_of(self, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * y[i];
    }
    if (wants(self, 1)) {
      auto& g = grad_of(self, 1);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * x[i];
    }
  });
}

Var scale(const Var& a, double factor) {
  return unary(a, [factor](double x) { return x * factor; },
               [factor](double, double) { return factor; });
}

Var add_scalar(const Var& a, double offset) {
  return unary(a, [offset](double x) { return x + offset; }, [](double, double) { return 1.0; });
}

Var tanh(const Var& a) {
  return unary(a, [](double x) { return std::tanh(x); },
               [](double, double y) { return 1.0 - y * y; });
}

Var silu(const Var& a) {
  return unary(
      a, [](double x) { return x / (1.0 + std::exp(-x)); },
      [](double x, double) {
        const double s = 1.0 / (1.0 + std::exp(-x));
        return s * (1.0 + x * (1.0 - s));
      });
}

Var relu(const Var& a) {
  return unary(a, [](double x) { return x > 0.0 ? x : 0.0; },
               [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var clamp(const Var& a, double lo, double hi) {
  return unary(a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
               [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().data) s += v;
  return make_node(Tensor({1}, s), {a.node()}, [](Node& self) {
    auto& g = grad_of(self, 0);
    for (auto& v : g) v += self.grad[0];
  });
}

Var mean(const Var& a) {
  require(a.numel() > 0, "mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Var weighted_sum(const Var& a, std::span<const double> weights) {
  require(weights.size() == a.numel(), "weighted_sum: weight count mismatch");
  std::vector<double> w(weights.begin(), weights.end());
  double s = 0.0;
  const auto& x = a.value().data;
  for (std::size_t i = 0; i < x.size(); ++i) s += w[i] * x[i];
  return make_node(Tensor({1}, s), {a.node()}, [w = std::move(w)](Node& self) {
    auto& g = grad_of(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0] * w[i];
  });
}

Var reshape(const Var& a, Shape shape) {
  require(shape_numel(shape) == a.numel(),
          "reshape " + shape_string(a.shape()) + " -> " + shape_string(shape));
  Tensor out(std::move(shape), a.value().data);
  return make_node(std::move(out), {a.node()}, [](Node& self) {
    auto& g = grad_of(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Var transpose(const Var& a) {
  require(a.value().rank() == 2, "transpose needs rank 2");
  const std::size_t n = a.shape()[0], m = a.shape()[1];
  Tensor out({m, n});
  MapMat(out.data.data(), m, n) = CMapMat(a.value().data.data(), n, m).transpose();
  return make_node(std::move(out), {a.node()}, [n, m](Node& self) {
    auto& g = grad_of(self, 0);
    MapMat(g.data(), n, m) += CMapMat(self.grad.data(), m, n).transpose();
  });
}

Var matmul(const Var& a, const Var& b) {
  require(a.value().rank() == 2 && b.value().rank() == 2, "matmul needs rank 2");
  const std::size_t n = a.shape()[0], k = a.shape()[1], m = b.shape()[1];
  require(b.shape()[0] == k, "matmul inner dimension " + shape_string(a.shape()) + " x " +
                                 shape_string(b.shape()));
  Tensor out({n, m});
  MapMat(out.data.data(), n, m).noalias() =
      CMapMat(a.value().data.data(), n, k) * CMapMat(b.value().data.data(), k, m);
  return make_node(std::move(out), {a.node(), b.node()}, [n, k, m](Node& self) {
    CMapMat go(self.grad.data(), n, m);
    if (wants(self, 0)) {
      auto& g = grad_of(self, 0);
      MapMat(g.data(), n, k).noalias() += go * CMapMat(self.inputs[1]->value.data.data(), k, m).transpose();
    }
    if (wants(self, 1)) {
      auto& g = grad_of(self, 1);
      MapMat(g.data(), k, m).noalias() += CMapMat(self.inputs[0]->value.data.data(), n, k).transpose() * go;
    }
  });
}

Var add_row_bias(const Var& x, const Var& bias) {
  require(x.value().rank() == 2 && bias.numel() == x.shape()[1], "add_row_bias shape mismatch");
  const std::size_t n = x.shape()[0], m = x.shape()[1];
  Tensor out = x.value();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < m; ++c) out.data[r * m + c] += bias.value().data[c];
  return make_node(std::move(out), {x.node(), bias.node()}, [n, m](Node& self) {
    if (wants(self, 0)) {
      auto& g = grad_of(self, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (wants(self, 1)) {
      auto& g = grad_of(self, 1);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < m; ++c) g[c] += self.grad[r * m + c];
    }
  });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
  require(x.value().rank() == 2 && weight.value().rank() == 2, "linear needs rank-2 input and weight");
  require(x.shape()[1] == weight.shape()[1], "linear: input width " + std::to_string(x.shape()[1]) +
                                                     " vs weight " + shape_string(weight.shape()));
  const std::size_t n = x.shape()[0], in = x.shape()[1], out_dim = weight.shape()[0];
  Tensor out({n, out_dim});
  MapMat(out.data.data(), n, out_dim).noalias() =
      CMapMat(x.value().data.data(), n, in) * CMapMat(weight.value().data.data(), out_dim, in).transpose();
  std::vector<NodePtr> inputs{x.node(), weight.node()};
  if (bias.defined()) {
    require(bias.numel() == out_dim, "linear bias size mismatch");
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < out_dim; ++c) out.data[r * out_dim + c] += bias.value().data[c];
    inputs.push_back(bias.node());
  }
  return make_node(std::move(out), std::move(inputs), [n, in, out_dim](Node& self) {
    CMapMat go(self.grad.data(), n, out_dim);
    if (wants(self, 0)) {
      auto& g = grad_of(self, 0);
      MapMat(g.data(), n, in).noalias() += go * CMapMat(self.inputs[1]->value.data.data(), out_dim, in);
    }
    if (wants(self, 1)) {
      auto& g = grad_of(self, 1);
      MapMat(g.data(), out_dim, in).noalias() +=
          go.transpose() * CMapMat(self.inputs[0]->value.data.data(), n, in);
    }
    if (self.inputs.size() > 2 && wants(self, 2)) {
      auto& g = grad_of(self, 2);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < out_dim; ++c) g[c] += self.grad[r * out_dim + c];
    }
  });
}

Var l2_normalize_rows(const Var& a) {
  require(a.value().rank() == 2, "l2_normalize_rows needs rank 2");
  const std::size_t n = a.shape()[0], m = a.shape()[1];
  Tensor out(a.shape());
  std::vector<double> norms(n);
  const auto& x = a.value().data;
  for (std::size_t r = 0; r < n; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < m; ++c) s += x[r * m + c] * x[r * m + c];
    const double norm = std::sqrt(s);
    if (!(norm > 0.0) || !std::isfinite(norm)) {
      throw NormalizationError("cannot normalize row " + std::to_string(r) + " with norm " +
                               std::to_string(norm));
    }
    norms[r] = norm;
    for (std::size_t c = 0; c < m; ++c) out.data[r * m + c] = x[r * m + c] / norm;
  }
  return make_node(std::move(out), {a.node()}, [n, m, norms = std::move(norms)](Node& self) {
    auto& g = grad_of(self, 0);
    const auto& y = self.value.data;
    for (std::size_t r = 0; r < n; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < m; ++c) dot += self.grad[r * m + c] * y[r * m + c];
      for (std::size_t c = 0; c < m; ++c)
        g[r * m + c] += (self.grad[r * m + c] - dot * y[r * m + c]) / norms[r];
    }
  });
}

Var log_softmax_rows(const Var& a) {
  require(a.value().rank() == 2, "log_softmax_rows needs rank 2");
  const std::size_t n = a.shape()[0], m = a.shape()[1];
  Tensor out(a.shape());
  const auto& x = a.value().data;
  for (std::size_t r = 0; r < n; ++r) {
    double mx = x[r * m];
    for (std::size_t c = 1; c < m; ++c) mx = std::max(mx, x[r * m + c]);
    double s = 0.0;
    for (std::size_t c = 0; c < m; ++c) s += std::exp(x[r * m + c] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t c = 0; c < m; ++c) out.data[r * m + c] = x[r * m + c] - lse;
  }
  return make_node(std::move(out), {a.node()}, [n, m](Node& self) {
    auto& g = grad_of(self, 0);
    const auto& y = self.value.data;
    for (std::size_t r = 0; r < n; ++r) {
      double gs = 0.0;
      for (std::size_t c = 0; c < m; ++c) gs += self.grad[r * m + c];
      for (std::size_t c = 0; c < m; ++c)
        g[r * m + c] += self.grad[r * m + c] - std::exp(y[r * m + c]) * gs;
    }
  });
}

Var row_norms(const Var& a) {
  require(a.value().rank() == 2, "row_norms needs rank 2");
  const std::size_t n = a.shape()[0], m = a.shape()[1];
  Tensor out({n});
  const auto& x = a.value().data;
  for (std::size_t r = 0; r < n; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < m; ++c) s += x[r * m + c] * x[r * m + c];
    out.data[r] = std::sqrt(s);
  }
  return make_node(std::move(out), {a.node()}, [n, m](Node& self) {
    auto& g = grad_of(self, 0);
    const auto& x = self.inputs[0]->value.data;
    for (std::size_t r = 0; r < n; ++r) {
      const double norm = self.value.data[r];
      if (norm == 0.0) continue;  // subgradient 0 at the origin
      for (std::size_t c = 0; c < m; ++c) g[r * m + c] += self.grad[r] * x[r * m + c] / norm;
    }
  });
}

Var gather_rows(const Var& a, std::span<const std::size_t> rows) {
  require(a.value().rank() == 2, "gather_rows needs rank 2");
  const std::size_t n = a.shape()[0], m = a.shape()[1];
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  Tensor out({idx.size(), m});
  for (std::size_t r = 0; r < idx.size(); ++r) {
    require(idx[r] < n, "gather_rows index out of range");
    std::copy_n(a.value().data.begin() + static_cast<std::ptrdiff_t>(idx[r] * m), m,
                out.data.begin() + static_cast<std::ptrdiff_t>(r * m));
  }
  return make_node(std::move(out), {a.node()}, [m, idx = std::move(idx)](Node& self) {
    auto& g = grad_of(self, 0);
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t c = 0; c < m; ++c) g[idx[r] * m + c] += self.grad[r * m + c];
  });
}

namespace {

struct ConvGeom {
  std::size_t n, c, h, w, o, kh, kw, stride, pad, ho, wo;
};

// Output columns [lo, hi) whose input column ox*stride + kx - pad is inside.
std::pair<std::size_t, std::size_t> valid_columns(const ConvGeom& g, std::size_t kx) {
  std::size_t lo = 0;
  while (lo < g.wo && lo * g.stride + kx < g.pad) ++lo;
  std::size_t hi = lo;
  while (hi < g.wo && hi * g.stride + kx < g.pad + g.w) ++hi;
  return {lo, hi};
}

// col is [C*kh*kw, ho*wo].
void im2col(const double* img, const ConvGeom& g, double* col) {
  const std::size_t cols = g.ho * g.wo;
  for (std::size_t ch = 0; ch < g.c; ++ch)
    for (std::size_t ky = 0; ky < g.kh; ++ky)
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        double* dst = col + ((ch * g.kh + ky) * g.kw + kx) * cols;
        const auto [lo, hi] = valid_columns(g, kx);
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          double* out = dst + oy * g.wo;
          const std::size_t iy = oy * g.stride + ky;
          if (iy < g.pad || iy >= g.pad + g.h) {
            std::fill(out, out + g.wo, 0.0);
            continue;
          }
          const double* row = img + (ch * g.h + iy - g.pad) * g.w;
          std::fill(out, out + lo, 0.0);
          for (std::size_t ox = lo; ox < hi; ++ox) out[ox] = row[ox * g.stride + kx - g.pad];
          std::fill(out + hi, out + g.wo, 0.0);
        }
      }
}

void col2im(const double* col, const ConvGeom& g, double* img) {
  const std::size_t cols = g.ho * g.wo;
  for (std::size_t ch = 0; ch < g.c; ++ch)
    for (std::size_t ky = 0; ky < g.kh; ++ky)
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const double* src = col + ((ch * g.kh + ky) * g.kw + kx) * cols;
        const auto [lo, hi] = valid_columns(g, kx);
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const std::size_t iy = oy * g.stride + ky;
          if (iy < g.pad || iy >= g.pad + g.h) continue;
          double* row = img + (ch * g.h + iy - g.pad) * g.w;
          const double* in = src + oy * g.wo;
          for (std::size_t ox = lo; ox < hi; ++ox) row[ox * g.stride + kx - g.pad] += in[ox];
        }
      }
}

}  // namespace

Var conv2d(const Var& x, const Var& weight, const Var& bias, std::size_t stride, std::size_t padding) {
  require(x.value().rank() == 4 && weight.value().rank() == 4, "conv2d needs NCHW input and OCKK weight");
  require(stride >= 1, "conv2d stride must be positive");
  ConvGeom g{};
  g.n = x.shape()[0];
  g.c = x.shape()[1];
  g.h = x.shape()[2];
  g.w = x.shape()[3];
  g.o = weight.shape()[0];
  g.kh = weight.shape()[2];
  g.kw = weight.shape()[3];
  g.stride = stride;
  g.pad = padding;
  require(weight.shape()[1] == g.c, "conv2d channel mismatch: input " + shape_string(x.shape()) +
                                        " weight " + shape_string(weight.shape()));
  require(g.h + 2 * g.pad >= g.kh && g.w + 2 * g.pad >= g.kw, "conv2d kernel larger than input");
  g.ho = (g.h + 2 * g.pad - g.kh) / g.stride + 1;
  g.wo = (g.w + 2 * g.pad - g.kw) / g.stride + 1;
  const std::size_t k = g.c * g.kh * g.kw, cols = g.ho * g.wo;

  Tensor out({g.n, g.o, g.ho, g.wo});
  std::vector<double> col(k * cols);
  CMapMat wmat(weight.value().data.data(), g.o, k);
  for (std::size_t s = 0; s < g.n; ++s) {
    im2col(x.value().data.data() + s * g.c * g.h * g.w, g, col.data());
    MapMat res(out.data.data() + s * g.o * cols, g.o, cols);
    res.noalias() = wmat * CMapMat(col.data(), k, cols);
    if (bias.defined()) {
      for (std::size_t oc = 0; oc < g.o; ++oc) res.row(oc).array() += bias.value().data[oc];
    }
  }
  std::vector<NodePtr> inputs{x.node(), weight.node()};
  if (bias.defined()) {
    require(bias.numel() == g.o, "conv2d bias size mismatch");
    inputs.push_back(bias.node());
  }
  return make_node(std::move(out), std::move(inputs), [g, k, cols](Node& self) {
    const bool gx = wants(self, 0), gw = wants(self, 1);
    const bool gb = self.inputs.size() > 2 && wants(self, 2);
    CMapMat wmat(self.inputs[1]->value.data.data(), g.o, k);
    std::vector<double> col(k * cols), dcol(k * cols);
    for (std::size_t s = 0; s < g.n; ++s) {
      CMapMat go(self.grad.data() + s * g.o * cols, g.o, cols);
      if (gw) {
        im2col(self.inputs[0]->value.data.data() + s * g.c * g.h * g.w, g, col.data());
        auto& wg = grad_of(self, 1);
        MapMat(wg.data(), g.o, k).noalias() += go * CMapMat(col.data(), k, cols).transpose();
      }
      if (gx) {
        MapMat(dcol.data(), k, cols).noalias() = wmat.transpose() * go;
        auto& xg = grad_of(self, 0);
        col2im(dcol.data(), g, xg.data() + s * g.c * g.h * g.w);
      }
      if (gb) {
        auto& bg = grad_of(self, 2);
        for (std::size_t oc = 0; oc < g.o; ++oc) bg[oc] += go.row(oc).sum();
      }
    }
  });
}

Var upsample_nearest2x(const Var& x) {
  require(x.value().rank() == 4, "upsample needs NCHW");
  const std::size_t n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  Tensor out({n, c, 2 * h, 2 * w});
  const auto& src = x.value().data;
  for (std::size_t p = 0; p < n * c; ++p)
    for (std::size_t y = 0; y < 2 * h; ++y)
      for (std::size_t xx = 0; xx < 2 * w; ++xx)
        out.data[(p * 2 * h + y) * 2 * w + xx] = src[(p * h + y / 2) * w + xx / 2];
  return make_node(std::move(out), {x.node()}, [n, c, h, w](Node& self) {
    auto& g = grad_of(self, 0);
    for (std::size_t p = 0; p < n * c; ++p)
      for (std::size_t y = 0; y < 2 * h; ++y)
        for (std::size_t xx = 0; xx < 2 * w; ++xx)
          g[(p * h + y / 2) * w + xx / 2] += self.grad[(p * 2 * h + y) * 2 * w + xx];
  });
}

Var avg_pool2d(const Var& x, std::size_t kernel_h, std::size_t kernel_w) {
  require(x.value().rank() == 4, "avg_pool2d needs NCHW");
  const std::size_t n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  require(kernel_h > 0 && kernel_w > 0 && h % kernel_h == 0 && w % kernel_w == 0,
          "avg_pool2d: image " + std::to_string(h) + "x" + std::to_string(w) +
              " not divisible by kernel " + std::to_string(kernel_h) + "x" + std::to_string(kernel_w));
  const std::size_t ho = h / kernel_h, wo = w / kernel_w;
  const double inv = 1.0 / static_cast<double>(kernel_h * kernel_w);
  Tensor out({n, c, ho, wo});
  const auto& src = x.value().data;
  for (std::size_t p = 0; p < n * c; ++p)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xx = 0; xx < w; ++xx)
        out.data[(p * ho + y / kernel_h) * wo + xx / kernel_w] += src[(p * h + y) * w + xx] * inv;
  return make_node(std::move(out), {x.node()}, [=](Node& self) {
    auto& g = grad_of(self, 0);
    for (std::size_t p = 0; p < n * c; ++p)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t xx = 0; xx < w; ++xx)
          g[(p * h + y) * w + xx] += self.grad[(p * ho + y / kernel_h) * wo + xx / kernel_w] * inv;
  });
}

Var box_means(const Var& x, std::span<const PixelBox> boxes) {
  require(x.value().rank() == 4, "box_means needs NCHW");
  const std::size_t n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  std::vector<PixelBox> bx(boxes.begin(), boxes.end());
  for (const auto& b : bx) {
    require(b.y0 < b.y1 && b.x0 < b.x1 && b.y1 <= h && b.x1 <= w, "box_means: box outside image");
  }
  const std::size_t nb = bx.size();
  Tensor out({n, nb * c});
  const auto& src = x.value().data;
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t b = 0; b < nb; ++b) {
      const double inv = 1.0 / static_cast<double>((bx[b].y1 - bx[b].y0) * (bx[b].x1 - bx[b].x0));
      for (std::size_t ch = 0; ch < c; ++ch) {
        double acc = 0.0;
        for (std::size_t y = bx[b].y0; y < bx[b].y1; ++y)
          for (std::size_t xx = bx[b].x0; xx < bx[b].x1; ++xx) acc += src[((s * c + ch) * h + y) * w + xx];
        out.data[s * nb * c + b * c + ch] = acc * inv;
      }
    }
  return make_node(std::move(out), {x.node()}, [=, bx = std::move(bx)](Node& self) {
    auto& g = grad_of(self, 0);
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t b = 0; b < nb; ++b) {
        const double inv = 1.0 / static_cast<double>((bx[b].y1 - bx[b].y0) * (bx[b].x1 - bx[b].x0));
        for (std::size_t ch = 0; ch < c; ++ch) {
          const double gv = self.grad[s * nb * c + b * c + ch] * inv;
          for (std::size_t y = bx[b].y0; y < bx[b].y1; ++y)
            for (std::size_t xx = bx[b].x0; xx < bx[b].x1; ++xx) g[((s * c + ch) * h + y) * w + xx] += gv;
        }
      }
  });
}

Var assemble_sequence(const Tensor& base, std::span<const std::size_t> positions,
                      std::span<const Var> parts) {
  require(base.rank() == 2, "assemble_sequence: base must be [L,E]");
  require(positions.size() == parts.size(), "assemble_sequence: one part per position");
  const std::size_t len = base.shape[0], e = base.shape[1];
  require(!parts.empty(), "assemble_sequence needs at least one part");
  const std::size_t n = parts[0].shape().at(0);
  std::vector<std::size_t> pos(positions.begin(), positions.end());
  for (std::size_t i = 0; i < parts.size(); ++i) {
    require(pos[i] < len, "assemble_sequence: position out of range");
    if (parts[i].value().rank() != 2 || parts[i].shape()[0] != n || parts[i].shape()[1] != e) {
      throw InputError("assemble_sequence: part " + std::to_string(i) + " has shape " +
                       shape_string(parts[i].shape()) + ", expected [" + std::to_string(n) + "," +
                       std::to_string(e) + "]");
    }
  }
  Tensor out({n, len, e});
  for (std::size_t s = 0; s < n; ++s) std::copy(base.data.begin(), base.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(s * len * e));
  std::vector<NodePtr> inputs;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const auto& pv = parts[i].value().data;
    for (std::size_t s = 0; s < n; ++s)
      std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(s * e), e,
                  out.data.begin() + static_cast<std::ptrdiff_t>((s * len + pos[i]) * e));
    inputs.push_back(parts[i].node());
  }
  return make_node(std::move(out), std::move(inputs), [n, len, e, pos = std::move(pos)](Node& self) {
    for (std::size_t i = 0; i < pos.size(); ++i) {
      if (!wants(self, i)) continue;
      auto& g = grad_of(self, i);
      for (std::size_t s = 0; s < n; ++s)
        for (std::size_t j = 0; j < e; ++j) g[s * e + j] += self.grad[(s * len + pos[i]) * e + j];
    }
  });
}

Var mean_over_sequence(const Var& x) {
  require(x.value().rank() == 3, "mean_over_sequence needs [N,L,E]");
  const std::size_t n = x.shape()[0], len = x.shape()[1], e = x.shape()[2];
  require(len > 0, "mean_over_sequence of empty sequence");
  const double inv = 1.0 / static_cast<double>(len);
  Tensor out({n, e});
  const auto& src = x.value().data;
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t k = 0; k < len; ++k)
      for (std::size_t j = 0; j < e; ++j) out.data[s * e + j] += src[(s * len + k) * e + j] * inv;
  return make_node(std::move(out), {x.node()}, [n, len, e, inv](Node& self) {
    auto& g = grad_of(self, 0);
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t k = 0; k < len; ++k)
        for (std::size_t j = 0; j < e; ++j) g[(s * len + k) * e + j] += self.grad[s * e + j] * inv;
  });
}

Var positional_project(const Var& x, const Var& proj) {
  require(x.value().rank() == 3 && proj.value().rank() == 3, "positional_project needs [N,L,E] and [Lmax,D,E]");
  const std::size_t n = x.shape()[0], len = x.shape()[1], e = x.shape()[2];
  const std::size_t lmax = proj.shape()[0], d = proj.shape()[1];
  require(len <= lmax && proj.shape()[2] == e, "positional_project: sequence " + shape_string(x.shape()) +
                                                   " vs projection " + shape_string(proj.shape()));
  Tensor out({n, d});
  MapMat res(out.data.data(), n, d);
  for (std::size_t k = 0; k < len; ++k) {
    // rows of x at position k: stride len*e
    Eigen::Map<const RowMat, 0, Eigen::OuterStride<>> xk(x.value().data.data() + k * e, n, e,
                                                          Eigen::OuterStride<>(len * e));
    res.noalias() += xk * CMapMat(proj.value().data.data() + k * d * e, d, e).transpose();
  }
  return make_node(std::move(out), {x.node(), proj.node()}, [n, len, e, d](Node& self) {
    CMapMat go(self.grad.data(), n, d);
    for (std::size_t k = 0; k < len; ++k) {
      if (wants(self, 0)) {
        auto& g = grad_of(self, 0);
        Eigen::Map<RowMat, 0, Eigen::OuterStride<>> gk(g.data() + k * e, n, e, Eigen::OuterStride<>(len * e));
        gk.noalias() += go * CMapMat(self.inputs[1]->value.data.data() + k * d * e, d, e);
      }
      if (wants(self, 1)) {
        auto& g = grad_of(self, 1);
        Eigen::Map<const RowMat, 0, Eigen::OuterStride<>> xk(self.inputs[0]->value.data.data() + k * e, n, e,
                                                              Eigen::OuterStride<>(len * e));
        MapMat(g.data() + k * d * e, d, e).noalias() += go.transpose() * xk;
      }
    }
  });
}

Var add_sequence_rows(const Var& x, const Var& rows) {
  require(x.value().rank() == 3 && rows.value().rank() == 2, "add_sequence_rows needs [N,L,E] and [Lmax,E]");
  const std::size_t n = x.shape()[0], len = x.shape()[1], e = x.shape()[2];
  require(rows.shape()[0] >= len && rows.shape()[1] == e, "add_sequence_rows shape mismatch");
  Tensor out = x.value();
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t i = 0; i < len * e; ++i) out.data[s * len * e + i] += rows.value().data[i];
  return make_node(std::move(out), {x.node(), rows.node()}, [n, len, e](Node& self) {
    if (wants(self, 0)) {
      auto& g = grad_of(self, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (wants(self, 1)) {
      auto& g = grad_of(self, 1);
      for (std::size_t s = 0; s < n; ++s)
        for (std::size_t i = 0; i < len * e; ++i) g[i] += self.grad[s * len * e + i];
    }
  });
}

}  // namespace apattack::ag
