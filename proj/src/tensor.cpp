#include "ege/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <mutex>
#include <numeric>
#include <string>
#include <unordered_set>

#include "ege/error.hpp"

namespace ege {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

namespace {

thread_local bool g_grad_enabled = true;

std::atomic<bool> g_fault_active{false};
std::mutex g_fault_mutex;
std::string g_fault_op;
double g_fault_factor = 1.0;

double fault(const char* op) {
  if (!g_fault_active.load(std::memory_order_relaxed)) return 1.0;
  std::lock_guard<std::mutex> lock(g_fault_mutex);
  return g_fault_op == op ? g_fault_factor : 1.0;
}

void check_finite(const char* op, const std::vector<double>& data) {
  for (double v : data) {
    if (!std::isfinite(v)) raise(ErrorCode::numeric, std::string(op) + ": non-finite value");
  }
}

Tensor make_result(const char* op, Shape shape, std::vector<double> data, std::vector<NodePtr> inputs,
                   std::function<void(Node&)> fn) {
  check_finite(op, data);
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  node->leaf = false;
  bool needs = false;
  if (g_grad_enabled) {
    for (const auto& in : inputs) needs = needs || in->requires_grad;
  }
  if (needs) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward = std::move(fn);
  }
  return Tensor(std::move(node));
}

const Node& node_of(const Tensor& t, const char* op) {
  if (!t.defined()) raise(ErrorCode::contract, std::string(op) + ": undefined tensor");
  return *t.node();
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    raise(ErrorCode::dimension, std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                                    shape_string(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    raise(ErrorCode::dimension,
          std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
}

Tensor elementwise(const char* op, const Tensor& a, const Tensor& b, int kind) {
  require_same_shape(a, b, op);
  const auto& x = node_of(a, op).data;
  const auto& y = node_of(b, op).data;
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = kind == 0 ? x[i] + y[i] : kind == 1 ? x[i] - y[i] : x[i] * y[i];
  }
  return make_result(op, a.shape(), std::move(out), {a.node(), b.node()}, [kind](Node& self) {
    Node& na = *self.inputs[0];
    Node& nb = *self.inputs[1];
    const auto& g = self.grad;
    if (na.requires_grad) {
      auto& ga = na.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += kind == 2 ? g[i] * nb.data[i] : g[i];
    }
    if (nb.requires_grad) {
      auto& gb = nb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) {
        gb[i] += kind == 0 ? g[i] : kind == 1 ? -g[i] : g[i] * na.data[i];
      }
    }
  });
}

// Splits a shape around `axis` into (outer, extent, inner) for strided loops.
struct AxisView {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisView axis_view(const Shape& shape, std::size_t axis) {
  AxisView v;
  for (std::size_t i = 0; i < axis; ++i) v.outer *= shape[i];
  v.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) v.inner *= shape[i];
  return v;
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

// ---- Tensor -------------------------------------------------------------------

Tensor::Tensor(Shape shape) : Tensor(shape, std::vector<double>(shape_numel(shape), 0.0)) {}

Tensor::Tensor(Shape shape, std::vector<double> data) {
  for (auto e : shape) {
    if (e == 0) raise(ErrorCode::dimension, "tensor extents must be positive, got " + shape_string(shape));
  }
  if (shape_numel(shape) != data.size()) {
    raise(ErrorCode::dimension, "tensor data length " + std::to_string(data.size()) + " does not match shape " +
                                    shape_string(shape));
  }
  check_finite("tensor", data);
  node_ = std::make_shared<Node>();
  node_->shape = std::move(shape);
  node_->data = std::move(data);
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, {value}); }

Tensor Tensor::filled(Shape shape, double value) {
  auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

const Shape& Tensor::shape() const { return node_of(*this, "shape").shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) raise(ErrorCode::dimension, "axis out of range for " + shape_string(s));
  return s[axis];
}

std::size_t Tensor::numel() const { return node_of(*this, "numel").data.size(); }

std::span<const double> Tensor::data() const { return node_of(*this, "data").data; }

std::vector<double> Tensor::to_vector() const { return node_of(*this, "to_vector").data; }

double Tensor::item() const {
  const auto& n = node_of(*this, "item");
  if (n.data.size() != 1) raise(ErrorCode::contract, "item() on non-scalar " + shape_string(n.shape));
  return n.data[0];
}

double Tensor::at(std::size_t i) const {
  const auto& n = node_of(*this, "at");
  if (i >= n.data.size()) raise(ErrorCode::dimension, "index out of range");
  return n.data[i];
}

double Tensor::at(std::size_t i, std::size_t j) const {
  const auto& n = node_of(*this, "at");
  if (n.shape.size() != 2 || i >= n.shape[0] || j >= n.shape[1]) raise(ErrorCode::dimension, "index out of range");
  return n.data[i * n.shape[1] + j];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  auto& n = const_cast<Node&>(node_of(*this, "set_requires_grad"));
  if (!n.leaf) raise(ErrorCode::contract, "requires_grad can only be toggled on leaves");
  n.requires_grad = on;
  if (!on) n.grad.clear();
  return *this;
}

bool Tensor::is_leaf() const { return node_of(*this, "is_leaf").leaf; }

bool Tensor::has_grad() const { return node_ && node_->requires_grad && node_->grad.size() == node_->data.size(); }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) raise(ErrorCode::contract, "tensor has no gradient");
  return node_->grad;
}

void Tensor::zero_grad() {
  if (node_ && node_->requires_grad) node_->grad.assign(node_->data.size(), 0.0);
}

std::span<double> Tensor::mutable_data() {
  auto& n = const_cast<Node&>(node_of(*this, "mutable_data"));
  if (!n.leaf) raise(ErrorCode::contract, "only leaf tensors are mutable");
  return n.data;
}

Tensor Tensor::detach() const {
  const auto& n = node_of(*this, "detach");
  auto out = std::make_shared<Node>();
  out->shape = n.shape;
  out->data = n.data;
  return Tensor(std::move(out));
}

Tensor Tensor::clone() const {
  Tensor t = detach();
  t.node_->requires_grad = requires_grad();
  return t;
}

// ---- tape ---------------------------------------------------------------------

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() noexcept { return g_grad_enabled; }

GradTape GradTape::record(const Tensor& root) {
  GradTape tape;
  if (!root.defined() || !root.requires_grad()) return tape;
  tape.root_ = root.node();
  std::unordered_set<Node*> seen;
  std::vector<Node*> post;
  // Iterative post-order DFS; (node, next input index).
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      post.push_back(node);
      stack.pop_back();
    }
  }
  tape.order_.assign(post.rbegin(), post.rend());
  return tape;
}

void GradTape::replay(bool accumulate) const {
  if (order_.empty()) return;
  for (Node* n : order_) {
    if (!n->leaf || !accumulate) {
      n->grad.assign(n->data.size(), 0.0);
    } else {
      n->grad_buffer();
    }
  }
  for (auto& g : order_.front()->grad) g += 1.0;
  for (Node* n : order_) {
    if (!n->leaf && n->backward) n->backward(*n);
  }
}

void backward(const Tensor& loss, GradMode mode) {
  if (!loss.defined()) raise(ErrorCode::contract, "backward: undefined loss");
  if (loss.rank() != 0) raise(ErrorCode::contract, "backward: loss must be a scalar, got " + shape_string(loss.shape()));
  if (!loss.requires_grad()) raise(ErrorCode::contract, "backward: loss is not on the tape");
  GradTape::record(loss).replay(mode == GradMode::accumulate);
}

// ---- operations ---------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    raise(ErrorCode::dimension, "matmul: inner extents differ " + shape_string(a.shape()) + " x " +
                                    shape_string(b.shape()));
  }
  const auto& x = a.node()->data;
  const auto& y = b.node()->data;
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double xv = x[i * k + p];
      const double* yr = &y[p * n];
      double* o = &out[i * n];
      for (std::size_t j = 0; j < n; ++j) o[j] += xv * yr[j];
    }
  }
  return make_result("matmul", {m, n}, std::move(out), {a.node(), b.node()}, [m, k, n](Node& self) {
    Node& na = *self.inputs[0];
    Node& nb = *self.inputs[1];
    const auto& g = self.grad;
    const double f = fault("matmul");
    if (na.requires_grad) {
      auto& ga = na.grad_buffer();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * nb.data[p * n + j];
          ga[i * k + p] += f * s;
        }
      }
    }
    if (nb.requires_grad) {
      auto& gb = nb.grad_buffer();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const double av = f * na.data[i * k + p];
          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += av * g[i * n + j];
        }
      }
    }
  });
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  const auto& x = a.node()->data;
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = x[i * n + j];
  return make_result("transpose", {n, m}, std::move(out), {a.node()}, [m, n](Node& self) {
    auto& ga = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += self.grad[j * m + i];
  });
}

Tensor add(const Tensor& a, const Tensor& b) { return elementwise("add", a, b, 0); }
Tensor sub(const Tensor& a, const Tensor& b) { return elementwise("sub", a, b, 1); }
Tensor mul(const Tensor& a, const Tensor& b) { return elementwise("mul", a, b, 2); }

Tensor scale(const Tensor& a, double factor) {
  const auto& x = node_of(a, "scale").data;
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * factor;
  return make_result("scale", a.shape(), std::move(out), {a.node()}, [factor](Node& self) {
    auto& ga = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += factor * self.grad[i];
  });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Tensor gelu(const Tensor& x) {
  const auto& v = node_of(x, "gelu").data;
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double z = v[i];
    out[i] = 0.5 * z * (1.0 + std::tanh(kGeluC * (z + kGeluA * z * z * z)));
  }
  return make_result("gelu", x.shape(), std::move(out), {x.node()}, [](Node& self) {
    Node& in = *self.inputs[0];
    auto& gi = in.grad_buffer();
    const double f = fault("gelu");
    for (std::size_t i = 0; i < gi.size(); ++i) {
      const double z = in.data[i];
      const double t = std::tanh(kGeluC * (z + kGeluA * z * z * z));
      const double d = 0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * z * z);
      gi[i] += f * d * self.grad[i];
    }
  });
}

Tensor relu(const Tensor& x) {
  const auto& v = node_of(x, "relu").data;
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] > 0.0 ? v[i] : 0.0;
  return make_result("relu", x.shape(), std::move(out), {x.node()}, [](Node& self) {
    Node& in = *self.inputs[0];
    auto& gi = in.grad_buffer();
    for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += in.data[i] > 0.0 ? self.grad[i] : 0.0;
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    raise(ErrorCode::dimension, "reshape: " + shape_string(x.shape()) + " -> " + shape_string(shape));
  }
  return make_result("reshape", std::move(shape), x.node()->data, {x.node()}, [](Node& self) {
    auto& gi = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += self.grad[i];
  });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  const auto& in = node_of(x, "softmax");
  if (axis >= in.shape.size()) raise(ErrorCode::dimension, "softmax: axis out of range for " + shape_string(in.shape));
  const AxisView v = axis_view(in.shape, axis);
  std::vector<double> out(in.data.size());
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t r = 0; r < v.inner; ++r) {
      const std::size_t base = o * v.extent * v.inner + r;
      double mx = in.data[base];
      for (std::size_t j = 1; j < v.extent; ++j) mx = std::max(mx, in.data[base + j * v.inner]);
      double total = 0.0;
      for (std::size_t j = 0; j < v.extent; ++j) {
        const double e = std::exp(in.data[base + j * v.inner] - mx);
        out[base + j * v.inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < v.extent; ++j) out[base + j * v.inner] /= total;
    }
  }
  return make_result("softmax", in.shape, std::move(out), {x.node()}, [v](Node& self) {
    auto& gi = self.inputs[0]->grad_buffer();
    const double f = fault("softmax");
    for (std::size_t o = 0; o < v.outer; ++o) {
      for (std::size_t r = 0; r < v.inner; ++r) {
        const std::size_t base = o * v.extent * v.inner + r;
        double s = 0.0;
        for (std::size_t j = 0; j < v.extent; ++j) s += self.grad[base + j * v.inner] * self.data[base + j * v.inner];
        for (std::size_t j = 0; j < v.extent; ++j) {
          const std::size_t idx = base + j * v.inner;
          gi[idx] += f * self.data[idx] * (self.grad[idx] - s);
        }
      }
    }
  });
}

Tensor masked_softmax(const Tensor& x, std::span<const std::uint8_t> keep) {
  const auto& in = node_of(x, "masked_softmax");
  if (in.shape.empty() || in.shape.size() > 2) raise(ErrorCode::dimension, "masked_softmax: expected a vector or matrix");
  const std::size_t cols = in.shape.back();
  const std::size_t rows = in.data.size() / cols;
  if (keep.size() != cols && keep.size() != rows * cols) {
    raise(ErrorCode::dimension, "masked_softmax: mask length " + std::to_string(keep.size()) + " does not fit " +
                                    shape_string(in.shape));
  }
  const bool shared = keep.size() == cols;
  std::vector<double> out(in.data.size(), 0.0);
  for (std::size_t i = 0; i < rows; ++i) {
    const std::uint8_t* k = shared ? keep.data() : keep.data() + i * cols;
    const double* row = &in.data[i * cols];
    double mx = -HUGE_VAL;
    for (std::size_t j = 0; j < cols; ++j)
      if (k[j]) mx = std::max(mx, row[j]);
    if (mx == -HUGE_VAL) raise(ErrorCode::contract, "masked_softmax: every position in a row is masked");
    double total = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      if (!k[j]) continue;
      out[i * cols + j] = std::exp(row[j] - mx);
      total += out[i * cols + j];
    }
    for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] /= total;
  }
  return make_result("masked_softmax", in.shape, std::move(out), {x.node()}, [rows, cols](Node& self) {
    auto& gi = self.inputs[0]->grad_buffer();
    const double f = fault("softmax");
    for (std::size_t i = 0; i < rows; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < cols; ++j) s += self.grad[i * cols + j] * self.data[i * cols + j];
      for (std::size_t j = 0; j < cols; ++j) {
        const std::size_t idx = i * cols + j;
        gi[idx] += f * self.data[idx] * (self.grad[idx] - s);
      }
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const auto& in = node_of(x, "layer_norm");
  if (in.shape.empty()) raise(ErrorCode::dimension, "layer_norm: scalar input");
  const std::size_t d = in.shape.back();
  require_rank(gamma, 1, "layer_norm");
  require_rank(beta, 1, "layer_norm");
  if (gamma.dim(0) != d || beta.dim(0) != d) {
    raise(ErrorCode::dimension, "layer_norm: affine width does not match " + shape_string(in.shape));
  }
  if (!(eps > 0.0)) raise(ErrorCode::config, "layer_norm: eps must be positive");
  const std::size_t rows = in.data.size() / d;
  const auto& g = gamma.node()->data;
  const auto& b = beta.node()->data;
  std::vector<double> out(in.data.size());
  std::vector<double> xhat(in.data.size());
  std::vector<double> inv_std(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    const double* r = &in.data[i * d];
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += r[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (r[j] - mu) * (r[j] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[i] = is;
    for (std::size_t j = 0; j < d; ++j) {
      xhat[i * d + j] = (r[j] - mu) * is;
      out[i * d + j] = g[j] * xhat[i * d + j] + b[j];
    }
  }
  return make_result(
      "layer_norm", in.shape, std::move(out), {x.node(), gamma.node(), beta.node()},
      [rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
        Node& nx = *self.inputs[0];
        Node& ng = *self.inputs[1];
        Node& nb = *self.inputs[2];
        const auto& up = self.grad;
        const double f = fault("layer_norm");
        if (ng.requires_grad) {
          auto& gg = ng.grad_buffer();
          for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < d; ++j) gg[j] += up[i * d + j] * xhat[i * d + j];
        }
        if (nb.requires_grad) {
          auto& gb = nb.grad_buffer();
          for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < d; ++j) gb[j] += up[i * d + j];
        }
        if (nx.requires_grad) {
          auto& gx = nx.grad_buffer();
          const double inv_d = 1.0 / static_cast<double>(d);
          for (std::size_t i = 0; i < rows; ++i) {
            double mean_dx = 0.0, mean_dx_x = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              const double dxh = up[i * d + j] * ng.data[j];
              mean_dx += dxh;
              mean_dx_x += dxh * xhat[i * d + j];
            }
            mean_dx *= inv_d;
            mean_dx_x *= inv_d;
            for (std::size_t j = 0; j < d; ++j) {
              const double dxh = up[i * d + j] * ng.data[j];
              gx[i * d + j] += f * inv_std[i] * (dxh - mean_dx - xhat[i * d + j] * mean_dx_x);
            }
          }
        }
      });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  const auto& in = node_of(x, "linear");
  require_rank(weight, 2, "linear");
  require_rank(bias, 1, "linear");
  if (in.shape.empty()) raise(ErrorCode::dimension, "linear: scalar input");
  const std::size_t din = in.shape.back(), dout = weight.dim(1);
  if (weight.dim(0) != din || bias.dim(0) != dout) {
    raise(ErrorCode::dimension, "linear: " + shape_string(in.shape) + " through W" + shape_string(weight.shape()) +
                                    " b" + shape_string(bias.shape()));
  }
  const std::size_t rows = in.data.size() / din;
  const auto& w = weight.node()->data;
  const auto& b = bias.node()->data;
  std::vector<double> out(rows * dout);
  for (std::size_t i = 0; i < rows; ++i) {
    double* o = &out[i * dout];
    for (std::size_t j = 0; j < dout; ++j) o[j] = b[j];
    for (std::size_t p = 0; p < din; ++p) {
      const double xv = in.data[i * din + p];
      const double* wr = &w[p * dout];
      for (std::size_t j = 0; j < dout; ++j) o[j] += xv * wr[j];
    }
  }
  Shape shape = in.shape;
  shape.back() = dout;
  return make_result("linear", std::move(shape), std::move(out), {x.node(), weight.node(), bias.node()},
                     [rows, din, dout](Node& self) {
                       Node& nx = *self.inputs[0];
                       Node& nw = *self.inputs[1];
                       Node& nb = *self.inputs[2];
                       const auto& g = self.grad;
                       const double f = fault("linear");
                       if (nx.requires_grad) {
                         auto& gx = nx.grad_buffer();
                         for (std::size_t i = 0; i < rows; ++i)
                           for (std::size_t p = 0; p < din; ++p) {
                             double s = 0.0;
                             for (std::size_t j = 0; j < dout; ++j) s += g[i * dout + j] * nw.data[p * dout + j];
                             gx[i * din + p] += f * s;
                           }
                       }
                       if (nw.requires_grad) {
                         auto& gw = nw.grad_buffer();
                         for (std::size_t i = 0; i < rows; ++i)
                           for (std::size_t p = 0; p < din; ++p) {
                             const double xv = f * nx.data[i * din + p];
                             for (std::size_t j = 0; j < dout; ++j) gw[p * dout + j] += xv * g[i * dout + j];
                           }
                       }
                       if (nb.requires_grad) {
                         auto& gb = nb.grad_buffer();
                         for (std::size_t i = 0; i < rows; ++i)
                           for (std::size_t j = 0; j < dout; ++j) gb[j] += g[i * dout + j];
                       }
                     });
}

Tensor embedding(const Tensor& table, std::span<const std::int32_t> ids) {
  require_rank(table, 2, "embedding");
  if (ids.empty()) raise(ErrorCode::empty_input, "embedding: no token ids");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  const auto& t = table.node()->data;
  std::vector<std::size_t> rows(ids.size());
  std::vector<double> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      raise(ErrorCode::vocabulary,
            "token id " + std::to_string(ids[i]) + " outside vocabulary of " + std::to_string(vocab));
    }
    rows[i] = static_cast<std::size_t>(ids[i]);
    std::copy_n(&t[rows[i] * d], d, &out[i * d]);
  }
  return make_result("embedding", {ids.size(), d}, std::move(out), {table.node()},
                     [rows = std::move(rows), d](Node& self) {
                       auto& gt = self.inputs[0]->grad_buffer();
                       for (std::size_t i = 0; i < rows.size(); ++i)
                         for (std::size_t j = 0; j < d; ++j) gt[rows[i] * d + j] += self.grad[i * d + j];
                     });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t count) {
  const auto& in = node_of(x, "slice");
  if (axis >= in.shape.size()) raise(ErrorCode::dimension, "slice: axis out of range");
  if (count == 0 || begin + count > in.shape[axis]) {
    raise(ErrorCode::dimension, "slice: [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                                    ") outside extent " + std::to_string(in.shape[axis]));
  }
  const AxisView v = axis_view(in.shape, axis);
  Shape shape = in.shape;
  shape[axis] = count;
  std::vector<double> out(v.outer * count * v.inner);
  for (std::size_t o = 0; o < v.outer; ++o)
    std::copy_n(&in.data[(o * v.extent + begin) * v.inner], count * v.inner, &out[o * count * v.inner]);
  return make_result("slice", std::move(shape), std::move(out), {x.node()}, [v, begin, count](Node& self) {
    auto& gi = self.inputs[0]->grad_buffer();
    for (std::size_t o = 0; o < v.outer; ++o)
      for (std::size_t j = 0; j < count * v.inner; ++j)
        gi[(o * v.extent + begin) * v.inner + j] += self.grad[o * count * v.inner + j];
  });
}

Tensor select_rows(const Tensor& x, std::span<const std::size_t> rows) {
  const auto& in = node_of(x, "select_rows");
  if (in.shape.empty()) raise(ErrorCode::dimension, "select_rows: scalar input");
  if (rows.empty()) raise(ErrorCode::empty_input, "select_rows: no rows requested");
  const std::size_t n = in.shape[0];
  const std::size_t width = in.data.size() / n;
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  std::vector<double> out(idx.size() * width);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= n) raise(ErrorCode::dimension, "select_rows: row " + std::to_string(idx[i]) + " out of range");
    std::copy_n(&in.data[idx[i] * width], width, &out[i * width]);
  }
  Shape shape = in.shape;
  shape[0] = idx.size();
  return make_result("select_rows", std::move(shape), std::move(out), {x.node()},
                     [idx = std::move(idx), width](Node& self) {
                       auto& gi = self.inputs[0]->grad_buffer();
                       for (std::size_t i = 0; i < idx.size(); ++i)
                         for (std::size_t j = 0; j < width; ++j) gi[idx[i] * width + j] += self.grad[i * width + j];
                     });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) raise(ErrorCode::empty_input, "concat: no inputs");
  const Shape& first = node_of(parts[0], "concat").shape;
  if (axis >= first.size()) raise(ErrorCode::dimension, "concat: axis out of range");
  Shape shape = first;
  shape[axis] = 0;
  std::vector<std::size_t> extents;
  std::vector<NodePtr> inputs;
  for (const auto& p : parts) {
    const Shape& s = node_of(p, "concat").shape;
    if (s.size() != first.size()) raise(ErrorCode::dimension, "concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != axis && s[i] != first[i]) {
        raise(ErrorCode::dimension, "concat: " + shape_string(s) + " vs " + shape_string(first));
      }
    }
    extents.push_back(s[axis]);
    shape[axis] += s[axis];
    inputs.push_back(p.node());
  }
  const AxisView v = axis_view(shape, axis);
  std::vector<double> out(shape_numel(shape));
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& d = inputs[k]->data;
    const std::size_t block = extents[k] * v.inner;
    for (std::size_t o = 0; o < v.outer; ++o)
      std::copy_n(&d[o * block], block, &out[(o * v.extent + offset) * v.inner]);
    offset += extents[k];
  }
  return make_result("concat", std::move(shape), std::move(out), std::move(inputs),
                     [v, extents = std::move(extents)](Node& self) {
                       std::size_t off = 0;
                       for (std::size_t k = 0; k < self.inputs.size(); ++k) {
                         Node& in = *self.inputs[k];
                         const std::size_t block = extents[k] * v.inner;
                         if (in.requires_grad) {
                           auto& gi = in.grad_buffer();
                           for (std::size_t o = 0; o < v.outer; ++o)
                             for (std::size_t j = 0; j < block; ++j)
                               gi[o * block + j] += self.grad[(o * v.extent + off) * v.inner + j];
                         }
                         off += extents[k];
                       }
                     });
}

namespace {

Tensor reduce_axis(const char* op, const Tensor& x, std::size_t axis, bool average) {
  const auto& in = node_of(x, op);
  if (axis >= in.shape.size()) raise(ErrorCode::dimension, std::string(op) + ": axis out of range");
  const AxisView v = axis_view(in.shape, axis);
  Shape shape = in.shape;
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
  const double factor = average ? 1.0 / static_cast<double>(v.extent) : 1.0;
  std::vector<double> out(v.outer * v.inner, 0.0);
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t j = 0; j < v.extent; ++j)
      for (std::size_t r = 0; r < v.inner; ++r) out[o * v.inner + r] += in.data[(o * v.extent + j) * v.inner + r];
  for (auto& o : out) o *= factor;
  return make_result(op, std::move(shape), std::move(out), {x.node()}, [v, factor](Node& self) {
    auto& gi = self.inputs[0]->grad_buffer();
    for (std::size_t o = 0; o < v.outer; ++o)
      for (std::size_t j = 0; j < v.extent; ++j)
        for (std::size_t r = 0; r < v.inner; ++r)
          gi[(o * v.extent + j) * v.inner + r] += factor * self.grad[o * v.inner + r];
  });
}

}  // namespace

Tensor mean(const Tensor& x, std::size_t axis) { return reduce_axis("mean", x, axis, true); }
Tensor sum_axis(const Tensor& x, std::size_t axis) { return reduce_axis("sum_axis", x, axis, false); }

Tensor sum(const Tensor& x) {
  const auto& in = node_of(x, "sum");
  double s = 0.0;
  for (double v : in.data) s += v;
  return make_result("sum", {}, {s}, {x.node()}, [](Node& self) {
    auto& gi = self.inputs[0]->grad_buffer();
    for (auto& g : gi) g += self.grad[0];
  });
}

Tensor sum_squares(const Tensor& x) {
  const auto& in = node_of(x, "sum_squares");
  double s = 0.0;
  for (double v : in.data) s += v * v;
  return make_result("sum_squares", {}, {s}, {x.node()}, [](Node& self) {
    Node& n = *self.inputs[0];
    auto& gi = n.grad_buffer();
    for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += 2.0 * n.data[i] * self.grad[0];
  });
}

Tensor dot(const Tensor& a, const Tensor& b) {
  require_rank(a, 1, "dot");
  require_same_shape(a, b, "dot");
  const auto& x = a.node()->data;
  const auto& y = b.node()->data;
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * y[i];
  return make_result("dot", {}, {s}, {a.node(), b.node()}, [](Node& self) {
    Node& na = *self.inputs[0];
    Node& nb = *self.inputs[1];
    const double g = self.grad[0];
    if (na.requires_grad) {
      auto& ga = na.grad_buffer();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g * nb.data[i];
    }
    if (nb.requires_grad) {
      auto& gb = nb.grad_buffer();
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g * na.data[i];
    }
  });
}

Tensor l2_normalize(const Tensor& x) {
  const auto& in = node_of(x, "l2_normalize");
  if (in.shape.empty()) raise(ErrorCode::dimension, "l2_normalize: scalar input");
  const std::size_t d = in.shape.back();
  const std::size_t rows = in.data.size() / d;
  std::vector<double> out(in.data.size());
  std::vector<double> norms(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += in.data[i * d + j] * in.data[i * d + j];
    const double n = std::sqrt(s);
    if (!(n > 0.0)) raise(ErrorCode::degenerate, "l2_normalize: zero-norm vector at row " + std::to_string(i));
    norms[i] = n;
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = in.data[i * d + j] / n;
  }
  return make_result("l2_normalize", in.shape, std::move(out), {x.node()},
                     [rows, d, norms = std::move(norms)](Node& self) {
                       auto& gi = self.inputs[0]->grad_buffer();
                       for (std::size_t i = 0; i < rows; ++i) {
                         double yg = 0.0;
                         for (std::size_t j = 0; j < d; ++j) yg += self.data[i * d + j] * self.grad[i * d + j];
                         for (std::size_t j = 0; j < d; ++j)
                           gi[i * d + j] += (self.grad[i * d + j] - self.data[i * d + j] * yg) / norms[i];
                       }
                     });
}

Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
  require_rank(a, 1, "cosine_similarity");
  require_same_shape(a, b, "cosine_similarity");
  const auto& x = a.node()->data;
  const auto& y = b.node()->data;
  double xy = 0.0, xx = 0.0, yy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    xy += x[i] * y[i];
    xx += x[i] * x[i];
    yy += y[i] * y[i];
  }
  const double nx = std::sqrt(xx), ny = std::sqrt(yy);
  if (!(nx > 0.0) || !(ny > 0.0)) raise(ErrorCode::degenerate, "cosine_similarity: zero-norm vector");
  const double c = xy / (nx * ny);
  return make_result("cosine_similarity", {}, {c}, {a.node(), b.node()}, [nx, ny, c](Node& self) {
    Node& na = *self.inputs[0];
    Node& nb = *self.inputs[1];
    const double g = self.grad[0];
    if (na.requires_grad) {
      auto& ga = na.grad_buffer();
      for (std::size_t i = 0; i < ga.size(); ++i)
        ga[i] += g * (nb.data[i] / (nx * ny) - c * na.data[i] / (nx * nx));
    }
    if (nb.requires_grad) {
      auto& gb = nb.grad_buffer();
      for (std::size_t i = 0; i < gb.size(); ++i)
        gb[i] += g * (na.data[i] / (nx * ny) - c * nb.data[i] / (ny * ny));
    }
  });
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> targets, std::span<const std::uint8_t> keep) {
  require_rank(logits, 2, "cross_entropy");
  const std::size_t n = logits.dim(0), classes = logits.dim(1);
  if (targets.size() != n) raise(ErrorCode::dimension, "cross_entropy: one target per row required");
  if (!keep.empty() && keep.size() != n * classes) raise(ErrorCode::dimension, "cross_entropy: mask shape mismatch");
  const auto& x = logits.node()->data;
  std::vector<double> probs(n * classes, 0.0);
  std::vector<std::size_t> tgt(targets.begin(), targets.end());
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (tgt[i] >= classes) raise(ErrorCode::vocabulary, "cross_entropy: target class out of range");
    auto kept = [&](std::size_t j) { return keep.empty() || keep[i * classes + j] != 0; };
    if (!kept(tgt[i])) raise(ErrorCode::contract, "cross_entropy: target position is masked");
    double mx = -HUGE_VAL;
    for (std::size_t j = 0; j < classes; ++j)
      if (kept(j)) mx = std::max(mx, x[i * classes + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < classes; ++j) {
      if (!kept(j)) continue;
      probs[i * classes + j] = std::exp(x[i * classes + j] - mx);
      z += probs[i * classes + j];
    }
    for (std::size_t j = 0; j < classes; ++j) probs[i * classes + j] /= z;
    total += (mx + std::log(z)) - x[i * classes + tgt[i]];
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  return make_result("cross_entropy", {}, {total * inv_n}, {logits.node()},
                     [classes, inv_n, probs = std::move(probs), tgt = std::move(tgt)](Node& self) {
                       auto& gi = self.inputs[0]->grad_buffer();
                       const double g = self.grad[0] * inv_n * fault("cross_entropy");
                       for (std::size_t i = 0; i < tgt.size(); ++i) {
                         for (std::size_t j = 0; j < classes; ++j) gi[i * classes + j] += g * probs[i * classes + j];
                         gi[i * classes + tgt[i]] -= g;
                       }
                     });
}

Tensor multi_head_attention(const Tensor& q_in, const Tensor& k_in, const Tensor& v_in, std::size_t heads,
                            const AttentionParams& p, std::span<const std::uint8_t> key_keep,
                            std::vector<Tensor>* weights) {
  require_rank(q_in, 2, "attention");
  require_rank(k_in, 2, "attention");
  require_rank(v_in, 2, "attention");
  const std::size_t d = q_in.dim(1);
  if (k_in.dim(1) != d || v_in.dim(1) != d || k_in.dim(0) != v_in.dim(0)) {
    raise(ErrorCode::dimension, "attention: query/key/value shapes disagree");
  }
  if (heads == 0 || d % heads != 0) {
    raise(ErrorCode::config, "attention: width " + std::to_string(d) + " not divisible by " + std::to_string(heads) +
                                 " heads");
  }
  if (!key_keep.empty() && key_keep.size() != k_in.dim(0)) raise(ErrorCode::dimension, "attention: key mask length");
  const std::size_t dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  Tensor q = linear(q_in, p.wq, p.bq);
  Tensor k = linear(k_in, p.wk, p.bk);
  Tensor v = linear(v_in, p.wv, p.bv);
  std::vector<Tensor> outs;
  outs.reserve(heads);
  if (weights) weights->clear();
  for (std::size_t h = 0; h < heads; ++h) {
    Tensor qh = slice(q, 1, h * dh, dh);
    Tensor kh = slice(k, 1, h * dh, dh);
    Tensor vh = slice(v, 1, h * dh, dh);
    Tensor scores = scale(matmul(qh, transpose(kh)), inv_sqrt);
    Tensor attn = key_keep.empty() ? softmax(scores, 1) : masked_softmax(scores, key_keep);
    if (weights) weights->push_back(attn);
    outs.push_back(matmul(attn, vh));
  }
  Tensor merged = heads == 1 ? outs[0] : concat(outs, 1);
  return linear(merged, p.wo, p.bo);
}

namespace debug {

void set_gradient_fault(std::string_view op, double factor) {
  std::lock_guard<std::mutex> lock(g_fault_mutex);
  g_fault_op = std::string(op);
  g_fault_factor = factor;
  g_fault_active.store(true);
}

void clear_gradient_faults() {
  std::lock_guard<std::mutex> lock(g_fault_mutex);
  g_fault_op.clear();
  g_fault_factor = 1.0;
  g_fault_active.store(false);
}

}  // namespace debug

}  // namespace ege
