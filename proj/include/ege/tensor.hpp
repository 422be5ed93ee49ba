#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace ege {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  bool leaf = true;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  std::vector<double>& grad_buffer() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

/// Dense row-major tensor of doubles with optional participation in reverse-mode
/// differentiation. Copies share storage; values are immutable once built except
/// for leaves, whose data the optimizer may overwrite between evaluations.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double value);
  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor filled(Shape shape, double value);

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;
  std::span<const double> data() const;
  std::vector<double> to_vector() const;
  double item() const;
  double at(std::size_t i) const;
  double at(std::size_t i, std::size_t j) const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on);
  bool is_leaf() const;
  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();

  // Leaves only. Used by optimizers and finite-difference probes.
  std::span<double> mutable_data();

  Tensor detach() const;
  Tensor clone() const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Disables tape recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled() noexcept;

/// Reverse topological order of every on-tape node reachable from a root.
class GradTape {
 public:
  static GradTape record(const Tensor& root);

  std::size_t size() const noexcept { return order_.size(); }
  // Nodes from the root towards the leaves; each appears exactly once.
  const std::vector<detail::Node*>& order() const noexcept { return order_; }
  void replay(bool accumulate) const;

 private:
  std::vector<detail::Node*> order_;
  std::shared_ptr<detail::Node> root_;
};

enum class GradMode { reset, accumulate };

/// Populates grad() on every requires_grad leaf reachable from `loss`. By default
/// leaf gradients are reset first, so repeated calls yield identical gradients;
/// GradMode::accumulate adds onto whatever is already there.
void backward(const Tensor& loss, GradMode mode = GradMode::reset);

// ---- forward operations -------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor gelu(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);

Tensor softmax(const Tensor& x, std::size_t axis);
// Row softmax over the last axis of a matrix; positions with keep == 0 receive an
// additive -inf before normalisation. `keep` is either [cols] (shared by all rows)
// or [rows*cols].
Tensor masked_softmax(const Tensor& x, std::span<const std::uint8_t> keep);

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps);
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

Tensor embedding(const Tensor& table, std::span<const std::int32_t> ids);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t count);
Tensor select_rows(const Tensor& x, std::span<const std::size_t> rows);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor mean(const Tensor& x, std::size_t axis);
Tensor sum_axis(const Tensor& x, std::size_t axis);
Tensor sum(const Tensor& x);
Tensor sum_squares(const Tensor& x);
Tensor dot(const Tensor& a, const Tensor& b);
// Normalises each slice along the last axis to unit L2 norm.
Tensor l2_normalize(const Tensor& x);
Tensor cosine_similarity(const Tensor& a, const Tensor& b);
// Mean over rows of -log softmax(logits[i])[targets[i]]. Optional `keep` mask
// ([rows*cols], 0 = excluded from the partition function).
Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> targets,
                     std::span<const std::uint8_t> keep = {});

struct AttentionParams {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
};

/// Scaled dot-product attention over `heads` heads of width d/heads, followed by
/// the output projection. `key_keep` masks key positions (0 = padding). When
/// `weights` is non-null it receives one [Lq x Lk] row-stochastic matrix per head.
Tensor multi_head_attention(const Tensor& q_in, const Tensor& k_in, const Tensor& v_in,
                            std::size_t heads, const AttentionParams& params,
                            std::span<const std::uint8_t> key_keep = {},
                            std::vector<Tensor>* weights = nullptr);

namespace debug {
// Scales the backward pass of the named primitive (e.g. "gelu", "layer_norm")
// by `factor`. Exists so self-checks can be shown to catch a broken gradient.
void set_gradient_fault(std::string_view op, double factor);
void clear_gradient_faults();
}  // namespace debug

}  // namespace ege
