#pragma once
//
// Dense float64 tensors with a tape-based reverse-mode autodiff graph.
//
// A Tensor is a cheap shared handle. Ops record a Node on the output when any
// input requires a gradient and grad mode is enabled. backward() walks the
// recorded graph once in reverse topological order and then releases it.
//

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace normssl {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class ShapeError : public Error {
 public:
  using Error::Error;
};
class NonFiniteError : public Error {
 public:
  using Error::Error;
};
class GraphError : public Error {
 public:
  using Error::Error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

struct TensorImpl;

// One recorded operation. Holds its inputs alive; the output owns the node.
struct Node {
  std::string op;
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  std::function<void(std::span<const double>)> backward;
  bool consumed = false;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until populated
  bool requires_grad = false;
  std::shared_ptr<Node> grad_fn;
};

namespace detail {
inline thread_local bool grad_mode_enabled = true;
}  // namespace detail

// Deliberate backward-formula perturbations, used only to demonstrate that the
// gradient checks detect a wrong derivative.
enum class InjectedFault { none, norm_backward, conv_backward };

namespace detail {
inline thread_local InjectedFault injected_fault = InjectedFault::none;
}  // namespace detail

class FaultInjection {
 public:
  explicit FaultInjection(InjectedFault fault) : previous_(detail::injected_fault) {
    detail::injected_fault = fault;
  }
  ~FaultInjection() { detail::injected_fault = previous_; }
  FaultInjection(const FaultInjection&) = delete;
  FaultInjection& operator=(const FaultInjection&) = delete;

 private:
  InjectedFault previous_;
};

inline bool grad_enabled() { return detail::grad_mode_enabled; }

// Disables graph recording for the current thread within its scope.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_enabled) { detail::grad_mode_enabled = false; }
  ~NoGradGuard() { detail::grad_mode_enabled = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto impl = std::make_shared<TensorImpl>();
    impl->data.assign(numel_of(shape), 0.0);
    impl->shape = std::move(shape);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
    return t;
  }

  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
    if (numel_of(shape) != values.size()) {
      throw ShapeError("Tensor::from: shape " + to_string(shape) + " needs " +
                       std::to_string(numel_of(shape)) + " values, got " +
                       std::to_string(values.size()));
    }
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(values);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return from({}, {value}, requires_grad);
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const double> data() const { return impl_->data; }
  std::span<double> mutable_data() { return impl_->data; }
  const std::vector<double>& values() const { return impl_->data; }
  double operator[](std::size_t i) const { return impl_->data[i]; }

  double item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool flag) { impl_->requires_grad = flag; }
  bool is_leaf() const { return impl_->grad_fn == nullptr; }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  std::span<double> mutable_grad() {
    if (impl_->grad.empty()) impl_->grad.assign(numel(), 0.0);
    return impl_->grad;
  }
  void zero_grad() { impl_->grad.clear(); }

  // Same storage values, no graph history.
  Tensor detach() const {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = impl_->shape;
    impl->data = impl_->data;
    return Tensor(std::move(impl));
  }

  // Deep copy keeping the requires_grad flag but no history.
  Tensor clone() const {
    Tensor t = detach();
    t.impl_->requires_grad = impl_->requires_grad;
    return t;
  }

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }
  const std::string op_name() const { return impl_->grad_fn ? impl_->grad_fn->op : "leaf"; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

namespace detail {

inline void check_finite(std::string_view op, std::span<const double> values) {
  constexpr double kMax = std::numeric_limits<double>::max();
  bool bad = false;
  for (double v : values) bad |= !(std::abs(v) <= kMax);  // branch-free so it vectorizes
  if (bad) throw NonFiniteError(std::string(op) + ": non-finite value");
}

// Gradient buffer for an op input; empty when the input takes no gradient.
inline std::span<double> grad_buffer(TensorImpl& t) {
  if (!t.requires_grad) return {};
  if (t.grad.empty()) t.grad.assign(t.data.size(), 0.0);
  return t.grad;
}

}  // namespace detail

using BackwardFn = std::function<void(std::span<const double>)>;

// Builds an op output and, when needed, records it on the graph. The backward
// closure receives the gradient of the loss w.r.t. this output and must
// accumulate into the inputs via detail::grad_buffer.
inline Tensor record(std::string op, Shape shape, std::vector<double> values,
                     std::initializer_list<const Tensor*> inputs, BackwardFn backward) {
  // Op outputs are checked when produced, so only leaf inputs need a look.
  for (const Tensor* in : inputs) {
    if (!in->impl()->grad_fn) detail::check_finite(op, in->data());
  }
  detail::check_finite(op, values);
  Tensor out = Tensor::from(std::move(shape), std::move(values));
  bool needs_grad = false;
  if (grad_enabled()) {
    for (const Tensor* in : inputs) needs_grad = needs_grad || in->requires_grad();
  }
  if (needs_grad) {
    auto node = std::make_shared<Node>();
    node->op = std::move(op);
    for (const Tensor* in : inputs) node->inputs.push_back(in->impl());
    node->backward = std::move(backward);
    out.impl()->grad_fn = std::move(node);
    out.set_requires_grad(true);
  }
  return out;
}

// Reverse-mode sweep from a scalar loss. The graph is consumed afterwards.
inline void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw GraphError("backward: loss must be a scalar tensor");
  }
  if (!loss.requires_grad()) throw GraphError("backward: loss does not require grad");
  const auto& root = loss.impl();
  if (root->grad_fn && root->grad_fn->consumed) {
    throw GraphError("backward: graph already consumed");
  }

  // Iterative post-order DFS gives a topological order (inputs before outputs).
  std::vector<TensorImpl*> order;
  std::unordered_set<TensorImpl*> visited;
  std::vector<std::pair<TensorImpl*, std::size_t>> stack{{root.get(), 0}};
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [t, next] = stack.back();
    if (t->grad_fn && next < t->grad_fn->inputs.size()) {
      TensorImpl* child = t->grad_fn->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.push_back({child, 0});
      continue;
    }
    order.push_back(t);
    stack.pop_back();
  }

  for (TensorImpl* t : order) {
    if (!t->grad_fn && t->grad.empty()) t->grad.assign(t->data.size(), 0.0);
  }
  root->grad.assign(1, 1.0);

  // Intermediate gradients are released once propagated; only leaves keep theirs.
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* t = *it;
    if (!t->grad_fn) continue;
    if (t->grad_fn->consumed) throw GraphError("backward: graph already consumed");
    if (t->grad.empty()) t->grad.assign(t->data.size(), 0.0);
    t->grad_fn->backward(t->grad);
    t->grad_fn->backward = nullptr;
    t->grad_fn->consumed = true;
    std::vector<double>().swap(t->grad);
  }
}

}  // namespace normssl
