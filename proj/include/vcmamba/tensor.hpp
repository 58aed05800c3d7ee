#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace vcm {

// Error hierarchy. ValidationError covers malformed user input (configs, specs,
// CLI arguments); everything else is a runtime failure.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

inline std::uint64_t next_sequence() {
  static std::atomic<std::uint64_t> counter{0};
  return counter.fetch_add(1, std::memory_order_relaxed) + 1;
}

}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

// Disables graph recording for the lifetime of the guard.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) {
    detail::grad_mode_flag() = false;
  }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  bool consumed = false;
  std::uint64_t sequence = detail::next_sequence();
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const { return !backward_fn; }

  std::vector<T>& ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    return grad;
  }
};

// Dense row-major tensor with shared ownership. Copies alias the same storage;
// use clone() for a deep copy.
template <typename T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<Node<T>>;

  Tensor() = default;
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), T(0), requires_grad);
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    auto node = std::make_shared<Node<T>>();
    node->data.assign(shape_numel(shape), value);
    node->shape = std::move(shape);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor from(Shape shape, std::vector<T> values,
                     bool requires_grad = false) {
    if (shape_numel(shape) != values.size()) {
      throw ShapeError("tensor shape " + shape_str(shape) + " holds " +
                       std::to_string(shape_numel(shape)) +
                       " elements but data has " +
                       std::to_string(values.size()));
    }
    auto node = std::make_shared<Node<T>>();
    node->shape = std::move(shape);
    node->data = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return from({1}, {value}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<T> values() { return node_->data; }
  std::span<const T> values() const { return node_->data; }
  T* data() { return node_->data.data(); }
  const T* data() const { return node_->data.data(); }
  T item() const {
    if (numel() != 1) {
      throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    }
    return node_->data[0];
  }
  T& operator[](std::size_t i) { return node_->data[i]; }
  const T& operator[](std::size_t i) const { return node_->data[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    node_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return node_->grad.size() == node_->data.size(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() { node_->grad.clear(); }

  Tensor clone() const {
    return from(node_->shape, node_->data, node_->requires_grad);
  }

  // Deep copy without graph history.
  Tensor detach() const {
    auto node = std::make_shared<Node<T>>();
    node->shape = node_->shape;
    node->data = node_->data;
    return Tensor(std::move(node));
  }

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

template <typename T>
bool same_shape(const Tensor<T>& a, const Tensor<T>& b) {
  return a.shape() == b.shape();
}

template <typename T>
void require_shape(const Tensor<T>& t, const Shape& expected,
                   const std::string& what) {
  if (t.shape() != expected) {
    throw ShapeError(what + ": expected shape " + shape_str(expected) +
                     ", got " + shape_str(t.shape()));
  }
}

template <typename T>
void require_rank(const Tensor<T>& t, std::size_t rank,
                  const std::string& what) {
  if (t.rank() != rank) {
    throw ShapeError(what + ": expected rank " + std::to_string(rank) +
                     ", got shape " + shape_str(t.shape()));
  }
}

// Builds an op output. When recording is enabled and any input requires grad,
// the output joins the graph with `backward` as its reverse rule.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> values,
                      std::vector<Tensor<T>> inputs,
                      std::function<void(Node<T>&)> backward) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  if (grad_enabled()) {
    bool any = false;
    for (const auto& in : inputs) {
      if (in.defined() && in.requires_grad()) {
        if (in.node()->consumed) {
          throw Error("tensor from an already differentiated graph reused "
                      "as an op input");
        }
        any = true;
      }
    }
    if (any) {
      node->requires_grad = true;
      for (auto& in : inputs) {
        if (in.defined()) node->parents.push_back(in.node());
      }
      node->backward_fn = std::move(backward);
    }
  }
  return Tensor<T>(std::move(node));
}

// Ordered record of the operations reachable from a root, in an order where
// every node precedes its parents. Single use: running it consumes the graph.
template <typename T>
class Tape {
 public:
  static Tape record(const Tensor<T>& root) {
    Tape tape;
    if (!root.defined()) throw Error("backward on undefined tensor");
    if (root.node()->consumed) {
      throw Error("backward called twice on the same graph; run a fresh "
                  "forward pass first");
    }
    if (!root.requires_grad()) {
      throw Error("backward on a tensor that does not require grad");
    }
    // Reachability sweep over grad-requiring ancestors.
    std::unordered_set<const Node<T>*> visited;
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    std::vector<std::shared_ptr<Node<T>>> reached;
    stack.emplace_back(root.node().get(), 0);
    visited.insert(root.node().get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        const auto& parent = node->parents[next++];
        if (parent->requires_grad && !visited.count(parent.get())) {
          visited.insert(parent.get());
          reached.push_back(parent);
          stack.emplace_back(parent.get(), 0);
        }
      } else {
        stack.pop_back();
      }
    }
    // A result is always created after its inputs, so newest-first is a
    // valid reverse topological order.
    reached.push_back(root.node());
    std::sort(reached.begin(), reached.end(), [](const auto& a, const auto& b) {
      return a->sequence > b->sequence;
    });
    tape.order_ = std::move(reached);
    tape.root_ = root.node();
    return tape;
  }

  std::size_t size() const { return order_.size(); }

  void run_backward() {
    if (used_) throw Error("tape already replayed");
    used_ = true;
    auto& seed = root_->ensure_grad();
    std::fill(seed.begin(), seed.end(), T(0));
    seed[0] = T(1);
    for (const auto& node : order_) {
      if (node->is_leaf()) continue;
      node->ensure_grad();
      for (auto& parent : node->parents) {
        if (parent->requires_grad) parent->ensure_grad();
      }
      node->backward_fn(*node);
    }
    // Release the graph; leaves keep their grads.
    for (const auto& node : order_) {
      if (!node->is_leaf()) {
        node->consumed = true;
        node->backward_fn = nullptr;
        node->parents.clear();
        node->grad.clear();
        node->grad.shrink_to_fit();
      }
    }
  }

 private:
  // Owning, so releasing parent links mid-sweep cannot free a pending node.
  std::vector<std::shared_ptr<Node<T>>> order_;
  std::shared_ptr<Node<T>> root_;
  bool used_ = false;
};

// Populates grads of every requires_grad leaf reachable from `loss`.
template <typename T>
void backward(const Tensor<T>& loss) {
  if (loss.defined() && loss.numel() != 1) {
    throw ShapeError("backward requires a scalar loss, got shape " +
                     shape_str(loss.shape()));
  }
  Tape<T>::record(loss).run_backward();
}

}  // namespace vcm
