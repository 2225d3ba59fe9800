#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace ckdsnn {

using Index = std::int64_t;
using Shape = std::vector<Index>;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using RowMajorMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline Index shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

namespace detail {
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Disables graph recording for the lifetime of the guard.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// One vertex of the recorded computation. Leaves have no backward rule.
template <typename Scalar>
struct Node {
  Shape shape;
  Vector<Scalar> value;
  Vector<Scalar> grad;  // empty until the first accumulation
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  bool is_leaf() const { return !backward; }

  template <typename Derived>
  void accumulate(const Eigen::MatrixBase<Derived>& g) {
    if (!requires_grad) return;
    if (grad.size() == 0) {
      grad = g;
    } else {
      grad += g;
    }
  }

  /// Zero-initialised gradient buffer for scatter-style accumulation.
  Scalar* grad_buffer() {
    if (grad.size() == 0) grad = Vector<Scalar>::Zero(value.size());
    return grad.data();
  }
};

template <typename Scalar>
class Tensor {
 public:
  using NodePtr = std::shared_ptr<Node<Scalar>>;

  Tensor() : node_(std::make_shared<Node<Scalar>>()) {}

  Tensor(Shape shape, Vector<Scalar> values, bool requires_grad = false)
      : node_(std::make_shared<Node<Scalar>>()) {
    if (shape_numel(shape) != values.size()) {
      throw ShapeError("tensor: shape " + shape_string(shape) + " holds " +
                       std::to_string(shape_numel(shape)) + " values, got " +
                       std::to_string(values.size()));
    }
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, std::initializer_list<Scalar> values, bool requires_grad = false)
      : Tensor(std::move(shape), from_list(values), requires_grad) {}

  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const Index n = shape_numel(shape);
    return Tensor(std::move(shape), Vector<Scalar>::Zero(n), requires_grad);
  }

  static Tensor full(Shape shape, Scalar value, bool requires_grad = false) {
    const Index n = shape_numel(shape);
    return Tensor(std::move(shape), Vector<Scalar>::Constant(n, value), requires_grad);
  }

  static Tensor scalar(Scalar value, bool requires_grad = false) {
    return Tensor(Shape{}, Vector<Scalar>::Constant(1, value), requires_grad);
  }

  const Shape& shape() const { return node_->shape; }
  Index dim(std::size_t axis) const {
    if (axis >= node_->shape.size()) {
      throw ShapeError("tensor: axis " + std::to_string(axis) + " out of range for shape " +
                       shape_string(node_->shape));
    }
    return node_->shape[axis];
  }
  std::size_t rank() const { return node_->shape.size(); }
  Index numel() const { return node_->value.size(); }

  const Vector<Scalar>& data() const { return node_->value; }
  /// Direct write access; only meaningful on leaves (parameters, buffers).
  Vector<Scalar>& mutable_data() { return node_->value; }

  bool has_grad() const { return node_->grad.size() != 0; }
  const Vector<Scalar>& grad() const { return node_->grad; }
  void zero_grad() { node_->grad.resize(0); }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool flag) {
    node_->requires_grad = flag;
    return *this;
  }

  Scalar item() const {
    if (numel() != 1) {
      throw ShapeError("tensor: item() on shape " + shape_string(shape()));
    }
    return node_->value[0];
  }

  Scalar operator[](Index flat) const { return node_->value[flat]; }

  /// Fresh leaf with a copy of the values and no graph history.
  Tensor detach() const { return Tensor(node_->shape, node_->value, false); }

  template <typename To>
  Tensor<To> cast() const {
    return Tensor<To>(node_->shape, node_->value.template cast<To>(), false);
  }

  const NodePtr& node() const { return node_; }

 private:
  static Vector<Scalar> from_list(std::initializer_list<Scalar> values) {
    Vector<Scalar> v(static_cast<Index>(values.size()));
    std::copy(values.begin(), values.end(), v.data());
    return v;
  }

  NodePtr node_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

namespace detail {

/// Creates the output of an operation and, when recording, links it into the graph.
template <typename Scalar>
Tensor<Scalar> record(const char* op, Shape shape, Vector<Scalar> value,
                      std::initializer_list<const Tensor<Scalar>*> inputs,
                      std::function<void(Node<Scalar>&)> backward) {
  if (!value.allFinite()) {
    throw NonFiniteError(std::string(op) + ": produced a non-finite value");
  }
  Tensor<Scalar> out(std::move(shape), std::move(value));
  if (!grad_enabled()) return out;
  bool needs = false;
  for (const auto* in : inputs) needs = needs || in->requires_grad();
  if (!needs) return out;
  auto& node = *out.node();
  node.requires_grad = true;
  node.op = op;
  for (const auto* in : inputs) node.inputs.push_back(in->node());
  node.backward = std::move(backward);
  return out;
}

template <typename Scalar>
void require_same_shape(const char* op, const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

template <typename Scalar>
void require_rank(const char* op, const Tensor<Scalar>& a, std::size_t rank) {
  if (a.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                     shape_string(a.shape()));
  }
}

}  // namespace detail

/// Reverse-mode sweep from a scalar loss. Leaf gradients accumulate across
/// calls; intermediate gradients are recomputed on every call.
template <typename Scalar>
void backward(const Tensor<Scalar>& loss) {
  if (loss.numel() != 1) {
    throw ShapeError("backward: loss must be a scalar, got shape " + shape_string(loss.shape()));
  }
  if (!loss.requires_grad()) {
    throw std::logic_error("backward: loss is not connected to any tensor requiring grad");
  }

  using NodeT = Node<Scalar>;
  std::vector<NodeT*> order;
  std::unordered_set<NodeT*> visited;
  std::vector<std::pair<NodeT*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      NodeT* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (NodeT* node : order) {
    if (!node->is_leaf()) node->grad = Vector<Scalar>::Zero(node->value.size());
  }
  NodeT* root = loss.node().get();
  root->accumulate(Vector<Scalar>::Ones(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if (!(*it)->is_leaf()) (*it)->backward(**it);
  }
}

}  // namespace ckdsnn
