#pragma once

/**
 * @file tensor.hpp
 * @brief Dense row-major tensor with reverse-mode differentiation.
 *
 * A Tensor is a cheap handle to an immutable node. Operations that see at
 * least one input with requires_grad record their inputs and an adjoint
 * closure on the produced node; the reachable nodes, in topological order,
 * form the tape that backward() replays.
 *
 * Gradient policy: backward() zeroes the gradient of every node on the tape
 * before propagating, so repeated calls never accumulate across calls.
 */

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "cbamswin/error.hpp"

namespace cbamswin {

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

/// Row-major strides for a shape.
inline std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> s(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) s[i - 1] = s[i] * shape[i];
  return s;
}

class Tensor {
 public:
  struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> inputs;
    // Reads self.grad and accumulates into inputs[i]->grad.
    std::function<void(Node& self)> adjoint;
  };

  Tensor() : node_(std::make_shared<Node>()) { node_->shape = {}; node_->data = {0.0}; }

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
      : node_(std::make_shared<Node>()) {
    for (std::size_t e : shape) {
      if (e == 0) throw ShapeMismatch("zero extent in shape " + shape_str(shape));
    }
    if (numel_of(shape) != data.size()) {
      throw ShapeMismatch("shape " + shape_str(shape) + " needs " + std::to_string(numel_of(shape)) +
                          " values, got " + std::to_string(data.size()));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(const Shape& shape, bool requires_grad = false) {
    return Tensor(shape, std::vector<double>(numel_of(shape), 0.0), requires_grad);
  }
  static Tensor full(const Shape& shape, double value, bool requires_grad = false) {
    return Tensor(shape, std::vector<double>(numel_of(shape), value), requires_grad);
  }
  static Tensor scalar(double v, bool requires_grad = false) { return Tensor(Shape{}, {v}, requires_grad); }

  /// Trainable leaf.
  static Tensor param(Shape shape, std::vector<double> data) {
    return Tensor(std::move(shape), std::move(data), true);
  }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->data.size(); }
  std::span<const double> data() const { return node_->data; }
  const std::vector<double>& values() const { return node_->data; }
  double operator[](std::size_t i) const { return node_->data[i]; }

  /// Gradient after backward(); empty if this node was not on the last tape.
  std::span<const double> grad() const { return node_->grad; }
  bool has_grad() const { return node_->grad.size() == node_->data.size(); }

  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return !node_->adjoint; }

  double item() const {
    if (numel() != 1) throw NotScalar("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }

  double at(std::initializer_list<std::size_t> index) const {
    if (index.size() != rank()) throw ShapeMismatch("index rank mismatch");
    const auto st = strides_of(shape());
    std::size_t flat = 0, k = 0;
    for (std::size_t i : index) {
      if (i >= shape()[k]) throw ShapeMismatch("index out of range");
      flat += i * st[k++];
    }
    return node_->data[flat];
  }

  /// Mutable storage of a leaf; used by optimizers and checkpoint loading.
  std::vector<double>& leaf_data() {
    if (!is_leaf()) throw InvalidParam("leaf_data() on a non-leaf tensor");
    return node_->data;
  }

  void set_requires_grad(bool on) {
    if (!is_leaf()) throw InvalidParam("requires_grad can only be set on leaves");
    node_->requires_grad = on;
  }

  /// Copy of the values with no history.
  Tensor detach() const { return Tensor(shape(), node_->data, false); }

  /// Same storage, no history, no gradient requirement.
  Tensor constant() const { return detach(); }

  bool same_node(const Tensor& other) const { return node_ == other.node_; }

  const std::shared_ptr<Node>& node() const { return node_; }

  /// Builds the result of an operation. The adjoint is attached only if some
  /// input requires a gradient.
  static Tensor make_result(Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
                            std::function<void(Node&)> adjoint) {
    Tensor out(std::move(shape), std::move(data), false);
    bool needs = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
    if (needs) {
      out.node_->requires_grad = true;
      out.node_->inputs.reserve(inputs.size());
      for (auto& t : inputs) out.node_->inputs.push_back(t.node_);
      out.node_->adjoint = std::move(adjoint);
    }
    return out;
  }

 private:
  std::shared_ptr<Node> node_;
};

/// Inputs of a node that participate in differentiation.
inline bool wants_grad(const Tensor::Node& self, std::size_t i) { return self.inputs[i]->requires_grad; }
inline std::vector<double>& input_grad(Tensor::Node& self, std::size_t i) { return self.inputs[i]->grad; }
inline const std::vector<double>& input_data(const Tensor::Node& self, std::size_t i) { return self.inputs[i]->data; }

/// Topologically ordered list of nodes reachable from `root` that require a
/// gradient (inputs before outputs).
inline std::vector<Tensor::Node*> build_tape(const Tensor& root) {
  std::vector<Tensor::Node*> order;
  std::unordered_set<Tensor::Node*> seen;
  std::vector<std::pair<Tensor::Node*, std::size_t>> stack;
  Tensor::Node* start = root.node().get();
  if (!start->requires_grad) return order;
  stack.emplace_back(start, 0);
  seen.insert(start);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Tensor::Node* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

/// Populates grad on every requires_grad node reachable from `loss`.
inline void backward(const Tensor& loss) {
  if (loss.numel() != 1) throw NotScalar("backward() needs a scalar loss, got " + shape_str(loss.shape()));
  if (!loss.requires_grad()) throw NoTape("loss was not produced by recorded operations");
  auto tape = build_tape(loss);
  for (auto* n : tape) n->grad.assign(n->data.size(), 0.0);
  loss.node()->grad[0] = 1.0;
  for (auto it = tape.rbegin(); it != tape.rend(); ++it) {
    if ((*it)->adjoint) (*it)->adjoint(**it);
  }
}

}  // namespace cbamswin
