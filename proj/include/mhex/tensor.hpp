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
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mhex/errors.hpp"

namespace mhex {

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

struct Node;
class GradSink;

using BackwardFn = std::function<void(std::span<const double> grad_out, GradSink& sink)>;

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::uint64_t id = 0;
  std::vector<std::shared_ptr<Node>> parents;
  BackwardFn backward;

  static std::uint64_t next_id() {
    static std::atomic<std::uint64_t> counter{1};
    return counter.fetch_add(1, std::memory_order_relaxed);
  }
};

/// Accumulates gradients during one reverse sweep. Nodes that do not require
/// gradients get an empty span so primitives can skip that branch.
class GradSink {
 public:
  std::span<double> operator()(const Node& n) {
    if (!n.requires_grad) return {};
    auto& buf = bufs_[&n];
    if (buf.empty()) buf.assign(n.value.size(), 0.0);
    return buf;
  }

  std::vector<double>* find(const Node& n) {
    auto it = bufs_.find(&n);
    return it == bufs_.end() ? nullptr : &it->second;
  }

 private:
  std::unordered_map<const Node*, std::vector<double>> bufs_;
};

/// Handle to a node of the differentiation graph. Copies share the node.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
    if (shape.empty()) shape = {1};
    for (auto e : shape)
      if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
    if (numel_of(shape) != values.size())
      throw DimensionError("shape " + shape_str(shape) + " holds " +
                           std::to_string(numel_of(shape)) + " values, got " +
                           std::to_string(values.size()));
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    n->requires_grad = requires_grad;
    n->id = Node::next_id();
    return Tensor(std::move(n));
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = numel_of(shape);
    return from(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor full(Shape shape, double v, bool requires_grad = false) {
    const auto n = numel_of(shape);
    return from(std::move(shape), std::vector<double>(n, v), requires_grad);
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return from({1}, {v}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const double> data() const { return node_->value; }
  /// Direct write access; meant for parameter updates and fixtures, never
  /// for values that already feed a recorded graph.
  std::span<double> mutable_data() { return node_->value; }
  const std::vector<double>& values() const { return node_->value; }

  double item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }
  double operator[](std::size_t i) const { return node_->value[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() {
    if (node_->grad.empty()) node_->grad.assign(numel(), 0.0);
    return node_->grad;
  }
  void zero_grad() { node_->grad.clear(); }
  bool is_leaf() const { return !node_->backward; }

  /// Same values, cut from the graph.
  Tensor detach() const { return from(shape(), node_->value, false); }

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& shared() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Builds a result node. Parents and the backward closure are only retained
/// when some parent requires gradients.
inline Tensor make_result(Shape shape, std::vector<double> values,
                          std::initializer_list<Tensor> parents, BackwardFn fn) {
  Tensor out = Tensor::from(std::move(shape), std::move(values), false);
  bool any = false;
  for (const auto& p : parents) any = any || p.requires_grad();
  if (any) {
    Node* n = out.node();
    n->requires_grad = true;
    for (const auto& p : parents) n->parents.push_back(p.shared());
    n->backward = std::move(fn);
  }
  return out;
}

/// Gradient-mask hook: runs on a node's fully accumulated gradient before
/// that gradient propagates further.
struct GradHook {
  Tensor at;
  std::function<void(std::span<double>)> apply;
};

/// Reverse-topological ordering of every gradient-carrying node reachable
/// from a root. Node ids grow with creation, and a node is always created
/// after its inputs, so sorting by id gives a valid topological order.
class Tape {
 public:
  explicit Tape(const Tensor& root) : root_(root) {
    if (!root.defined()) throw ContractError("tape root is undefined");
    std::vector<Node*> stack{root.node()};
    std::unordered_set<Node*> seen{root.node()};
    while (!stack.empty()) {
      Node* n = stack.back();
      stack.pop_back();
      order_.push_back(n);
      for (const auto& p : n->parents) {
        if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
      }
    }
    std::sort(order_.begin(), order_.end(),
              [](const Node* a, const Node* b) { return a->id < b->id; });
  }

  /// Forward order: inputs before consumers.
  const std::vector<Node*>& nodes() const { return order_; }

  bool contains(const Node* n) const {
    return std::find(order_.begin(), order_.end(), n) != order_.end();
  }

  /// One reverse sweep. Calls `visit` once per node that received gradient.
  template <typename Visit>
  void sweep(GradSink& sink, std::span<const GradHook> hooks, Visit&& visit) const {
    if (root_.numel() != 1)
      throw ContractError("backward requires a scalar loss, got shape " + shape_str(root_.shape()));
    if (!root_.requires_grad()) return;
    sink(*root_.node())[0] += 1.0;
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
      Node* n = *it;
      std::vector<double>* g = sink.find(*n);
      if (!g) continue;
      for (const auto& h : hooks)
        if (h.at.node() == n) h.apply(*g);
      visit(*n, *g);
      if (n->backward) n->backward(*g, sink);
    }
  }

 private:
  Tensor root_;
  std::vector<Node*> order_;
};

/// Accumulates dLoss/dT into the grad buffer of every gradient-carrying tensor
/// reachable from `loss`.
inline void backward(const Tensor& loss) {
  Tape tape(loss);
  GradSink sink;
  tape.sweep(sink, {}, [](Node& n, const std::vector<double>& g) {
    if (n.grad.empty()) {
      n.grad = g;
    } else {
      for (std::size_t i = 0; i < g.size(); ++i) n.grad[i] += g[i];
    }
  });
}

/// dLoss/dParam computed on a private buffer; the graph and every stored grad
/// are left untouched, so several losses can be differentiated against the
/// same forward pass.
inline Tensor grad_wrt(const Tensor& loss, const Tensor& param,
                       std::span<const GradHook> hooks = {}) {
  if (!param.defined() || !param.requires_grad())
    throw ContractError("grad_wrt: parameter is not a differentiable tensor on the tape");
  Tape tape(loss);
  GradSink sink;
  std::vector<double> out(param.numel(), 0.0);
  tape.sweep(sink, hooks, [&](Node& n, const std::vector<double>& g) {
    if (&n == param.node()) out = g;
  });
  return Tensor::from(param.shape(), std::move(out), false);
}

/// Drops the recorded graph below `t`, releasing intermediate buffers.
inline void release_graph(const Tensor& t) {
  std::vector<std::shared_ptr<Node>> stack{t.shared()};
  while (!stack.empty()) {
    auto n = std::move(stack.back());
    stack.pop_back();
    for (auto& p : n->parents) stack.push_back(std::move(p));
    n->parents.clear();
    n->backward = nullptr;
  }
}

}  // namespace mhex
