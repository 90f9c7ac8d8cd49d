#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "wscn/tensor.hpp"

namespace wscn {

/// Ordered record of differentiable operations. Nodes are appended in
/// execution order, so every node's inputs precede it. A tape belongs to one
/// thread; distinct tapes share no mutable state.
template <class T>
class Tape {
 public:
  struct Node {
    const char* op;
    std::vector<Tensor<T>> inputs;
    Tensor<T> output;
    std::function<void()> backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Appends a node and marks `output` as produced by this tape. `fn` reads
  /// output's grad and accumulates into the grads of inputs.
  void record(const char* op, std::vector<Tensor<T>> inputs, Tensor<T>& output,
              std::function<void()> fn) {
    output.impl().requires_grad = true;
    output.impl().tape = this;
    output.impl().node = nodes_.size();
    nodes_.push_back(Node{op, std::move(inputs), output, std::move(fn)});
  }

  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::size_t i) const { return nodes_.at(i); }
  std::vector<Node>& nodes() { return nodes_; }
  void clear() { nodes_.clear(); }

 private:
  std::vector<Node> nodes_;
};

/// Returns the tape to record on, or nullptr when no input needs gradients.
template <class T, class... Ts>
Tape<T>* recording(Tape<T>* tape, const Ts&... inputs) {
  if (!tape) return nullptr;
  const bool any = ((inputs.defined() && inputs.requires_grad()) || ...);
  return any ? tape : nullptr;
}

struct BackwardOptions {
  /// Keep grads of non-leaf tensors after their node has been processed.
  bool retain_intermediate_grads = false;
};

/// Reverse sweep over `tape` seeded with d(loss)/d(loss) = 1. Grads
/// accumulate additively into every requires_grad tensor reachable from loss.
template <class T>
void backward(Tape<T>& tape, Tensor<T> loss, BackwardOptions opts = {}) {
  if (loss.numel() != 1)
    throw ContractError("backward needs a scalar loss, got shape " +
                        to_string(loss.shape()));
  if (loss.tape_id() != &tape) {
    const std::string n = loss.name().empty() ? "<unnamed>" : loss.name();
    throw ContractError("tensor '" + n + "' was not recorded on this tape");
  }
  loss.grad_mut()[0] += T{1};
  auto& nodes = tape.nodes();
  for (std::size_t i = loss.node_index() + 1; i-- > 0;) {
    auto& node = nodes[i];
    if (!node.output.has_grad()) continue;
    node.backward();
    if (!opts.retain_intermediate_grads) node.output.clear_grad();
  }
}

// Elementwise and reduction primitives.

namespace detail {
template <class T>
void require_same_shape(const char* op, const Tensor<T>& a,
                        const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     to_string(a.shape()) + " vs " + to_string(b.shape()));
}
}  // namespace detail

template <class T>
Tensor<T> add(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("add", a, b);
  Tensor<T> y(a.shape());
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] = a[i] + b[i];
  if (auto* t = recording(tape, a, b)) {
    t->record("add", {a, b}, y, [a, b, y]() mutable {
      auto gy = y.grad();
      for (auto* in : {&a, &b}) {
        if (!in->requires_grad()) continue;
        auto g = in->grad_mut();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i];
      }
    });
  }
  return y;
}

template <class T>
Tensor<T> sub(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("sub", a, b);
  Tensor<T> y(a.shape());
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] = a[i] - b[i];
  if (auto* t = recording(tape, a, b)) {
    t->record("sub", {a, b}, y, [a, b, y]() mutable {
      auto gy = y.grad();
      if (a.requires_grad()) {
        auto g = a.grad_mut();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i];
      }
      if (b.requires_grad()) {
        auto g = b.grad_mut();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= gy[i];
      }
    });
  }
  return y;
}

template <class T>
Tensor<T> mul(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("mul", a, b);
  Tensor<T> y(a.shape());
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] = a[i] * b[i];
  if (auto* t = recording(tape, a, b)) {
    t->record("mul", {a, b}, y, [a, b, y]() mutable {
      auto gy = y.grad();
      if (a.requires_grad()) {
        auto g = a.grad_mut();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i] * b[i];
      }
      if (b.requires_grad()) {
        auto g = b.grad_mut();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i] * a[i];
      }
    });
  }
  return y;
}

template <class T>
Tensor<T> scale(Tape<T>* tape, const Tensor<T>& a, T s) {
  Tensor<T> y(a.shape());
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] = a[i] * s;
  if (auto* t = recording(tape, a)) {
    t->record("scale", {a}, y, [a, y, s]() mutable {
      auto gy = y.grad();
      auto g = a.grad_mut();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i] * s;
    });
  }
  return y;
}

template <class T>
Tensor<T> sum(Tape<T>* tape, const Tensor<T>& a) {
  T acc{0};
  for (T v : a.data()) acc += v;
  Tensor<T> y = Tensor<T>::scalar(acc);
  if (auto* t = recording(tape, a)) {
    t->record("sum", {a}, y, [a, y]() mutable {
      const T gy = y.grad()[0];
      for (auto& g : a.grad_mut()) g += gy;
    });
  }
  return y;
}

template <class T>
Tensor<T> mean(Tape<T>* tape, const Tensor<T>& a) {
  return scale(tape, sum(tape, a), T{1} / static_cast<T>(a.numel()));
}

/// Same data, new extents. Gradient is passed through unchanged.
template <class T>
Tensor<T> reshape(Tape<T>* tape, const Tensor<T>& a, Shape shape) {
  if (numel(shape) != a.numel())
    throw ShapeError("reshape: cannot view " + to_string(a.shape()) + " as " +
                     to_string(shape));
  Tensor<T> y = a.reshaped(std::move(shape));
  if (auto* t = recording(tape, a)) {
    t->record("reshape", {a}, y, [a, y]() mutable {
      auto gy = y.grad();
      auto g = a.grad_mut();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i];
    });
  }
  return y;
}

}  // namespace wscn
