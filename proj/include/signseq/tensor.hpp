#pragma once

// Dense n-d array with reverse-mode differentiation. A Tensor is a shared
// handle to a graph node; ops create fresh nodes whose backward closures
// scatter gradients into their parents. Creation order is a topological
// order of the graph, so backward() replays closures by descending node id.
//
// Contract: between a forward pass and the matching backward() the data of
// every tensor that participated must not be mutated. Parameter updates
// happen strictly after backward.

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <unordered_set>
#include <vector>

#include "signseq/common.hpp"
#include "signseq/random.hpp"

namespace signseq {

namespace detail {

inline std::atomic<std::uint64_t>& node_counter() {
  static std::atomic<std::uint64_t> c{0};
  return c;
}

template <typename T>
struct Node {
  Shape shape;
  NumVec<T> data;
  NumVec<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::uint64_t id = node_counter().fetch_add(1, std::memory_order_relaxed);
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
  }
};

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

// Scoped inference guard: ops executed inside record no graph.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <typename T>
class Tensor {
 public:
  using Scalar = T;

  Tensor() = default;

  explicit Tensor(Shape shape) : node_(std::make_shared<detail::Node<T>>()) {
    node_->shape = std::move(shape);
    node_->data.assign(shape_numel(node_->shape), T(0));
  }

  Tensor(Shape shape, NumVec<T> data) : node_(std::make_shared<detail::Node<T>>()) {
    if (shape_numel(shape) != data.size())
      throw ShapeError("Tensor: shape " + shape_str(shape) + " wants " +
                       std::to_string(shape_numel(shape)) + " values, got " +
                       std::to_string(data.size()));
    node_->shape = std::move(shape);
    node_->data = std::move(data);
  }

  Tensor(Shape shape, const std::vector<T>& data)
      : Tensor(std::move(shape), NumVec<T>(data.begin(), data.end())) {}

  Tensor(Shape shape, std::initializer_list<T> data)
      : Tensor(std::move(shape), NumVec<T>(data.begin(), data.end())) {}

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor full(Shape shape, T value) {
    Tensor t(std::move(shape));
    std::fill(t.node_->data.begin(), t.node_->data.end(), value);
    return t;
  }

  static Tensor scalar(T value) { return full({1}, value); }

  bool defined() const { return node_ != nullptr; }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape[i]; }
  std::size_t size() const { return node_->data.size(); }

  std::span<T> data() { return node_->data; }
  std::span<const T> data() const { return node_->data; }
  NumVec<T>& vec() { return node_->data; }
  const NumVec<T>& vec() const { return node_->data; }

  // deep copy of values; no graph state carried over
  Tensor clone() const {
    return Tensor(node_->shape, NumVec<T>(node_->data));
  }

  T& operator()(std::size_t i) { return node_->data[i]; }
  T operator()(std::size_t i) const { return node_->data[i]; }
  T& operator()(std::size_t i, std::size_t j) { return node_->data[i * dim(1) + j]; }
  T operator()(std::size_t i, std::size_t j) const { return node_->data[i * dim(1) + j]; }
  T& operator()(std::size_t i, std::size_t j, std::size_t k) {
    return node_->data[(i * dim(1) + j) * dim(2) + k];
  }
  T operator()(std::size_t i, std::size_t j, std::size_t k) const {
    return node_->data[(i * dim(1) + j) * dim(2) + k];
  }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool v = true) {
    node_->requires_grad = v;
    return *this;
  }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<T> grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  std::span<const T> grad() const {
    if (node_->grad.empty())
      throw Error("Tensor: gradient requested but never accumulated");
    return node_->grad;
  }
  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }

  void check_finite(const char* what) const {
    if (!all_finite(node_->data))
      throw NumericError(std::string(what) + ": non-finite value in tensor of shape " +
                         shape_str(node_->shape));
  }

  // Run reverse-mode accumulation from this tensor. Must be scalar unless a
  // seed gradient of matching size is supplied.
  void backward(const std::vector<T>* seed = nullptr) {
    if (!seed && size() != 1)
      throw ShapeError("backward: root tensor has shape " + shape_str(shape()) +
                       "; a non-scalar root needs an explicit seed gradient");
    node_->ensure_grad();
    if (seed) {
      if (seed->size() != size()) throw ShapeError("backward: seed gradient size mismatch");
      for (std::size_t i = 0; i < seed->size(); ++i) node_->grad[i] += (*seed)[i];
    } else {
      node_->grad[0] += T(1);
    }

    // Collect the reachable subgraph; descending id is a reverse topological
    // order because nodes are created parents-first.
    std::vector<detail::Node<T>*> order;
    std::unordered_set<detail::Node<T>*> seen;
    std::vector<detail::Node<T>*> stack{node_.get()};
    seen.insert(node_.get());
    while (!stack.empty()) {
      detail::Node<T>* n = stack.back();
      stack.pop_back();
      order.push_back(n);
      for (auto& p : n->parents) {
        if (seen.insert(p.get()).second) stack.push_back(p.get());
      }
    }
    std::sort(order.begin(), order.end(),
              [](const detail::Node<T>* a, const detail::Node<T>* b) { return a->id > b->id; });
    for (detail::Node<T>* n : order) {
      if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
    }
  }

  std::shared_ptr<detail::Node<T>> node() const { return node_; }

 private:
  std::shared_ptr<detail::Node<T>> node_;
};

namespace detail {

// True when the op executed with these inputs should record a backward edge.
template <typename T>
bool recording(std::initializer_list<const Tensor<T>*> inputs) {
  if (!grad_enabled()) return false;
  for (const Tensor<T>* t : inputs)
    if (t->defined() && t->requires_grad()) return true;
  return false;
}

template <typename T, typename F>
void attach(Tensor<T>& out, std::vector<std::shared_ptr<Node<T>>> parents, F&& backward_fn) {
  out.node()->requires_grad = true;
  out.node()->parents = std::move(parents);
  out.node()->backward_fn = std::forward<F>(backward_fn);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise / structural primitives
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  Tensor<T> out(a.shape());
  const auto& av = a.vec();
  const auto& bv = b.vec();
  auto& ov = out.vec();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  if (detail::recording<T>({&a, &b})) {
    auto an = a.node(), bn = b.node();
    detail::attach(out, {an, bn}, [an, bn](detail::Node<T>& self) {
      if (an->requires_grad) {
        an->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] += self.grad[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("mul: shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  Tensor<T> out(a.shape());
  const auto& av = a.vec();
  const auto& bv = b.vec();
  auto& ov = out.vec();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
  if (detail::recording<T>({&a, &b})) {
    auto an = a.node(), bn = b.node();
    detail::attach(out, {an, bn}, [an, bn](detail::Node<T>& self) {
      if (an->requires_grad) {
        an->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          an->grad[i] += self.grad[i] * bn->data[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          bn->grad[i] += self.grad[i] * an->data[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  Tensor<T> out(a.shape());
  const auto& av = a.vec();
  auto& ov = out.vec();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * factor;
  if (detail::recording<T>({&a})) {
    auto an = a.node();
    detail::attach(out, {an}, [an, factor](detail::Node<T>& self) {
      if (!an->requires_grad) return;
      an->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * factor;
    });
  }
  return out;
}

// Copying reshape; total element count must be preserved.
template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape new_shape) {
  if (shape_numel(new_shape) != a.size())
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                     shape_str(new_shape));
  Tensor<T> out(std::move(new_shape), NumVec<T>(a.vec()));
  if (detail::recording<T>({&a})) {
    auto an = a.node();
    detail::attach(out, {an}, [an](detail::Node<T>& self) {
      if (!an->requires_grad) return;
      an->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
    });
  }
  return out;
}

// Scalar sum of every element; the loss used by gradient checking.
template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
  T s = T(0);
  for (T x : a.vec()) s += x;
  Tensor<T> out = Tensor<T>::scalar(s);
  if (detail::recording<T>({&a})) {
    auto an = a.node();
    detail::attach(out, {an}, [an](detail::Node<T>& self) {
      if (!an->requires_grad) return;
      an->ensure_grad();
      const T g = self.grad[0];
      for (std::size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += g;
    });
  }
  return out;
}

}  // namespace signseq
