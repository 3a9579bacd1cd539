#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace denosent {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& dims);
std::string shape_string(const Shape& dims);

template <typename T>
struct TensorNode;

template <typename T>
using BackwardFn = std::function<void(TensorNode<T>&)>;

// Storage plus graph bookkeeping for one tensor. `backward` reads `grad` and
// accumulates into the parents' grad slots.
template <typename T>
struct TensorNode {
  Shape dims;
  std::vector<T> values;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  BackwardFn<T> backward;

  // Zero-filled grad slot of the right size, allocated on demand.
  std::vector<T>& grad_slot() {
    if (grad.size() != values.size()) grad.assign(values.size(), T(0));
    return grad;
  }
};

// Dense row-major tensor handle with reverse-mode gradients. Copies share the
// underlying node; use clone() for a deep copy.
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape dims, std::vector<T> values, bool requires_grad = false);

  static Tensor zeros(Shape dims, bool requires_grad = false);
  static Tensor full(Shape dims, T value, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& dims() const { return node_->dims; }
  std::size_t rank() const { return node_->dims.size(); }
  std::size_t dim(std::size_t i) const { return node_->dims.at(i); }
  std::size_t size() const { return node_->values.size(); }

  std::span<const T> values() const { return node_->values; }
  // Direct writes are only legal on tensors not referenced by a live graph.
  std::span<T> mutable_values() { return node_->values; }
  T item() const;
  T at(std::size_t flat) const { return node_->values.at(flat); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool has_grad() const { return node_->grad.size() == node_->values.size(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->grad_slot(); }
  void zero_grad();

  // Runs reverse-mode accumulation from this scalar. Leaf grads accumulate
  // additively; callers zero them between steps.
  void backward() const;

  // Same values, no graph, no grad.
  Tensor detach() const;
  Tensor clone() const;

  const std::shared_ptr<TensorNode<T>>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<TensorNode<T>> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<TensorNode<T>> node_;
};

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_recording_enabled();

namespace detail {

// Builds an op result. Records the graph edge only when recording is enabled
// and at least one parent requires grad. Throws NonFinite if any output value
// is NaN or infinite.
template <typename T>
Tensor<T> make_result(const char* op, Shape dims, std::vector<T> values,
                      std::vector<Tensor<T>> parents, BackwardFn<T> backward);

}  // namespace detail

}  // namespace denosent
