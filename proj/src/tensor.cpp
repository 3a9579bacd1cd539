#include "denosent/tensor.hpp"

#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "denosent/errors.hpp"

namespace denosent {

namespace {
thread_local bool g_record_grad = true;
}

std::size_t shape_size(const Shape& dims) {
  return std::accumulate(dims.begin(), dims.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& dims) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < dims.size(); ++i) out << (i ? ", " : "") << dims[i];
  out << ']';
  return out.str();
}

NoGradGuard::NoGradGuard() : previous_(g_record_grad) { g_record_grad = false; }
NoGradGuard::~NoGradGuard() { g_record_grad = previous_; }
bool grad_recording_enabled() { return g_record_grad; }

template <typename T>
Tensor<T>::Tensor(Shape dims, std::vector<T> values, bool requires_grad)
    : node_(std::make_shared<TensorNode<T>>()) {
  for (std::size_t d : dims) {
    if (d == 0) throw InvalidShape("tensor extents must be positive, got " + shape_string(dims));
  }
  if (shape_size(dims) != values.size()) {
    throw InvalidShape("tensor of shape " + shape_string(dims) + " given " +
                       std::to_string(values.size()) + " values");
  }
  node_->dims = std::move(dims);
  node_->values = std::move(values);
  node_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape dims, bool requires_grad) {
  return full(std::move(dims), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape dims, T value, bool requires_grad) {
  const std::size_t n = shape_size(dims);
  return Tensor(std::move(dims), std::vector<T>(n, value), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return Tensor(Shape{1}, std::vector<T>{value}, requires_grad);
}

template <typename T>
T Tensor<T>::item() const {
  if (size() != 1) throw InvalidShape("item() on tensor of shape " + shape_string(dims()));
  return node_->values[0];
}

template <typename T>
void Tensor<T>::zero_grad() {
  node_->grad.assign(node_->values.size(), T(0));
}

template <typename T>
void Tensor<T>::backward() const {
  if (size() != 1) throw InvalidShape("backward() needs a scalar, got " + shape_string(dims()));
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order without recursion
  // depth limits on long graphs.
  std::vector<TensorNode<T>*> order;
  std::unordered_set<TensorNode<T>*> visited;
  std::vector<std::pair<TensorNode<T>*, std::size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      TensorNode<T>* p = n->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->grad_slot()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode<T>* n = *it;
    if (n->backward && n->grad.size() == n->values.size()) n->backward(*n);
  }
  // Interior grads are scratch; leaves keep theirs.
  for (TensorNode<T>* n : order) {
    if (n->backward) std::vector<T>().swap(n->grad);
  }
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(node_->dims, node_->values, false);
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  Tensor out(node_->dims, node_->values, node_->requires_grad);
  out.node_->grad = node_->grad;
  return out;
}

namespace detail {

template <typename T>
Tensor<T> make_result(const char* op, Shape dims, std::vector<T> values,
                      std::vector<Tensor<T>> parents, BackwardFn<T> backward) {
  for (const T& v : values) {
    if (!std::isfinite(v)) throw NonFinite(std::string(op) + ": non-finite output");
  }
  Tensor<T> out(std::move(dims), std::move(values), false);
  if (!g_record_grad) return out;
  bool any = false;
  for (const auto& p : parents) any = any || p.requires_grad();
  if (!any) return out;
  auto& node = *out.node();
  node.requires_grad = true;
  node.parents.reserve(parents.size());
  for (auto& p : parents) node.parents.push_back(p.node());
  node.backward = std::move(backward);
  return out;
}

template Tensor<float> make_result(const char*, Shape, std::vector<float>,
                                   std::vector<Tensor<float>>, BackwardFn<float>);
template Tensor<double> make_result(const char*, Shape, std::vector<double>,
                                    std::vector<Tensor<double>>, BackwardFn<double>);

}  // namespace detail

template class Tensor<float>;
template class Tensor<double>;

}  // namespace denosent
