#include "denosent/optimizer.hpp"

#include <cmath>

#include "denosent/errors.hpp"

namespace denosent::training {

template <typename T>
OptimizerState<T> OptimizerState<T>::create(const std::vector<NamedTensor<T>>& params, double lr,
                                            double weight_decay) {
  if (!(lr >= 0.0)) throw InvalidParameter("optimizer: learning rate must be >= 0");
  if (!(weight_decay >= 0.0)) throw InvalidParameter("optimizer: weight decay must be >= 0");
  OptimizerState s;
  s.lr = lr;
  s.weight_decay = weight_decay;
  for (const auto& p : params) {
    s.m.emplace_back(p.tensor.size(), T(0));
    s.v.emplace_back(p.tensor.size(), T(0));
  }
  return s;
}

template <typename T>
void adamw_step(const std::vector<NamedTensor<T>>& params, OptimizerState<T>& state,
                double lr_scale) {
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw InvalidShape("adamw_step: optimizer state does not match parameter list");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = params[i];
    if (state.m[i].size() != p.tensor.size() || state.v[i].size() != p.tensor.size()) {
      throw InvalidShape("adamw_step: moment buffers for " + p.name + " have the wrong size");
    }
    if (!p.tensor.has_grad()) continue;
    for (T g : p.tensor.grad()) {
      if (!std::isfinite(g)) throw NonFinite("adamw_step: non-finite gradient in " + p.name);
    }
  }

  state.t += 1;
  const double lr = state.lr * lr_scale;
  const double b1 = state.beta1, b2 = state.beta2;
  const double correction1 = 1.0 - std::pow(b1, static_cast<double>(state.t));
  const double correction2 = 1.0 - std::pow(b2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto tensor = params[i].tensor;
    auto values = tensor.mutable_values();
    const bool has_grad = tensor.has_grad();
    auto grad = tensor.grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < values.size(); ++j) {
      const double g = has_grad ? static_cast<double>(grad[j]) : 0.0;
      double w = static_cast<double>(values[j]);
      w -= lr * state.weight_decay * w;
      const double mj = b1 * static_cast<double>(m[j]) + (1.0 - b1) * g;
      const double vj = b2 * static_cast<double>(v[j]) + (1.0 - b2) * g * g;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      w -= lr * (mj / correction1) / (std::sqrt(vj / correction2) + state.eps);
      values[j] = static_cast<T>(w);
    }
  }
}

template <typename T>
double global_grad_norm(const std::vector<NamedTensor<T>>& params) {
  double ss = 0.0;
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    for (T g : p.tensor.grad()) ss += static_cast<double>(g) * static_cast<double>(g);
  }
  return std::sqrt(ss);
}

template <typename T>
double clip_grad_norm(const std::vector<NamedTensor<T>>& params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (max_norm > 0.0 && norm > max_norm && std::isfinite(norm)) {
    const T factor = static_cast<T>(max_norm / norm);
    for (auto p : params) {
      if (!p.tensor.has_grad()) continue;
      for (T& g : p.tensor.mutable_grad()) g *= factor;
    }
  }
  return norm;
}

#define DENOSENT_INSTANTIATE_OPTIMIZER(T)                                                  \
  template struct OptimizerState<T>;                                                       \
  template void adamw_step(const std::vector<NamedTensor<T>>&, OptimizerState<T>&, double); \
  template double global_grad_norm(const std::vector<NamedTensor<T>>&);                    \
  template double clip_grad_norm(const std::vector<NamedTensor<T>>&, double);

DENOSENT_INSTANTIATE_OPTIMIZER(float)
DENOSENT_INSTANTIATE_OPTIMIZER(double)

#undef DENOSENT_INSTANTIATE_OPTIMIZER

}  // namespace denosent::training
