#pragma once

#include <cstdint>
#include <vector>

#include "denosent/grad_check.hpp"

namespace denosent::training {

template <typename T>
struct OptimizerState {
  double lr = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  std::uint64_t t = 0;
  // Moments, one buffer per parameter in the order of the parameter list.
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;

  static OptimizerState create(const std::vector<NamedTensor<T>>& params, double lr,
                               double weight_decay);
};

// Decoupled weight decay (p -= lr*lr_scale*wd*p) followed by the
// bias-corrected Adam update, reading gradients from each parameter's grad
// slot. Every gradient is checked first; a non-finite one throws NonFinite
// naming the parameter and leaves parameters and state untouched.
template <typename T>
void adamw_step(const std::vector<NamedTensor<T>>& params, OptimizerState<T>& state,
                double lr_scale = 1.0);

// Global L2 norm of all gradients.
template <typename T>
double global_grad_norm(const std::vector<NamedTensor<T>>& params);

// Rescales all gradients so their global norm is at most max_norm. Returns
// the norm before clipping.
template <typename T>
double clip_grad_norm(const std::vector<NamedTensor<T>>& params, double max_norm);

}  // namespace denosent::training
