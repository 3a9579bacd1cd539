#pragma once

#include <functional>
#include <string>
#include <vector>

#include "denosent/tensor.hpp"

namespace denosent {

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_input;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t elements_checked = 0;
};

// Compares reverse-mode gradients of the scalar `f` against central
// differences (f(x+h) - f(x-h)) / 2h for every element of every input.
// Relative error uses the denominator max(|a|, |b|, 1e-8).
//
// `f` must close over the tensors in `inputs` (perturbations are written into
// them in place) and must be deterministic: it is evaluated twice at the base
// point and a differing result raises ContractViolation.
template <typename T>
GradCheckReport grad_check(const std::function<Tensor<T>()>& f,
                           const std::vector<NamedTensor<T>>& inputs, double h = 1e-6);

}  // namespace denosent
