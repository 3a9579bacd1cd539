#include "denosent/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "denosent/errors.hpp"

namespace denosent {

template <typename T>
GradCheckReport grad_check(const std::function<Tensor<T>()>& f,
                           const std::vector<NamedTensor<T>>& inputs, double h) {
  if (!(h > 0)) throw InvalidParameter("grad_check: step h must be positive");
  for (auto input : inputs) {
    input.tensor.set_requires_grad(true);
    input.tensor.zero_grad();
  }

  const Tensor<T> base = f();
  if (base.size() != 1) throw InvalidShape("grad_check: f must return a scalar");
  base.backward();
  const T base_value = base.item();

  {
    NoGradGuard no_grad;
    if (f().item() != base_value) {
      throw ContractViolation(
          "grad_check: f is not deterministic (two evaluations at the same point differ); "
          "fix its RngStream");
    }
  }

  GradCheckReport report;
  NoGradGuard no_grad;
  for (auto input : inputs) {
    auto values = input.tensor.mutable_values();
    const std::vector<T> analytic(input.tensor.grad().begin(), input.tensor.grad().end());
    for (std::size_t i = 0; i < values.size(); ++i) {
      const T saved = values[i];
      values[i] = saved + static_cast<T>(h);
      const double up = static_cast<double>(f().item());
      values[i] = saved - static_cast<T>(h);
      const double down = static_cast<double>(f().item());
      values[i] = saved;

      const double numeric = (up - down) / (2.0 * h);
      const double a = static_cast<double>(analytic[i]);
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      const double rel = std::abs(a - numeric) / denom;
      ++report.elements_checked;
      if (report.worst_input.empty() || rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_input = input.name;
        report.worst_index = i;
        report.analytic = a;
        report.numeric = numeric;
      }
    }
  }
  return report;
}

template GradCheckReport grad_check(const std::function<Tensor<float>()>&,
                                    const std::vector<NamedTensor<float>>&, double);
template GradCheckReport grad_check(const std::function<Tensor<double>()>&,
                                    const std::vector<NamedTensor<double>>&, double);

}  // namespace denosent
