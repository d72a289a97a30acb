#pragma once
// Central finite-difference gradient oracle for the test suites. Kept
// independent of the backward() implementation it checks: expected values
// come only from re-evaluating the forward pass at perturbed inputs.
#include <cmath>
#include <functional>
#include <vector>

#include "attempt/core/tensor.hpp"

namespace testing_util {

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::size_t checked = 0;
};

// `loss_fn` must rebuild the whole forward graph from the current contents
// of the parameter tensors and return the scalar loss tensor.
inline GradCheckResult check_gradients(
    const std::function<attempt::Tensor<double>()>& loss_fn,
    std::vector<attempt::Tensor<double>> params, double step = 1e-5) {
  auto loss = loss_fn();
  loss.backward();
  std::vector<std::vector<double>> analytic;
  for (auto& p : params) {
    analytic.push_back(p.has_grad() ? p.grad() : std::vector<double>(p.numel(), 0.0));
  }

  GradCheckResult result;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi];
    for (std::size_t i = 0; i < p.numel(); ++i) {
      const double orig = p.data()[i];
      p.data()[i] = orig + step;
      const double up = loss_fn().item();
      p.data()[i] = orig - step;
      const double down = loss_fn().item();
      p.data()[i] = orig;
      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic[pi][i];
      const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-6});
      result.max_rel_err = std::max(result.max_rel_err, std::fabs(a - numeric) / denom);
      ++result.checked;
    }
  }
  return result;
}

}  // namespace testing_util
