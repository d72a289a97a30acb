#pragma once
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "attempt/core/error.hpp"
#include "attempt/core/tensor.hpp"

namespace attempt {

template <class T>
struct AdamState {
  std::vector<T> m, v;
  std::size_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam with decoupled weight decay: the decay shrinks the parameter before
// the moment-based delta is applied.
template <class T>
void adam_step(Tensor<T>& param, const std::vector<T>& grad, AdamState<T>& st,
               double lr, double weight_decay, const std::string& name = "param") {
  if (grad.size() != param.numel())
    throw DimensionError("adam_step: gradient shape mismatch for " + name);
  for (T g : grad)
    if (!std::isfinite(static_cast<double>(g)))
      throw NumericError("adam_step: non-finite gradient in " + name);
  if (st.m.size() != grad.size()) st.m.assign(grad.size(), T(0));
  if (st.v.size() != grad.size()) st.v.assign(grad.size(), T(0));
  ++st.step;
  const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  for (std::size_t i = 0; i < grad.size(); ++i) {
    param.data()[i] -= T(lr * weight_decay) * param.data()[i];
    st.m[i] = T(st.beta1) * st.m[i] + T(1.0 - st.beta1) * grad[i];
    st.v[i] = T(st.beta2) * st.v[i] + T(1.0 - st.beta2) * grad[i] * grad[i];
    const double mh = st.m[i] / bc1;
    const double vh = st.v[i] / bc2;
    param.data()[i] -= T(lr * mh / (std::sqrt(vh) + st.eps));
  }
}

// A learning-rate group: parameters sharing one lr and weight decay, each
// with its own Adam state. Parameters without a populated gradient are
// skipped entirely (no moment update, no decay).
template <class T>
class ParamGroup {
 public:
  ParamGroup(std::vector<std::pair<std::string, Tensor<T>>> params, double lr,
             double weight_decay)
      : params_(std::move(params)), states_(params_.size()), lr_(lr),
        weight_decay_(weight_decay) {}

  double lr() const { return lr_; }

  // Deallocates gradients so a parameter untouched by the next backward pass
  // reports has_grad() == false and is skipped by step().
  void zero_grad() {
    for (auto& [name, p] : params_) p.clear_grad();
  }

  void step(double lr_scale) {
    const double lr = lr_ * lr_scale;
    if (lr == 0.0) return;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& [name, p] = params_[i];
      if (!p.has_grad()) continue;
      adam_step(p, p.grad(), states_[i], lr, weight_decay_, name);
    }
  }

  const std::vector<std::pair<std::string, Tensor<T>>>& params() const {
    return params_;
  }

 private:
  std::vector<std::pair<std::string, Tensor<T>>> params_;
  std::vector<AdamState<T>> states_;
  double lr_;
  double weight_decay_;
};

}  // namespace attempt
