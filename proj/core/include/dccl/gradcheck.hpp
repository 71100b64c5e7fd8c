#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "dccl/tensor.hpp"

namespace dccl {

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::size_t checked = 0;
  std::string worst;  // "param 2 [14]: analytic=..., numeric=..."
};

// Central-difference check of a scalar loss against analytic gradients.
// `loss_fn` must evaluate the loss from the current parameter values alone.
// rel_err = |a - n| / max(|a|, |n|, floor).
GradCheckResult grad_check(
    std::span<Tensor* const> params,
    const std::function<double()>& loss_fn,
    const std::function<void(std::span<Tensor* const>, std::vector<Tensor>&)>& grad_fn,
    double h = 1e-5, double floor = 1e-4);

}  // namespace dccl
