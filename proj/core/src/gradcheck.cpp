#include "dccl/gradcheck.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace dccl {

GradCheckResult grad_check(
    std::span<Tensor* const> params,
    const std::function<double()>& loss_fn,
    const std::function<void(std::span<Tensor* const>, std::vector<Tensor>&)>& grad_fn,
    double h, double floor) {
  std::vector<Tensor> analytic;
  grad_fn(params, analytic);
  if (analytic.size() != params.size())
    throw std::invalid_argument("grad_check: grad_fn filled " +
                                std::to_string(analytic.size()) + " slots for " +
                                std::to_string(params.size()) + " parameters");

  GradCheckResult res;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& p = *params[pi];
    if (!analytic[pi].same_shape(p))
      throw std::invalid_argument("grad_check: gradient shape mismatch at parameter " +
                                  std::to_string(pi));
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double keep = p[j];
      p[j] = keep + h;
      const double up = loss_fn();
      p[j] = keep - h;
      const double dn = loss_fn();
      p[j] = keep;
      const double numeric = (up - dn) / (2.0 * h);
      const double a = analytic[pi][j];
      const double denom = std::max({std::abs(a), std::abs(numeric), floor});
      const double rel = std::abs(a - numeric) / denom;
      ++res.checked;
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        std::ostringstream os;
        os << "param " << pi << " [" << j << "]: analytic=" << a
           << ", numeric=" << numeric;
        res.worst = os.str();
      }
    }
  }
  return res;
}

}  // namespace dccl
