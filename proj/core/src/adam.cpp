#include "dccl/adam.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace dccl {

AdamState::AdamState(AdamConfig cfg, std::span<const Tensor* const> params)
    : cfg_(cfg) {
  m_.reserve(params.size());
  v_.reserve(params.size());
  for (const Tensor* p : params) {
    m_.push_back(Tensor::zeros(p->shape()));
    v_.push_back(Tensor::zeros(p->shape()));
  }
}

void AdamState::step(std::span<Tensor* const> params, const GradMap& grads) {
  if (params.size() != m_.size())
    throw std::invalid_argument(
        "AdamState::step: got " + std::to_string(params.size()) +
        " parameters, state tracks " + std::to_string(m_.size()));
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Tensor* g = grads.find(i);
    if (!g) continue;
    Tensor& p = *params[i];
    if (!g->same_shape(p))
      throw std::invalid_argument(
          "AdamState::step: gradient shape " + shape_str(g->shape()) +
          " does not match parameter " + std::to_string(i) + " shape " +
          shape_str(p.shape()));
    Tensor& m = m_[i];
    Tensor& v = v_[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = (*g)[j];
      m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * gj;
      v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * gj * gj;
      const double mh = m[j] / bc1;
      const double vh = v[j] / bc2;
      p[j] -= cfg_.lr * mh / (std::sqrt(vh) + cfg_.eps);
    }
  }
}

}  // namespace dccl
