#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "dccl/tape.hpp"
#include "dccl/tensor.hpp"

namespace dccl {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam with bias correction. Moment slots are aligned with the parameter
// list given at construction; parameter slot i in a GradMap addresses
// params[i]. Parameters without a gradient entry are left untouched.
class AdamState {
public:
  AdamState(AdamConfig cfg, std::span<const Tensor* const> params);

  void step(std::span<Tensor* const> params, const GradMap& grads);

  std::uint64_t steps() const { return t_; }
  const AdamConfig& config() const { return cfg_; }

  // Raw state access for checkpointing.
  std::vector<Tensor>& m() { return m_; }
  std::vector<Tensor>& v() { return v_; }
  const std::vector<Tensor>& m() const { return m_; }
  const std::vector<Tensor>& v() const { return v_; }
  void set_steps(std::uint64_t t) { t_ = t; }

private:
  AdamConfig cfg_;
  std::uint64_t t_ = 0;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
};

}  // namespace dccl
