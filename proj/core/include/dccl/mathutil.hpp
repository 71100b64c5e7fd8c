#pragma once

#include <cmath>

namespace dccl {

// Shared scalar kernels. The tape ops and the tape-free scorer must produce
// identical doubles, so both call these.

inline double sigmoid_scalar(double x) {
  if (x >= 0.0) {
    const double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// log(1 + exp(x)) without overflow.
inline double softplus_scalar(double x) {
  return std::log1p(std::exp(-std::abs(x))) + (x > 0.0 ? x : 0.0);
}

}  // namespace dccl
