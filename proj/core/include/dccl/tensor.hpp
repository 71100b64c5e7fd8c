#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace dccl {

// Dense row-major tensor of doubles. Rank 0 is a scalar, rank 1 a vector,
// rank 2 a matrix. Shapes are immutable after construction; values are not.
class Tensor {
public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape);
  Tensor(std::vector<std::size_t> shape, std::vector<double> values);

  static Tensor scalar(double v);
  static Tensor zeros(std::vector<std::size_t> shape);
  static Tensor full(std::vector<std::size_t> shape, double v);

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return values_.size(); }
  std::size_t extent(std::size_t axis) const;

  // Rank-2 accessors; throw on rank mismatch.
  std::size_t rows() const;
  std::size_t cols() const;
  double& at(std::size_t r, std::size_t c);
  double at(std::size_t r, std::size_t c) const;

  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }

  double* data() { return values_.data(); }
  const double* data() const { return values_.data(); }
  std::vector<double>& values() { return values_; }
  const std::vector<double>& values() const { return values_; }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  bool all_finite() const;
  void fill(double v);

  // Reshapes in place, reusing the value buffer. Contents are unspecified
  // afterwards; callers overwrite them.
  void reinit(const std::vector<std::size_t>& shape);

private:
  std::vector<std::size_t> shape_;
  std::vector<double> values_;
};

std::size_t shape_size(std::span<const std::size_t> shape);
std::string shape_str(std::span<const std::size_t> shape);

}  // namespace dccl
