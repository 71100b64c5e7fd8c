#include "dccl/tensor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace dccl {

std::size_t shape_size(std::span<const std::size_t> shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

std::string shape_str(std::span<const std::size_t> shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

Tensor::Tensor(std::vector<std::size_t> shape)
    : shape_(std::move(shape)), values_(shape_size(shape_), 0.0) {}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> values)
    : shape_(std::move(shape)), values_(std::move(values)) {
  if (values_.size() != shape_size(shape_)) {
    std::ostringstream os;
    os << "Tensor: " << values_.size() << " values do not fill shape "
       << shape_str(shape_);
    throw std::invalid_argument(os.str());
  }
}

Tensor Tensor::scalar(double v) { return Tensor({}, {v}); }

Tensor Tensor::zeros(std::vector<std::size_t> shape) {
  return Tensor(std::move(shape));
}

Tensor Tensor::full(std::vector<std::size_t> shape, double v) {
  Tensor t(std::move(shape));
  t.fill(v);
  return t;
}

std::size_t Tensor::extent(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw std::invalid_argument("Tensor::extent: axis " + std::to_string(axis) +
                                " out of range for rank " +
                                std::to_string(shape_.size()));
  }
  return shape_[axis];
}

std::size_t Tensor::rows() const {
  if (rank() != 2)
    throw std::invalid_argument("Tensor::rows: tensor is not rank 2");
  return shape_[0];
}

std::size_t Tensor::cols() const {
  if (rank() != 2)
    throw std::invalid_argument("Tensor::cols: tensor is not rank 2");
  return shape_[1];
}

double& Tensor::at(std::size_t r, std::size_t c) {
  return values_[r * cols() + c];
}

double Tensor::at(std::size_t r, std::size_t c) const {
  return values_[r * cols() + c];
}

bool Tensor::all_finite() const {
  for (double v : values_)
    if (!std::isfinite(v)) return false;
  return true;
}

void Tensor::fill(double v) {
  for (double& x : values_) x = v;
}

void Tensor::reinit(const std::vector<std::size_t>& shape) {
  shape_ = shape;
  values_.resize(shape_size(shape_));
}

}  // namespace dccl
