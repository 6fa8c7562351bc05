#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "osev/matrix.hpp"

namespace osev::nn {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);

// Dense row-major array with an immutable shape. Rank 3 tensors are laid out
// batch x channels x time; rank 2 tensors are batch x features.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return values_.size(); }
  bool empty() const { return values_.empty(); }

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }

  double& at(std::size_t i, std::size_t j) { return values_[i * shape_[1] + j]; }
  double at(std::size_t i, std::size_t j) const { return values_[i * shape_[1] + j]; }
  double& at(std::size_t b, std::size_t c, std::size_t t) {
    return values_[(b * shape_[1] + c) * shape_[2] + t];
  }
  double at(std::size_t b, std::size_t c, std::size_t t) const {
    return values_[(b * shape_[1] + c) * shape_[2] + t];
  }

  void fill(double v);
  bool all_finite() const;

  // Rank-2 tensors viewed as a sample matrix.
  MatrixView as_matrix() const;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<double> values_;
};

// Learnable tensor with its gradient accumulator and momentum buffer.
struct Parameter {
  Parameter(std::string name, Shape shape);

  std::string name;
  Tensor value;
  Tensor grad;
  Tensor velocity;

  void zero_grad() { grad.fill(0.0); }
};

}  // namespace osev::nn
