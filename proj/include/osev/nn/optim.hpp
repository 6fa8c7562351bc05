#pragma once

#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "osev/nn/tensor.hpp"

namespace osev::nn {

struct SgdOptions {
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  bool nesterov = false;
};

// Thrown when a gradient contains NaN or Inf; no parameter is modified.
class NonFiniteGradient : public std::runtime_error {
 public:
  explicit NonFiniteGradient(std::vector<std::string> names);
  const std::vector<std::string>& parameters() const { return names_; }

 private:
  std::vector<std::string> names_;
};

// Momentum SGD with coupled weight decay:
//   v <- m v + g + wd theta;  theta <- theta - lr v
// (Nesterov: theta <- theta - lr (g + wd theta + m v)). Gradients are zeroed
// after the update.
void sgd_step(std::span<Parameter* const> params, const SgdOptions& options);

// Step-wise learning-rate decay: lr * gamma^(epoch / step) (constant when step == 0).
double step_lr(double base_lr, int epoch, int step, double gamma);

void zero_grads(std::span<Parameter* const> params);

}  // namespace osev::nn
