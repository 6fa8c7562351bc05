#include "osev/nn/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace osev::nn {

static std::string join_names(const std::vector<std::string>& names) {
  std::string s;
  for (const auto& n : names) s += (s.empty() ? "" : ", ") + n;
  return s;
}

NonFiniteGradient::NonFiniteGradient(std::vector<std::string> names)
    : std::runtime_error("non-finite gradient in: " + join_names(names)), names_(std::move(names)) {}

void zero_grads(std::span<Parameter* const> params) {
  for (Parameter* p : params) p->zero_grad();
}

void sgd_step(std::span<Parameter* const> params, const SgdOptions& options) {
  std::vector<std::string> bad;
  for (const Parameter* p : params) {
    if (!p->grad.all_finite()) bad.push_back(p->name);
  }
  if (!bad.empty()) throw NonFiniteGradient(std::move(bad));

  const double lr = options.lr;
  const double m = options.momentum;
  const double wd = options.weight_decay;
  for (Parameter* p : params) {
    auto theta = p->value.values();
    auto grad = p->grad.values();
    auto vel = p->velocity.values();
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const double g = grad[i] + wd * theta[i];
      vel[i] = m * vel[i] + g;
      theta[i] -= lr * (options.nesterov ? g + m * vel[i] : vel[i]);
    }
    p->zero_grad();
  }
}

double step_lr(double base_lr, int epoch, int step, double gamma) {
  if (step <= 0) return base_lr;
  return base_lr * std::pow(gamma, epoch / step);
}

}  // namespace osev::nn
