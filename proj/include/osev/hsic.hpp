#pragma once

#include <cstddef>

#include "osev/matrix.hpp"

namespace osev::hsic {

// RBF bandwidth selection. The median heuristic uses the median of the
// nonzero pairwise Euclidean distances, falling back to 1 when every
// distance is zero.
struct KernelParams {
  enum class Bandwidth { kMedianHeuristic, kFixed };

  Bandwidth mode = Bandwidth::kMedianHeuristic;
  double sigma = 1.0;  // used when mode == kFixed
  bool center_features = false;

  static KernelParams median() { return {}; }
  static KernelParams fixed(double sigma);
};

double median_heuristic_sigma(MatrixView x);

// Resolves the bandwidth for a sample matrix (validates Fixed sigma > 0).
double resolve_sigma(MatrixView x, const KernelParams& params);

// K_ij = exp(-|x_i - x_j|^2 / (2 sigma^2)); symmetric with unit diagonal.
// Throws std::invalid_argument for fewer than two rows or non-finite entries.
Matrix rbf_gram(MatrixView x, const KernelParams& params);
Matrix rbf_gram(MatrixView x, double sigma);

// Biased estimator tr(Kx H Ky H) / (n-1)^2 with H = I - 11^T/n.
double hsic_biased(const Matrix& kx, const Matrix& ky);

// Double-centered Gram matrix H K H.
Matrix center_gram(const Matrix& k);

struct ValueAndGrad {
  double value = 0.0;
  Matrix grad_x;  // same shape as x
  double sigma_x = 1.0;
  double sigma_y = 1.0;
};

// HSIC between the rows of x and y together with the analytic gradient with
// respect to x. Bandwidths are resolved once and held constant under
// differentiation.
ValueAndGrad hsic_value_and_grad(MatrixView x, MatrixView y, const KernelParams& params_x,
                                 const KernelParams& params_y);

inline ValueAndGrad hsic_value_and_grad(MatrixView x, MatrixView y,
                                        const KernelParams& params = {}) {
  return hsic_value_and_grad(x, y, params, params);
}

}  // namespace osev::hsic
