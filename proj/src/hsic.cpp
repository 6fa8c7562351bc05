#include "osev/hsic.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace osev::hsic {
namespace {

void check_samples(MatrixView x, const char* what) {
  if (x.rows < 2) {
    throw std::invalid_argument(std::string(what) + ": HSIC needs at least 2 samples, got " +
                                std::to_string(x.rows));
  }
  if (x.data.size() != x.rows * x.cols) {
    throw std::invalid_argument(std::string(what) + ": view size does not match its shape");
  }
  for (std::size_t i = 0; i < x.data.size(); ++i) {
    if (!std::isfinite(x.data[i])) {
      throw std::invalid_argument(std::string(what) + ": non-finite feature at row " +
                                  std::to_string(i / x.cols));
    }
  }
}

double squared_distance(std::span<const double> a, std::span<const double> b) {
  double d = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    const double diff = a[k] - b[k];
    d += diff * diff;
  }
  return d;
}

// Column-centered copy when requested; otherwise a plain copy.
Matrix prepare(MatrixView x, bool center) {
  Matrix m(x.rows, x.cols, std::vector<double>(x.data.begin(), x.data.end()));
  if (!center) return m;
  for (std::size_t j = 0; j < x.cols; ++j) {
    double mean = 0.0;
    for (std::size_t i = 0; i < x.rows; ++i) mean += m(i, j);
    mean /= static_cast<double>(x.rows);
    for (std::size_t i = 0; i < x.rows; ++i) m(i, j) -= mean;
  }
  return m;
}

}  // namespace

KernelParams KernelParams::fixed(double sigma) {
  if (!(sigma > 0.0) || !std::isfinite(sigma)) {
    throw std::invalid_argument("fixed RBF bandwidth must be positive");
  }
  KernelParams p;
  p.mode = Bandwidth::kFixed;
  p.sigma = sigma;
  return p;
}

double median_heuristic_sigma(MatrixView x) {
  std::vector<double> dists;
  dists.reserve(x.rows * (x.rows - 1) / 2);
  for (std::size_t i = 0; i < x.rows; ++i) {
    for (std::size_t j = i + 1; j < x.rows; ++j) {
      const double d = std::sqrt(squared_distance(x.row(i), x.row(j)));
      if (d > 0.0) dists.push_back(d);
    }
  }
  if (dists.empty()) return 1.0;
  const std::size_t n = dists.size();
  std::sort(dists.begin(), dists.end());
  return n % 2 == 1 ? dists[n / 2] : 0.5 * (dists[n / 2 - 1] + dists[n / 2]);
}

double resolve_sigma(MatrixView x, const KernelParams& params) {
  if (params.mode == KernelParams::Bandwidth::kFixed) {
    if (!(params.sigma > 0.0)) throw std::invalid_argument("fixed RBF bandwidth must be positive");
    return params.sigma;
  }
  return median_heuristic_sigma(x);
}

Matrix rbf_gram(MatrixView x, double sigma) {
  check_samples(x, "rbf_gram");
  if (!(sigma > 0.0)) throw std::invalid_argument("rbf_gram: bandwidth must be positive");
  const std::size_t n = x.rows;
  const double scale = 1.0 / (2.0 * sigma * sigma);
  Matrix k(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    k(i, i) = 1.0;
    for (std::size_t j = i + 1; j < n; ++j) {
      const double v = std::exp(-squared_distance(x.row(i), x.row(j)) * scale);
      k(i, j) = v;
      k(j, i) = v;
    }
  }
  return k;
}

Matrix rbf_gram(MatrixView x, const KernelParams& params) {
  check_samples(x, "rbf_gram");
  const Matrix prepared = prepare(x, params.center_features);
  return rbf_gram(prepared.view(), resolve_sigma(prepared.view(), params));
}

Matrix center_gram(const Matrix& k) {
  const std::size_t n = k.rows();
  std::vector<double> row_mean(n, 0.0);
  std::vector<double> col_mean(n, 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      row_mean[i] += k(i, j);
      col_mean[j] += k(i, j);
      total += k(i, j);
    }
  }
  const double nd = static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    row_mean[i] /= nd;
    col_mean[i] /= nd;
  }
  total /= nd * nd;
  Matrix c(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) c(i, j) = k(i, j) - row_mean[i] - col_mean[j] + total;
  }
  return c;
}

double hsic_biased(const Matrix& kx, const Matrix& ky) {
  const std::size_t n = kx.rows();
  if (kx.cols() != n || ky.rows() != n || ky.cols() != n) {
    throw std::invalid_argument("hsic_biased: Gram matrices are " + std::to_string(kx.rows()) +
                                "x" + std::to_string(kx.cols()) + " and " +
                                std::to_string(ky.rows()) + "x" + std::to_string(ky.cols()));
  }
  if (n < 2) throw std::invalid_argument("hsic_biased: need at least 2 samples");
  // tr(Kx H Ky H) = sum_ij Kx_ij (H Ky H)_ij since H Ky H is symmetric.
  const Matrix lc = center_gram(ky);
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) acc += kx(i, j) * lc(i, j);
  }
  const double denom = static_cast<double>(n - 1) * static_cast<double>(n - 1);
  return acc / denom;
}

ValueAndGrad hsic_value_and_grad(MatrixView x, MatrixView y, const KernelParams& params_x,
                                 const KernelParams& params_y) {
  check_samples(x, "hsic(x)");
  check_samples(y, "hsic(y)");
  if (x.rows != y.rows) {
    throw std::invalid_argument("hsic: sample counts differ (" + std::to_string(x.rows) +
                                " vs " + std::to_string(y.rows) + ")");
  }
  const std::size_t n = x.rows;
  const std::size_t d = x.cols;
  const Matrix xp = prepare(x, params_x.center_features);
  const Matrix yp = prepare(y, params_y.center_features);

  ValueAndGrad out;
  out.sigma_x = resolve_sigma(xp.view(), params_x);
  out.sigma_y = resolve_sigma(yp.view(), params_y);
  const Matrix kx = rbf_gram(xp.view(), out.sigma_x);
  const Matrix ky = rbf_gram(yp.view(), out.sigma_y);
  const Matrix lc = center_gram(ky);
  const double denom = static_cast<double>(n - 1) * static_cast<double>(n - 1);

  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) acc += kx(i, j) * lc(i, j);
  }
  out.value = acc / denom;

  // d value / d x_i = -2 / ((n-1)^2 sigma^2) * sum_j Lc_ij Kx_ij (x_i - x_j)
  const double coef = -2.0 / (denom * out.sigma_x * out.sigma_x);
  out.grad_x = Matrix(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const double w = coef * lc(i, j) * kx(i, j);
      for (std::size_t c = 0; c < d; ++c) out.grad_x(i, c) += w * (xp(i, c) - xp(j, c));
    }
  }
  if (params_x.center_features) {
    // Back through column centering: subtract the column mean of the gradient.
    for (std::size_t c = 0; c < d; ++c) {
      double mean = 0.0;
      for (std::size_t i = 0; i < n; ++i) mean += out.grad_x(i, c);
      mean /= static_cast<double>(n);
      for (std::size_t i = 0; i < n; ++i) out.grad_x(i, c) -= mean;
    }
  }
  return out;
}

}  // namespace osev::hsic
