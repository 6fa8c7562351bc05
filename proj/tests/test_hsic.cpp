#include <cmath>
#include <stdexcept>
#include <vector>

#include "osev/hsic.hpp"
#include "support.hpp"

using namespace osev;
using namespace osev::hsic;
using doctest::Approx;

namespace {

Matrix random_matrix(Rng& rng, std::size_t n, std::size_t d, double scale = 1.0) {
  return Matrix(n, d, testing::gen_normals(rng, n * d, scale));
}

// Kernel entry straight from the formula.
double rbf(const Matrix& x, std::size_t i, std::size_t j, double sigma) {
  double d2 = 0.0;
  for (std::size_t c = 0; c < x.cols(); ++c) d2 += (x(i, c) - x(j, c)) * (x(i, c) - x(j, c));
  return std::exp(-d2 / (2.0 * sigma * sigma));
}

// Direct-summation HSIC without forming H:
// [sum K.L - 2/n sum_i (K 1)_i (L 1)_i + (1' K 1)(1' L 1)/n^2] / (n-1)^2.
double hsic_direct(const Matrix& x, double sx, const Matrix& y, double sy) {
  const std::size_t n = x.rows();
  double kl = 0.0, cross = 0.0, sum_k = 0.0, sum_l = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double row_k = 0.0, row_l = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double k = rbf(x, i, j, sx);
      const double l = rbf(y, i, j, sy);
      kl += k * l;
      row_k += k;
      row_l += l;
    }
    cross += row_k * row_l;
    sum_k += row_k;
    sum_l += row_l;
  }
  const double nn = static_cast<double>(n);
  return (kl - 2.0 * cross / nn + sum_k * sum_l / (nn * nn)) / ((nn - 1.0) * (nn - 1.0));
}

Matrix permute_rows(const Matrix& m, const std::vector<std::size_t>& perm) {
  Matrix out(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t c = 0; c < m.cols(); ++c) out(i, c) = m(perm[i], c);
  }
  return out;
}

}  // namespace

TEST_CASE("rbf gram on the documented inputs") {
  const Matrix same(3, 2, std::vector<double>{1, 2, 1, 2, 1, 2});
  const auto ones = rbf_gram(same.view(), KernelParams::median());
  for (double v : ones.data()) CHECK(v == 1.0);

  const double sigma = 0.7;
  const Matrix pair(2, 1, std::vector<double>{0.0, sigma * std::sqrt(2.0)});
  const auto k = rbf_gram(pair.view(), sigma);
  CHECK(k(0, 1) == Approx(std::exp(-1.0)).epsilon(1e-14));
  CHECK(k(0, 1) == Approx(0.367879).epsilon(1e-6));
  CHECK(k(0, 0) == 1.0);
  CHECK(k(1, 1) == 1.0);

  const Matrix one(1, 2, std::vector<double>{0.0, 1.0});
  CHECK_THROWS_AS(rbf_gram(one.view(), 1.0), std::invalid_argument);
  CHECK_THROWS_AS(KernelParams::fixed(0.0), std::invalid_argument);
}

TEST_CASE("median heuristic uses nonzero distances and falls back to 1") {
  const Matrix x(3, 1, std::vector<double>{0.0, 0.0, 3.0});
  // Nonzero distances {3, 3}.
  CHECK(median_heuristic_sigma(x.view()) == 3.0);
  const Matrix y(4, 1, std::vector<double>{0.0, 1.0, 3.0, 6.0});
  // Distances {1, 3, 6, 2, 5, 3}: median of six = (3 + 3) / 2.
  CHECK(median_heuristic_sigma(y.view()) == 3.0);
  const Matrix c(3, 2, 5.0);
  CHECK(median_heuristic_sigma(c.view()) == 1.0);
}

TEST_CASE("gram matrices are symmetric with unit diagonal and entries in (0, 1]") {
  testing::for_all("gram", 100, [](Rng& rng) {
    const std::size_t n = 2 + rng.below(20);
    const auto x = random_matrix(rng, n, 1 + rng.below(5));
    const auto k = rbf_gram(x.view(), KernelParams::median());
    const double sigma = median_heuristic_sigma(x.view());
    for (std::size_t i = 0; i < n; ++i) {
      CHECK(k(i, i) == 1.0);
      for (std::size_t j = 0; j < n; ++j) {
        CHECK(k(i, j) == k(j, i));
        CHECK(k(i, j) > 0.0);
        CHECK(k(i, j) <= 1.0);
        CHECK(std::abs(k(i, j) - rbf(x, i, j, sigma)) <= 1e-15);
      }
    }
  });
}

TEST_CASE("hand-computed two-sample case") {
  const Matrix k(2, 2, std::vector<double>{1.0, 0.5, 0.5, 1.0});
  CHECK(hsic_biased(k, k) == Approx(0.25).epsilon(1e-15));
  CHECK(std::abs(hsic_biased(k, k) - 0.25) <= 1e-12);
  const Matrix l(2, 2, std::vector<double>{1.0, 0.2, 0.2, 1.0});
  CHECK(hsic_biased(k, l) == Approx(0.5 * 0.8).epsilon(1e-14));
}

TEST_CASE("constant input gives zero") {
  testing::for_all("hsic_const", 50, [](Rng& rng) {
    const std::size_t n = 2 + rng.below(30);
    const Matrix c(n, 3, rng.normal());
    const auto y = random_matrix(rng, n, 2);
    CHECK(std::abs(hsic_value_and_grad(c.view(), y.view()).value) <= 1e-12);
    CHECK(std::abs(hsic_value_and_grad(y.view(), c.view()).value) <= 1e-12);
    const auto g = hsic_value_and_grad(c.view(), y.view());
    for (double v : g.grad_x.data()) CHECK(std::abs(v) <= 1e-12);
  });
}

TEST_CASE("estimator matches direct summation for n up to 64") {
  testing::for_all("hsic_direct", 60, [](Rng& rng) {
    const std::size_t n = 2 + rng.below(63);
    const auto x = random_matrix(rng, n, 1 + rng.below(6));
    const auto y = random_matrix(rng, n, 1 + rng.below(6), rng.uniform(0.1, 3.0));
    const double sx = median_heuristic_sigma(x.view());
    const double sy = median_heuristic_sigma(y.view());
    const double oracle = hsic_direct(x, sx, y, sy);
    const auto kx = rbf_gram(x.view(), sx);
    const auto ky = rbf_gram(y.view(), sy);
    CHECK(std::abs(hsic_biased(kx, ky) - oracle) <= 1e-12);
    CHECK(std::abs(hsic_value_and_grad(x.view(), y.view()).value - oracle) <= 1e-12);
    CHECK(hsic_biased(kx, ky) >= -1e-12);
    CHECK(std::abs(hsic_biased(kx, ky) - hsic_biased(ky, kx)) <= 1e-12);
  });
}

TEST_CASE("sample permutation invariance") {
  testing::for_all("hsic_perm", 50, [](Rng& rng) {
    const std::size_t n = 2 + rng.below(40);
    const auto x = random_matrix(rng, n, 3);
    const auto y = random_matrix(rng, n, 2);
    const auto perm = rng.permutation(n);
    const double a = hsic_value_and_grad(x.view(), y.view()).value;
    const auto xp = permute_rows(x, perm);
    const auto yp = permute_rows(y, perm);
    CHECK(std::abs(hsic_value_and_grad(xp.view(), yp.view()).value - a) <= 1e-12);
  });
}

TEST_CASE("identical nontrivial inputs are dependent") {
  const Matrix x(4, 1, std::vector<double>{0.0, 1.0, 2.5, 4.0});
  const double v = hsic_value_and_grad(x.view(), x.view()).value;
  const double s = median_heuristic_sigma(x.view());
  CHECK(v > 0.0);
  CHECK(v == Approx(hsic_direct(x, s, x, s)).epsilon(1e-13));
}

TEST_CASE("gradient matches central differences with the bandwidth held fixed") {
  testing::for_all("hsic_grad", 30, [](Rng& rng) {
    const std::size_t n = 8, d = 3;
    auto x = random_matrix(rng, n, d);
    const auto y = random_matrix(rng, n, 2);
    const auto px = KernelParams::fixed(median_heuristic_sigma(x.view()));
    const auto py = KernelParams::fixed(median_heuristic_sigma(y.view()));
    const auto base = hsic_value_and_grad(x.view(), y.view(), px, py);
    double worst = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t c = 0; c < d; ++c) {
        const double orig = x(i, c);
        x(i, c) = orig + 1e-5;
        const double plus = hsic_value_and_grad(x.view(), y.view(), px, py).value;
        x(i, c) = orig - 1e-5;
        const double minus = hsic_value_and_grad(x.view(), y.view(), px, py).value;
        x(i, c) = orig;
        const double num = (plus - minus) / 2e-5;
        const double ana = base.grad_x(i, c);
        worst = std::max(worst, std::abs(num - ana) / std::max({std::abs(num), std::abs(ana), 1e-6}));
      }
    }
    CHECK(worst < 1e-4);
  });
}

TEST_CASE("centering flag removes per-batch feature means") {
  Rng rng(3);
  const auto x = random_matrix(rng, 10, 3);
  auto shifted = x;
  for (std::size_t i = 0; i < 10; ++i) shifted(i, 0) += 5.0;
  const auto y = random_matrix(rng, 10, 2);
  KernelParams centered;
  centered.center_features = true;
  // RBF kernels are translation invariant, so the flag leaves values alone.
  CHECK(hsic_value_and_grad(shifted.view(), y.view(), centered, centered).value ==
        Approx(hsic_value_and_grad(x.view(), y.view()).value).epsilon(1e-12));
}

TEST_CASE("mismatched sample counts are rejected") {
  const Matrix a(3, 1, 1.0), b(4, 1, 1.0);
  CHECK_THROWS_AS(hsic_value_and_grad(a.view(), b.view()), std::invalid_argument);
  CHECK_THROWS_AS(hsic_biased(Matrix(2, 2, 1.0), Matrix(3, 3, 1.0)), std::invalid_argument);
}
