#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include "osev/evidential.hpp"
#include "support.hpp"

using namespace osev::evidential;
using doctest::Approx;

namespace {

// Independent recomputation from the definitions, in long double.
struct RefOpinion {
  long double s = 0;
  std::vector<long double> p, b;
  long double u = 0;
};

RefOpinion reference(const std::vector<double>& e) {
  RefOpinion r;
  for (double v : e) r.s += static_cast<long double>(v) + 1.0L;
  for (double v : e) {
    r.b.push_back(static_cast<long double>(v) / r.s);
    r.p.push_back((static_cast<long double>(v) + 1.0L) / r.s);
  }
  r.u = static_cast<long double>(e.size()) / r.s;
  return r;
}

}  // namespace

TEST_CASE("evidence functions on the documented inputs") {
  const std::vector<double> zeros = {0.0, 0.0, 0.0};
  const auto ex = evidence_from_logits(zeros, EvidenceFunction::kExponential);
  for (double v : ex.values()) CHECK(v == 1.0);

  const std::vector<double> sp_in = {0.0, 3.0};
  CHECK(evidence_from_logits(sp_in, EvidenceFunction::kSoftplus)[0] ==
        Approx(0.693147180559945).epsilon(1e-14));

  const std::vector<double> relu_in = {-1.0, 2.0};
  const auto r = evidence_from_logits(relu_in, EvidenceFunction::kRectifiedLinear);
  CHECK(r[0] == 0.0);
  CHECK(r[1] == 2.0);
}

TEST_CASE("exponential evidence clamps its logit") {
  const std::vector<double> big = {50.0, -50.0};
  const auto e = evidence_from_logits(big, EvidenceFunction::kExponential);
  CHECK(e[0] == std::exp(10.0));
  CHECK(e[1] == std::exp(-10.0));
  CHECK(evidence_derivative(50.0, EvidenceFunction::kExponential) == 0.0);
  CHECK(evidence_derivative(3.0, EvidenceFunction::kExponential) == std::exp(3.0));
  const auto custom = evidence_from_logits(big, EvidenceFunction::kExponential, 2.0);
  CHECK(custom[0] == std::exp(2.0));
}

TEST_CASE("evidence functions are non-negative and reject bad input") {
  testing::for_all("evidence_nonneg", 500, [](osev::Rng& rng) {
    const double z = rng.uniform(-800.0, 800.0);
    for (auto kind : {EvidenceFunction::kExponential, EvidenceFunction::kSoftplus,
                      EvidenceFunction::kRectifiedLinear}) {
      const double v = evidence_value(z, kind);
      CHECK(v >= 0.0);
      CHECK(std::isfinite(v));
    }
  });
  const std::vector<double> bad = {0.0, std::numeric_limits<double>::quiet_NaN(), 1.0};
  try {
    evidence_from_logits(bad, EvidenceFunction::kSoftplus);
    FAIL("expected rejection");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("logit[1]") != std::string::npos);
  }
  const std::vector<double> single = {1.0};
  CHECK_THROWS_AS(evidence_from_logits(single, EvidenceFunction::kExponential),
                  std::invalid_argument);
  CHECK_THROWS_AS(EvidenceVector({1.0, -0.5}), std::invalid_argument);
  CHECK_THROWS_AS(parse_evidence_function("sigmoid"), std::invalid_argument);
  CHECK(parse_evidence_function("softplus") == EvidenceFunction::kSoftplus);
}

TEST_CASE("opinion of zero evidence is maximally uncertain") {
  const auto op = opinion_from_evidence(EvidenceVector({0.0, 0.0, 0.0}));
  CHECK(op.uncertainty == 1.0);
  for (double p : op.probs) CHECK(p == Approx(1.0 / 3.0).epsilon(1e-15));
  for (double b : op.belief) CHECK(b == 0.0);
}

TEST_CASE("opinion of e = [4, 1, 0]") {
  const auto op = opinion_from_evidence(EvidenceVector({4.0, 1.0, 0.0}));
  CHECK(op.alpha == std::vector<double>{5.0, 2.0, 1.0});
  CHECK(op.strength == 8.0);
  CHECK(op.probs == std::vector<double>{0.625, 0.25, 0.125});
  CHECK(op.uncertainty == 0.375);
  CHECK(op.belief == std::vector<double>{0.5, 0.125, 0.0});
  for (double a : op.base_rate) CHECK(a == Approx(1.0 / 3.0).epsilon(1e-15));

  const auto pred = predict(op);
  CHECK(pred.class_index == 0);
  CHECK(pred.max_prob == 0.625);
  CHECK(pred.uncertainty == 0.375);
}

TEST_CASE("opinion of e = [9, 0, 0]") {
  const auto op = opinion_from_evidence(EvidenceVector({9.0, 0.0, 0.0}));
  CHECK(op.uncertainty == 0.25);
  CHECK(op.probs[0] == Approx(10.0 / 12.0).epsilon(1e-15));
  CHECK(op.probs[1] == Approx(1.0 / 12.0).epsilon(1e-15));
}

TEST_CASE("predict breaks ties by lowest index") {
  CHECK(predict(opinion_from_evidence(EvidenceVector({2.0, 2.0, 2.0}))).class_index == 0);
  const std::vector<double> p = {0.1, 0.8, 0.1};
  CHECK(argmax(p) == 1);
  const std::vector<double> tie = {0.2, 0.4, 0.4};
  CHECK(argmax(tie) == 1);
}

TEST_CASE("subjective-logic identities hold for random evidence") {
  testing::for_all("identities", 2000, [](osev::Rng& rng) {
    const std::size_t k = 2 + rng.below(9);
    const auto e = testing::gen_evidence(rng, k);
    const auto op = opinion_from_evidence(EvidenceVector(e));
    const auto ref = reference(e);
    double sum_b = 0.0, sum_p = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      sum_b += op.belief[j];
      sum_p += op.probs[j];
      CHECK(op.alpha[j] == e[j] + 1.0);
      CHECK(std::abs(op.probs[j] - (op.belief[j] + op.base_rate[j] * op.uncertainty)) <= 1e-12);
      CHECK(std::abs(op.probs[j] - static_cast<double>(ref.p[j])) <= 1e-12);
    }
    CHECK(std::abs(op.uncertainty + sum_b - 1.0) <= 1e-12);
    CHECK(std::abs(sum_p - 1.0) <= 1e-12);
    CHECK(std::abs(op.uncertainty - static_cast<double>(k) / op.strength) <= 1e-12);
  });
}

TEST_CASE("more evidence for one class lowers u and raises its probability") {
  testing::for_all("monotone", 500, [](osev::Rng& rng) {
    const std::size_t k = 2 + rng.below(6);
    auto e = testing::gen_evidence(rng, k);
    for (double& v : e) v = std::min(v, 100.0);
    const std::size_t j = rng.below(k);
    const auto before = opinion_from_evidence(EvidenceVector(e));
    e[j] += rng.uniform(0.01, 5.0);
    const auto after = opinion_from_evidence(EvidenceVector(e));
    CHECK(after.uncertainty < before.uncertainty);
    CHECK(after.probs[j] > before.probs[j]);
  });
}

TEST_CASE("threshold is the ceil(coverage n)-th order statistic") {
  std::vector<double> u;
  for (int i = 1; i <= 20; ++i) u.push_back(0.01 * i);
  CHECK(threshold_from_train_scores(u, 0.95) == 0.01 * 19);
  CHECK(threshold_from_train_scores(u, 1.0) == 0.2);
  const std::vector<double> one = {0.5};
  CHECK(threshold_from_train_scores(one) == 0.5);
  CHECK_THROWS_AS(threshold_from_train_scores(std::vector<double>{}), std::invalid_argument);
  CHECK_THROWS_AS(threshold_from_train_scores(u, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(threshold_from_train_scores(u, 1.5), std::invalid_argument);
}

TEST_CASE("threshold is permutation invariant and meets its coverage") {
  testing::for_all("threshold", 300, [](osev::Rng& rng) {
    const std::size_t n = 1 + rng.below(60);
    std::vector<double> u(n);
    // Coarse values so ties are common.
    for (double& v : u) v = static_cast<double>(rng.below(10)) / 10.0;
    const double coverage = rng.uniform(0.01, 1.0);
    const double tau = threshold_from_train_scores(u, coverage);
    std::vector<double> shuffled;
    for (std::size_t i : rng.permutation(n)) shuffled.push_back(u[i]);
    CHECK(threshold_from_train_scores(shuffled, coverage) == tau);
    const auto covered = std::count_if(u.begin(), u.end(), [&](double v) { return v <= tau; });
    CHECK(static_cast<double>(covered) / static_cast<double>(n) >= coverage);
    // No smaller observed value satisfies the coverage.
    for (double v : u) {
      if (v >= tau) continue;
      const auto c = std::count_if(u.begin(), u.end(), [&](double w) { return w <= v; });
      CHECK(static_cast<double>(c) / static_cast<double>(n) < coverage);
    }
  });
}
