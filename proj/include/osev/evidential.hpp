#pragma once

#include <cstddef>
#include <span>
#include <string_view>
#include <vector>

namespace osev::evidential {

enum class EvidenceFunction { kExponential, kSoftplus, kRectifiedLinear };

EvidenceFunction parse_evidence_function(std::string_view name);
std::string_view to_string(EvidenceFunction kind);

// Logit bound applied before exponentiation.
inline constexpr double kDefaultExpClamp = 10.0;

// Non-negative per-class evidence e_k, K >= 2.
class EvidenceVector {
 public:
  explicit EvidenceVector(std::vector<double> values);

  std::size_t num_classes() const { return values_.size(); }
  std::span<const double> values() const { return values_; }
  double operator[](std::size_t k) const { return values_[k]; }

 private:
  std::vector<double> values_;
};

// Maps logits to evidence. Throws std::invalid_argument naming the first
// non-finite index, or when fewer than two logits are given.
EvidenceVector evidence_from_logits(std::span<const double> logits, EvidenceFunction kind,
                                    double exp_clamp = kDefaultExpClamp);

// Elementwise evidence and its derivative with respect to the logit.
// The derivative is 0 where the exponential clamp is active.
double evidence_value(double logit, EvidenceFunction kind, double exp_clamp = kDefaultExpClamp);
double evidence_derivative(double logit, EvidenceFunction kind,
                           double exp_clamp = kDefaultExpClamp);

// Subjective-logic opinion of a Dirichlet with alpha = e + 1 and uniform
// base rate a_k = 1/K:
//   S = sum(alpha), b_k = e_k / S, u = K / S, p_k = alpha_k / S = b_k + a_k u.
struct DirichletOpinion {
  std::vector<double> alpha;
  double strength = 0.0;
  std::vector<double> belief;
  double uncertainty = 1.0;
  std::vector<double> base_rate;
  std::vector<double> probs;

  std::size_t num_classes() const { return alpha.size(); }
};

DirichletOpinion opinion_from_evidence(const EvidenceVector& evidence);

struct Prediction {
  std::size_t class_index = 0;
  double max_prob = 0.0;
  double uncertainty = 1.0;
};

// Argmax of the expected probabilities; ties go to the lowest index.
Prediction predict(const DirichletOpinion& opinion);

// Lowest-index argmax over any probability vector.
std::size_t argmax(std::span<const double> values);

// Smallest observed value tau with (#{u <= tau} / n) >= coverage, i.e. the
// ceil(coverage * n)-th order statistic. Throws on empty input or coverage
// outside (0, 1].
double threshold_from_train_scores(std::span<const double> scores, double coverage = 0.95);

}  // namespace osev::evidential
