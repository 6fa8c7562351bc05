#include "osev/evidential.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace osev::evidential {

EvidenceFunction parse_evidence_function(std::string_view name) {
  if (name == "exp" || name == "exponential") return EvidenceFunction::kExponential;
  if (name == "softplus") return EvidenceFunction::kSoftplus;
  if (name == "relu") return EvidenceFunction::kRectifiedLinear;
  throw std::invalid_argument("unknown evidence function '" + std::string(name) +
                              "' (expected exp, softplus or relu)");
}

std::string_view to_string(EvidenceFunction kind) {
  switch (kind) {
    case EvidenceFunction::kExponential:
      return "exp";
    case EvidenceFunction::kSoftplus:
      return "softplus";
    case EvidenceFunction::kRectifiedLinear:
      return "relu";
  }
  return "exp";
}

EvidenceVector::EvidenceVector(std::vector<double> values) : values_(std::move(values)) {
  if (values_.size() < 2) {
    throw std::invalid_argument("evidence vector needs at least 2 classes, got " +
                                std::to_string(values_.size()));
  }
  for (std::size_t k = 0; k < values_.size(); ++k) {
    if (!(values_[k] >= 0.0) || !std::isfinite(values_[k])) {
      throw std::invalid_argument("evidence[" + std::to_string(k) +
                                  "] must be finite and non-negative");
    }
  }
}

double evidence_value(double logit, EvidenceFunction kind, double exp_clamp) {
  switch (kind) {
    case EvidenceFunction::kExponential:
      return std::exp(std::clamp(logit, -exp_clamp, exp_clamp));
    case EvidenceFunction::kSoftplus:
      // log(1 + e^x) without overflow.
      return logit > 0.0 ? logit + std::log1p(std::exp(-logit)) : std::log1p(std::exp(logit));
    case EvidenceFunction::kRectifiedLinear:
      return logit > 0.0 ? logit : 0.0;
  }
  return 0.0;
}

double evidence_derivative(double logit, EvidenceFunction kind, double exp_clamp) {
  switch (kind) {
    case EvidenceFunction::kExponential:
      if (logit < -exp_clamp || logit > exp_clamp) return 0.0;
      return std::exp(logit);
    case EvidenceFunction::kSoftplus:
      return logit >= 0.0 ? 1.0 / (1.0 + std::exp(-logit))
                          : std::exp(logit) / (1.0 + std::exp(logit));
    case EvidenceFunction::kRectifiedLinear:
      return logit > 0.0 ? 1.0 : 0.0;
  }
  return 0.0;
}

EvidenceVector evidence_from_logits(std::span<const double> logits, EvidenceFunction kind,
                                    double exp_clamp) {
  if (logits.size() < 2) {
    throw std::invalid_argument("need at least 2 logits, got " + std::to_string(logits.size()));
  }
  std::vector<double> e(logits.size());
  for (std::size_t k = 0; k < logits.size(); ++k) {
    if (!std::isfinite(logits[k])) {
      throw std::invalid_argument("logit[" + std::to_string(k) + "] is not finite");
    }
    e[k] = evidence_value(logits[k], kind, exp_clamp);
  }
  return EvidenceVector(std::move(e));
}

DirichletOpinion opinion_from_evidence(const EvidenceVector& evidence) {
  const std::size_t k = evidence.num_classes();
  const double kd = static_cast<double>(k);
  DirichletOpinion op;
  op.alpha.resize(k);
  op.strength = 0.0;
  for (std::size_t j = 0; j < k; ++j) {
    op.alpha[j] = evidence[j] + 1.0;
    op.strength += op.alpha[j];
  }
  op.belief.resize(k);
  op.probs.resize(k);
  op.base_rate.assign(k, 1.0 / kd);
  op.uncertainty = kd / op.strength;
  for (std::size_t j = 0; j < k; ++j) {
    op.belief[j] = evidence[j] / op.strength;
    op.probs[j] = op.alpha[j] / op.strength;
  }
  return op;
}

std::size_t argmax(std::span<const double> values) {
  std::size_t best = 0;
  for (std::size_t k = 1; k < values.size(); ++k) {
    if (values[k] > values[best]) best = k;
  }
  return best;
}

Prediction predict(const DirichletOpinion& opinion) {
  Prediction p;
  p.class_index = argmax(opinion.probs);
  p.max_prob = opinion.probs[p.class_index];
  p.uncertainty = opinion.uncertainty;
  return p;
}

double threshold_from_train_scores(std::span<const double> scores, double coverage) {
  if (scores.empty()) throw std::invalid_argument("threshold needs at least one score");
  if (!(coverage > 0.0 && coverage <= 1.0)) {
    throw std::invalid_argument("coverage must lie in (0, 1]");
  }
  std::vector<double> sorted(scores.begin(), scores.end());
  std::sort(sorted.begin(), sorted.end());
  const double n = static_cast<double>(sorted.size());
  auto rank = static_cast<std::size_t>(std::ceil(coverage * n - 1e-9));
  rank = std::clamp<std::size_t>(rank, 1, sorted.size());
  return sorted[rank - 1];
}

}  // namespace osev::evidential
