#include "osev/losses.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <memory>
#include <stdexcept>
#include <string>

namespace osev::losses {

EdlResult edl_loss(std::span<const double> one_hot, const evidential::EvidenceVector& evidence) {
  const std::size_t k = evidence.num_classes();
  if (one_hot.size() != k) {
    throw std::invalid_argument("edl_loss: label has " + std::to_string(one_hot.size()) +
                                " entries, evidence has " + std::to_string(k));
  }
  double strength = 0.0;
  for (std::size_t j = 0; j < k; ++j) strength += evidence[j] + 1.0;
  const double log_s = std::log(strength);

  EdlResult r;
  r.grad_evidence.resize(k);
  double label_mass = 0.0;
  for (std::size_t j = 0; j < k; ++j) label_mass += one_hot[j];
  for (std::size_t j = 0; j < k; ++j) {
    const double alpha = evidence[j] + 1.0;
    if (one_hot[j] != 0.0) r.loss += one_hot[j] * (log_s - std::log(alpha));
    r.grad_evidence[j] = label_mass / strength - one_hot[j] / alpha;
  }
  return r;
}

AnnealingSchedule::AnnealingSchedule(double lambda0, int total_epochs)
    : lambda0_(lambda0), total_epochs_(total_epochs) {
  if (!(lambda0 > 0.0 && lambda0 < 1.0)) {
    throw std::invalid_argument("lambda0 must lie in (0, 1)");
  }
  if (total_epochs < 1) throw std::invalid_argument("total_epochs must be positive");
}

double AnnealingSchedule::at(int t) const {
  if (t < 0) throw std::invalid_argument("annealing epoch must be non-negative");
  if (t > total_epochs_) {
    std::clog << "warning: annealing epoch " << t << " exceeds T=" << total_epochs_
              << ", clamping lambda to 1\n";
    return 1.0;
  }
  if (t == total_epochs_) return 1.0;
  return lambda0_ * std::exp(-(std::log(lambda0_) / total_epochs_) * t);
}

double annealing_lambda(int t, const AnnealingSchedule& schedule) { return schedule.at(t); }

void LossWeights::validate() const {
  if (!(w_euc >= 0.0) || !(w_ced >= 0.0) || !(lambda_hsic >= 0.0)) {
    throw std::invalid_argument("loss weights must be non-negative");
  }
}

void BatchPrediction::add(std::size_t label, evidential::EvidenceVector evidence) {
  if (label >= evidence.num_classes()) {
    throw std::invalid_argument("label " + std::to_string(label) + " out of range for K=" +
                                std::to_string(evidence.num_classes()));
  }
  auto opinion = evidential::opinion_from_evidence(evidence);
  const auto prediction = evidential::predict(opinion);
  samples_.push_back(SamplePrediction{label, std::move(evidence), std::move(opinion), prediction,
                                      prediction.class_index == label});
}

BatchPrediction BatchPrediction::from_evidence(std::span<const std::size_t> labels,
                                               std::span<const std::vector<double>> evidence) {
  if (labels.size() != evidence.size()) {
    throw std::invalid_argument("labels and evidence rows differ in count");
  }
  BatchPrediction batch;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    batch.add(labels[i], evidential::EvidenceVector(evidence[i]));
  }
  return batch;
}

EucReduction parse_euc_reduction(std::string_view name) {
  if (name == "subset") return EucReduction::kSubsetMean;
  if (name == "batch") return EucReduction::kBatchMean;
  throw std::invalid_argument("unknown EUC reduction '" + std::string(name) +
                              "' (expected subset or batch)");
}

std::string_view to_string(EucReduction reduction) {
  return reduction == EucReduction::kBatchMean ? "batch" : "subset";
}

EucResult euc_loss_from_scores(std::span<const double> max_probs,
                               std::span<const double> uncertainties,
                               std::span<const bool> correct, double lambda_t,
                               EucReduction reduction) {
  const std::size_t n = max_probs.size();
  if (uncertainties.size() != n || correct.size() != n) {
    throw std::invalid_argument("euc_loss: input lengths differ");
  }
  std::size_t n_acc = 0;
  for (bool c : correct) n_acc += c ? 1 : 0;
  const std::size_t n_inacc = n - n_acc;
  const bool by_batch = reduction == EucReduction::kBatchMean;
  const double acc_div = static_cast<double>(by_batch ? n : n_acc);
  const double inacc_div = static_cast<double>(by_batch ? n : n_inacc);

  EucResult r;
  r.grad_prob.assign(n, 0.0);
  r.grad_uncertainty.assign(n, 0.0);
  double acc_sum = 0.0;
  double inacc_sum = 0.0;
  const double lo = kProbClamp;
  const double hi = 1.0 - kProbClamp;
  for (std::size_t i = 0; i < n; ++i) {
    const double p = std::clamp(max_probs[i], lo, hi);
    const double u = std::clamp(uncertainties[i], lo, hi);
    const bool p_free = max_probs[i] > lo && max_probs[i] < hi;
    const bool u_free = uncertainties[i] > lo && uncertainties[i] < hi;
    if (correct[i]) {
      const double scale = lambda_t / acc_div;
      acc_sum += p * std::log(1.0 - u);
      if (p_free) r.grad_prob[i] = -scale * std::log(1.0 - u);
      if (u_free) r.grad_uncertainty[i] = scale * p / (1.0 - u);
    } else {
      const double scale = (1.0 - lambda_t) / inacc_div;
      inacc_sum += (1.0 - p) * std::log(u);
      if (p_free) r.grad_prob[i] = scale * std::log(u);
      if (u_free) r.grad_uncertainty[i] = -scale * (1.0 - p) / u;
    }
  }
  if (n_acc > 0) r.loss -= lambda_t * acc_sum / acc_div;
  if (n_inacc > 0) r.loss -= (1.0 - lambda_t) * inacc_sum / inacc_div;
  return r;
}

EucResult euc_loss(const BatchPrediction& batch, double lambda_t, EucReduction reduction) {
  const std::size_t n = batch.size();
  std::vector<double> p(n);
  std::vector<double> u(n);
  // std::vector<bool> has no contiguous storage for span.
  auto correct = std::make_unique<bool[]>(n);
  for (std::size_t i = 0; i < n; ++i) {
    p[i] = batch[i].prediction.max_prob;
    u[i] = batch[i].prediction.uncertainty;
    correct[i] = batch[i].correct;
  }
  EucResult r = euc_loss_from_scores(p, u, std::span<const bool>(correct.get(), n), lambda_t,
                                     reduction);

  // Chain rule: p = alpha_j / S with j the argmax, u = K / S.
  r.grad_evidence.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& op = batch[i].opinion;
    const std::size_t k = op.num_classes();
    const double s = op.strength;
    const std::size_t j = batch[i].prediction.class_index;
    const double alpha_j = op.alpha[j];
    const double du = -static_cast<double>(k) / (s * s);
    auto& g = r.grad_evidence[i];
    g.assign(k, 0.0);
    for (std::size_t m = 0; m < k; ++m) {
      const double dp = ((m == j ? s : 0.0) - alpha_j) / (s * s);
      g[m] = r.grad_prob[i] * dp + r.grad_uncertainty[i] * du;
    }
  }
  return r;
}

double avu_utility(std::span<const bool> correct, std::span<const double> uncertainties,
                   double u_threshold) {
  if (correct.empty()) throw std::invalid_argument("avu_utility: empty batch");
  if (correct.size() != uncertainties.size()) {
    throw std::invalid_argument("avu_utility: input lengths differ");
  }
  std::size_t good = 0;
  for (std::size_t i = 0; i < correct.size(); ++i) {
    const bool certain = uncertainties[i] < u_threshold;
    if (correct[i] == certain) ++good;  // AC or IU
  }
  return static_cast<double>(good) / static_cast<double>(correct.size());
}

double avu_utility(const BatchPrediction& batch, double u_threshold) {
  if (batch.empty()) throw std::invalid_argument("avu_utility: empty batch");
  const std::size_t n = batch.size();
  auto correct = std::make_unique<bool[]>(n);
  std::vector<double> u(n);
  for (std::size_t i = 0; i < n; ++i) {
    correct[i] = batch[i].correct;
    u[i] = batch[i].prediction.uncertainty;
  }
  return avu_utility(std::span<const bool>(correct.get(), n), u, u_threshold);
}

double median_uncertainty(const BatchPrediction& batch) {
  if (batch.empty()) throw std::invalid_argument("median_uncertainty: empty batch");
  std::vector<double> u;
  u.reserve(batch.size());
  for (const auto& s : batch.samples()) u.push_back(s.prediction.uncertainty);
  std::sort(u.begin(), u.end());
  const std::size_t n = u.size();
  return n % 2 == 1 ? u[n / 2] : 0.5 * (u[n / 2 - 1] + u[n / 2]);
}

double total_loss(double edl, double euc, double ced, const LossWeights& weights) {
  if (!std::isfinite(edl) || !std::isfinite(euc) || !std::isfinite(ced)) {
    throw std::domain_error("non-finite loss component (edl=" + std::to_string(edl) +
                            ", euc=" + std::to_string(euc) + ", ced=" + std::to_string(ced) +
                            ")");
  }
  return edl + weights.w_euc * euc + weights.w_ced * ced;
}

std::vector<double> softmax(std::span<const double> logits) {
  const double m = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double z = 0.0;
  for (std::size_t k = 0; k < logits.size(); ++k) {
    p[k] = std::exp(logits[k] - m);
    z += p[k];
  }
  for (double& v : p) v /= z;
  return p;
}

SoftmaxResult softmax_cross_entropy(std::span<const double> logits, std::size_t label) {
  if (label >= logits.size()) throw std::invalid_argument("softmax label out of range");
  SoftmaxResult r;
  r.probs = softmax(logits);
  const double m = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double v : logits) z += std::exp(v - m);
  r.loss = std::log(z) + m - logits[label];
  r.grad_logits = r.probs;
  r.grad_logits[label] -= 1.0;
  return r;
}

}  // namespace osev::losses
