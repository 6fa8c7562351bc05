#pragma once

#include <cstddef>
#include <span>
#include <string_view>
#include <vector>

#include "osev/evidential.hpp"

namespace osev::losses {

// Clamp applied to p and u before logarithms in the calibration loss.
inline constexpr double kProbClamp = 1e-7;

struct EdlResult {
  double loss = 0.0;
  std::vector<double> grad_evidence;
};

// Closed-form Dirichlet-categorical negative log-likelihood for one sample:
//   loss = sum_k y_k (ln S - ln(e_k + 1)),  d loss / d e_j = 1/S - y_j/(e_j + 1).
EdlResult edl_loss(std::span<const double> one_hot, const evidential::EvidenceVector& evidence);

// Annealing factor lambda_t = lambda0 * exp(-(ln lambda0 / T) t), rising from
// lambda0 at t = 0 to 1 at t = T.
class AnnealingSchedule {
 public:
  AnnealingSchedule(double lambda0, int total_epochs);

  double lambda0() const { return lambda0_; }
  int total_epochs() const { return total_epochs_; }

  // t > T clamps to 1.0 and warns on stderr. Negative t is rejected.
  double at(int t) const;

 private:
  double lambda0_;
  int total_epochs_;
};

double annealing_lambda(int t, const AnnealingSchedule& schedule);

struct LossWeights {
  double w_euc = 1.0;
  double w_ced = 0.1;
  double lambda_hsic = 1.0;

  void validate() const;
};

// One sample of a batch as seen by the calibration loss.
struct SamplePrediction {
  std::size_t label = 0;
  evidential::EvidenceVector evidence;
  evidential::DirichletOpinion opinion;
  evidential::Prediction prediction;
  bool correct = false;
};

class BatchPrediction {
 public:
  BatchPrediction() = default;

  // Rows of `evidence` are per-sample evidence vectors; labels index classes.
  static BatchPrediction from_evidence(std::span<const std::size_t> labels,
                                       std::span<const std::vector<double>> evidence);

  void add(std::size_t label, evidential::EvidenceVector evidence);

  std::size_t size() const { return samples_.size(); }
  bool empty() const { return samples_.empty(); }
  const SamplePrediction& operator[](std::size_t i) const { return samples_[i]; }
  const std::vector<SamplePrediction>& samples() const { return samples_; }

 private:
  std::vector<SamplePrediction> samples_;
};

struct EucResult {
  double loss = 0.0;
  // Per-sample derivatives with respect to the max probability and the
  // uncertainty, and the chained derivative with respect to evidence.
  std::vector<double> grad_prob;
  std::vector<double> grad_uncertainty;
  std::vector<std::vector<double>> grad_evidence;
};

// How the two subset sums are normalized. kSubsetMean divides each sum by its
// subset size; kBatchMean divides both by the batch size, which keeps the
// per-sample weight equal to that of the batch-mean EDL term.
enum class EucReduction { kSubsetMean, kBatchMean };

EucReduction parse_euc_reduction(std::string_view name);  // "subset" or "batch"
std::string_view to_string(EucReduction reduction);

// Evidential uncertainty calibration loss (shown with subset means):
//   -lambda * mean_{accurate} p ln(1 - u) - (1 - lambda) * mean_{inaccurate} (1 - p) ln u
// p is the maximum class probability. Empty subsets contribute 0.
EucResult euc_loss(const BatchPrediction& batch, double lambda_t,
                   EucReduction reduction = EucReduction::kSubsetMean);

// Evaluates the calibration loss on explicit (p, u, correct) triples. Used by
// euc_loss and handy for hand-built cases.
EucResult euc_loss_from_scores(std::span<const double> max_probs,
                               std::span<const double> uncertainties,
                               std::span<const bool> correct, double lambda_t,
                               EucReduction reduction = EucReduction::kSubsetMean);

// Accuracy-versus-uncertainty utility (n_AC + n_IU) / n, with "certain"
// meaning u < u_threshold. Throws on an empty batch.
double avu_utility(const BatchPrediction& batch, double u_threshold);
double avu_utility(std::span<const bool> correct, std::span<const double> uncertainties,
                   double u_threshold);

// Median of the batch uncertainties; the default AvU threshold.
double median_uncertainty(const BatchPrediction& batch);

// edl + w_euc * euc + w_ced * ced. Throws std::domain_error on a non-finite component.
double total_loss(double edl, double euc, double ced, const LossWeights& weights);

struct SoftmaxResult {
  double loss = 0.0;
  std::vector<double> probs;
  std::vector<double> grad_logits;
};

// Cross-entropy on softmax probabilities; the confidence baseline's loss.
SoftmaxResult softmax_cross_entropy(std::span<const double> logits, std::size_t label);

std::vector<double> softmax(std::span<const double> logits);

}  // namespace osev::losses
