#pragma once

#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace osev::metrics {

inline constexpr std::size_t kUnknown = std::numeric_limits<std::size_t>::max();

// One scored test sample. `label` is a known class index or kUnknown;
// `origin` is the dataset class id (distinguishes unknown classes).
struct OpenSetRecord {
  std::vector<double> probs;
  double score = 0.0;
  std::size_t label = kUnknown;
  std::size_t origin = 0;

  bool is_unknown() const { return label == kUnknown; }
};

// 1 - sqrt(2K / (2K + i)).
double openness(std::size_t num_known, std::size_t num_unknown);

// score > tau -> K (unknown), otherwise argmax of probs.
std::vector<std::size_t> open_predictions(std::span<const OpenSetRecord> records, double tau,
                                          std::size_t num_known);

// Labels in (K+1)-class space: kUnknown is mapped to K.
std::vector<std::size_t> open_labels(std::span<const OpenSetRecord> records,
                                     std::size_t num_known);

// Unweighted mean of per-class F1 over classes present in preds or labels.
double macro_f1(std::span<const std::size_t> preds, std::span<const std::size_t> labels,
                std::size_t num_classes);

double accuracy(std::span<const std::size_t> preds, std::span<const std::size_t> labels);

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // population standard deviation
};
MeanStd mean_std(std::span<const double> values);

struct OpennessPoint {
  std::size_t i = 0;
  double omega = 0.0;
  double f1_mean = 0.0;
  double f1_std = 0.0;
  std::vector<double> f1;  // one per selection
};

struct OpenMaf1 {
  std::vector<OpennessPoint> points;
  double value = 0.0;           // sum omega_i F1_i(mean) / sum omega_i
  double selection_std = 0.0;   // std over selections of the per-selection scalar
  std::string note;             // set when the sweep was truncated
};

struct CurveOptions {
  std::size_t num_selections = 10;
  std::size_t max_unknown = 0;  // 0: sweep up to the pool size
  std::uint64_t seed = 0;
};

// Sweeps i = 1..min(max_unknown, pool size). For every i, draws
// num_selections i-class subsets of the unknown pool (without replacement,
// seeded per (i, selection)) and scores the (K+1)-class macro-F1 of the known
// records plus the selected unknown records.
OpenMaf1 open_maf1_curve(std::span<const OpenSetRecord> known,
                         const std::vector<std::vector<OpenSetRecord>>& unknown_pool, double tau,
                         std::size_t num_known, const CurveOptions& options);

// Weighted mean sum(w f) / sum(w). Throws when the weights sum to zero.
double weighted_mean(std::span<const double> weights, std::span<const double> values);

// P(score_unknown > score_known) + 0.5 P(tie), exact over all pairs. Throws
// std::invalid_argument when either side is empty.
double roc_auc(std::span<const double> scores_known, std::span<const double> scores_unknown);

// Equal-width binned expected calibration error over [0, 1].
double ece(std::span<const double> confidences, std::span<const bool> correct,
           std::size_t num_bins = 15);

struct UnknownConfusion {
  std::size_t origin = 0;
  std::size_t count = 0;
  double rate = 0.0;             // fraction predicted as any known class
  std::size_t top_target = 0;    // most frequent known prediction
  double top_target_rate = 0.0;
};

struct Confusion {
  std::vector<std::vector<std::size_t>> counts;  // (K+1) x (K+1), row = true
  std::vector<std::vector<double>> normalized;   // rows sum to 1 (or 0 when empty)
  std::vector<UnknownConfusion> top_unknown;     // descending rate
};

// `origins` gives the dataset class of every sample; it ranks unknown classes
// by how often they are mistaken for a known class.
Confusion confusion_and_top_confusions(std::span<const std::size_t> preds,
                                       std::span<const std::size_t> labels,
                                       std::span<const std::size_t> origins,
                                       std::size_t num_known, std::size_t top_n = 5);

struct EvaluationSettings {
  double coverage = 0.95;
  std::size_t ece_bins = 15;
  std::size_t selections = 10;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
  static EvaluationSettings from_json(const nlohmann::json& j);
};

// All scored splits of one evaluation.
struct ScoredSplits {
  std::size_t num_known = 0;
  std::vector<OpenSetRecord> train;
  std::vector<OpenSetRecord> test_biased;
  std::vector<OpenSetRecord> test_unbiased;
  std::vector<OpenSetRecord> test_unknown;
};

struct ReportResult {
  nlohmann::json report;
  OpenMaf1 curve;
};

// Threshold from the train scores, then closed/unbiased accuracy, Open maF1
// (known = biased test split), open-set AUC, ECE, AvU and confusion.
ReportResult build_report(const ScoredSplits& splits, const EvaluationSettings& settings);

// Curve CSV with header i,omega,f1_mean,f1_std.
std::string curve_csv(const OpenMaf1& curve);

// JSON-lines score dump. Each record: {"split", "probs", "score", "label"
// (int or "unknown"), "class"}.
std::string score_dump(const ScoredSplits& splits);
ScoredSplits parse_score_dump(const std::string& text);

}  // namespace osev::metrics
