#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "osev/config.hpp"
#include "osev/data.hpp"
#include "osev/debias.hpp"
#include "osev/metrics.hpp"

namespace osev::pipeline {

// Everything needed to reproduce one train + eval run.
struct RunConfig {
  std::filesystem::path data;  // dataset directory (manifest.json inside)

  std::size_t hidden = 16;
  std::size_t conv_layers = 2;
  std::size_t kernel_width = 5;
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  bool nesterov = false;
  int lr_step = 0;  // epochs between decays; 0 keeps lr constant
  double lr_gamma = 0.1;

  debias::HeadKind head = debias::HeadKind::kEvidential;
  evidential::EvidenceFunction evidence = evidential::EvidenceFunction::kExponential;
  double evidence_clamp = evidential::kDefaultExpClamp;

  bool use_euc = true;
  bool use_ced = true;
  losses::EucReduction euc_reduction = losses::EucReduction::kBatchMean;
  debias::TrainingMode mode;
  losses::LossWeights weights;
  double lambda0 = 0.01;
  bool verify_stop_gradients = false;

  metrics::EvaluationSettings eval;
  std::uint64_t seed = 0;

  void validate() const;
  // Canonical key = value text; parsing it back yields an equal config.
  std::string to_text() const;
  nlohmann::json to_json() const;

  // Relative `data` paths resolve against `base_dir`.
  static RunConfig from_config(const config::KeyValues& kv,
                               const std::filesystem::path& base_dir = {});
  static RunConfig load(const std::filesystem::path& path);
  static RunConfig from_json(const nlohmann::json& j);
};

debias::Architecture architecture_for(const RunConfig& config, const data::SyntheticSpec& spec);

struct EpochRecord {
  std::size_t epoch = 0;
  double edl = 0.0;
  double euc = 0.0;
  double ced = 0.0;
  double hsic_shuffled = 0.0;
  double hsic_static = 0.0;
  double total = 0.0;
  double lambda_t = 0.0;
  double lr = 0.0;
  double train_acc = 0.0;
};

std::string losses_csv(const std::vector<EpochRecord>& records);

struct TrainResult {
  debias::CedBranches branches;
  std::vector<EpochRecord> epochs;
};

// Thrown when training hits a non-finite loss; `what()` names the epoch and step.
class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using LogFn = std::function<void(const std::string&)>;

// Trains on dataset.train. `log` receives one progress line per epoch.
TrainResult train_model(const RunConfig& config, const data::Dataset& dataset,
                        const LogFn& log = {});

// Writes losses.csv, model.{bin,json}, model_stripped.{bin,json},
// config.txt and train.log (the only file with timestamps) under out_dir.
TrainResult train_to_directory(const RunConfig& config, const std::filesystem::path& out_dir);

void save_model(const debias::CedBranches& branches, const RunConfig& config,
                std::size_t num_known, const std::filesystem::path& stem);

struct LoadedModel {
  debias::CedBranches branches;
  RunConfig config;
  bool stripped = false;
};
LoadedModel load_model(const std::filesystem::path& path);

// Dataset and checkpoint disagree on the number of known classes or input channels.
class DataMismatch : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Scores every split with the f-branch.
metrics::ScoredSplits score_dataset(debias::CedBranches& branches, const data::Dataset& dataset);

struct EvalResult {
  metrics::ScoredSplits scores;
  metrics::ReportResult report;
};

// Report with config echo and seed embedded.
EvalResult evaluate(debias::CedBranches& branches, const RunConfig& config,
                    const data::Dataset& dataset);

// Writes <report>, <stem>_curve.csv and <stem>_scores.jsonl next to it.
EvalResult evaluate_to_files(const std::filesystem::path& checkpoint,
                             const std::filesystem::path& data_dir,
                             const std::filesystem::path& report_path);

void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

}  // namespace osev::pipeline
