#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "osev/evidential.hpp"
#include "osev/losses.hpp"

namespace osev::checks {

// Finite-difference checks over every differentiable piece: each layer type,
// edl_loss, euc_loss, HSIC, both CED objectives and the composed model.
struct SuiteOptions {
  std::size_t instances = 20;  // random instances per case
  std::uint64_t seed = 0;
  double eps = 1e-5;
  double tolerance = 1e-4;
  evidential::EvidenceFunction evidence = evidential::EvidenceFunction::kExponential;
  double exp_clamp = evidential::kDefaultExpClamp;
  losses::LossWeights weights;
  losses::EucReduction euc_reduction = losses::EucReduction::kBatchMean;
  // Negative control: every objective gains a term whose gradient is not
  // reported, so every case must fail.
  bool inject_bug = false;
};

struct CaseResult {
  std::string name;
  std::size_t instances = 0;
  std::size_t checked = 0;   // coordinates compared
  std::size_t skipped = 0;   // coordinates straddling a kink
  double max_rel_error = 0.0;
  std::vector<std::string> failing;  // "<instance>:<parameter>"
  double tolerance = 1e-4;

  bool passed() const { return max_rel_error < tolerance && failing.empty(); }
};

struct SuiteResult {
  std::vector<CaseResult> cases;

  bool passed() const;
  nlohmann::json to_json() const;
};

std::vector<std::string> case_names();

// Runs the named cases (all when `only` is empty). Unknown names throw.
SuiteResult run_suite(const SuiteOptions& options, const std::vector<std::string>& only = {});

}  // namespace osev::checks
