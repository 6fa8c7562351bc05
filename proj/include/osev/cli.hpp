#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "json.hpp"

namespace osev::cli {

// Exit codes shared by every command.
enum ExitCode : int {
  kOk = 0,
  kFailure = 1,        // usage, I/O or config errors; failed sweep runs
  kInvalidSpec = 2,    // generate-data
  kNonFiniteLoss = 3,  // train
  kDataMismatch = 4,   // eval
  kGradcheckFailed = 5,
};

// Runs one command line (argv[0] is the program name).
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// Metrics aggregated by sweep, in summary order.
const std::vector<std::string>& sweep_metrics();

// Pulls the sweep metrics out of one evaluation report.
nlohmann::json sweep_metric_values(const nlohmann::json& report);

struct SweepOptions {
  std::filesystem::path configs;  // directory of *.conf run configs
  std::size_t seeds = 1;
  std::filesystem::path out;
  std::size_t threads = 1;
};

// Runs every config x seed and writes summary.json and summary.csv. Seed
// index 0 uses the config seed unchanged; index s > 0 uses
// derive_seed(config seed, s). Returns the summary.
nlohmann::json run_sweep(const SweepOptions& options, std::ostream& err);

// Worker count from OSEV_THREADS (unset or invalid: hardware concurrency).
std::size_t sweep_threads_from_env();

}  // namespace osev::cli
