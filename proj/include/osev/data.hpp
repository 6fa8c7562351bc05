#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "osev/config.hpp"
#include "osev/nn/tensor.hpp"

namespace osev::data {

// Parameters of the synthetic generator. Class identity lives in the
// frequency of a sinusoid on the dynamic channels; the static "scene" lives in
// a constant offset on the background channels.
struct SyntheticSpec {
  std::size_t known_classes = 5;
  std::size_t unknown_classes = 5;
  std::size_t train_per_class = 60;
  std::size_t test_per_class = 40;
  std::size_t timesteps = 32;
  std::size_t channels = 4;
  std::size_t dynamic_channels = 2;
  double bias_strength = 0.95;  // P(scene == class) in the biased splits
  double noise_sigma = 0.1;
  double amplitude = 1.0;       // sinusoid amplitude
  double scene_scale = 1.0;     // radius of the scene offsets
  std::uint64_t seed = 0;

  std::size_t background_channels() const { return channels - dynamic_channels; }
  // Empty when valid; otherwise one "field: problem" line per violation.
  std::vector<std::string> problems() const;
  // Throws InvalidSpec listing every problem.
  void validate() const;

  nlohmann::json to_json() const;
  static SyntheticSpec from_json(const nlohmann::json& j);
  // Reads the key = value format; unknown keys are rejected.
  static SyntheticSpec from_config(const config::KeyValues& kv);
};

class InvalidSpec : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class SplitKind { kTrain, kTestBiased, kTestUnbiased, kTestUnknown };

inline constexpr std::array<SplitKind, 4> kAllSplits = {
    SplitKind::kTrain, SplitKind::kTestBiased, SplitKind::kTestUnbiased, SplitKind::kTestUnknown};

std::string_view split_name(SplitKind kind);  // "train", "test_biased", ...

struct Sample {
  std::size_t id = 0;
  std::size_t label = 0;   // dataset class id; unknown classes are K..K+U-1
  std::size_t scene = 0;
  std::vector<double> values;  // C x T, channel-major

  bool operator==(const Sample&) const = default;
};

struct DatasetSplit {
  SplitKind kind = SplitKind::kTrain;
  std::size_t channels = 0;
  std::size_t timesteps = 0;
  std::vector<Sample> samples;

  bool operator==(const DatasetSplit&) const = default;
};

// Cycles per sequence for each class; known classes take the even slots and
// unknown classes the odd slots of an evenly spaced grid, so the two sets are
// disjoint and interleaved.
struct FrequencyPlan {
  std::vector<double> known;
  std::vector<double> unknown;
};
FrequencyPlan frequency_plan(const SyntheticSpec& spec);

// Per-scene background offsets (scene x background channel).
std::vector<std::vector<double>> scene_offsets(const SyntheticSpec& spec);

struct Dataset {
  SyntheticSpec spec;
  DatasetSplit train;
  DatasetSplit test_biased;
  DatasetSplit test_unbiased;
  DatasetSplit test_unknown;

  const DatasetSplit& split(SplitKind kind) const;
  nlohmann::json manifest() const;
};

Dataset generate(const SyntheticSpec& spec);
DatasetSplit generate_split(const SyntheticSpec& spec, SplitKind kind);

// CSV: header "id,class,scene,v0,...,v{C*T-1}", one row per sample, values
// in shortest round-trip decimal form.
std::string to_csv(const DatasetSplit& split);
void save_split(const DatasetSplit& split, const std::filesystem::path& path);
// Throws std::runtime_error naming the line on malformed input.
DatasetSplit parse_csv(const std::string& text, SplitKind kind, std::size_t channels,
                       std::size_t timesteps, const std::string& source = "<csv>");
DatasetSplit load_split(const std::filesystem::path& path, SplitKind kind, std::size_t channels,
                        std::size_t timesteps);

// Writes the four split CSVs and manifest.json, creating `dir` if needed.
void save_dataset(const Dataset& dataset, const std::filesystem::path& dir);
// Reads manifest.json and the split files it lists.
Dataset load_dataset(const std::filesystem::path& dir);

// Gathers samples into a B x C x T tensor.
nn::Tensor to_tensor(const DatasetSplit& split, std::span<const std::size_t> indices);
nn::Tensor to_tensor(const DatasetSplit& split);

}  // namespace osev::data
