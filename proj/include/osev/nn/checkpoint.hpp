#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <span>
#include <string>

#include "json.hpp"
#include "osev/nn/tensor.hpp"

namespace osev::nn {

// A checkpoint is a pair of files sharing a stem:
//
//   <stem>.bin   concatenated parameter values, IEEE-754 binary64,
//                little-endian, in manifest order, no header or padding
//   <stem>.json  {"format": "osev-checkpoint", "version": 1,
//                 "stripped": bool,
//                 "parameters": [{"name", "shape", "offset", "count"}...],
//                 "metadata": {...}}
//
// offset/count are in elements (8-byte units) into the .bin file.
inline constexpr const char* kCheckpointFormat = "osev-checkpoint";
inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  bool stripped = false;
  nlohmann::json metadata = nlohmann::json::object();
  std::map<std::string, Tensor> tensors;
};

// Resolves "<stem>", "<stem>.bin" or "<stem>.json" to the stem path.
std::filesystem::path checkpoint_stem(const std::filesystem::path& path);

void save_checkpoint(const std::filesystem::path& stem, std::span<const Parameter* const> params,
                     bool stripped, const nlohmann::json& metadata);

// Throws std::runtime_error on missing files, a malformed manifest or a size
// mismatch between manifest and payload.
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Copies tensors into matching parameters by name. Throws when a parameter is
// missing or its shape differs.
void restore_parameters(const Checkpoint& ckpt, std::span<Parameter* const> params);

}  // namespace osev::nn
