#include "osev/nn/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <vector>

namespace osev::nn {
namespace fs = std::filesystem;

fs::path checkpoint_stem(const fs::path& path) {
  if (path.extension() == ".bin" || path.extension() == ".json") {
    fs::path stem = path;
    return stem.replace_extension();
  }
  return path;
}

static fs::path with_suffix(const fs::path& stem, const char* suffix) {
  return fs::path(stem.string() + suffix);
}

void save_checkpoint(const fs::path& stem, std::span<const Parameter* const> params,
                     bool stripped, const nlohmann::json& metadata) {
  if (stem.has_parent_path()) fs::create_directories(stem.parent_path());
  nlohmann::json manifest;
  manifest["format"] = kCheckpointFormat;
  manifest["version"] = kCheckpointVersion;
  manifest["stripped"] = stripped;
  manifest["parameters"] = nlohmann::json::array();

  std::vector<char> payload;
  std::size_t offset = 0;
  for (const Parameter* p : params) {
    manifest["parameters"].push_back({{"name", p->name},
                                      {"shape", p->value.shape()},
                                      {"offset", offset},
                                      {"count", p->value.size()}});
    for (double v : p->value.values()) {
      const auto bits = std::bit_cast<std::uint64_t>(v);
      for (int byte = 0; byte < 8; ++byte) {
        payload.push_back(static_cast<char>((bits >> (8 * byte)) & 0xFFU));
      }
    }
    offset += p->value.size();
  }
  manifest["metadata"] = metadata;

  std::ofstream bin(with_suffix(stem, ".bin"), std::ios::binary | std::ios::trunc);
  if (!bin) throw std::runtime_error("cannot write " + with_suffix(stem, ".bin").string());
  bin.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  std::ofstream js(with_suffix(stem, ".json"), std::ios::trunc);
  if (!js) throw std::runtime_error("cannot write " + with_suffix(stem, ".json").string());
  js << manifest.dump(2) << "\n";
}

Checkpoint load_checkpoint(const fs::path& path) {
  const fs::path stem = checkpoint_stem(path);
  const fs::path json_path = with_suffix(stem, ".json");
  const fs::path bin_path = with_suffix(stem, ".bin");
  std::ifstream js(json_path);
  if (!js) throw std::runtime_error("cannot open checkpoint manifest " + json_path.string());
  nlohmann::json manifest;
  try {
    js >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("malformed checkpoint manifest " + json_path.string() + ": " +
                             e.what());
  }
  if (manifest.value("format", "") != kCheckpointFormat) {
    throw std::runtime_error(json_path.string() + " is not an osev checkpoint manifest");
  }
  std::ifstream bin(bin_path, std::ios::binary);
  if (!bin) throw std::runtime_error("cannot open checkpoint payload " + bin_path.string());
  const std::vector<char> payload((std::istreambuf_iterator<char>(bin)),
                                  std::istreambuf_iterator<char>());
  if (payload.size() % 8 != 0) {
    throw std::runtime_error(bin_path.string() + " is not a whole number of float64 values");
  }
  const std::size_t total = payload.size() / 8;

  Checkpoint ckpt;
  ckpt.stripped = manifest.at("stripped").get<bool>();
  ckpt.metadata = manifest.value("metadata", nlohmann::json::object());
  std::size_t expected_total = 0;
  for (const auto& entry : manifest.at("parameters")) {
    const auto name = entry.at("name").get<std::string>();
    const auto shape = entry.at("shape").get<Shape>();
    const auto offset = entry.at("offset").get<std::size_t>();
    const auto count = entry.at("count").get<std::size_t>();
    if (offset + count > total) {
      throw std::runtime_error("parameter " + name + " extends past the end of " +
                               bin_path.string());
    }
    std::vector<double> values(count);
    for (std::size_t i = 0; i < count; ++i) {
      std::uint64_t bits = 0;
      for (int byte = 0; byte < 8; ++byte) {
        bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(payload[(offset + i) * 8 + byte]))
                << (8 * byte);
      }
      values[i] = std::bit_cast<double>(bits);
    }
    ckpt.tensors.emplace(name, Tensor(shape, std::move(values)));
    expected_total += count;
  }
  if (expected_total != total) {
    throw std::runtime_error("checkpoint payload holds " + std::to_string(total) +
                             " values, manifest lists " + std::to_string(expected_total));
  }
  return ckpt;
}

void restore_parameters(const Checkpoint& ckpt, std::span<Parameter* const> params) {
  for (Parameter* p : params) {
    auto it = ckpt.tensors.find(p->name);
    if (it == ckpt.tensors.end()) {
      throw std::runtime_error("checkpoint has no parameter named " + p->name);
    }
    if (it->second.shape() != p->value.shape()) {
      throw std::runtime_error("parameter " + p->name + " has shape " +
                               shape_string(it->second.shape()) + " in checkpoint, model expects " +
                               shape_string(p->value.shape()));
    }
    p->value = it->second;
  }
}

}  // namespace osev::nn
