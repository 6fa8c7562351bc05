#include "osev/data.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "osev/random.hpp"

namespace osev::data {
namespace fs = std::filesystem;

std::vector<std::string> SyntheticSpec::problems() const {
  std::vector<std::string> out;
  const auto need = [&](bool ok, const std::string& msg) {
    if (!ok) out.push_back(msg);
  };
  need(known_classes >= 2, "known_classes: must be >= 2");
  need(unknown_classes >= 1, "unknown_classes: must be >= 1");
  need(train_per_class >= 1, "train_per_class: must be >= 1");
  need(test_per_class >= 1, "test_per_class: must be >= 1");
  need(dynamic_channels >= 1, "dynamic_channels: must be >= 1");
  need(channels > dynamic_channels,
       "channels: must exceed dynamic_channels (at least one background channel)");
  const std::size_t total = known_classes + unknown_classes;
  need(timesteps >= 2 * total + 2,
       "timesteps: must be >= 2 * (known_classes + unknown_classes) + 2 = " +
           std::to_string(2 * total + 2) + " so every class frequency is below Nyquist");
  need(bias_strength >= 0.0 && bias_strength <= 1.0, "bias_strength: must lie in [0, 1]");
  need(std::isfinite(noise_sigma) && noise_sigma >= 0.0, "noise_sigma: must be finite and >= 0");
  need(std::isfinite(amplitude) && amplitude > 0.0, "amplitude: must be finite and > 0");
  need(std::isfinite(scene_scale) && scene_scale > 0.0, "scene_scale: must be finite and > 0");
  return out;
}

void SyntheticSpec::validate() const {
  const auto p = problems();
  if (p.empty()) return;
  std::string msg = "invalid dataset spec:";
  for (const auto& line : p) msg += "\n  " + line;
  throw InvalidSpec(msg);
}

nlohmann::json SyntheticSpec::to_json() const {
  return {{"known_classes", known_classes},   {"unknown_classes", unknown_classes},
          {"train_per_class", train_per_class}, {"test_per_class", test_per_class},
          {"timesteps", timesteps},           {"channels", channels},
          {"dynamic_channels", dynamic_channels}, {"bias_strength", bias_strength},
          {"noise_sigma", noise_sigma},       {"amplitude", amplitude},
          {"scene_scale", scene_scale},       {"seed", seed}};
}

SyntheticSpec SyntheticSpec::from_json(const nlohmann::json& j) {
  SyntheticSpec s;
  s.known_classes = j.at("known_classes").get<std::size_t>();
  s.unknown_classes = j.at("unknown_classes").get<std::size_t>();
  s.train_per_class = j.at("train_per_class").get<std::size_t>();
  s.test_per_class = j.at("test_per_class").get<std::size_t>();
  s.timesteps = j.at("timesteps").get<std::size_t>();
  s.channels = j.at("channels").get<std::size_t>();
  s.dynamic_channels = j.at("dynamic_channels").get<std::size_t>();
  s.bias_strength = j.at("bias_strength").get<double>();
  s.noise_sigma = j.at("noise_sigma").get<double>();
  s.amplitude = j.at("amplitude").get<double>();
  s.scene_scale = j.at("scene_scale").get<double>();
  s.seed = j.at("seed").get<std::uint64_t>();
  return s;
}

SyntheticSpec SyntheticSpec::from_config(const config::KeyValues& kv) {
  SyntheticSpec s;
  s.known_classes = kv.get_size("known_classes", s.known_classes);
  s.unknown_classes = kv.get_size("unknown_classes", s.unknown_classes);
  s.train_per_class = kv.get_size("train_per_class", s.train_per_class);
  s.test_per_class = kv.get_size("test_per_class", s.test_per_class);
  s.timesteps = kv.get_size("timesteps", s.timesteps);
  s.channels = kv.get_size("channels", s.channels);
  s.dynamic_channels = kv.get_size("dynamic_channels", s.dynamic_channels);
  s.bias_strength = kv.get_double("bias_strength", s.bias_strength);
  s.noise_sigma = kv.get_double("noise_sigma", s.noise_sigma);
  s.amplitude = kv.get_double("amplitude", s.amplitude);
  s.scene_scale = kv.get_double("scene_scale", s.scene_scale);
  s.seed = kv.get_u64("seed", s.seed);
  kv.require_all_used();
  return s;
}

std::string_view split_name(SplitKind kind) {
  switch (kind) {
    case SplitKind::kTrain: return "train";
    case SplitKind::kTestBiased: return "test_biased";
    case SplitKind::kTestUnbiased: return "test_unbiased";
    case SplitKind::kTestUnknown: return "test_unknown";
  }
  return "?";
}

FrequencyPlan frequency_plan(const SyntheticSpec& spec) {
  const std::size_t total = spec.known_classes + spec.unknown_classes;
  const std::size_t spacing = std::max<std::size_t>(1, (spec.timesteps / 2 - 1) / total);
  FrequencyPlan plan;
  for (std::size_t j = 0; j < total; ++j) {
    const double f = static_cast<double>((j + 1) * spacing);
    // Interleave while both sets still need slots, then append the remainder.
    const std::size_t pairs = std::min(spec.known_classes, spec.unknown_classes);
    bool known = false;
    if (j < 2 * pairs) {
      known = j % 2 == 0;
    } else {
      known = spec.known_classes > spec.unknown_classes;
    }
    (known ? plan.known : plan.unknown).push_back(f);
  }
  return plan;
}

std::vector<std::vector<double>> scene_offsets(const SyntheticSpec& spec) {
  const std::size_t scenes = spec.known_classes;
  const std::size_t bg = spec.background_channels();
  std::vector<std::vector<double>> out(scenes, std::vector<double>(bg, 0.0));
  for (std::size_t s = 0; s < scenes; ++s) {
    const double theta = 2.0 * std::numbers::pi * static_cast<double>(s) /
                         static_cast<double>(scenes);
    for (std::size_t b = 0; b < bg; ++b) {
      if (bg == 1) {
        out[s][b] = spec.scene_scale *
                    (2.0 * static_cast<double>(s) / static_cast<double>(scenes - 1) - 1.0);
        continue;
      }
      const double harmonic = static_cast<double>(b / 2 + 1);
      out[s][b] = spec.scene_scale *
                  (b % 2 == 0 ? std::cos(harmonic * theta) : std::sin(harmonic * theta));
    }
  }
  return out;
}

DatasetSplit generate_split(const SyntheticSpec& spec, SplitKind kind) {
  spec.validate();
  const auto plan = frequency_plan(spec);
  const auto offsets = scene_offsets(spec);
  const std::size_t k = spec.known_classes;
  const std::size_t c_dyn = spec.dynamic_channels;
  const std::size_t t_len = spec.timesteps;
  Rng rng(derive_seed(spec.seed, split_name(kind)));

  DatasetSplit split;
  split.kind = kind;
  split.channels = spec.channels;
  split.timesteps = t_len;

  const bool unknown = kind == SplitKind::kTestUnknown;
  const bool biased = kind == SplitKind::kTrain || kind == SplitKind::kTestBiased;
  const std::size_t num_classes = unknown ? spec.unknown_classes : k;
  const std::size_t per_class = kind == SplitKind::kTrain ? spec.train_per_class
                                                          : spec.test_per_class;
  for (std::size_t c = 0; c < num_classes; ++c) {
    const double freq = unknown ? plan.unknown[c] : plan.known[c];
    for (std::size_t n = 0; n < per_class; ++n) {
      Sample s;
      s.id = split.samples.size();
      s.label = unknown ? k + c : c;
      if (biased) {
        if (rng.uniform() < spec.bias_strength) {
          s.scene = c;
        } else {
          s.scene = rng.below(k - 1);
          if (s.scene >= c) ++s.scene;
        }
      } else {
        s.scene = rng.below(k);
      }
      const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
      s.values.resize(spec.channels * t_len);
      for (std::size_t ch = 0; ch < spec.channels; ++ch) {
        for (std::size_t t = 0; t < t_len; ++t) {
          double v = 0.0;
          if (ch < c_dyn) {
            v = spec.amplitude *
                std::sin(2.0 * std::numbers::pi * freq * static_cast<double>(t) /
                             static_cast<double>(t_len) +
                         phase + static_cast<double>(ch) * std::numbers::pi / 2.0);
          } else {
            v = offsets[s.scene][ch - c_dyn];
          }
          if (spec.noise_sigma > 0.0) v += spec.noise_sigma * rng.normal();
          s.values[ch * t_len + t] = v;
        }
      }
      split.samples.push_back(std::move(s));
    }
  }
  return split;
}

Dataset generate(const SyntheticSpec& spec) {
  spec.validate();
  Dataset d;
  d.spec = spec;
  d.train = generate_split(spec, SplitKind::kTrain);
  d.test_biased = generate_split(spec, SplitKind::kTestBiased);
  d.test_unbiased = generate_split(spec, SplitKind::kTestUnbiased);
  d.test_unknown = generate_split(spec, SplitKind::kTestUnknown);
  return d;
}

const DatasetSplit& Dataset::split(SplitKind kind) const {
  switch (kind) {
    case SplitKind::kTrain: return train;
    case SplitKind::kTestBiased: return test_biased;
    case SplitKind::kTestUnbiased: return test_unbiased;
    case SplitKind::kTestUnknown: return test_unknown;
  }
  return train;
}

nlohmann::json Dataset::manifest() const {
  const auto plan = frequency_plan(spec);
  nlohmann::json files = nlohmann::json::object();
  nlohmann::json counts = nlohmann::json::object();
  for (SplitKind kind : kAllSplits) {
    const std::string name(split_name(kind));
    files[name] = name + ".csv";
    counts[name] = split(kind).samples.size();
  }
  return {{"format", "osev-synthetic"},
          {"version", 1},
          {"spec", spec.to_json()},
          {"frequencies", {{"known", plan.known}, {"unknown", plan.unknown}}},
          {"scene_offsets", scene_offsets(spec)},
          {"files", files},
          {"counts", counts}};
}

// ---------------------------------------------------------------------------

namespace {

void append_double(std::string& out, double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  out.append(buf, res.ptr);
}

std::string header(std::size_t values) {
  std::string h = "id,class,scene";
  for (std::size_t i = 0; i < values; ++i) h += ",v" + std::to_string(i);
  return h;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

}  // namespace

std::string to_csv(const DatasetSplit& split) {
  std::string out = header(split.channels * split.timesteps);
  out += '\n';
  for (const auto& s : split.samples) {
    out += std::to_string(s.id) + ',' + std::to_string(s.label) + ',' + std::to_string(s.scene);
    for (double v : s.values) {
      out += ',';
      append_double(out, v);
    }
    out += '\n';
  }
  return out;
}

void save_split(const DatasetSplit& split, const fs::path& path) {
  write_file(path, to_csv(split));
}

DatasetSplit parse_csv(const std::string& text, SplitKind kind, std::size_t channels,
                       std::size_t timesteps, const std::string& source) {
  DatasetSplit split;
  split.kind = kind;
  split.channels = channels;
  split.timesteps = timesteps;
  const std::size_t n_values = channels * timesteps;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  const auto fail = [&](const std::string& what) {
    throw std::runtime_error(source + ":" + std::to_string(line_no) + ": " + what);
  };
  if (!std::getline(in, line)) {
    line_no = 1;
    fail("missing header");
  }
  ++line_no;
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != header(n_values)) {
    fail("header does not match id,class,scene,v0..v" + std::to_string(n_values - 1));
  }
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string_view> fields;
    std::string_view rest(line);
    for (;;) {
      const auto comma = rest.find(',');
      fields.push_back(rest.substr(0, comma));
      if (comma == std::string_view::npos) break;
      rest.remove_prefix(comma + 1);
    }
    if (fields.size() != 3 + n_values) {
      fail("expected " + std::to_string(3 + n_values) + " fields, found " +
           std::to_string(fields.size()));
    }
    const auto parse = [&](std::size_t col, auto& out) {
      const std::string_view f = fields[col];
      const auto [q, ec] = std::from_chars(f.data(), f.data() + f.size(), out);
      if (f.empty() || ec != std::errc() || q != f.data() + f.size()) {
        fail("bad value in column " + std::to_string(col + 1));
      }
    };
    Sample s;
    parse(0, s.id);
    parse(1, s.label);
    parse(2, s.scene);
    s.values.resize(n_values);
    for (std::size_t i = 0; i < n_values; ++i) parse(3 + i, s.values[i]);
    split.samples.push_back(std::move(s));
  }
  return split;
}

DatasetSplit load_split(const fs::path& path, SplitKind kind, std::size_t channels,
                        std::size_t timesteps) {
  return parse_csv(read_file(path), kind, channels, timesteps, path.string());
}

void save_dataset(const Dataset& dataset, const fs::path& dir) {
  fs::create_directories(dir);
  for (SplitKind kind : kAllSplits) {
    save_split(dataset.split(kind), dir / (std::string(split_name(kind)) + ".csv"));
  }
  write_file(dir / "manifest.json", dataset.manifest().dump(2) + "\n");
}

Dataset load_dataset(const fs::path& dir) {
  const fs::path manifest_path = dir / "manifest.json";
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(read_file(manifest_path));
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("malformed manifest " + manifest_path.string() + ": " + e.what());
  }
  if (m.value("format", "") != "osev-synthetic") {
    throw std::runtime_error(manifest_path.string() + " is not a dataset manifest");
  }
  Dataset d;
  d.spec = SyntheticSpec::from_json(m.at("spec"));
  d.spec.validate();
  auto load = [&](SplitKind kind) {
    const auto file = m.at("files").at(std::string(split_name(kind))).get<std::string>();
    return load_split(dir / file, kind, d.spec.channels, d.spec.timesteps);
  };
  d.train = load(SplitKind::kTrain);
  d.test_biased = load(SplitKind::kTestBiased);
  d.test_unbiased = load(SplitKind::kTestUnbiased);
  d.test_unknown = load(SplitKind::kTestUnknown);
  return d;
}

nn::Tensor to_tensor(const DatasetSplit& split, std::span<const std::size_t> indices) {
  nn::Tensor x({indices.size(), split.channels, split.timesteps});
  const std::size_t stride = split.channels * split.timesteps;
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const auto& v = split.samples.at(indices[b]).values;
    std::copy(v.begin(), v.end(), x.values().begin() + static_cast<std::ptrdiff_t>(b * stride));
  }
  return x;
}

nn::Tensor to_tensor(const DatasetSplit& split) {
  std::vector<std::size_t> all(split.samples.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return to_tensor(split, all);
}

}  // namespace osev::data
