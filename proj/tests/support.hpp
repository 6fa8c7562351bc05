#pragma once

// Hand-rolled property-test helpers: generators draw from a seeded Rng, and
// for_all reports the failing case index and seed so it can be replayed.

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <string>
#include <vector>

#include "doctest.h"
#include "osev/random.hpp"

namespace testing {

inline std::uint64_t base_seed() {
  const char* s = std::getenv("OSEV_TEST_SEED");
  return s == nullptr ? 20240531ULL : std::strtoull(s, nullptr, 10);
}

template <typename Property>
void for_all(const char* name, std::size_t cases, Property property) {
  for (std::size_t i = 0; i < cases; ++i) {
    const std::uint64_t seed = osev::derive_seed(osev::derive_seed(base_seed(), name), i);
    osev::Rng rng(seed);
    INFO(name << " case " << i << " seed " << seed);
    property(rng);
  }
}

inline std::vector<double> gen_evidence(osev::Rng& rng, std::size_t k) {
  std::vector<double> e(k);
  for (double& v : e) {
    // Mix of zeros, small and very large evidence.
    const double pick = rng.uniform();
    v = pick < 0.15 ? 0.0 : (pick < 0.9 ? rng.uniform(0.0, 10.0) : rng.uniform(0.0, 1e4));
  }
  return e;
}

inline std::vector<double> gen_normals(osev::Rng& rng, std::size_t n, double scale = 1.0) {
  std::vector<double> v(n);
  for (double& x : v) x = scale * rng.normal();
  return v;
}

// Scratch directory under the system temp dir, emptied on creation.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("osev_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline std::filesystem::path source_dir() {
  const char* s = std::getenv("OSEV_SOURCE_DIR");
  return s == nullptr ? std::filesystem::current_path() : std::filesystem::path(s);
}

}  // namespace testing
