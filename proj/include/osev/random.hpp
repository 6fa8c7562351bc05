#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace osev {

// Seed derivation and distribution helpers.
//
// The engine is std::mt19937_64, whose output sequence is fixed by the
// standard. The standard distributions are not (libstdc++ and libc++ differ),
// so the conversions to uniform reals, normals and permutations are written
// out here to keep every artifact reproducible across toolchains.

std::uint64_t splitmix64(std::uint64_t x);

// Derives an independent stream seed from a master seed and an index.
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index);

// Derives a stream seed from a master seed and a stream name.
std::uint64_t derive_seed(std::uint64_t master, std::string_view stream);

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). n must be positive.
  std::size_t below(std::size_t n);

  // Standard normal via Box-Muller (one value per call, no caching).
  double normal();

  // Uniform random permutation of [0, n) by Fisher-Yates.
  std::vector<std::size_t> permutation(std::size_t n);

 private:
  std::mt19937_64 engine_;
};

}  // namespace osev
