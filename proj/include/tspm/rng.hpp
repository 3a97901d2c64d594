// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace tspm {

std::uint64_t splitmix64(std::uint64_t x);
// FNV-1a, used to key child streams by name.
std::uint64_t hash_string(std::string_view s);

// Seeded 64-bit generator. `split` derives an independent child stream from
// a tag, so each component draws from its own sequence regardless of how
// much randomness its siblings consume.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(splitmix64(seed)) {}

  Rng split(std::string_view tag) const { return Rng(splitmix64(seed_ ^ hash_string(tag))); }
  Rng split(std::uint64_t index) const { return Rng(splitmix64(seed_ + 0x9E3779B97F4A7C15ULL * (index + 1))); }

  std::uint64_t seed() const { return seed_; }
  std::mt19937_64& engine() { return engine_; }

  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
  double normal() { return std::normal_distribution<double>(0.0, 1.0)(engine_); }
  // Uniform in [0, n).
  std::size_t index(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_); }
  // k distinct values drawn from [lo, hi), returned ascending.
  std::vector<std::size_t> distinct(std::size_t k, std::size_t lo, std::size_t hi);
  // Random unit vector of the given width.
  std::vector<float> unit_vector(std::size_t dim);

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

}  // namespace tspm
