#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace covft {

using Rng = std::mt19937_64;

std::uint64_t splitmix64(std::uint64_t x);

/// Derives an independent seed from a parent seed and a label, e.g. derive_seed(run_seed, "init").
std::uint64_t derive_seed(std::uint64_t parent, std::string_view label);
std::uint64_t derive_seed(std::uint64_t parent, std::uint64_t a, std::uint64_t b = 0);

inline Rng make_rng(std::uint64_t seed) { return Rng(splitmix64(seed)); }

double normal(Rng& rng, double mean = 0.0, double stddev = 1.0);
double uniform(Rng& rng, double lo = 0.0, double hi = 1.0);
/// Uniform integer in [0, n).
std::size_t uniform_index(Rng& rng, std::size_t n);

}  // namespace covft
