#include "covft/rng.hpp"

#include <cmath>

namespace covft {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::uint64_t derive_seed(std::uint64_t parent, std::string_view label) {
    // FNV-1a over the label, folded into the parent.
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : label) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    return splitmix64(parent ^ splitmix64(h));
}

std::uint64_t derive_seed(std::uint64_t parent, std::uint64_t a, std::uint64_t b) {
    return splitmix64(splitmix64(parent ^ splitmix64(a + 0x632be59bd9b4e019ULL)) ^ b);
}

// Box-Muller and a 53-bit mantissa draw keep the stream identical across standard libraries.
double uniform(Rng& rng, double lo, double hi) {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    return lo + (hi - lo) * u;
}

double normal(Rng& rng, double mean, double stddev) {
    double u1 = uniform(rng);
    while (u1 <= 0.0) u1 = uniform(rng);
    const double u2 = uniform(rng);
    const double r = std::sqrt(-2.0 * std::log(u1));
    return mean + stddev * r * std::cos(6.283185307179586 * u2);
}

std::size_t uniform_index(Rng& rng, std::size_t n) {
    return static_cast<std::size_t>(uniform(rng) * static_cast<double>(n)) % n;
}

}  // namespace covft
