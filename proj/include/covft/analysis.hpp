#pragma once

// Diagnostics over run artifacts: encoder parameter divergence, gradient
// alignment, k-means / PCA of context vectors and routing-context correlation.

#include "covft/vft.hpp"

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace covft {

using Matrix = std::vector<std::vector<double>>;

/// Per-group Euclidean distance; groups are "embed" (patch, position, prompts) and "block<i>".
struct BlockDistances {
    std::vector<std::string> names;
    std::vector<double> values;
    double total = 0.0;
};

/// Throws InputError when the checkpoints do not hold the same tensors.
BlockDistances encoder_l2_distance(const EncoderCheckpoint& a, const EncoderCheckpoint& b);

/// Normalised mean of the normalised gradients (all-zero gradients are skipped).
/// Needs at least 2 snapshots; a vanishing mean throws DegenerateInputError.
std::vector<double> dominant_direction(const Matrix& grads);

struct CosineSeries {
    std::vector<double> series;
    double mean = 0.0;
    double stddev = 0.0;  // population
};
CosineSeries grad_cosine_series(const Matrix& grads);

struct KMeansResult {
    std::vector<std::size_t> assignments;
    Matrix centroids;
    std::vector<double> inertia_history;  // after every assignment step
    std::size_t iterations = 0;
    bool converged = false;
    double inertia() const { return inertia_history.empty() ? 0.0 : inertia_history.back(); }
};

struct KMeansOptions {
    std::size_t max_iter = 300;
    double tol = 1e-6;
    bool parallel = true;
};

/// Lloyd's algorithm from a seeded k-means++ start. Throws InputError when k > n or k == 0.
KMeansResult kmeans(const Matrix& data, std::size_t k, std::uint64_t seed, const KMeansOptions& opts = {});

struct PcaResult {
    Matrix coords;                   // [n][2]
    std::array<std::vector<double>, 2> axes;
    std::array<double, 2> variance{};
    std::vector<double> mean;
};
/// Mean-centred projection onto the top two covariance eigenvectors.
PcaResult pca_2d(const Matrix& data);

struct SimilarityLift {
    double intra = 0.0;
    double inter = 0.0;
    double lift_pct = 0.0;  // 100 * (intra - inter) / |inter|
};
/// Mean pairwise cosine of `features` within vs. across clusters.
SimilarityLift intra_inter_similarity(std::span<const std::size_t> assignments, const Matrix& features);

/// Indices of the `per_cluster` points nearest each centroid, nearest first.
std::vector<std::vector<std::size_t>> cluster_exemplars(const Matrix& data, const KMeansResult& km,
                                                        std::size_t per_cluster = 4);

double pearson(std::span<const double> x, std::span<const double> y);
double spearman(std::span<const double> x, std::span<const double> y);

struct PairCorrelation {
    double r = 0.0;
    std::vector<double> context_cos;
    std::vector<double> routing_cos;
};
/// Pearson r between cos(c_i, c_j) and cos(routing_i, routing_j) over `n_pairs`
/// seeded pairs i != j. With `shuffle`, routing rows are permuted first (null baseline).
PairCorrelation routing_context_correlation(const Matrix& contexts, const Matrix& routing, std::size_t n_pairs,
                                            std::uint64_t seed, bool shuffle = false);

}  // namespace covft
