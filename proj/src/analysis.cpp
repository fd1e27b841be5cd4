#include "covft/analysis.hpp"

#include "covft/error.hpp"
#include "covft/rng.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

namespace covft {

namespace {

std::string distance_group(const std::string& name) {
    // "enc.block12.attn.q.weight" -> "block12"; everything else outside blocks is the embedding.
    if (name.starts_with("enc.block")) return name.substr(4, name.find('.', 4) - 4);
    return "embed";
}

std::size_t block_number(const std::string& group) {
    return group == "embed" ? 0 : 1 + std::stoul(group.substr(5));
}

double sq_dist(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

void require_rows(const Matrix& m, const char* what) {
    if (m.empty()) throw InputError(std::string(what) + ": no vectors");
    const std::size_t d = m[0].size();
    for (const auto& r : m)
        if (r.size() != d) throw InputError(std::string(what) + ": ragged input");
}

}  // namespace

BlockDistances encoder_l2_distance(const EncoderCheckpoint& a, const EncoderCheckpoint& b) {
    if (a.params.size() != b.params.size())
        throw InputError("encoder_l2_distance: checkpoints hold " + std::to_string(a.params.size()) + " vs " +
                         std::to_string(b.params.size()) + " tensors");
    std::map<std::size_t, std::pair<std::string, double>> groups;
    double total = 0.0;
    for (std::size_t i = 0; i < a.params.size(); ++i) {
        const auto& [na, ta] = a.params[i];
        const auto& [nb, tb] = b.params[i];
        if (na != nb || ta.shape != tb.shape)
            throw InputError("encoder_l2_distance: mismatch at " + na + " " + shape_str(ta.shape) + " vs " + nb + " " +
                             shape_str(tb.shape));
        const std::string g = distance_group(na);
        const double d = sq_dist(ta.data, tb.data);
        auto& slot = groups[block_number(g)];
        slot.first = g;
        slot.second += d;
        total += d;
    }
    BlockDistances out;
    for (const auto& [idx, gd] : groups) {
        out.names.push_back(gd.first);
        out.values.push_back(std::sqrt(gd.second));
    }
    out.total = std::sqrt(total);
    return out;
}

std::vector<double> dominant_direction(const Matrix& grads) {
    if (grads.size() < 2) throw InputError("dominant_direction: need at least 2 snapshots");
    require_rows(grads, "dominant_direction");
    std::vector<double> mean(grads[0].size(), 0.0);
    for (const auto& g : grads) {
        const double n = l2_norm(g);
        if (n == 0.0) continue;
        for (std::size_t i = 0; i < g.size(); ++i) mean[i] += g[i] / n;
    }
    const double n = l2_norm(mean);
    if (!(n > 1e-12 * static_cast<double>(grads.size())))
        throw DegenerateInputError("dominant_direction: normalised gradients cancel");
    for (double& v : mean) v /= n;
    return mean;
}

CosineSeries grad_cosine_series(const Matrix& grads) {
    const auto dir = dominant_direction(grads);
    CosineSeries out;
    out.series.reserve(grads.size());
    for (const auto& g : grads) out.series.push_back(cosine(g, dir));
    const double n = static_cast<double>(out.series.size());
    out.mean = std::accumulate(out.series.begin(), out.series.end(), 0.0) / n;
    double var = 0.0;
    for (double c : out.series) var += (c - out.mean) * (c - out.mean);
    out.stddev = std::sqrt(var / n);
    return out;
}

KMeansResult kmeans(const Matrix& data, std::size_t k, std::uint64_t seed, const KMeansOptions& opts) {
    require_rows(data, "kmeans");
    const std::size_t n = data.size(), d = data[0].size();
    if (k == 0 || k > n)
        throw InputError("kmeans: k=" + std::to_string(k) + " with " + std::to_string(n) + " points");
    Rng rng = make_rng(seed);

    // k-means++ seeding.
    KMeansResult res;
    res.centroids.push_back(data[uniform_index(rng, n)]);
    std::vector<double> dist(n, std::numeric_limits<double>::infinity());
    while (res.centroids.size() < k) {
        double sum = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            dist[i] = std::min(dist[i], sq_dist(data[i], res.centroids.back()));
            sum += dist[i];
        }
        std::size_t pick = 0;
        if (sum > 0.0) {
            double u = uniform(rng) * sum;
            for (pick = 0; pick + 1 < n; ++pick) {
                u -= dist[pick];
                if (u < 0.0) break;
            }
        } else {
            // Fewer distinct points than k: reuse an unused index.
            pick = res.centroids.size();
        }
        res.centroids.push_back(data[pick]);
    }

    res.assignments.assign(n, 0);
    std::vector<double> best(n);
    const auto ni = static_cast<std::ptrdiff_t>(n);
    for (res.iterations = 0; res.iterations < opts.max_iter; ++res.iterations) {
#pragma omp parallel for schedule(static) if (opts.parallel)
        for (std::ptrdiff_t ii = 0; ii < ni; ++ii) {
            const auto i = static_cast<std::size_t>(ii);
            double bd = std::numeric_limits<double>::infinity();
            std::size_t bc = 0;
            for (std::size_t c = 0; c < k; ++c) {
                const double dd = sq_dist(data[i], res.centroids[c]);
                if (dd < bd) {
                    bd = dd;
                    bc = c;
                }
            }
            res.assignments[i] = bc;
            best[i] = bd;
        }
        res.inertia_history.push_back(std::accumulate(best.begin(), best.end(), 0.0));

        Matrix next(k, std::vector<double>(d, 0.0));
        std::vector<std::size_t> counts(k, 0);
        for (std::size_t i = 0; i < n; ++i) {
            ++counts[res.assignments[i]];
            auto& c = next[res.assignments[i]];
            for (std::size_t j = 0; j < d; ++j) c[j] += data[i][j];
        }
        double moved = 0.0;
        for (std::size_t c = 0; c < k; ++c) {
            if (counts[c] == 0) {
                next[c] = res.centroids[c];  // empty cluster keeps its centroid
                continue;
            }
            for (double& v : next[c]) v /= static_cast<double>(counts[c]);
            moved = std::max(moved, std::sqrt(sq_dist(next[c], res.centroids[c])));
        }
        res.centroids = std::move(next);
        if (moved < opts.tol) {
            res.converged = true;
            ++res.iterations;
            break;
        }
    }
    return res;
}

PcaResult pca_2d(const Matrix& data) {
    require_rows(data, "pca_2d");
    const std::size_t n = data.size(), d = data[0].size();
    if (n < 2) throw InputError("pca_2d: need at least 2 points");
    Eigen::MatrixXd X(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = data[i][j];
    const Eigen::RowVectorXd mu = X.colwise().mean();
    X.rowwise() -= mu;
    const Eigen::MatrixXd cov = (X.transpose() * X) / static_cast<double>(n - 1);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
    const auto& evals = es.eigenvalues();  // ascending
    const double top = evals(evals.size() - 1);
    if (!(top > 1e-14)) throw DegenerateInputError("pca_2d: data has no variance");

    PcaResult out;
    out.mean.assign(mu.data(), mu.data() + d);
    for (int a = 0; a < 2; ++a) {
        const Eigen::Index col = evals.size() - 1 - a;
        Eigen::VectorXd v = col >= 0 ? Eigen::VectorXd(es.eigenvectors().col(col)) : Eigen::VectorXd::Zero(d);
        // Sign convention: largest-magnitude component positive, so reruns agree.
        Eigen::Index imax = 0;
        v.cwiseAbs().maxCoeff(&imax);
        if (v(imax) < 0) v = -v;
        out.axes[a].assign(v.data(), v.data() + d);
        out.variance[a] = col >= 0 ? std::max(0.0, evals(col)) : 0.0;
    }
    out.coords.assign(n, std::vector<double>(2, 0.0));
    for (std::size_t i = 0; i < n; ++i)
        for (int a = 0; a < 2; ++a) {
            double s = 0.0;
            for (std::size_t j = 0; j < d; ++j) s += X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) * out.axes[a][j];
            out.coords[i][a] = s;
        }
    return out;
}

SimilarityLift intra_inter_similarity(std::span<const std::size_t> assignments, const Matrix& features) {
    require_rows(features, "intra_inter_similarity");
    if (assignments.size() != features.size())
        throw InputError("intra_inter_similarity: " + std::to_string(assignments.size()) + " assignments for " +
                         std::to_string(features.size()) + " features");
    const std::size_t n = features.size();
    std::vector<double> norms(n);
    for (std::size_t i = 0; i < n; ++i) norms[i] = l2_norm(features[i]);
    double intra = 0.0, inter = 0.0;
    std::size_t n_intra = 0, n_inter = 0;
    const auto ni = static_cast<std::ptrdiff_t>(n);
#pragma omp parallel for schedule(dynamic, 16) reduction(+ : intra, inter, n_intra, n_inter)
    for (std::ptrdiff_t ii = 0; ii < ni; ++ii) {
        const auto i = static_cast<std::size_t>(ii);
        for (std::size_t j = i + 1; j < n; ++j) {
            const double den = norms[i] * norms[j];
            const double c = den > 0.0 ? std::clamp(dot(features[i], features[j]) / den, -1.0, 1.0) : 0.0;
            if (assignments[i] == assignments[j]) {
                intra += c;
                ++n_intra;
            } else {
                inter += c;
                ++n_inter;
            }
        }
    }
    if (n_intra == 0) throw DegenerateInputError("intra_inter_similarity: every cluster is a singleton");
    if (n_inter == 0) throw DegenerateInputError("intra_inter_similarity: only one cluster");
    SimilarityLift out;
    out.intra = intra / static_cast<double>(n_intra);
    out.inter = inter / static_cast<double>(n_inter);
    out.lift_pct = 100.0 * (out.intra - out.inter) / std::max(std::abs(out.inter), 1e-12);
    return out;
}

std::vector<std::vector<std::size_t>> cluster_exemplars(const Matrix& data, const KMeansResult& km,
                                                        std::size_t per_cluster) {
    std::vector<std::vector<std::pair<double, std::size_t>>> by(km.centroids.size());
    for (std::size_t i = 0; i < data.size(); ++i) {
        const std::size_t c = km.assignments.at(i);
        by[c].emplace_back(sq_dist(data[i], km.centroids[c]), i);
    }
    std::vector<std::vector<std::size_t>> out(by.size());
    for (std::size_t c = 0; c < by.size(); ++c) {
        std::sort(by[c].begin(), by[c].end());
        for (std::size_t i = 0; i < std::min(per_cluster, by[c].size()); ++i) out[c].push_back(by[c][i].second);
    }
    return out;
}

double pearson(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size() || x.size() < 2) throw InputError("pearson: need two equal-length series of size >= 2");
    const double n = static_cast<double>(x.size());
    const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
    const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    if (sxx <= 0.0 || syy <= 0.0) throw DegenerateInputError("pearson: constant series");
    return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

namespace {
std::vector<double> ranks(std::span<const double> v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
        const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t t = i; t <= j; ++t) r[idx[t]] = avg;
        i = j + 1;
    }
    return r;
}
}  // namespace

double spearman(std::span<const double> x, std::span<const double> y) {
    const auto rx = ranks(x), ry = ranks(y);
    return pearson(rx, ry);
}

PairCorrelation routing_context_correlation(const Matrix& contexts, const Matrix& routing, std::size_t n_pairs,
                                            std::uint64_t seed, bool shuffle) {
    require_rows(contexts, "routing_context_correlation");
    require_rows(routing, "routing_context_correlation");
    const std::size_t n = contexts.size();
    if (routing.size() != n) throw InputError("routing_context_correlation: row counts differ");
    if (n < 2) throw InputError("routing_context_correlation: need at least 2 samples");
    Rng rng = make_rng(seed);
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    if (shuffle) {
        Rng srng = make_rng(derive_seed(seed, "shuffle"));
        for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[uniform_index(srng, i)]);
    }
    PairCorrelation out;
    out.context_cos.reserve(n_pairs);
    out.routing_cos.reserve(n_pairs);
    for (std::size_t p = 0; p < n_pairs; ++p) {
        const std::size_t i = uniform_index(rng, n);
        std::size_t j = uniform_index(rng, n - 1);
        if (j >= i) ++j;
        out.context_cos.push_back(cosine(contexts[i], contexts[j]));
        out.routing_cos.push_back(cosine(routing[perm[i]], routing[perm[j]]));
    }
    out.r = pearson(out.context_cos, out.routing_cos);
    return out;
}

}  // namespace covft
