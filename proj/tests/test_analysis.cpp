#include "covft/analysis.hpp"
#include "covft/error.hpp"
#include "covft/rng.hpp"

#include <doctest.h>

#include <cmath>
#include <set>

using namespace covft;

namespace {

EncoderCheckpoint checkpoint(std::vector<std::pair<std::string, std::vector<double>>> ps) {
    EncoderCheckpoint ck;
    for (auto& [n, v] : ps) ck.params.emplace_back(n, Tensor({v.size()}, v));
    return ck;
}

double mean_pairwise_cos(const Matrix& f, const std::vector<std::size_t>& a, bool same) {
    double s = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < f.size(); ++i)
        for (std::size_t j = i + 1; j < f.size(); ++j)
            if ((a[i] == a[j]) == same) {
                s += cosine(f[i], f[j]);
                ++n;
            }
    return s / double(n);
}

}  // namespace

TEST_SUITE("analysis") {
TEST_CASE("encoder distance groups by block") {
    const auto a = checkpoint({{"enc.pos", {0, 0}}, {"enc.block0.ln1.gamma", {1, 1}}, {"enc.block1.ffn.fc1.weight", {0, 0, 0}}});
    const auto b = checkpoint({{"enc.pos", {0, 0}}, {"enc.block0.ln1.gamma", {1, 1}}, {"enc.block1.ffn.fc1.weight", {3, 0, 4}}});
    const BlockDistances d = encoder_l2_distance(a, b);
    REQUIRE(d.names.size() == 3);
    for (std::size_t i = 0; i < d.names.size(); ++i) {
        if (d.names[i] == "block1")
            CHECK(d.values[i] == doctest::Approx(5.0));
        else
            CHECK(d.values[i] == 0.0);
    }
    CHECK(d.total == doctest::Approx(5.0));
    const auto c = checkpoint({{"enc.pos", {0, 0}}});
    CHECK_THROWS_AS(encoder_l2_distance(a, c), InputError);
}

TEST_CASE("dominant direction and cosine series") {
    const Matrix g{{2, 0}, {0, 5}};
    const auto d = dominant_direction(g);
    CHECK(d[0] == doctest::Approx(1 / std::sqrt(2.0)));
    CHECK(d[1] == doctest::Approx(1 / std::sqrt(2.0)));
    const CosineSeries s = grad_cosine_series(g);
    CHECK(s.mean == doctest::Approx(1 / std::sqrt(2.0)));
    CHECK(s.stddev == doctest::Approx(0.0).epsilon(1e-12));
    // identical directions give cosine 1; zero rows are skipped
    const Matrix same{{1, 1}, {0, 0}, {3, 3}};
    const auto d2 = dominant_direction(same);
    CHECK(d2[0] == doctest::Approx(d2[1]));
    CHECK_THROWS_AS(dominant_direction(Matrix{{1, 0}}), InputError);
    CHECK_THROWS_AS(dominant_direction(Matrix{{1, 0}, {-1, 0}}), DegenerateInputError);
    // population std of {1, 0, 1/√2...}: three gradients, one orthogonal to the mean of the others
    const Matrix g3{{1, 0}, {1, 0}, {0, 1}};
    const CosineSeries s3 = grad_cosine_series(g3);
    const double n = std::sqrt(5.0);  // mean of unit rows is (2/3, 1/3), norm √5/3
    const double c1 = 2.0 / n, c2 = 1.0 / n;
    const double mu = (2 * c1 + c2) / 3.0;
    CHECK(s3.mean == doctest::Approx(mu));
    CHECK(s3.stddev == doctest::Approx(std::sqrt((2 * (c1 - mu) * (c1 - mu) + (c2 - mu) * (c2 - mu)) / 3.0)));
}

TEST_CASE("k-means separates blobs and never increases inertia") {
    Rng rng = make_rng(1);
    Matrix data;
    std::vector<std::size_t> truth;
    const double centers[3][2] = {{0, 0}, {10, 0}, {0, 10}};
    for (std::size_t c = 0; c < 3; ++c)
        for (int i = 0; i < 40; ++i) {
            data.push_back({centers[c][0] + normal(rng, 0, 0.5), centers[c][1] + normal(rng, 0, 0.5)});
            truth.push_back(c);
        }
    const KMeansResult km = kmeans(data, 3, 7);
    CHECK(km.converged);
    for (std::size_t i = 0; i < data.size(); ++i)
        for (std::size_t j = 0; j < data.size(); ++j)
            CHECK((truth[i] == truth[j]) == (km.assignments[i] == km.assignments[j]));
    for (std::size_t i = 1; i < km.inertia_history.size(); ++i)
        CHECK(km.inertia_history[i] <= km.inertia_history[i - 1] + 1e-9);
    KMeansOptions serial;
    serial.parallel = false;
    CHECK(kmeans(data, 3, 7, serial).assignments == km.assignments);
    const Matrix small{{0, 0}, {1, 0}, {5, 5}};
    CHECK(kmeans(small, 3, 1).inertia() == doctest::Approx(0.0));
    CHECK_THROWS_AS(kmeans(small, 4, 1), InputError);
    CHECK_THROWS_AS(kmeans(small, 0, 1), InputError);
    const auto ex = cluster_exemplars(data, km, 2);
    REQUIRE(ex.size() == 3);
    for (std::size_t c = 0; c < 3; ++c) {
        CHECK(ex[c].size() == 2);
        for (std::size_t i : ex[c]) CHECK(km.assignments[i] == c);
    }
}

TEST_CASE("PCA finds the direction a brute-force search finds") {
    Rng rng = make_rng(2);
    Matrix data;
    for (int i = 0; i < 300; ++i) {
        const double a = normal(rng, 0, 3), b = normal(rng, 0, 1), c = normal(rng, 0, 0.2);
        // rotate (a, b, c) by fixed angles
        data.push_back({0.6 * a - 0.8 * b + 1.0, 0.8 * a + 0.6 * b * 0.5 + 0.3 * c - 2.0, 0.5 * b + c});
    }
    const PcaResult p = pca_2d(data);
    auto variance_along = [&](double x, double y, double z) {
        const double n = std::sqrt(x * x + y * y + z * z);
        double s = 0.0, s2 = 0.0;
        for (const auto& r : data) {
            const double v = (r[0] * x + r[1] * y + r[2] * z) / n;
            s += v;
            s2 += v * v;
        }
        const double m = s / double(data.size());
        return s2 / double(data.size()) - m * m;
    };
    double best = -1.0, bx = 0, by = 0, bz = 0;
    for (int i = 0; i <= 180; ++i)
        for (int j = 0; j < 360; ++j) {
            const double th = i * M_PI / 180.0, ph = j * M_PI / 180.0;
            const double x = std::sin(th) * std::cos(ph), y = std::sin(th) * std::sin(ph), z = std::cos(th);
            const double v = variance_along(x, y, z);
            if (v > best) best = v, bx = x, by = y, bz = z;
        }
    CHECK(std::abs(p.axes[0][0] * bx + p.axes[0][1] * by + p.axes[0][2] * bz) > 0.999);
    CHECK(p.variance[0] >= p.variance[1]);
    CHECK(std::abs(dot(p.axes[0], p.axes[1])) < 1e-10);
    CHECK(p.coords.size() == 300);
    // collinear points: everything on the first axis
    Matrix line;
    for (int i = 0; i < 20; ++i) line.push_back({double(i), 2.0 * i, -double(i)});
    const PcaResult q = pca_2d(line);
    CHECK(std::abs(q.axes[0][0] * 1 + q.axes[0][1] * 2 - q.axes[0][2]) / std::sqrt(6.0) == doctest::Approx(1.0));
    CHECK(q.variance[1] == doctest::Approx(0.0).epsilon(1e-9));
    for (const auto& c : q.coords) CHECK(std::abs(c[1]) < 1e-9);
}

TEST_CASE("similarity lift against a direct count") {
    Rng rng = make_rng(3);
    Matrix f;
    std::vector<std::size_t> a;
    for (int i = 0; i < 30; ++i) {
        const std::size_t c = static_cast<std::size_t>(i % 3);
        std::vector<double> v(4, 0.0);
        v[c] = 1.0;
        for (double& x : v) x += normal(rng, 0, 0.3);
        f.push_back(v);
        a.push_back(c);
    }
    const SimilarityLift l = intra_inter_similarity(a, f);
    CHECK(l.intra == doctest::Approx(mean_pairwise_cos(f, a, true)));
    CHECK(l.inter == doctest::Approx(mean_pairwise_cos(f, a, false)));
    CHECK(l.lift_pct == doctest::Approx(100.0 * (l.intra - l.inter) / std::abs(l.inter)));
    CHECK(l.lift_pct > 0.0);
}

TEST_CASE("correlations") {
    const std::vector<double> x{1, 2, 3, 4, 5}, y{3, 5, 7, 9, 11}, z{5, 4, 3, 2, 1}, sq{1, 4, 9, 16, 25};
    CHECK(pearson(x, y) == doctest::Approx(1.0));
    CHECK(pearson(x, z) == doctest::Approx(-1.0));
    CHECK(pearson(x, sq) < 1.0);
    CHECK(spearman(x, sq) == doctest::Approx(1.0));
    const std::vector<double> ties{1, 1, 2, 2, 3};
    // average ranks 1.5 1.5 3.5 3.5 5 against 1..5
    CHECK(spearman(x, ties) == doctest::Approx(pearson(std::vector<double>{1.5, 1.5, 3.5, 3.5, 5}, x)));
    const std::vector<double> flat(5, 2.0);
    CHECK_THROWS_AS(pearson(x, flat), DegenerateInputError);
    CHECK_THROWS_AS(pearson(x, std::vector<double>{1, 2}), InputError);
}

TEST_CASE("routing-context correlation and its shuffled null") {
    Rng rng = make_rng(4);
    Matrix c, r;
    for (int i = 0; i < 200; ++i) {
        std::vector<double> v(6);
        for (double& x : v) x = normal(rng);
        c.push_back(v);
        r.push_back(v);
    }
    const PairCorrelation same = routing_context_correlation(c, r, 5000, 1);
    CHECK(same.r == doctest::Approx(1.0));
    CHECK(same.context_cos.size() == 5000);
    const PairCorrelation null = routing_context_correlation(c, r, 5000, 1, true);
    CHECK(std::abs(null.r) < 0.1);
    CHECK(routing_context_correlation(c, r, 5000, 1).r == same.r);
    CHECK_THROWS_AS(routing_context_correlation(c, Matrix(3, std::vector<double>(6)), 10, 1), InputError);
}
}
