#include "covft/cve.hpp"
#include "covft/error.hpp"
#include "covft/rng.hpp"

#include <doctest.h>

#include <cmath>

using namespace covft;

namespace {

Tensor rand_tensor(Shape s, Rng& rng, double std = 1.0) {
    Tensor t(std::move(s));
    for (double& x : t.data) x = normal(rng, 0.0, std);
    return t;
}

// Row-wise layer norm with gamma 1, beta 0.
Tensor ln_ref(const Tensor& x) {
    Tensor y = x;
    for (std::size_t r = 0; r < x.rows(); ++r) {
        double mu = 0.0, var = 0.0;
        for (double v : x.row(r)) mu += v;
        mu /= double(x.cols());
        for (double v : x.row(r)) var += (v - mu) * (v - mu);
        var /= double(x.cols());
        for (std::size_t c = 0; c < x.cols(); ++c) y(r, c) = (x(r, c) - mu) / std::sqrt(var + 1e-5);
    }
    return y;
}

Tensor matmul_ref(const Tensor& a, const Tensor& b) {
    Tensor c({a.rows(), b.cols()});
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < b.cols(); ++j)
            for (std::size_t p = 0; p < a.cols(); ++p) c(i, j) += a(i, p) * b(p, j);
    return c;
}

}  // namespace

TEST_SUITE("cve") {
TEST_CASE("context kinds parse") {
    CHECK(parse_context_kind("concat") == ContextKind::concat);
    CHECK(context_kind_name(ContextKind::text_only) == "text_only");
    CHECK_THROWS_AS(parse_context_kind("both"), ConfigError);
}

TEST_CASE("text embedding shape, determinism and errors") {
    ParameterStore store;
    const TextEncoder te = make_text_encoder(store, {}, 3);
    const std::vector<int> toks{50, 21, 25};
    const Tensor a = text_embed(store, te, toks);
    CHECK(a.shape == Shape{4, 32});
    CHECK(text_embed(store, te, toks).data == a.data);
    const std::vector<int> other{50, 22, 25};
    CHECK(cosine(text_embed(store, te, other).row(0), a.row(0)) < 1.0);
    const std::vector<int> bad{64};
    CHECK_THROWS_AS(text_embed(store, te, bad), InputError);
    const std::vector<int> too_long(40, 5);
    CHECK_THROWS_AS(text_embed(store, te, too_long), InputError);
    for (const auto& p : store) CHECK_FALSE(p.trainable);
}

TEST_CASE("refiner starts as the identity") {
    ParameterStore store;
    const auto p = make_cve_layer(store, "cve", ContextKind::cve, 8, 4, 1, 0.1);
    Rng rng = make_rng(1);
    const Tensor x = rand_tensor({5, 8}, rng);
    ad::Graph g(false);
    nn::Scope s{g, store};
    CHECK(residual_refine(s, g.constant(x), p.visual).value().data == x.data);
    CHECK_THROWS_AS(make_cve_layer(store, "cve2", ContextKind::cve, 8, 0, 1, 0.1), ConfigError);
}

TEST_CASE("extract_context matches a hand-written cross-attention") {
    ParameterStore store;
    const auto p = make_cve_layer(store, "cve", ContextKind::cve, 8, 4, 2, 0.5);
    Rng rng = make_rng(2);
    const Tensor z = rand_tensor({6, 8}, rng), t = rand_tensor({3, 8}, rng);
    ad::Graph g(false);
    nn::Scope s{g, store};
    const Tensor c = extract_context(s, g.constant(z), g.constant(t), p).value();
    REQUIRE(c.shape == Shape{8});

    const Tensor lt = ln_ref(t), lz = ln_ref(z);
    Tensor q0({1, 8});
    for (std::size_t d = 0; d < 8; ++d) q0(0, d) = lt(0, d);
    const Tensor q = matmul_ref(q0, store[p.wq].value);
    Tensor kv({9, 8});
    for (std::size_t r = 0; r < 6; ++r)
        for (std::size_t d = 0; d < 8; ++d) kv(r, d) = lz(r, d);
    for (std::size_t r = 0; r < 3; ++r)
        for (std::size_t d = 0; d < 8; ++d) kv(6 + r, d) = lt(r, d);
    const Tensor k = matmul_ref(kv, store[p.wk].value), v = matmul_ref(kv, store[p.wv].value);
    std::vector<double> a(9);
    double mx = -1e300;
    for (std::size_t j = 0; j < 9; ++j) {
        for (std::size_t d = 0; d < 8; ++d) a[j] += q(0, d) * k(j, d);
        a[j] /= std::sqrt(8.0);
        mx = std::max(mx, a[j]);
    }
    double zsum = 0.0;
    for (double& x : a) zsum += (x = std::exp(x - mx));
    for (std::size_t d = 0; d < 8; ++d) {
        double ref = 0.0;
        for (std::size_t j = 0; j < 9; ++j) ref += a[j] / zsum * v(j, d);
        CHECK(c.data[d] == doctest::Approx(ref).epsilon(1e-12));
    }
}

TEST_CASE("contextual variants") {
    Rng rng = make_rng(3);
    const Tensor z = rand_tensor({4, 8}, rng), t = rand_tensor({3, 8}, rng);
    for (ContextKind kind : {ContextKind::image_only, ContextKind::text_only, ContextKind::concat, ContextKind::cve}) {
        ParameterStore store;
        const auto p = make_cve_layer(store, "cve", kind, 8, 4, 4, 0.3);
        ad::Graph g(false);
        nn::Scope s{g, store};
        const ContextState st = contextual_variant(s, g.constant(z), g.constant(t), p, 5);
        CHECK(st.c.value().shape == Shape{8});
        CHECK(st.layer == 5);
        CHECK(st.t.value().shape == Shape{3, 8});
        if (kind == ContextKind::image_only)
            for (std::size_t d = 0; d < 8; ++d)
                CHECK(st.c.value().data[d] == doctest::Approx((z(0, d) + z(1, d) + z(2, d) + z(3, d)) / 4));
        if (kind == ContextKind::text_only)
            for (std::size_t d = 0; d < 8; ++d) CHECK(st.c.value().data[d] == t(0, d));
        if (kind != ContextKind::concat) CHECK_FALSE(store.contains("cve.concat.weight"));
    }
}
}
