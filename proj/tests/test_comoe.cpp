#include "covft/comoe.hpp"
#include "covft/error.hpp"
#include "covft/rng.hpp"

#include <doctest.h>

#include <cmath>
#include <numeric>

using namespace covft;

namespace {

Tensor rand_tensor(Shape s, Rng& rng, double std = 1.0) {
    Tensor t(std::move(s));
    for (double& x : t.data) x = normal(rng, 0.0, std);
    return t;
}

struct Fixture {
    ParameterStore donor_store;
    nn::FfnParams donor;
    ParameterStore store;
    ExpertSet set;

    Fixture(std::size_t n, RoutingSpec spec, std::size_t dim = 8, double router_std = 0.0) {
        donor = nn::make_ffn(donor_store, "donor", dim, 2 * dim, 5, 0.3);
        set = init_experts_from_ffn(store, "moe", donor_store, donor, n, spec, router_std, 11);
    }
};

std::vector<double> weights(const Fixture& f, const Tensor& c, std::uint64_t draw = 0) {
    ad::Graph g(false);
    nn::Scope s{g, f.store};
    return route(s, g.constant(c), f.set, draw).g.value().data;
}

}  // namespace

TEST_SUITE("comoe") {
TEST_CASE("routing spec parsing") {
    CHECK(RoutingSpec::parse("dense").kind == RoutingKind::dense);
    CHECK(RoutingSpec::parse("uniform").kind == RoutingKind::uniform);
    const auto s = RoutingSpec::parse("sparse_3");
    CHECK(s.kind == RoutingKind::sparse);
    CHECK(s.k == 3);
    CHECK(RoutingSpec::parse("random_2").str() == "random_2");
    CHECK_THROWS_AS(RoutingSpec::parse("sparse_"), ConfigError);
    CHECK_THROWS_AS(RoutingSpec::parse("topk"), ConfigError);
}

TEST_CASE("experts are exact copies and the router starts as configured") {
    Fixture f(4, {}, 8);
    for (const auto& e : f.set.experts) {
        CHECK(f.store[e.fc1.weight].value.data == f.donor_store[f.donor.fc1.weight].value.data);
        CHECK(f.store[e.fc2.weight].value.data == f.donor_store[f.donor.fc2.weight].value.data);
    }
    CHECK(f.store.contains("moe.expert3.fc2.bias"));
    for (double x : f.store[f.set.router_w].value.data) CHECK(x == 0.0);
    Fixture r(4, {}, 8, 0.1);
    double ss = 0.0;
    for (double x : r.store[r.set.router_w].value.data) ss += x * x;
    CHECK(ss > 0.0);
    for (double x : r.store[r.set.router_b].value.data) CHECK(x == 0.0);
    CHECK_THROWS_AS(Fixture(1, {}), ConfigError);
    CHECK_THROWS_AS(Fixture(2, RoutingSpec::parse("sparse_3")), ConfigError);
}

TEST_CASE("zero router gives uniform dense weights") {
    Fixture f(4, {});
    Rng rng = make_rng(1);
    for (double w : weights(f, rand_tensor({8}, rng))) CHECK(w == doctest::Approx(0.25).epsilon(1e-15));
}

TEST_CASE("dense weights are softmax(W c + b)") {
    Fixture f(3, {}, 8, 0.5);
    Rng rng = make_rng(2);
    for (double& b : f.store[f.set.router_b].value.data) b = normal(rng);
    const Tensor c = rand_tensor({8}, rng);
    const Tensor& W = f.store[f.set.router_w].value;
    const Tensor& B = f.store[f.set.router_b].value;
    std::vector<double> logit(3);
    for (std::size_t e = 0; e < 3; ++e) {
        logit[e] = B.data[e];
        for (std::size_t d = 0; d < 8; ++d) logit[e] += W(e, d) * c.data[d];
    }
    const double mx = *std::max_element(logit.begin(), logit.end());
    double z = 0.0;
    for (double l : logit) z += std::exp(l - mx);
    const auto g = weights(f, c);
    for (std::size_t e = 0; e < 3; ++e) CHECK(g[e] == doctest::Approx(std::exp(logit[e] - mx) / z).epsilon(1e-14));
}

TEST_CASE("sparse and random routing keep k experts summing to one") {
    Rng rng = make_rng(3);
    Fixture sp(5, RoutingSpec::parse("sparse_2"), 8, 0.5);
    Fixture rd(5, RoutingSpec::parse("random_2"), 8, 0.5);
    for (int i = 0; i < 20; ++i) {
        const Tensor c = rand_tensor({8}, rng);
        for (const Fixture* f : {&sp, &rd}) {
            const auto g = weights(*f, c, static_cast<std::uint64_t>(i));
            CHECK(std::count_if(g.begin(), g.end(), [](double w) { return w > 0.0; }) == 2);
            CHECK(std::accumulate(g.begin(), g.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-14));
        }
        // sparse keeps the two largest dense weights
        Fixture dense(5, {}, 8, 0.5);
        const auto d = weights(dense, c);
        const auto s = weights(sp, c);
        std::vector<std::size_t> order(5);
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return d[a] > d[b]; });
        CHECK(s[order[0]] > 0.0);
        CHECK(s[order[1]] > 0.0);
        CHECK(s[order[0]] == doctest::Approx(d[order[0]] / (d[order[0]] + d[order[1]])).epsilon(1e-14));
    }
    // random draws depend on the seed only
    const Tensor c = rand_tensor({8}, rng);
    CHECK(weights(rd, c, 42) == weights(rd, c, 42));
    bool differs = false;
    for (std::uint64_t s = 0; s < 10 && !differs; ++s) differs = weights(rd, c, s) != weights(rd, c, 42);
    CHECK(differs);
}

TEST_CASE("uniform routing ignores the context") {
    Fixture f(4, RoutingSpec::parse("uniform"), 8, 0.5);
    Rng rng = make_rng(4);
    CHECK(weights(f, rand_tensor({8}, rng)) == weights(f, rand_tensor({8}, rng)));
}

TEST_CASE("identical experts reproduce the donor for every routing") {
    Rng rng = make_rng(5);
    for (const char* spec : {"dense", "sparse_2", "uniform", "random_2"}) {
        Fixture f(4, RoutingSpec::parse(spec), 8, 1.0);
        for (int i = 0; i < 10; ++i) {
            const Tensor z = rand_tensor({5, 8}, rng), c = rand_tensor({8}, rng);
            ad::Graph g(false), dg(false);
            nn::Scope s{g, f.store}, ds{dg, f.donor_store};
            const auto w = route(s, g.constant(c), f.set, static_cast<std::uint64_t>(i));
            const Tensor moe = comoe_forward(s, g.constant(z), w, f.set).value();
            CHECK(max_abs_diff(moe, nn::ffn(ds, dg.constant(z), f.donor).value()) < 1e-12);
        }
    }
}

TEST_CASE("gradient modulation checks pass on perturbed experts") {
    Rng rng = make_rng(6);
    Fixture f(4, {}, 8, 0.5);
    for (auto& p : f.store) {
        for (double& x : p.value.data) x += normal(rng, 0.0, 0.2);
        p.trainable = true;
    }
    const auto rep = verify_gradient_modulation(f.store, f.set, rand_tensor({3, 8}, rng), rand_tensor({8}, rng),
                                                rand_tensor({3, 8}, rng));
    CHECK(rep.inactive_max_abs == 0.0);
    CHECK(rep.ratio_max_rel_err < 1e-10);
    CHECK(rep.chain_max_rel_err < 1e-8);
    CHECK_NOTHROW(rep.require_passed());
    // identical experts: fc2 weight gradient norms scale with the routing weights
    for (std::size_t e = 1; e < 4; ++e)
        CHECK(rep.identical_grad_norms[e] / rep.identical_grad_norms[0] ==
              doctest::Approx(rep.identical_routing[e] / rep.identical_routing[0]).epsilon(1e-10));
}

TEST_CASE("non-finite contexts are rejected") {
    Fixture f(2, {});
    Tensor c({8});
    c.data[3] = std::nan("");
    CHECK_THROWS_AS(weights(f, c), NumericError);
}
}
