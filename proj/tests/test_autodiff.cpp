#include "covft/autodiff.hpp"
#include "covft/error.hpp"
#include "covft/gradcheck.hpp"
#include "covft/rng.hpp"

#include <doctest.h>

#include <cmath>
#include <functional>
#include <optional>

using namespace covft;
using namespace covft::ad;

namespace {

Tensor rand_tensor(Shape s, std::uint64_t seed, double std = 1.0) {
    Rng rng = make_rng(seed);
    Tensor t(std::move(s));
    for (double& x : t.data) x = normal(rng, 0.0, std);
    return t;
}

// Checks d(sum(w * f(x...)))/dx against central differences, with w a fixed
// random weighting so every output element matters.
double op_gradcheck(std::vector<Tensor> inputs, const std::function<Var(std::vector<Var>&)>& f) {
    ParameterStore store;
    std::vector<ParamId> ids;
    for (std::size_t i = 0; i < inputs.size(); ++i) ids.push_back(store.add("x" + std::to_string(i), inputs[i]));
    std::optional<Tensor> w;
    LossBuilder loss = [&](Graph& g) {
        std::vector<Var> xs;
        for (ParamId id : ids) xs.push_back(g.param(store, id));
        Var y = f(xs);
        if (!w) w = rand_tensor(y.shape(), 99);
        return sum(mul(y, g.constant(*w)));
    };
    return finite_diff_check(loss, store, ids).max_rel_err;
}

}  // namespace

TEST_SUITE("autodiff") {
TEST_CASE("forward values against closed forms") {
    Graph g(false);
    const Var x = g.constant(Tensor::vector({-1.0, 0.0, 1.0}));
    const Tensor ge = gelu(x).value();
    // x * Phi(x) with Phi(1) = 0.841344746068543
    CHECK(ge.data[0] == doctest::Approx(-0.158655253931457).epsilon(1e-14));
    CHECK(ge.data[1] == 0.0);
    CHECK(ge.data[2] == doctest::Approx(0.841344746068543).epsilon(1e-14));

    const Var logits = g.constant(Tensor::from({{0.0, 0.0, 0.0, 0.0}}));
    const int target = 2;
    CHECK(cross_entropy(logits, std::span<const int>(&target, 1)).value().data[0] ==
          doctest::Approx(std::log(4.0)).epsilon(1e-14));

    const Tensor sm = softmax(g.constant(Tensor::from({{1.0, 2.0}})), 1).value();
    CHECK(sm.data[1] == doctest::Approx(std::exp(2.0) / (std::exp(1.0) + std::exp(2.0))).epsilon(1e-14));

    // layer norm of [1, 3] with gamma 1, beta 0 -> [-1, 1] as eps -> 0
    const Tensor ln = layer_norm(g.constant(Tensor::from({{1.0, 3.0}})), g.constant(Tensor::vector({1.0, 1.0})),
                                 g.constant(Tensor::vector({0.0, 0.0})), 1e-12)
                          .value();
    CHECK(ln.data[0] == doctest::Approx(-1.0).epsilon(1e-9));
    CHECK(ln.data[1] == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("matmul backward matches the hand-written formula") {
    Graph g;
    const Tensor a = rand_tensor({3, 4}, 1), b = rand_tensor({4, 2}, 2);
    Var va = g.leaf(a), vb = g.leaf(b);
    g.backward(sum(matmul(va, vb)));
    // d sum(AB)/dA[i,p] = sum_j B[p,j];  d/dB[p,j] = sum_i A[i,p]
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t p = 0; p < 4; ++p)
            CHECK((*g.grad(va))(i, p) == doctest::Approx(b(p, 0) + b(p, 1)).epsilon(1e-14));
    for (std::size_t p = 0; p < 4; ++p)
        CHECK((*g.grad(vb))(p, 1) == doctest::Approx(a(0, p) + a(1, p) + a(2, p)).epsilon(1e-14));
}

TEST_CASE("every op passes a finite-difference check") {
    const double tol = 1e-6;
    CHECK(op_gradcheck({rand_tensor({3, 4}, 1), rand_tensor({4, 5}, 2)},
                       [](auto& x) { return matmul(x[0], x[1]); }) < tol);
    CHECK(op_gradcheck({rand_tensor({3, 4}, 3)}, [](auto& x) { return transpose(x[0]); }) < tol);
    CHECK(op_gradcheck({rand_tensor({3, 4}, 4)}, [](auto& x) { return reshape(x[0], {2, 6}); }) < tol);
    CHECK(op_gradcheck({rand_tensor({3, 4}, 5), rand_tensor({3, 4}, 6)},
                       [](auto& x) { return add(x[0], x[1]); }) < tol);
    CHECK(op_gradcheck({rand_tensor({3, 4}, 5), rand_tensor({3, 4}, 6)},
                       [](auto& x) { return sub(x[0], x[1]); }) < tol);
    CHECK(op_gradcheck({rand_tensor({3, 4}, 7), rand_tensor({3, 4}, 8)},
                       [](auto& x) { return mul(x[0], x[1]); }) < tol);
    CHECK(op_gradcheck({rand_tensor({3, 4}, 9)}, [](auto& x) { return scale(x[0], -2.5); }) < tol);
    CHECK(op_gradcheck({rand_tensor({3, 4}, 10), rand_tensor({4}, 11)},
                       [](auto& x) { return add_bias(x[0], x[1]); }) < tol);
    CHECK(op_gradcheck({rand_tensor({3, 4}, 12)}, [](auto& x) { return gelu(x[0]); }) < tol);
    CHECK(op_gradcheck({rand_tensor({3, 6}, 13), rand_tensor({6}, 14), rand_tensor({6}, 15)},
                       [](auto& x) { return layer_norm(x[0], x[1], x[2]); }) < tol);
    CHECK(op_gradcheck({rand_tensor({3, 5}, 16)}, [](auto& x) { return softmax(x[0], 1); }) < tol);
    CHECK(op_gradcheck({rand_tensor({3, 5}, 17)}, [](auto& x) { return softmax(x[0], 0); }) < tol);
    CHECK(op_gradcheck({rand_tensor({4, 4}, 18)}, [](auto& x) { return softmax(causal_mask(x[0]), 1); }) < tol);
    CHECK(op_gradcheck({rand_tensor({4, 3}, 19)}, [](auto& x) { return mean_rows(x[0]); }) < tol);
    CHECK(op_gradcheck({rand_tensor({5, 3}, 20)}, [](auto& x) { return slice_rows(x[0], 1, 4); }) < tol);
    CHECK(op_gradcheck({rand_tensor({3, 5}, 21)}, [](auto& x) { return slice_cols(x[0], 2, 5); }) < tol);
    CHECK(op_gradcheck({rand_tensor({2, 3}, 22), rand_tensor({4, 3}, 23)},
                       [](auto& x) {
                           Var parts[] = {x[0], x[1]};
                           return concat_rows(parts);
                       }) < tol);
    CHECK(op_gradcheck({rand_tensor({2, 3}, 24), rand_tensor({2, 2}, 25)},
                       [](auto& x) {
                           Var parts[] = {x[0], x[1]};
                           return concat_cols(parts);
                       }) < tol);
    CHECK(op_gradcheck({rand_tensor({4, 3}, 26)}, [](auto& x) { return row(x[0], 2); }) < tol);
    const std::vector<int> ids{2, 0, 2, 1};
    CHECK(op_gradcheck({rand_tensor({3, 4}, 27)}, [&](auto& x) { return gather_rows(x[0], ids); }) < tol);
    const std::vector<int> targets{1, 0, 3};
    CHECK(op_gradcheck({rand_tensor({3, 4}, 28)}, [&](auto& x) { return cross_entropy(x[0], targets); }) < tol);
    CHECK(op_gradcheck({rand_tensor({3, 4}, 29), rand_tensor({3}, 30)},
                       [](auto& x) { return scale_by(x[0], x[1], 1); }) < tol);
    const std::vector<std::size_t> active{0, 2};
    CHECK(op_gradcheck({Tensor::vector({0.2, 0.5, 0.3, 0.1})},
                       [&](auto& x) { return renormalize_subset(x[0], active); }) < tol);
}

TEST_CASE("gradients accumulate over reused nodes") {
    Graph g;
    Var x = g.leaf(Tensor::vector({2.0}));
    g.backward(sum(mul(x, x)));  // d(x^2)/dx = 2x
    CHECK(g.grad(x)->data[0] == doctest::Approx(4.0));
}

TEST_CASE("detach and disabled graphs stop gradient") {
    Graph g;
    Var x = g.leaf(Tensor::vector({1.0, 2.0}));
    Var y = add(detach(x), x);
    g.backward(sum(y));
    CHECK(g.grad(x)->data[0] == doctest::Approx(1.0));

    Graph off(false);
    Var z = off.leaf(Tensor::vector({1.0}));
    CHECK_FALSE(off.requires_grad(z));
}

TEST_CASE("renormalize_subset zeroes inactive entries exactly") {
    Graph g(false);
    const std::vector<std::size_t> active{1, 3};
    const Tensor r = renormalize_subset(g.constant(Tensor::vector({0.1, 0.3, 0.5, 0.1})), active).value();
    CHECK(r.data[0] == 0.0);
    CHECK(r.data[2] == 0.0);
    CHECK(r.data[1] == doctest::Approx(0.75));
    CHECK(r.data[3] == doctest::Approx(0.25));
}

TEST_CASE("shape errors are raised") {
    Graph g;
    Var a = g.leaf(rand_tensor({2, 3}, 1)), b = g.leaf(rand_tensor({2, 3}, 2));
    CHECK_THROWS_AS(matmul(a, b), DimensionError);
    CHECK_THROWS_AS(add(a, g.leaf(rand_tensor({3, 2}, 3))), DimensionError);
    CHECK_THROWS_AS(reshape(a, {4, 2}), DimensionError);
}
}
