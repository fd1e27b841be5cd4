#include "covft/comoe.hpp"

#include "covft/error.hpp"
#include "covft/rng.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>

namespace covft {

RoutingSpec RoutingSpec::parse(std::string_view text) {
    auto with_k = [&](std::string_view prefix, RoutingKind kind) -> RoutingSpec {
        std::size_t k = 0;
        auto digits = text.substr(prefix.size());
        auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), k);
        if (ec != std::errc() || ptr != digits.data() + digits.size() || k == 0)
            throw ConfigError("bad routing '" + std::string(text) + "'", "model.routing");
        return {kind, k};
    };
    if (text == "dense") return {RoutingKind::dense, 0};
    if (text == "uniform") return {RoutingKind::uniform, 0};
    if (text.starts_with("sparse_")) return with_k("sparse_", RoutingKind::sparse);
    if (text.starts_with("random_")) return with_k("random_", RoutingKind::random);
    throw ConfigError("unknown routing '" + std::string(text) + "' (dense, sparse_<k>, uniform, random_<k>)",
                      "model.routing");
}

std::string RoutingSpec::str() const {
    switch (kind) {
    case RoutingKind::dense: return "dense";
    case RoutingKind::uniform: return "uniform";
    case RoutingKind::sparse: return "sparse_" + std::to_string(k);
    case RoutingKind::random: return "random_" + std::to_string(k);
    }
    return "?";
}

ExpertSet init_experts_from_ffn(ParameterStore& dst, const std::string& prefix, const ParameterStore& donor_store,
                                const nn::FfnParams& donor, std::size_t n, RoutingSpec strategy, double router_std,
                                std::uint64_t seed) {
    if (n < 2) throw ConfigError("a CoMoE layer needs at least 2 experts, got " + std::to_string(n), "model.experts");
    if ((strategy.kind == RoutingKind::sparse || strategy.kind == RoutingKind::random) && strategy.k > n)
        throw ConfigError("routing k=" + std::to_string(strategy.k) + " exceeds " + std::to_string(n) + " experts",
                          "model.routing");
    auto copy_linear = [&](const nn::LinearParams& src, const std::string& name) {
        nn::LinearParams out = src;
        out.weight = dst.add(name + ".weight", donor_store[src.weight].value);
        if (src.bias) out.bias = dst.add(name + ".bias", donor_store[*src.bias].value);
        out.lora_a.reset();
        out.lora_b.reset();
        return out;
    };
    ExpertSet set;
    set.strategy = strategy;
    for (std::size_t e = 0; e < n; ++e) {
        const std::string name = prefix + ".expert" + std::to_string(e);
        set.experts.push_back({copy_linear(donor.fc1, name + ".fc1"), copy_linear(donor.fc2, name + ".fc2")});
    }
    const std::size_t dim = donor.fc1.in;
    set.router_w = dst.add(prefix + ".router.weight",
                           router_std > 0.0 ? nn::normal_init(seed, prefix + ".router.weight", {n, dim}, router_std)
                                            : Tensor({n, dim}));
    set.router_b = dst.add(prefix + ".router.bias", Tensor({n}));
    return set;
}

RoutingWeights route(const nn::Scope& s, ad::Var c, const ExpertSet& set, std::uint64_t draw_seed) {
    return route(s, c, set, set.strategy, draw_seed);
}

RoutingWeights route(const nn::Scope& s, ad::Var c, const ExpertSet& set, const RoutingSpec& strategy,
                     std::uint64_t draw_seed) {
    const std::size_t n = set.size();
    const Tensor& cv = c.value();
    for (double v : cv.data)
        if (!std::isfinite(v)) throw NumericError("route: non-finite context vector");
    if ((strategy.kind == RoutingKind::sparse || strategy.kind == RoutingKind::random) && strategy.k > n)
        throw ConfigError("routing k=" + std::to_string(strategy.k) + " exceeds " + std::to_string(n) + " experts",
                          "model.routing");
    RoutingWeights rw;
    switch (strategy.kind) {
    case RoutingKind::uniform: {
        rw.g = s.graph.constant(Tensor({n}, 1.0 / static_cast<double>(n)));
        rw.active.resize(n);
        std::iota(rw.active.begin(), rw.active.end(), std::size_t{0});
        return rw;
    }
    case RoutingKind::random: {
        Rng rng = make_rng(draw_seed);
        std::vector<std::size_t> idx(n);
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        for (std::size_t i = 0; i < strategy.k; ++i) std::swap(idx[i], idx[i + uniform_index(rng, n - i)]);
        rw.active.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(strategy.k));
        std::sort(rw.active.begin(), rw.active.end());
        Tensor g({n});
        for (std::size_t i : rw.active) g.data[i] = 1.0 / static_cast<double>(strategy.k);
        rw.g = s.graph.constant(std::move(g));
        return rw;
    }
    case RoutingKind::dense:
    case RoutingKind::sparse: break;
    }
    const std::size_t dim = cv.numel();
    ad::Var logits = ad::matmul(ad::reshape(c, {1, dim}), ad::transpose(s(set.router_w)));
    logits = ad::reshape(ad::add_bias(logits, s(set.router_b)), {n});
    ad::Var probs = ad::softmax(logits, 0);
    if (strategy.kind == RoutingKind::dense) {
        rw.g = probs;
        rw.active.resize(n);
        std::iota(rw.active.begin(), rw.active.end(), std::size_t{0});
        return rw;
    }
    // Top-k, ties broken towards the lower index.
    const Tensor& p = probs.value();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p.data[a] > p.data[b]; });
    rw.active.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(strategy.k));
    std::sort(rw.active.begin(), rw.active.end());
    rw.g = ad::renormalize_subset(probs, rw.active);
    return rw;
}

ad::Var comoe_forward(const nn::Scope& s, ad::Var z, const RoutingWeights& routing, const ExpertSet& set) {
    if (routing.active.empty()) throw ContractError("comoe_forward: no active experts");
    ad::Var out;
    for (std::size_t e : routing.active) {
        if (e >= set.size()) throw ContractError("comoe_forward: active expert index out of range");
        ad::Var y = ad::scale_by(nn::ffn(s, z, set.experts[e]), routing.g, e);
        out = out.valid() ? ad::add(out, y) : y;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Gradient-modulation checks.

namespace {

ad::Var mse_half(ad::Var x, const Tensor& target) {
    ad::Var d = ad::sub(x, x.graph->constant(target));
    return ad::scale(ad::sum(ad::mul(d, d)), 0.5);
}

struct ExpertTensors {
    std::array<ParamId, 4> ids;  // fc1.w, fc1.b, fc2.w, fc2.b
};

ExpertTensors tensors_of(const nn::FfnParams& f) {
    return {{f.fc1.weight, *f.fc1.bias, f.fc2.weight, *f.fc2.bias}};
}

GradBuffer autodiff_grads(ParameterStore& store, const ExpertSet& set, const RoutingSpec& strategy, const Tensor& z,
                          const Tensor& c, const Tensor& target, std::vector<std::size_t>* active,
                          Tensor* routing_out) {
    store.set_all_trainable(true);
    ad::Graph g;
    nn::Scope s{g, store};
    ad::Var zv = g.constant(z);
    ad::Var cv = g.constant(c);
    RoutingWeights rw = route(s, cv, set, strategy);
    ad::Var loss = mse_half(comoe_forward(s, zv, rw, set), target);
    g.backward(loss);
    GradBuffer out(store.size());
    g.collect_param_grads(out);
    if (active) *active = rw.active;
    if (routing_out) *routing_out = rw.g.value();
    return out;
}

double gelu_ref(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }
double gelu_grad_ref(double x) {
    return 0.5 * (1.0 + std::erf(x / std::sqrt(2.0))) + x * std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
}

}  // namespace

void ModulationReport::require_passed(double ratio_tol, double chain_tol) const {
    if (inactive_max_abs != 0.0)
        throw ContractError("inactive expert received gradient: " + inactive_worst);
    if (!(ratio_max_rel_err < ratio_tol))
        throw ContractError("identical-expert gradient ratio mismatch (" + std::to_string(ratio_max_rel_err) +
                            ") at " + ratio_worst);
    if (!(chain_max_rel_err < chain_tol))
        throw ContractError("manual chain product mismatch (" + std::to_string(chain_max_rel_err) + ") at " +
                            chain_worst);
}

ModulationReport verify_gradient_modulation(const ParameterStore& params, const ExpertSet& set, const Tensor& z,
                                            const Tensor& c, const Tensor& target) {
    ModulationReport rep;
    const std::size_t n = set.size();

    // (a) masked path under sparse_2.
    {
        ParameterStore store = params;
        std::vector<std::size_t> active;
        GradBuffer grads = autodiff_grads(store, set, {RoutingKind::sparse, std::min<std::size_t>(2, n)}, z, c,
                                          target, &active, nullptr);
        for (std::size_t e = 0; e < n; ++e) {
            if (std::binary_search(active.begin(), active.end(), e)) continue;
            for (ParamId id : tensors_of(set.experts[e]).ids) {
                const auto* gr = grads.find(id);
                if (!gr) continue;
                for (double v : *gr)
                    if (std::abs(v) > rep.inactive_max_abs) {
                        rep.inactive_max_abs = std::abs(v);
                        rep.inactive_worst = store[id].name;
                    }
            }
        }
    }

    // (b) identical experts: gradients scale with routing weight.
    {
        ParameterStore store = params;
        const auto ref = tensors_of(set.experts[0]);
        for (std::size_t e = 1; e < n; ++e) {
            const auto ids = tensors_of(set.experts[e]).ids;
            for (std::size_t t = 0; t < 4; ++t) store[ids[t]].value = store[ref.ids[t]].value;
        }
        Tensor gw;
        GradBuffer grads = autodiff_grads(store, set, {RoutingKind::dense, 0}, z, c, target, nullptr, &gw);
        rep.identical_routing = gw.data;
        for (std::size_t e = 0; e < n; ++e) {
            const auto ids = tensors_of(set.experts[e]).ids;
            rep.identical_grad_norms.push_back(l2_norm(*grads.find(ids[2])));
            if (e == 0) continue;
            const double ratio = gw.data[e] / gw.data[0];
            for (std::size_t t = 0; t < 4; ++t) {
                const auto& gm = *grads.find(ids[t]);
                const auto& g0 = *grads.find(ref.ids[t]);
                double num = 0.0, den = 0.0;
                for (std::size_t i = 0; i < gm.size(); ++i) {
                    num = std::max(num, std::abs(gm[i] - ratio * g0[i]));
                    den = std::max(den, std::abs(gm[i]));
                }
                const double rel = den > 0.0 ? num / den : num;
                if (rel > rep.ratio_max_rel_err || rep.ratio_worst.empty()) {
                    rep.ratio_max_rel_err = rel;
                    rep.ratio_worst = store[ids[t]].name;
                }
            }
        }
    }

    // (c) autodiff against g_n * dL/dz~ * dE_n/dtheta written out by hand.
    {
        ParameterStore store = params;
        Tensor gw;
        GradBuffer grads = autodiff_grads(store, set, {RoutingKind::dense, 0}, z, c, target, nullptr, &gw);

        const std::size_t L = z.rows(), D = z.cols();
        // Forward by hand.
        std::vector<double> logits(n), g(n);
        const Tensor& W = store[set.router_w].value;
        const Tensor& b = store[set.router_b].value;
        double mx = -INFINITY;
        for (std::size_t e = 0; e < n; ++e) {
            logits[e] = b.data[e];
            for (std::size_t d = 0; d < D; ++d) logits[e] += W.data[e * D + d] * c.data[d];
            mx = std::max(mx, logits[e]);
        }
        double zsum = 0.0;
        for (std::size_t e = 0; e < n; ++e) zsum += (g[e] = std::exp(logits[e] - mx));
        for (double& v : g) v /= zsum;

        struct Act {
            std::vector<double> pre, hid, out;
        };
        std::vector<Act> acts(n);
        std::vector<double> zt(L * D, 0.0);
        for (std::size_t e = 0; e < n; ++e) {
            const auto ids = tensors_of(set.experts[e]).ids;
            const Tensor& W1 = store[ids[0]].value;
            const Tensor& b1 = store[ids[1]].value;
            const Tensor& W2 = store[ids[2]].value;
            const Tensor& b2 = store[ids[3]].value;
            const std::size_t H = W1.cols();
            Act& a = acts[e];
            a.pre.assign(L * H, 0.0);
            a.hid.assign(L * H, 0.0);
            a.out.assign(L * D, 0.0);
            for (std::size_t i = 0; i < L; ++i)
                for (std::size_t h = 0; h < H; ++h) {
                    double s = b1.data[h];
                    for (std::size_t d = 0; d < D; ++d) s += z.data[i * D + d] * W1.data[d * H + h];
                    a.pre[i * H + h] = s;
                    a.hid[i * H + h] = gelu_ref(s);
                }
            for (std::size_t i = 0; i < L; ++i)
                for (std::size_t d = 0; d < D; ++d) {
                    double s = b2.data[d];
                    for (std::size_t h = 0; h < H; ++h) s += a.hid[i * H + h] * W2.data[h * D + d];
                    a.out[i * D + d] = s;
                    zt[i * D + d] += g[e] * s;
                }
        }
        // dL/dz~ for L = 0.5 ||z~ - target||^2.
        std::vector<double> up(L * D);
        for (std::size_t i = 0; i < L * D; ++i) up[i] = zt[i] - target.data[i];

        auto compare = [&](ParamId id, const std::vector<double>& manual) {
            const auto* ad_grad = grads.find(id);
            double num = 0.0, den = 0.0;
            for (std::size_t i = 0; i < manual.size(); ++i) {
                const double a = ad_grad ? (*ad_grad)[i] : 0.0;
                num = std::max(num, std::abs(a - manual[i]));
                den = std::max(den, std::abs(manual[i]));
            }
            const double rel = den > 0.0 ? num / den : num;
            if (rel > rep.chain_max_rel_err || rep.chain_worst.empty()) {
                rep.chain_max_rel_err = rel;
                rep.chain_worst = store[id].name;
            }
        };

        for (std::size_t e = 0; e < n; ++e) {
            const auto ids = tensors_of(set.experts[e]).ids;
            const Tensor& W2 = store[ids[2]].value;
            const std::size_t H = W2.rows();
            const Act& a = acts[e];
            std::vector<double> dW2(H * D, 0.0), db2(D, 0.0), dpre(L * H, 0.0), dW1(D * H, 0.0), db1(H, 0.0);
            for (std::size_t i = 0; i < L; ++i)
                for (std::size_t d = 0; d < D; ++d) {
                    const double gu = g[e] * up[i * D + d];
                    db2[d] += gu;
                    for (std::size_t h = 0; h < H; ++h) dW2[h * D + d] += a.hid[i * H + h] * gu;
                }
            for (std::size_t i = 0; i < L; ++i)
                for (std::size_t h = 0; h < H; ++h) {
                    double s = 0.0;
                    for (std::size_t d = 0; d < D; ++d) s += g[e] * up[i * D + d] * W2.data[h * D + d];
                    dpre[i * H + h] = s * gelu_grad_ref(a.pre[i * H + h]);
                }
            for (std::size_t i = 0; i < L; ++i)
                for (std::size_t h = 0; h < H; ++h) {
                    db1[h] += dpre[i * H + h];
                    for (std::size_t d = 0; d < D; ++d) dW1[d * H + h] += z.data[i * D + d] * dpre[i * H + h];
                }
            compare(ids[0], dW1);
            compare(ids[1], db1);
            compare(ids[2], dW2);
            compare(ids[3], db2);
        }
    }
    return rep;
}

}  // namespace covft
