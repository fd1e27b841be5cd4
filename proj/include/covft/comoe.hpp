#pragma once

// Contextual mixture-of-experts: N copies of a block's FFN mixed per sample by
// softmax(W c + b) over a context vector c.

#include "covft/autodiff.hpp"
#include "covft/nn.hpp"
#include "covft/params.hpp"

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace covft {

enum class RoutingKind { dense, sparse, uniform, random };

/// dense | sparse_<k> | uniform | random_<k>
struct RoutingSpec {
    RoutingKind kind = RoutingKind::dense;
    std::size_t k = 2;

    static RoutingSpec parse(std::string_view text);
    std::string str() const;
    bool operator==(const RoutingSpec&) const = default;
};

struct ExpertSet {
    std::vector<nn::FfnParams> experts;
    ParamId router_w = 0;  // [N, D]
    ParamId router_b = 0;  // [N]
    RoutingSpec strategy;

    std::size_t size() const noexcept { return experts.size(); }
};

struct RoutingWeights {
    ad::Var g;                        // [N]; exactly 0 outside `active`
    std::vector<std::size_t> active;  // ascending expert indices
};

/// N deep copies of `donor` (read from `donor_store`) registered in `dst` under
/// "<prefix>.expert<n>", plus a router "<prefix>.router". The router bias is
/// zero; its weight is zero unless `router_std` > 0, then seeded normal(0, router_std).
/// Identical experts make the output independent of the routing either way, but
/// with an all-zero router dense routing never breaks the expert symmetry.
ExpertSet init_experts_from_ffn(ParameterStore& dst, const std::string& prefix, const ParameterStore& donor_store,
                                const nn::FfnParams& donor, std::size_t n, RoutingSpec strategy,
                                double router_std = 0.0, std::uint64_t seed = 0);

/// Per-sample routing weights. `draw_seed` drives random_k draws only.
RoutingWeights route(const nn::Scope& s, ad::Var c, const ExpertSet& set, std::uint64_t draw_seed = 0);
RoutingWeights route(const nn::Scope& s, ad::Var c, const ExpertSet& set, const RoutingSpec& strategy,
                     std::uint64_t draw_seed = 0);

/// sum over active n of g[n] * E_n(z). Inactive experts are never evaluated.
ad::Var comoe_forward(const nn::Scope& s, ad::Var z, const RoutingWeights& routing, const ExpertSet& set);

/// Outcome of the three routing-weight gradient-modulation checks on one CoMoE layer.
struct ModulationReport {
    /// (a) largest |grad| over experts left out by sparse_2 routing.
    double inactive_max_abs = 0.0;
    std::string inactive_worst;
    /// (b) identical experts: max relative deviation of grad_m from (g_m / g_0) grad_0.
    double ratio_max_rel_err = 0.0;
    std::string ratio_worst;
    std::vector<double> identical_grad_norms;  // per expert, fc2 weight grads
    std::vector<double> identical_routing;     // the g used for (b)
    /// (c) autodiff vs. the hand-written chain product g_n * dL/dz~ * dE_n/dtheta.
    double chain_max_rel_err = 0.0;
    std::string chain_worst;

    bool passed(double ratio_tol = 1e-10, double chain_tol = 1e-8) const {
        return inactive_max_abs == 0.0 && ratio_max_rel_err < ratio_tol && chain_max_rel_err < chain_tol;
    }
    /// Throws ContractError naming the worst-offending tensor when a check fails.
    void require_passed(double ratio_tol = 1e-10, double chain_tol = 1e-8) const;
};

/// Runs the checks on `set` with visual tokens `z` [L, D] and a fixed (detached)
/// context `c` [D]; the loss is 0.5 * ||z~ - target||^2.
ModulationReport verify_gradient_modulation(const ParameterStore& params, const ExpertSet& set, const Tensor& z,
                                            const Tensor& c, const Tensor& target);

}  // namespace covft
