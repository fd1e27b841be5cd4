#include "covft/gradcheck.hpp"

#include "covft/error.hpp"
#include "covft/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace covft {

namespace {

double evaluate(const LossBuilder& f, const std::string& pname) {
    ad::Graph g(false);
    const double v = f(g).value().data.at(0);
    if (!std::isfinite(v)) throw NumericError("non-finite loss while perturbing " + pname);
    return v;
}

}  // namespace

GradCheckResult finite_diff_check(const LossBuilder& f, ParameterStore& store, std::span<const ParamId> params,
                                  const GradCheckOptions& opts) {
    if (opts.step < 1e-6 || opts.step > 1e-4)
        throw ContractError("finite_diff_check: step must lie in [1e-6, 1e-4]");

    struct TrainableGuard {
        ParameterStore& store;
        std::vector<bool> saved;
        ~TrainableGuard() {
            for (ParamId id = 0; id < saved.size(); ++id) store[id].trainable = saved[id];
        }
    } guard{store, {}};
    for (const auto& p : store) guard.saved.push_back(p.trainable);
    for (ParamId id : params) store[id].trainable = true;

    GradBuffer analytic(store.size());
    {
        ad::Graph g;
        ad::Var loss = f(g);
        if (!std::isfinite(loss.value().data.at(0))) throw NumericError("non-finite loss at the base point");
        g.backward(loss);
        g.collect_param_grads(analytic);
    }

    GradCheckResult res;
    Rng rng = make_rng(opts.seed);
    for (ParamId id : params) {
        Parameter& p = store[id];
        const std::size_t n = p.value.numel();
        std::vector<std::size_t> coords(n);
        std::iota(coords.begin(), coords.end(), std::size_t{0});
        if (opts.coords_per_param && opts.coords_per_param < n) {
            for (std::size_t i = 0; i < opts.coords_per_param; ++i)
                std::swap(coords[i], coords[i + uniform_index(rng, n - i)]);
            coords.resize(opts.coords_per_param);
        }
        const std::vector<double>* ga = analytic.find(id);
        for (std::size_t c : coords) {
            const double orig = p.value.data[c];
            p.value.data[c] = orig + opts.step;
            const double fp = evaluate(f, p.name);
            p.value.data[c] = orig - opts.step;
            const double fm = evaluate(f, p.name);
            p.value.data[c] = orig;
            const double numeric = (fp - fm) / (2.0 * opts.step);
            const double a = ga ? (*ga)[c] : 0.0;
            const double denom = std::max({std::abs(a), std::abs(numeric), opts.denominator_floor});
            const double rel = std::abs(a - numeric) / denom;
            ++res.coords_checked;
            if (rel > res.max_rel_err || res.worst_param.empty()) {
                res.max_rel_err = rel;
                res.worst_param = p.name;
                res.worst_index = c;
                res.worst_analytic = a;
                res.worst_numeric = numeric;
            }
        }
    }
    return res;
}

}  // namespace covft
