#pragma once

#include "covft/autodiff.hpp"
#include "covft/params.hpp"

#include <cstdint>
#include <functional>
#include <span>
#include <string>

namespace covft {

/// Builds a scalar loss on the given graph from the current parameter values.
using LossBuilder = std::function<ad::Var(ad::Graph&)>;

struct GradCheckResult {
    double max_rel_err = 0.0;
    std::string worst_param;
    std::size_t worst_index = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    std::size_t coords_checked = 0;
};

struct GradCheckOptions {
    double step = 1e-5;
    /// Coordinates sampled per parameter tensor; 0 checks every coordinate.
    std::size_t coords_per_param = 0;
    std::uint64_t seed = 0;
    /// Lower bound on the relative-error denominator. Raise it to the
    /// difference-quotient noise level when some true gradients are exactly zero.
    double denominator_floor = 1e-12;
};

/// Compares backward() against central differences for every listed parameter.
/// Relative error per coordinate is |a - n| / max(|a|, |n|, denominator_floor); the maximum is returned.
/// Parameters are temporarily marked trainable and restored on exit.
GradCheckResult finite_diff_check(const LossBuilder& f, ParameterStore& store, std::span<const ParamId> params,
                                  const GradCheckOptions& opts = {});

}  // namespace covft
