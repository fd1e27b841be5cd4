#pragma once

// Parameter handles and forward functions shared by the encoder, text encoder,
// CVE/CoMoE modules and the decoder. Weights use the x * W convention
// (W is [in, out]).

#include "covft/autodiff.hpp"
#include "covft/params.hpp"

#include <cstdint>
#include <optional>
#include <string>

namespace covft::nn {

/// Graph plus the parameter store its leaves bind to.
struct Scope {
    ad::Graph& graph;
    const ParameterStore& params;

    ad::Var operator()(ParamId id) const { return graph.param(params, id); }
};

/// Seeded normal(0, std) tensor; the stream depends only on (seed, name), so
/// adding or removing other parameters never shifts an initialisation.
Tensor normal_init(std::uint64_t seed, const std::string& name, Shape shape, double stddev);

struct LinearParams {
    ParamId weight = 0;
    std::optional<ParamId> bias;
    std::optional<ParamId> lora_a;  // [in, r]
    std::optional<ParamId> lora_b;  // [r, out]
    std::size_t in = 0;
    std::size_t out = 0;
};

struct LayerNormParams {
    ParamId gamma = 0;
    ParamId beta = 0;
};

struct FfnParams {
    LinearParams fc1;
    LinearParams fc2;
};

struct AttentionParams {
    LinearParams q, k, v, o;
    std::size_t heads = 1;
};

struct TransformerBlockParams {
    LayerNormParams ln1, ln2;
    AttentionParams attn;
    FfnParams ffn;
};

LinearParams make_linear(ParameterStore& store, const std::string& name, std::size_t in, std::size_t out,
                         std::uint64_t seed, double stddev, bool with_bias = true);
LayerNormParams make_layer_norm(ParameterStore& store, const std::string& name, std::size_t dim);
FfnParams make_ffn(ParameterStore& store, const std::string& name, std::size_t dim, std::size_t hidden,
                   std::uint64_t seed, double stddev);
AttentionParams make_attention(ParameterStore& store, const std::string& name, std::size_t dim, std::size_t heads,
                               std::uint64_t seed, double stddev);
TransformerBlockParams make_transformer_block(ParameterStore& store, const std::string& name, std::size_t dim,
                                              std::size_t heads, std::size_t hidden, std::uint64_t seed,
                                              double stddev);

/// Adds a low-rank adapter: A ~ normal(0, stddev), B = 0, so the initial delta is zero.
void add_lora(ParameterStore& store, LinearParams& lin, const std::string& name, std::size_t rank,
              std::uint64_t seed, double stddev);

ad::Var linear(const Scope& s, ad::Var x, const LinearParams& p);
ad::Var layer_norm(const Scope& s, ad::Var x, const LayerNormParams& p, double eps = 1e-5);
/// fc2(GELU(fc1(x)))
ad::Var ffn(const Scope& s, ad::Var x, const FfnParams& p);
/// Multi-head scaled dot-product self-attention with output projection.
ad::Var self_attention(const Scope& s, ad::Var x, const AttentionParams& p, bool causal);
/// Pre-norm block: x + attn(ln1(x)), then + ffn(ln2(.)).
ad::Var transformer_block(const Scope& s, ad::Var x, const TransformerBlockParams& p, bool causal);

}  // namespace covft::nn
