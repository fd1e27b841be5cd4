#pragma once

// Contextual vector extraction: a frozen text encoder plus, at every CoMoE
// block, a text-queried cross-attention that pools refined visual and text
// tokens into one context vector c.

#include "covft/autodiff.hpp"
#include "covft/nn.hpp"
#include "covft/params.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace covft {

enum class ContextKind { image_only, text_only, concat, cve };

ContextKind parse_context_kind(std::string_view name);
std::string_view context_kind_name(ContextKind kind);

// Frozen text encoder -------------------------------------------------------

struct TextEncoderConfig {
    std::size_t dim = 32;
    std::size_t depth = 2;
    std::size_t heads = 4;
    std::size_t vocab = 64;
    std::size_t max_len = 32;
    /// Weight scale of the random stand-in for a pretrained encoder.
    double init_std = 0.2;
};

struct TextEncoder {
    TextEncoderConfig cfg;
    ParamId embed = 0;  // [vocab, dim]
    ParamId pos = 0;    // [max_len, dim]
    std::vector<nn::TransformerBlockParams> blocks;
    nn::LayerNormParams ln_f;
};

/// Registers "text.*" parameters (never trainable).
TextEncoder make_text_encoder(ParameterStore& store, const TextEncoderConfig& cfg, std::uint64_t seed);

/// Per-token embeddings [T+1, dim] of [CLS; tokens]; row 0 is the summary row.
/// Computed without gradient tracking. Throws InputError for ids outside the vocabulary.
Tensor text_embed(const ParameterStore& store, const TextEncoder& enc, std::span<const int> tokens);

// Per-layer CVE -------------------------------------------------------------

/// x + GELU(x W_up) W_down
struct RefinerParams {
    ParamId up = 0;    // [D, r]
    ParamId down = 0;  // [r, D]
};

struct CveLayerParams {
    ContextKind kind = ContextKind::cve;
    // cve
    RefinerParams visual, text;
    nn::LayerNormParams ln_q, ln_z, ln_t;
    ParamId wq = 0, wk = 0, wv = 0;  // [D, D], no bias
    // concat
    std::optional<nn::LinearParams> concat_proj;  // [2D] -> D
};

/// Registers the parameters `kind` needs under `prefix` (W_down zero-initialised).
CveLayerParams make_cve_layer(ParameterStore& store, const std::string& prefix, ContextKind kind, std::size_t dim,
                              std::size_t bottleneck, std::uint64_t seed, double stddev);

struct ContextState {
    ad::Var c;  // [D]
    ad::Var t;  // [T, D] text stream handed to the next CVE layer
    std::size_t layer = 0;
};

ad::Var residual_refine(const nn::Scope& s, ad::Var x, const RefinerParams& p);

/// Single-head cross-attention: query = row 0 of LN_q(t_hat), keys/values over
/// [LN_z(z_hat); LN_t(t_hat)] stacked along the sequence axis, scale 1/sqrt(D).
ad::Var extract_context(const nn::Scope& s, ad::Var z_hat, ad::Var t_hat, const CveLayerParams& p);

/// Context for block `layer` from its input tokens `z` and the incoming text stream `t`.
/// Only the cve kind refines; the refined text stream is passed on in the result.
ContextState contextual_variant(const nn::Scope& s, ad::Var z, ad::Var t, const CveLayerParams& p,
                                std::size_t layer);

}  // namespace covft
