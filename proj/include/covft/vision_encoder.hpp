#pragma once

// ViT-style encoder over 16x16 RGB images. Blocks in [comoe_start, comoe_end]
// swap their FFN for an ExpertSet routed by a per-layer context vector.

#include "covft/comoe.hpp"
#include "covft/cve.hpp"
#include "covft/nn.hpp"

#include <cstdint>
#include <optional>
#include <vector>

namespace covft {

struct EncoderConfig {
    std::size_t image_size = 16;
    std::size_t patch_size = 4;
    std::size_t depth = 8;
    std::size_t dim = 32;
    std::size_t heads = 4;
    std::size_t hidden = 128;
    bool comoe = false;
    std::size_t comoe_start = 4;
    std::size_t comoe_end = 7;
    std::size_t experts = 4;
    RoutingSpec routing{RoutingKind::dense, 0};
    ContextKind context = ContextKind::cve;
    std::size_t cve_rank = 8;
    /// Router weight init scale; 0 gives the all-zero router.
    double router_init_std = 0.1;
    std::size_t feature_layer = 7;
    std::size_t vpt_prompts = 0;
    std::size_t lora_rank = 0;
    double init_std = 0.02;

    std::size_t tokens() const { return (image_size / patch_size) * (image_size / patch_size); }
    std::size_t patch_dim() const { return patch_size * patch_size * 3; }
    bool uses_comoe(std::size_t block) const { return comoe && block >= comoe_start && block <= comoe_end; }
    /// Throws ConfigError naming the offending field.
    void validate() const;
};

struct VitBlock {
    nn::LayerNormParams ln1, ln2;
    nn::AttentionParams attn;
    std::optional<nn::FfnParams> ffn;
    std::optional<ExpertSet> moe;
    std::optional<CveLayerParams> cve;
};

struct VisionEncoder {
    EncoderConfig cfg;
    nn::LinearParams patch;
    ParamId pos = 0;                 // [L_v, D]
    std::optional<ParamId> prompts;  // [n_prompts, D]
    std::vector<VitBlock> blocks;
};

/// Registers "enc.*" parameters. Every backbone tensor is seeded by (seed, name),
/// so configs that differ only in CoMoE/LoRA/VPT share identical backbone weights.
VisionEncoder make_vision_encoder(ParameterStore& store, const EncoderConfig& cfg, std::uint64_t seed);

/// [H, W, 3] -> [L_v, D]: flattened patches times the projection, plus position embeddings.
ad::Var patch_embed(const nn::Scope& s, const VisionEncoder& enc, const Tensor& image);

/// One pre-norm block. `ctx` carries the text stream in and the fresh context out;
/// it must be present when the block uses CoMoE.
ad::Var block_forward(const nn::Scope& s, ad::Var z, const VitBlock& block, std::size_t index,
                      ContextState* ctx, std::uint64_t route_seed, RoutingWeights* routing_out = nullptr);

struct EncodeResult {
    ad::Var features;  // [L_v, D], prompts stripped
    std::vector<ContextState> ctx_trace;
    std::vector<RoutingWeights> routing_trace;
};

/// Runs blocks 0..feature_layer. `text` is the frozen text embedding [T, D]
/// (required when CoMoE is enabled). `route_seed` drives random_k draws.
EncodeResult encode(const nn::Scope& s, const VisionEncoder& enc, const Tensor& image, const Tensor* text,
                    std::uint64_t route_seed = 0);

}  // namespace covft
