#include "covft/vision_encoder.hpp"

#include "covft/error.hpp"
#include "covft/rng.hpp"

#include <array>

namespace covft {

void EncoderConfig::validate() const {
    if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0)
        throw ConfigError("image_size " + std::to_string(image_size) + " not divisible by patch_size " +
                              std::to_string(patch_size),
                          "model.patch_size");
    if (depth == 0) throw ConfigError("depth must be positive", "model.depth");
    if (heads == 0 || dim % heads != 0)
        throw ConfigError("dim " + std::to_string(dim) + " not divisible by heads " + std::to_string(heads),
                          "model.heads");
    if (hidden == 0) throw ConfigError("hidden width must be positive", "model.hidden");
    if (feature_layer >= depth)
        throw ConfigError("feature_layer " + std::to_string(feature_layer) + " >= depth " + std::to_string(depth),
                          "model.feature_layer");
    if (comoe) {
        if (comoe_start > comoe_end || comoe_end >= depth)
            throw ConfigError("need 0 <= comoe_start <= comoe_end < depth, got " + std::to_string(comoe_start) +
                                  ".." + std::to_string(comoe_end),
                              "model.comoe_start");
        if (experts < 2) throw ConfigError("at least 2 experts required", "model.experts");
        if ((routing.kind == RoutingKind::sparse || routing.kind == RoutingKind::random) &&
            (routing.k == 0 || routing.k > experts))
            throw ConfigError("routing k=" + std::to_string(routing.k) + " outside [1, " + std::to_string(experts) +
                                  "]",
                              "model.routing");
        if (!(router_init_std >= 0.0)) throw ConfigError("must be non-negative", "model.router_init_std");
        if (context == ContextKind::cve && cve_rank == 0)
            throw ConfigError("CVE bottleneck must be positive", "model.cve_rank");
    }
    if (lora_rank > dim) throw ConfigError("LoRA rank exceeds width", "model.lora_rank");
}

VisionEncoder make_vision_encoder(ParameterStore& store, const EncoderConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    VisionEncoder enc;
    enc.cfg = cfg;
    const double sd = cfg.init_std;
    enc.patch = nn::make_linear(store, "enc.patch", cfg.patch_dim(), cfg.dim, seed, sd);
    enc.pos = store.add("enc.pos", nn::normal_init(seed, "enc.pos", {cfg.tokens(), cfg.dim}, sd));
    if (cfg.vpt_prompts > 0)
        enc.prompts = store.add("enc.vpt.prompts",
                                nn::normal_init(seed, "enc.vpt.prompts", {cfg.vpt_prompts, cfg.dim}, sd));
    for (std::size_t b = 0; b < cfg.depth; ++b) {
        const std::string name = "enc.block" + std::to_string(b);
        VitBlock blk;
        blk.ln1 = nn::make_layer_norm(store, name + ".ln1", cfg.dim);
        blk.attn = nn::make_attention(store, name + ".attn", cfg.dim, cfg.heads, seed, sd);
        if (cfg.lora_rank > 0) {
            nn::add_lora(store, blk.attn.q, name + ".attn.q", cfg.lora_rank, seed, sd);
            nn::add_lora(store, blk.attn.v, name + ".attn.v", cfg.lora_rank, seed, sd);
        }
        blk.ln2 = nn::make_layer_norm(store, name + ".ln2", cfg.dim);
        if (cfg.uses_comoe(b)) {
            // The donor lives in a scratch store under the plain-FFN name so the
            // experts copy exactly the weights a CoMoE-free encoder would hold.
            ParameterStore scratch;
            nn::FfnParams donor = nn::make_ffn(scratch, name + ".ffn", cfg.dim, cfg.hidden, seed, sd);
            blk.moe = init_experts_from_ffn(store, name + ".moe", scratch, donor, cfg.experts, cfg.routing,
                                             cfg.router_init_std, seed);
            blk.cve = make_cve_layer(store, name + ".cve", cfg.context, cfg.dim, cfg.cve_rank, seed, sd);
        } else {
            blk.ffn = nn::make_ffn(store, name + ".ffn", cfg.dim, cfg.hidden, seed, sd);
        }
        enc.blocks.push_back(std::move(blk));
    }
    return enc;
}

ad::Var patch_embed(const nn::Scope& s, const VisionEncoder& enc, const Tensor& image) {
    const auto& cfg = enc.cfg;
    const Shape want{cfg.image_size, cfg.image_size, 3};
    if (image.shape != want)
        throw DimensionError("patch_embed: image " + shape_str(image.shape) + ", expected " + shape_str(want));
    const std::size_t side = cfg.image_size / cfg.patch_size, p = cfg.patch_size;
    Tensor patches({cfg.tokens(), cfg.patch_dim()});
    for (std::size_t pr = 0; pr < side; ++pr)
        for (std::size_t pc = 0; pc < side; ++pc) {
            double* out = &patches.data[(pr * side + pc) * cfg.patch_dim()];
            for (std::size_t i = 0; i < p; ++i)
                for (std::size_t j = 0; j < p; ++j)
                    for (std::size_t ch = 0; ch < 3; ++ch)
                        *out++ = image.data[((pr * p + i) * cfg.image_size + (pc * p + j)) * 3 + ch];
        }
    return ad::add(nn::linear(s, s.graph.constant(std::move(patches)), enc.patch), s(enc.pos));
}

ad::Var block_forward(const nn::Scope& s, ad::Var z, const VitBlock& block, std::size_t index, ContextState* ctx,
                      std::uint64_t route_seed, RoutingWeights* routing_out) {
    if (block.moe && !ctx) throw ContractError("block " + std::to_string(index) + " uses CoMoE but has no context");
    ad::Var h = ad::add(z, nn::self_attention(s, nn::layer_norm(s, z, block.ln1), block.attn, false));
    ad::Var u = nn::layer_norm(s, h, block.ln2);
    if (!block.moe) return ad::add(h, nn::ffn(s, u, *block.ffn));
    *ctx = contextual_variant(s, z, ctx->t, *block.cve, index);
    RoutingWeights rw = route(s, ctx->c, *block.moe, derive_seed(route_seed, index));
    ad::Var out = ad::add(h, comoe_forward(s, u, rw, *block.moe));
    if (routing_out) *routing_out = std::move(rw);
    return out;
}

EncodeResult encode(const nn::Scope& s, const VisionEncoder& enc, const Tensor& image, const Tensor* text,
                    std::uint64_t route_seed) {
    const auto& cfg = enc.cfg;
    EncodeResult res;
    ad::Var z = patch_embed(s, enc, image);
    if (enc.prompts) {
        std::array<ad::Var, 2> parts = {s(*enc.prompts), z};
        z = ad::concat_rows(parts);
    }
    std::optional<ContextState> ctx;
    if (cfg.comoe) {
        if (!text) throw ContractError("encode: CoMoE enabled but no instruction embedding given");
        if (text->rank() != 2 || text->cols() != cfg.dim)
            throw DimensionError("encode: text embedding " + shape_str(text->shape) + ", expected [T, " +
                                 std::to_string(cfg.dim) + "]");
        ctx = ContextState{{}, s.graph.constant(*text), 0};
    }
    for (std::size_t b = 0; b <= cfg.feature_layer; ++b) {
        const VitBlock& blk = enc.blocks[b];
        if (blk.moe) {
            RoutingWeights rw;
            z = block_forward(s, z, blk, b, &*ctx, route_seed, &rw);
            res.ctx_trace.push_back(*ctx);
            res.routing_trace.push_back(std::move(rw));
        } else {
            z = block_forward(s, z, blk, b, nullptr, route_seed);
        }
    }
    res.features = enc.prompts ? ad::slice_rows(z, cfg.vpt_prompts, cfg.vpt_prompts + cfg.tokens()) : z;
    return res;
}

}  // namespace covft
