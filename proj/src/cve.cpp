#include "covft/cve.hpp"

#include "covft/error.hpp"

#include <array>
#include <cmath>

namespace covft {

namespace {
constexpr std::array<std::string_view, 4> kContextNames = {"image_only", "text_only", "concat", "cve"};
}

ContextKind parse_context_kind(std::string_view name) {
    for (std::size_t i = 0; i < kContextNames.size(); ++i)
        if (kContextNames[i] == name) return static_cast<ContextKind>(i);
    throw ConfigError("unknown context kind '" + std::string(name) + "' (image_only, text_only, concat, cve)",
                      "model.context");
}

std::string_view context_kind_name(ContextKind kind) { return kContextNames.at(static_cast<std::size_t>(kind)); }

TextEncoder make_text_encoder(ParameterStore& store, const TextEncoderConfig& cfg, std::uint64_t seed) {
    TextEncoder enc;
    enc.cfg = cfg;
    enc.embed = store.add("text.embed", nn::normal_init(seed, "text.embed", {cfg.vocab, cfg.dim}, 1.0));
    enc.pos = store.add("text.pos", nn::normal_init(seed, "text.pos", {cfg.max_len, cfg.dim}, 0.1));
    for (std::size_t b = 0; b < cfg.depth; ++b)
        enc.blocks.push_back(nn::make_transformer_block(store, "text.block" + std::to_string(b), cfg.dim, cfg.heads,
                                                        4 * cfg.dim, seed, cfg.init_std));
    enc.ln_f = nn::make_layer_norm(store, "text.ln_f", cfg.dim);
    return enc;
}

Tensor text_embed(const ParameterStore& store, const TextEncoder& enc, std::span<const int> tokens) {
    if (tokens.size() + 1 > enc.cfg.max_len)
        throw InputError("instruction of " + std::to_string(tokens.size()) + " tokens exceeds text encoder length " +
                         std::to_string(enc.cfg.max_len - 1));
    std::vector<int> ids;
    ids.reserve(tokens.size() + 1);
    ids.push_back(0);
    for (int t : tokens) {
        if (t < 0 || static_cast<std::size_t>(t) >= enc.cfg.vocab)
            throw InputError("token id " + std::to_string(t) + " outside vocabulary of " +
                             std::to_string(enc.cfg.vocab));
        ids.push_back(t);
    }
    ad::Graph g(false);
    nn::Scope s{g, store};
    std::vector<int> positions(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) positions[i] = static_cast<int>(i);
    ad::Var x = ad::add(ad::gather_rows(s(enc.embed), ids), ad::gather_rows(s(enc.pos), positions));
    for (const auto& b : enc.blocks) x = nn::transformer_block(s, x, b, false);
    return nn::layer_norm(s, x, enc.ln_f).value();
}

CveLayerParams make_cve_layer(ParameterStore& store, const std::string& prefix, ContextKind kind, std::size_t dim,
                              std::size_t bottleneck, std::uint64_t seed, double stddev) {
    if (bottleneck == 0) throw ConfigError("CVE bottleneck width must be positive", "model.cve_rank");
    CveLayerParams p;
    p.kind = kind;
    auto w = [&](const std::string& name, Shape shape) {
        return store.add(prefix + name, nn::normal_init(seed, prefix + name, std::move(shape), stddev));
    };
    switch (kind) {
    case ContextKind::cve:
        p.visual.up = w(".visual.up", {dim, bottleneck});
        p.visual.down = store.add(prefix + ".visual.down", Tensor({bottleneck, dim}));
        p.text.up = w(".text.up", {dim, bottleneck});
        p.text.down = store.add(prefix + ".text.down", Tensor({bottleneck, dim}));
        p.ln_q = nn::make_layer_norm(store, prefix + ".ln_q", dim);
        p.ln_z = nn::make_layer_norm(store, prefix + ".ln_z", dim);
        p.ln_t = nn::make_layer_norm(store, prefix + ".ln_t", dim);
        p.wq = w(".wq", {dim, dim});
        p.wk = w(".wk", {dim, dim});
        p.wv = w(".wv", {dim, dim});
        break;
    case ContextKind::concat:
        p.concat_proj = nn::make_linear(store, prefix + ".concat", 2 * dim, dim, seed, stddev);
        break;
    case ContextKind::image_only:
    case ContextKind::text_only: break;
    }
    return p;
}

ad::Var residual_refine(const nn::Scope& s, ad::Var x, const RefinerParams& p) {
    return ad::add(x, ad::matmul(ad::gelu(ad::matmul(x, s(p.up))), s(p.down)));
}

ad::Var extract_context(const nn::Scope& s, ad::Var z_hat, ad::Var t_hat, const CveLayerParams& p) {
    if (z_hat.value().rows() == 0 || z_hat.value().numel() == 0)
        throw ContractError("extract_context: empty visual sequence");
    const std::size_t dim = z_hat.value().cols();
    ad::Var q = ad::matmul(ad::slice_rows(nn::layer_norm(s, t_hat, p.ln_q), 0, 1), s(p.wq));  // [1, D]
    std::array<ad::Var, 2> parts = {nn::layer_norm(s, z_hat, p.ln_z), nn::layer_norm(s, t_hat, p.ln_t)};
    ad::Var kv = ad::concat_rows(parts);  // [L+T, D]
    ad::Var k = ad::matmul(kv, s(p.wk));
    ad::Var v = ad::matmul(kv, s(p.wv));
    ad::Var scores = ad::scale(ad::matmul(q, ad::transpose(k)), 1.0 / std::sqrt(static_cast<double>(dim)));
    return ad::reshape(ad::matmul(ad::softmax(scores, 1), v), {dim});
}

ContextState contextual_variant(const nn::Scope& s, ad::Var z, ad::Var t, const CveLayerParams& p,
                                std::size_t layer) {
    ContextState st;
    st.layer = layer;
    st.t = t;
    switch (p.kind) {
    case ContextKind::image_only: st.c = ad::mean_rows(z); break;
    case ContextKind::text_only: st.c = ad::row(t, 0); break;
    case ContextKind::concat: {
        const std::size_t dim = z.value().cols();
        std::array<ad::Var, 2> parts = {ad::reshape(ad::mean_rows(z), {1, dim}), ad::slice_rows(t, 0, 1)};
        ad::Var joined = ad::concat_cols(parts);
        st.c = ad::reshape(nn::linear(s, joined, *p.concat_proj), {dim});
        break;
    }
    case ContextKind::cve: {
        ad::Var z_hat = residual_refine(s, z, p.visual);
        ad::Var t_hat = residual_refine(s, t, p.text);
        st.c = extract_context(s, z_hat, t_hat, p);
        st.t = t_hat;
        break;
    }
    }
    return st;
}

}  // namespace covft
