#include "covft/nn.hpp"

#include "covft/error.hpp"
#include "covft/rng.hpp"

#include <cmath>
#include <vector>

namespace covft::nn {

Tensor normal_init(std::uint64_t seed, const std::string& name, Shape shape, double stddev) {
    Tensor t(std::move(shape));
    Rng rng = make_rng(derive_seed(seed, name));
    for (double& v : t.data) v = normal(rng, 0.0, stddev);
    return t;
}

LinearParams make_linear(ParameterStore& store, const std::string& name, std::size_t in, std::size_t out,
                         std::uint64_t seed, double stddev, bool with_bias) {
    LinearParams p;
    p.in = in;
    p.out = out;
    p.weight = store.add(name + ".weight", normal_init(seed, name + ".weight", {in, out}, stddev));
    if (with_bias) p.bias = store.add(name + ".bias", Tensor({out}));
    return p;
}

LayerNormParams make_layer_norm(ParameterStore& store, const std::string& name, std::size_t dim) {
    return {store.add(name + ".gamma", Tensor({dim}, 1.0)), store.add(name + ".beta", Tensor({dim}))};
}

FfnParams make_ffn(ParameterStore& store, const std::string& name, std::size_t dim, std::size_t hidden,
                   std::uint64_t seed, double stddev) {
    return {make_linear(store, name + ".fc1", dim, hidden, seed, stddev),
            make_linear(store, name + ".fc2", hidden, dim, seed, stddev)};
}

AttentionParams make_attention(ParameterStore& store, const std::string& name, std::size_t dim, std::size_t heads,
                               std::uint64_t seed, double stddev) {
    if (heads == 0 || dim % heads != 0)
        throw ConfigError("attention width " + std::to_string(dim) + " not divisible by " + std::to_string(heads) +
                          " heads");
    AttentionParams p;
    p.q = make_linear(store, name + ".q", dim, dim, seed, stddev);
    p.k = make_linear(store, name + ".k", dim, dim, seed, stddev);
    p.v = make_linear(store, name + ".v", dim, dim, seed, stddev);
    p.o = make_linear(store, name + ".o", dim, dim, seed, stddev);
    p.heads = heads;
    return p;
}

TransformerBlockParams make_transformer_block(ParameterStore& store, const std::string& name, std::size_t dim,
                                              std::size_t heads, std::size_t hidden, std::uint64_t seed,
                                              double stddev) {
    TransformerBlockParams p;
    p.ln1 = make_layer_norm(store, name + ".ln1", dim);
    p.attn = make_attention(store, name + ".attn", dim, heads, seed, stddev);
    p.ln2 = make_layer_norm(store, name + ".ln2", dim);
    p.ffn = make_ffn(store, name + ".ffn", dim, hidden, seed, stddev);
    return p;
}

void add_lora(ParameterStore& store, LinearParams& lin, const std::string& name, std::size_t rank,
              std::uint64_t seed, double stddev) {
    if (rank == 0 || rank > std::min(lin.in, lin.out))
        throw ConfigError("LoRA rank " + std::to_string(rank) + " outside [1, " +
                              std::to_string(std::min(lin.in, lin.out)) + "]",
                          "model.lora_rank");
    lin.lora_a = store.add(name + ".lora_a", normal_init(seed, name + ".lora_a", {lin.in, rank}, stddev));
    lin.lora_b = store.add(name + ".lora_b", Tensor({rank, lin.out}));
}

ad::Var linear(const Scope& s, ad::Var x, const LinearParams& p) {
    ad::Var y = ad::matmul(x, s(p.weight));
    if (p.lora_a && p.lora_b) y = ad::add(y, ad::matmul(ad::matmul(x, s(*p.lora_a)), s(*p.lora_b)));
    if (p.bias) y = ad::add_bias(y, s(*p.bias));
    return y;
}

ad::Var layer_norm(const Scope& s, ad::Var x, const LayerNormParams& p, double eps) {
    return ad::layer_norm(x, s(p.gamma), s(p.beta), eps);
}

ad::Var ffn(const Scope& s, ad::Var x, const FfnParams& p) {
    return linear(s, ad::gelu(linear(s, x, p.fc1)), p.fc2);
}

ad::Var self_attention(const Scope& s, ad::Var x, const AttentionParams& p, bool causal) {
    const std::size_t dim = x.value().cols();
    const std::size_t dh = dim / p.heads;
    ad::Var q = linear(s, x, p.q);
    ad::Var k = linear(s, x, p.k);
    ad::Var v = linear(s, x, p.v);
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<ad::Var> heads;
    heads.reserve(p.heads);
    for (std::size_t h = 0; h < p.heads; ++h) {
        ad::Var qh = ad::slice_cols(q, h * dh, (h + 1) * dh);
        ad::Var kh = ad::slice_cols(k, h * dh, (h + 1) * dh);
        ad::Var vh = ad::slice_cols(v, h * dh, (h + 1) * dh);
        ad::Var scores = ad::scale(ad::matmul(qh, ad::transpose(kh)), scale);
        if (causal) scores = ad::causal_mask(scores);
        heads.push_back(ad::matmul(ad::softmax(scores, 1), vh));
    }
    ad::Var merged = p.heads == 1 ? heads[0] : ad::concat_cols(heads);
    return linear(s, merged, p.o);
}

ad::Var transformer_block(const Scope& s, ad::Var x, const TransformerBlockParams& p, bool causal) {
    ad::Var h = ad::add(x, self_attention(s, layer_norm(s, x, p.ln1), p.attn, causal));
    return ad::add(h, ffn(s, layer_norm(s, h, p.ln2), p.ffn));
}

}  // namespace covft::nn
