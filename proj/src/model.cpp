#include "covft/model.hpp"

#include "covft/error.hpp"
#include "covft/rng.hpp"

#include <algorithm>
#include <array>
#include <ostream>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace covft {

void DecoderConfig::validate() const {
    if (vocab < static_cast<std::size_t>(tok::vocab_size))
        throw ConfigError("vocabulary smaller than the task vocabulary", "decoder.vocab");
    if (heads == 0 || dim % heads != 0)
        throw ConfigError("dim " + std::to_string(dim) + " not divisible by heads " + std::to_string(heads),
                          "decoder.heads");
    if (depth == 0) throw ConfigError("depth must be positive", "decoder.depth");
    if (hidden == 0) throw ConfigError("hidden width must be positive", "decoder.hidden");
}

void ModelConfig::validate() const {
    encoder.validate();
    decoder.validate();
    if (text.dim != encoder.dim) throw ConfigError("text encoder width must equal encoder dim", "text.dim");
    if (text.heads == 0 || text.dim % text.heads != 0)
        throw ConfigError("text dim not divisible by heads", "text.heads");
    // Longest sequence: visual tokens, instruction (<= 4 tokens), BOS, answer (<= 6) and nothing more.
    if (decoder.max_len < encoder.tokens() + 4 + 1 + kMaxObjects)
        throw ConfigError("max_len " + std::to_string(decoder.max_len) + " shorter than the longest sequence",
                          "decoder.max_len");
}

Model::Model(const ModelConfig& config) : cfg(config) {
    cfg.validate();
    const std::uint64_t seed = cfg.init_seed;
    encoder = make_vision_encoder(params, cfg.encoder, seed);
    text = make_text_encoder(params, cfg.text, derive_seed(seed, "text"));
    const std::size_t dv = cfg.encoder.dim, dt = cfg.decoder.dim;
    const double sd = cfg.decoder.init_std;
    projector.fc1 = nn::make_linear(params, "proj.fc1", dv, dt, seed, sd);
    projector.fc2 = nn::make_linear(params, "proj.fc2", dt, dt, seed, sd);
    decoder.embed = params.add("dec.embed", nn::normal_init(seed, "dec.embed", {cfg.decoder.vocab, dt}, sd));
    decoder.pos = params.add("dec.pos", nn::normal_init(seed, "dec.pos", {cfg.decoder.max_len, dt}, sd));
    for (std::size_t b = 0; b < cfg.decoder.depth; ++b)
        decoder.blocks.push_back(nn::make_transformer_block(params, "dec.block" + std::to_string(b), dt,
                                                            cfg.decoder.heads, cfg.decoder.hidden, seed, sd));
    decoder.ln_f = nn::make_layer_norm(params, "dec.ln_f", dt);
    decoder.head = nn::make_linear(params, "dec.head", dt, cfg.decoder.vocab, seed, sd);
    params.set_all_trainable(false);
}

Tensor Model::embed_instruction(std::span<const int> instruction) const {
    return text_embed(params, text, instruction);
}

ad::Var project(const nn::Scope& s, const Projector& p, ad::Var z) {
    if (z.value().cols() != p.fc1.in)
        throw DimensionError("project: width " + std::to_string(z.value().cols()) + ", expected " +
                             std::to_string(p.fc1.in));
    return nn::linear(s, ad::gelu(nn::linear(s, z, p.fc1)), p.fc2);
}

ad::Var decoder_logits(const nn::Scope& s, const Model& m, ad::Var visual, std::span<const int> tokens) {
    const std::size_t n = visual.value().rows() + tokens.size();
    if (n > m.cfg.decoder.max_len)
        throw ConfigError("sequence of " + std::to_string(n) + " exceeds max_len " +
                              std::to_string(m.cfg.decoder.max_len),
                          "decoder.max_len");
    ad::Var x = visual;
    if (!tokens.empty()) {
        std::array<ad::Var, 2> parts = {visual, ad::gather_rows(s(m.decoder.embed), tokens)};
        x = ad::concat_rows(parts);
    }
    x = ad::add(x, ad::slice_rows(s(m.decoder.pos), 0, n));
    for (const auto& b : m.decoder.blocks) x = nn::transformer_block(s, x, b, true);
    return nn::linear(s, nn::layer_norm(s, x, m.decoder.ln_f), m.decoder.head);
}

ad::Var answer_loss(ad::Var logits, std::size_t start, std::span<const int> targets) {
    return ad::cross_entropy(ad::slice_rows(logits, start, start + targets.size()), targets);
}

TeacherForcing teacher_forcing(const Model& m, const Sample& sample) {
    TeacherForcing tf;
    tf.inputs = sample.instruction;
    tf.inputs.push_back(tok::bos);
    tf.inputs.insert(tf.inputs.end(), sample.answer.begin(), sample.answer.end());
    tf.targets = sample.answer;
    tf.targets.push_back(tok::eos);
    tf.answer_start = m.cfg.encoder.tokens() + sample.instruction.size();
    return tf;
}

ForwardOutput instruction_loss(const nn::Scope& s, const Model& m, const Sample& sample, std::uint64_t route_seed) {
    ForwardOutput out;
    Tensor text;
    if (m.cfg.encoder.comoe) text = m.embed_instruction(sample.instruction);
    out.encoded = encode(s, m.encoder, sample.image, m.cfg.encoder.comoe ? &text : nullptr, route_seed);
    ad::Var visual = project(s, m.projector, out.encoded.features);
    const TeacherForcing tf = teacher_forcing(m, sample);
    ad::Var logits = decoder_logits(s, m, visual, tf.inputs);
    out.loss = answer_loss(logits, tf.answer_start, tf.targets);
    return out;
}

std::vector<int> generate(const Model& m, const Tensor& image, std::span<const int> instruction,
                          std::size_t max_len) {
    ad::Graph enc_graph(false);
    nn::Scope es{enc_graph, m.params};
    Tensor text;
    if (m.cfg.encoder.comoe) text = m.embed_instruction(instruction);
    const Tensor visual =
        project(es, m.projector, encode(es, m.encoder, image, m.cfg.encoder.comoe ? &text : nullptr).features)
            .value();

    std::vector<int> tokens(instruction.begin(), instruction.end());
    tokens.push_back(tok::bos);
    std::vector<int> answer;
    while (answer.size() < max_len) {
        ad::Graph g(false);
        nn::Scope s{g, m.params};
        const Tensor& logits = decoder_logits(s, m, g.constant(visual), tokens).value();
        auto last = logits.row(logits.rows() - 1);
        const int next = static_cast<int>(std::max_element(last.begin(), last.end()) - last.begin());
        if (next == tok::eos) break;
        answer.push_back(next);
        tokens.push_back(next);
    }
    return answer;
}

double EvalReport::macro_mean() const {
    if (per_task.empty()) return 0.0;
    double sum = 0.0;
    for (const auto& [kind, score] : per_task) sum += score.accuracy();
    return sum / static_cast<double>(per_task.size());
}

EvalReport evaluate(const Model& m, const Dataset& data, std::size_t max_len) {
    if (data.empty()) throw InputError("evaluate: empty dataset");
    std::vector<char> hit(data.size(), 0);
    const auto n = static_cast<std::ptrdiff_t>(data.size());
#pragma omp parallel for schedule(dynamic, 4)
    for (std::ptrdiff_t i = 0; i < n; ++i) {
        const Sample& s = data[static_cast<std::size_t>(i)];
        hit[static_cast<std::size_t>(i)] = generate(m, s.image, s.instruction, max_len) == s.answer;
    }
    EvalReport rep;
    for (std::size_t i = 0; i < data.size(); ++i) {
        TaskScore& ts = rep.per_task[data[i].task_kind];
        ++ts.n;
        ts.correct += hit[i];
    }
    return rep;
}

void write_eval_csv(std::ostream& os, const std::string& run_id, const EvalReport& report, bool header) {
    if (header) os << "run_id,task_kind,accuracy,n\n";
    std::size_t total = 0;
    for (const auto& [kind, score] : report.per_task) {
        os << run_id << ',' << task_name(kind) << ',' << score.accuracy() << ',' << score.n << '\n';
        total += score.n;
    }
    os << run_id << ",macro_mean," << report.macro_mean() << ',' << total << '\n';
}

namespace {

struct SampleGrad {
    double loss = 0.0;
    GradBuffer grads;
    std::vector<std::vector<double>> routing;
};

SampleGrad sample_gradient(const Model& m, const Sample& sample, std::uint64_t seed) {
    SampleGrad out;
    ad::Graph g;
    nn::Scope s{g, m.params};
    ForwardOutput fo = instruction_loss(s, m, sample, seed);
    out.loss = fo.loss.value().data[0];
    if (!std::isfinite(out.loss)) throw NumericError("non-finite loss");
    if (g.requires_grad(fo.loss)) {
        g.backward(fo.loss);
        out.grads.resize(m.params.size());
        g.collect_param_grads(out.grads);
    }
    for (const auto& rw : fo.encoded.routing_trace) out.routing.push_back(rw.g.value().data);
    return out;
}

}  // namespace

BatchGrad batch_gradients(const Model& m, std::span<const Sample* const> batch, std::uint64_t routing_seed,
                          std::size_t step, bool parallel) {
    if (batch.empty()) throw InputError("batch_gradients: empty batch");
    std::vector<SampleGrad> per(batch.size());
    const auto n = static_cast<std::ptrdiff_t>(batch.size());
    if (parallel) {
        std::exception_ptr err;
#pragma omp parallel for schedule(dynamic, 1)
        for (std::ptrdiff_t i = 0; i < n; ++i) {
            try {
                per[static_cast<std::size_t>(i)] =
                    sample_gradient(m, *batch[static_cast<std::size_t>(i)],
                                    derive_seed(routing_seed, step, static_cast<std::uint64_t>(i)));
            } catch (...) {
#pragma omp critical(covft_batch_error)
                if (!err) err = std::current_exception();
            }
        }
        if (err) std::rethrow_exception(err);
    } else {
        for (std::ptrdiff_t i = 0; i < n; ++i)
            per[static_cast<std::size_t>(i)] = sample_gradient(
                m, *batch[static_cast<std::size_t>(i)], derive_seed(routing_seed, step, static_cast<std::uint64_t>(i)));
    }
    BatchGrad out;
    out.grads.resize(m.params.size());
    const double inv = 1.0 / static_cast<double>(batch.size());
    for (auto& sg : per) {
        out.loss += sg.loss;
        if (sg.grads.size()) out.grads.add(sg.grads);
        if (out.routing_mean.empty()) out.routing_mean.assign(sg.routing.size(), {});
        for (std::size_t l = 0; l < sg.routing.size(); ++l) {
            auto& acc = out.routing_mean[l];
            if (acc.empty()) acc.assign(sg.routing[l].size(), 0.0);
            for (std::size_t e = 0; e < acc.size(); ++e) acc[e] += sg.routing[l][e];
        }
    }
    out.loss *= inv;
    out.grads.scale(inv);
    for (auto& v : out.routing_mean)
        for (double& x : v) x *= inv;
    return out;
}

ContextProbe probe_context(const Model& m, const Sample& sample, std::uint64_t route_seed) {
    if (!m.cfg.encoder.comoe) throw ContractError("probe_context: model has no CoMoE layers");
    ad::Graph g(false);
    nn::Scope s{g, m.params};
    const Tensor text = m.embed_instruction(sample.instruction);
    EncodeResult r = encode(s, m.encoder, sample.image, &text, route_seed);
    ContextProbe p;
    for (const auto& st : r.ctx_trace) {
        const auto& c = st.c.value().data;
        p.context.insert(p.context.end(), c.begin(), c.end());
    }
    for (const auto& rw : r.routing_trace) {
        const auto& w = rw.g.value().data;
        p.routing.insert(p.routing.end(), w.begin(), w.end());
    }
    p.visual = ad::mean_rows(r.features).value().data;
    p.text.assign(text.row(0).begin(), text.row(0).end());
    return p;
}

ExpertInputs expert_inputs(const Model& m, const Sample& sample, std::size_t block) {
    const auto& enc = m.encoder;
    if (block >= enc.blocks.size() || !enc.blocks[block].moe)
        throw ContractError("expert_inputs: block " + std::to_string(block) + " has no CoMoE layer");
    ad::Graph g(false);
    nn::Scope s{g, m.params};
    const Tensor text = m.embed_instruction(sample.instruction);
    ad::Var z = patch_embed(s, enc, sample.image);
    if (enc.prompts) {
        std::array<ad::Var, 2> parts = {s(*enc.prompts), z};
        z = ad::concat_rows(parts);
    }
    ContextState ctx{{}, g.constant(text), 0};
    for (std::size_t b = 0; b < block; ++b)
        z = block_forward(s, z, enc.blocks[b], b, enc.blocks[b].moe ? &ctx : nullptr, 0);
    const VitBlock& blk = enc.blocks[block];
    ad::Var h = ad::add(z, nn::self_attention(s, nn::layer_norm(s, z, blk.ln1), blk.attn, false));
    ctx = contextual_variant(s, z, ctx.t, *blk.cve, block);
    return {nn::layer_norm(s, h, blk.ln2).value(), ctx.c.value()};
}

}  // namespace covft
