#pragma once

// The toy multimodal model: vision encoder (+ CVE/CoMoE), frozen text encoder,
// two-layer projector and a small causal decoder standing in for the LLM.

#include "covft/comoe.hpp"
#include "covft/cve.hpp"
#include "covft/taskgen.hpp"
#include "covft/vision_encoder.hpp"

#include <cstdint>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace covft {

struct DecoderConfig {
    std::size_t vocab = 64;
    std::size_t dim = 48;
    std::size_t depth = 2;
    std::size_t heads = 4;
    std::size_t hidden = 192;
    std::size_t max_len = 64;
    double init_std = 0.02;

    void validate() const;
};

struct ModelConfig {
    EncoderConfig encoder;
    DecoderConfig decoder;
    TextEncoderConfig text;
    std::uint64_t init_seed = 0;

    void validate() const;
};

struct Projector {
    nn::LinearParams fc1, fc2;
};

struct Decoder {
    ParamId embed = 0;  // [vocab, D_t]
    ParamId pos = 0;    // [max_len, D_t]
    std::vector<nn::TransformerBlockParams> blocks;
    nn::LayerNormParams ln_f;
    nn::LinearParams head;
};

/// Parameters live in `params`; the remaining members are handles into it, so a
/// copied Model is an independent deep copy.
struct Model {
    ModelConfig cfg;
    ParameterStore params;
    VisionEncoder encoder;
    TextEncoder text;
    Projector projector;
    Decoder decoder;

    explicit Model(const ModelConfig& config);

    /// Frozen text embedding of an instruction, [T+1, D_v].
    Tensor embed_instruction(std::span<const int> instruction) const;
    bool is_encoder_param(ParamId id) const { return params[id].name.starts_with("enc."); }
};

/// fc2(GELU(fc1(z))) per token.
ad::Var project(const nn::Scope& s, const Projector& p, ad::Var z);

/// Decoder logits [n, vocab] for the sequence [visual; embed(tokens)], causal.
ad::Var decoder_logits(const nn::Scope& s, const Model& m, ad::Var visual, std::span<const int> tokens);

/// Summed cross-entropy of `logits` rows [start, start + targets.size()) against `targets`.
ad::Var answer_loss(ad::Var logits, std::size_t start, std::span<const int> targets);

/// Decoder input tokens [instruction; BOS; answer] and targets [answer; EOS].
struct TeacherForcing {
    std::vector<int> inputs;
    std::vector<int> targets;
    std::size_t answer_start = 0;  // row of BOS within the full sequence (after the visual tokens)
};
TeacherForcing teacher_forcing(const Model& m, const Sample& sample);

struct ForwardOutput {
    ad::Var loss;
    EncodeResult encoded;
};

/// Next-token loss summed over the answer (and its EOS) for one sample.
ForwardOutput instruction_loss(const nn::Scope& s, const Model& m, const Sample& sample,
                               std::uint64_t route_seed = 0);

/// Greedy decoding until EOS or `max_len` tokens; EOS is not returned.
std::vector<int> generate(const Model& m, const Tensor& image, std::span<const int> instruction,
                          std::size_t max_len = 8);

struct TaskScore {
    std::size_t correct = 0;
    std::size_t n = 0;
    double accuracy() const { return n ? static_cast<double>(correct) / static_cast<double>(n) : 0.0; }
};

struct EvalReport {
    std::map<TaskKind, TaskScore> per_task;
    /// Unweighted mean of per-task accuracies.
    double macro_mean() const;
};

/// Exact-match accuracy per task kind. Samples are decoded in parallel.
EvalReport evaluate(const Model& m, const Dataset& data, std::size_t max_len = 8);
/// Header "run_id,task_kind,accuracy,n" then one row per task plus a "macro_mean" row.
void write_eval_csv(std::ostream& os, const std::string& run_id, const EvalReport& report, bool header = true);

/// Mean loss and mean gradient over a batch, for the currently trainable parameters.
struct BatchGrad {
    double loss = 0.0;
    GradBuffer grads;
    /// Per CoMoE layer, routing weights averaged over the batch.
    std::vector<std::vector<double>> routing_mean;
};

/// Sample i uses route seed derive_seed(routing_seed, step, i). `parallel`
/// spreads samples over OpenMP threads; the reduction order is fixed, so the
/// result is bit-identical to the serial path.
BatchGrad batch_gradients(const Model& m, std::span<const Sample* const> batch, std::uint64_t routing_seed,
                          std::size_t step, bool parallel = true);

/// Per-sample readouts used by the context analyses.
struct ContextProbe {
    std::vector<double> context;  // per-layer c concatenated
    std::vector<double> routing;  // per-layer routing weights concatenated
    std::vector<double> visual;   // mean of the encoder feature tokens
    std::vector<double> text;     // summary row of the frozen text embedding
};
ContextProbe probe_context(const Model& m, const Sample& sample, std::uint64_t route_seed = 0);

/// Inputs of the CoMoE experts at `block` for one sample: the normalised tokens
/// u [L, D] and the (detached) context c [D].
struct ExpertInputs {
    Tensor u;
    Tensor c;
};
ExpertInputs expert_inputs(const Model& m, const Sample& sample, std::size_t block);

}  // namespace covft
