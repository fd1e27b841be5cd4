#pragma once

// Visual fine-tuning strategies, AdamW and the two-stage training loop.

#include "covft/model.hpp"

#include <functional>
#include <iosfwd>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace covft {

enum class StrategyKind { freeze, full_ft, bitfit, lora, vpt, covft };

struct Strategy {
    StrategyKind kind = StrategyKind::covft;
    std::size_t lora_rank = 8;
    std::size_t vpt_prompts = 8;

    static Strategy parse(std::string_view name);
    std::string_view name() const;
};

enum class Stage { pretrain, instruct };
std::string_view stage_name(Stage stage);

/// Applies the strategy's architectural additions (LoRA adapters, VPT prompts)
/// to `cfg`. covft requires CoMoE to be enabled.
ModelConfig configure_model(ModelConfig cfg, const Strategy& strategy);

/// Names of the parameters updated in `stage`.
std::set<std::string> trainable_mask(const Model& m, const Strategy& strategy, Stage stage);
/// Sets every parameter's trainable flag from `mask`.
void apply_mask(Model& m, const std::set<std::string>& mask);

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

struct AdamWState {
    std::size_t step = 0;
    std::vector<std::vector<double>> m, v;  // indexed by ParamId, empty for untouched params
};

/// One bias-corrected AdamW update of every trainable parameter; parameters
/// without a gradient entry see a zero gradient. Weight decay is decoupled:
/// w -= lr * wd * w. Throws NumericError on a non-finite gradient.
/// `lr_scale`, when non-empty, multiplies lr per parameter id.
void adamw_step(ParameterStore& params, const GradBuffer& grads, AdamWState& state, const AdamWConfig& hyper,
                double lr, std::span<const double> lr_scale = {});

/// Linear warmup over the first `warmup` steps, then cosine decay to 0.
double lr_at(std::size_t step, std::size_t total, double base, double warmup_frac);

struct TrainConfig {
    Strategy strategy;
    std::size_t pretrain_steps = 0;
    std::size_t instruct_steps = 0;
    std::size_t batch = 16;
    double lr_pretrain = 1e-3;
    double lr_instruct = 3e-4;
    /// Multiplies the instruct lr for encoder parameters.
    double lr_encoder_scale = 1.0;
    double warmup_frac = 0.05;
    AdamWConfig adamw;
    /// Periodic evaluation on the eval set (0: only at the end).
    std::size_t eval_every = 0;
    /// Encoder snapshots every this many instruct steps, plus step 0 and the last step (0: none).
    std::size_t checkpoint_every = 0;
    /// Record flattened encoder-trainable gradients every this many instruct steps (0: never).
    std::size_t snapshot_every = 0;
    /// Seeds batch order and random_k draws.
    std::uint64_t seed = 0;
    bool parallel = true;
};

struct StepLog {
    std::size_t step = 0;
    Stage stage = Stage::instruct;
    double loss = 0.0;
    double lr = 0.0;
    std::optional<EvalReport> eval;
    std::vector<std::vector<double>> routing;
    std::optional<std::size_t> grad_snapshot_id;
};

struct GradSnapshot {
    std::size_t step = 0;
    std::vector<double> grad;
    double norm = 0.0;
};

/// Encoder parameters (names starting "enc.") at one instruct step.
struct EncoderCheckpoint {
    std::size_t step = 0;
    std::vector<std::pair<std::string, Tensor>> params;
};

struct RunRecord {
    std::string strategy;
    std::vector<StepLog> steps;
    std::vector<GradSnapshot> snapshots;
    std::vector<EncoderCheckpoint> checkpoints;
    std::optional<EvalReport> final_eval;
    bool aborted = false;
    std::string error;
};

EncoderCheckpoint encoder_checkpoint(const Model& m, std::size_t step);

/// Runs the pretrain stage (projector only, on `pretrain`) and then the
/// instruct stage (strategy mask, on `instruct`). A failure stops training and
/// is reported in the returned record rather than thrown.
RunRecord train(Model& m, const TrainConfig& cfg, const Dataset& pretrain, const Dataset& instruct,
                const Dataset* eval = nullptr);

/// One JSON object per logged step: {step, stage, loss, lr, strategy, eval?, routing?, grad_snapshot_id?}.
void write_run_jsonl(const RunRecord& rec, std::ostream& os);

}  // namespace covft
