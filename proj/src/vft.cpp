#include "covft/vft.hpp"

#include "covft/error.hpp"
#include "covft/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <ostream>

namespace covft {

namespace {
constexpr std::array<std::string_view, 6> kStrategyNames = {"freeze", "full_ft", "bitfit", "lora", "vpt", "covft"};

bool ends_with(const std::string& s, std::string_view suffix) { return s.ends_with(suffix); }
bool contains(const std::string& s, std::string_view part) { return s.find(part) != std::string::npos; }
}  // namespace

Strategy Strategy::parse(std::string_view name) {
    for (std::size_t i = 0; i < kStrategyNames.size(); ++i)
        if (kStrategyNames[i] == name) return Strategy{static_cast<StrategyKind>(i)};
    throw ConfigError("unknown strategy '" + std::string(name) + "' (freeze, full_ft, bitfit, lora, vpt, covft)",
                      "train.strategy");
}

std::string_view Strategy::name() const { return kStrategyNames.at(static_cast<std::size_t>(kind)); }

std::string_view stage_name(Stage stage) { return stage == Stage::pretrain ? "pretrain" : "instruct"; }

ModelConfig configure_model(ModelConfig cfg, const Strategy& strategy) {
    cfg.encoder.lora_rank = 0;
    cfg.encoder.vpt_prompts = 0;
    switch (strategy.kind) {
    case StrategyKind::lora:
        if (strategy.lora_rank == 0 || strategy.lora_rank > cfg.encoder.dim)
            throw ConfigError("LoRA rank " + std::to_string(strategy.lora_rank) + " outside [1, " +
                                  std::to_string(cfg.encoder.dim) + "]",
                              "train.lora_rank");
        cfg.encoder.lora_rank = strategy.lora_rank;
        break;
    case StrategyKind::vpt:
        if (strategy.vpt_prompts == 0) throw ConfigError("VPT needs at least one prompt", "train.vpt_prompts");
        cfg.encoder.vpt_prompts = strategy.vpt_prompts;
        break;
    case StrategyKind::covft:
        if (!cfg.encoder.comoe) throw ConfigError("covft requires CoMoE layers", "model.comoe");
        break;
    default: break;
    }
    cfg.validate();
    return cfg;
}

std::set<std::string> trainable_mask(const Model& m, const Strategy& strategy, Stage stage) {
    if (strategy.kind == StrategyKind::covft && !m.cfg.encoder.comoe)
        throw ConfigError("covft requires CoMoE layers", "model.comoe");
    std::set<std::string> mask;
    for (const auto& p : m.params) {
        const std::string& n = p.name;
        if (n.starts_with("proj.")) {
            mask.insert(n);
            continue;
        }
        if (stage == Stage::pretrain) continue;
        if (n.starts_with("dec.")) {
            mask.insert(n);
            continue;
        }
        if (!n.starts_with("enc.")) continue;
        bool take = false;
        switch (strategy.kind) {
        case StrategyKind::freeze: break;
        case StrategyKind::full_ft: take = true; break;
        case StrategyKind::bitfit: take = ends_with(n, ".bias"); break;
        case StrategyKind::lora: take = contains(n, ".lora_"); break;
        case StrategyKind::vpt: take = n.starts_with("enc.vpt."); break;
        case StrategyKind::covft:
            take = contains(n, ".moe.") || contains(n, ".cve.") || ends_with(n, ".gamma") || ends_with(n, ".beta");
            break;
        }
        if (take) mask.insert(n);
    }
    return mask;
}

void apply_mask(Model& m, const std::set<std::string>& mask) {
    for (auto& p : m.params) p.trainable = mask.count(p.name) != 0;
}

void adamw_step(ParameterStore& params, const GradBuffer& grads, AdamWState& state, const AdamWConfig& hyper,
                double lr, std::span<const double> lr_scale) {
    if (!lr_scale.empty() && lr_scale.size() != params.size())
        throw ContractError("adamw_step: lr_scale has " + std::to_string(lr_scale.size()) + " entries for " +
                            std::to_string(params.size()) + " parameters");
    if (state.m.size() < params.size()) {
        state.m.resize(params.size());
        state.v.resize(params.size());
    }
    for (ParamId id = 0; id < params.size(); ++id) {
        const auto* g = grads.find(id);
        if (g)
            for (double x : *g)
                if (!std::isfinite(x))
                    throw NumericError("non-finite gradient for " + params[id].name + " at step " +
                                       std::to_string(state.step + 1));
    }
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double bc1 = 1.0 - std::pow(hyper.beta1, t);
    const double bc2 = 1.0 - std::pow(hyper.beta2, t);
    for (ParamId id = 0; id < params.size(); ++id) {
        Parameter& p = params[id];
        if (!p.trainable) continue;
        auto& mv = state.m[id];
        auto& vv = state.v[id];
        if (mv.empty()) {
            mv.assign(p.value.numel(), 0.0);
            vv.assign(p.value.numel(), 0.0);
        }
        const auto* g = grads.find(id);
        const double plr = lr_scale.empty() ? lr : lr * lr_scale[id];
        for (std::size_t i = 0; i < p.value.numel(); ++i) {
            const double gi = g ? (*g)[i] : 0.0;
            mv[i] = hyper.beta1 * mv[i] + (1.0 - hyper.beta1) * gi;
            vv[i] = hyper.beta2 * vv[i] + (1.0 - hyper.beta2) * gi * gi;
            const double mhat = mv[i] / bc1, vhat = vv[i] / bc2;
            double& w = p.value.data[i];
            w -= plr * hyper.weight_decay * w;
            w -= plr * mhat / (std::sqrt(vhat) + hyper.eps);
        }
    }
}

double lr_at(std::size_t step, std::size_t total, double base, double warmup_frac) {
    if (total == 0) return base;
    const auto warmup = static_cast<std::size_t>(std::ceil(warmup_frac * static_cast<double>(total)));
    if (step < warmup) return base * static_cast<double>(step + 1) / static_cast<double>(warmup);
    const double span = static_cast<double>(std::max<std::size_t>(total - warmup, 1));
    const double progress = static_cast<double>(step - warmup) / span;
    return base * 0.5 * (1.0 + std::cos(M_PI * std::min(progress, 1.0)));
}

EncoderCheckpoint encoder_checkpoint(const Model& m, std::size_t step) {
    EncoderCheckpoint ck;
    ck.step = step;
    for (const auto& p : m.params)
        if (p.name.starts_with("enc.")) ck.params.emplace_back(p.name, p.value);
    return ck;
}

namespace {

/// Endless seeded epoch shuffles over a dataset.
class BatchSampler {
public:
    BatchSampler(const Dataset& data, std::uint64_t seed) : data_(data), rng_(make_rng(seed)) {}

    std::vector<const Sample*> next(std::size_t batch) {
        std::vector<const Sample*> out;
        out.reserve(batch);
        while (out.size() < batch) {
            if (cursor_ == order_.size()) reshuffle();
            out.push_back(&data_[order_[cursor_++]]);
        }
        return out;
    }

private:
    void reshuffle() {
        order_.resize(data_.size());
        std::iota(order_.begin(), order_.end(), std::size_t{0});
        for (std::size_t i = order_.size(); i > 1; --i) std::swap(order_[i - 1], order_[uniform_index(rng_, i)]);
        cursor_ = 0;
    }

    const Dataset& data_;
    Rng rng_;
    std::vector<std::size_t> order_;
    std::size_t cursor_ = 0;
};

void run_stage(Model& m, const TrainConfig& cfg, Stage stage, const Dataset& data, std::size_t steps,
               const Dataset* eval, RunRecord& rec) {
    if (steps == 0) return;
    if (data.empty()) throw InputError(std::string(stage_name(stage)) + " stage has no data");
    apply_mask(m, trainable_mask(m, cfg.strategy, stage));
    const double base = stage == Stage::pretrain ? cfg.lr_pretrain : cfg.lr_instruct;
    const std::uint64_t stage_seed = derive_seed(cfg.seed, stage_name(stage));
    BatchSampler sampler(data, derive_seed(stage_seed, "batches"));
    const std::uint64_t routing_seed = derive_seed(cfg.seed, "routing");
    AdamWState opt;

    std::vector<ParamId> enc_trainable;
    for (ParamId id = 0; id < m.params.size(); ++id)
        if (m.params[id].trainable && m.is_encoder_param(id)) enc_trainable.push_back(id);
    std::vector<double> lr_scale;
    if (stage == Stage::instruct && cfg.lr_encoder_scale != 1.0) {
        lr_scale.assign(m.params.size(), 1.0);
        for (ParamId id : enc_trainable) lr_scale[id] = cfg.lr_encoder_scale;
    }

    const bool instruct = stage == Stage::instruct;
    if (instruct && cfg.checkpoint_every) rec.checkpoints.push_back(encoder_checkpoint(m, 0));

    for (std::size_t step = 0; step < steps; ++step) {
        StepLog log;
        log.step = step + 1;
        log.stage = stage;
        log.lr = lr_at(step, steps, base, cfg.warmup_frac);
        auto batch = sampler.next(cfg.batch);
        BatchGrad bg = batch_gradients(m, batch, derive_seed(routing_seed, stage_name(stage)), step, cfg.parallel);
        log.loss = bg.loss;
        log.routing = std::move(bg.routing_mean);
        if (instruct && cfg.snapshot_every && log.step % cfg.snapshot_every == 0 && !enc_trainable.empty()) {
            GradSnapshot snap;
            snap.step = log.step;
            for (ParamId id : enc_trainable) {
                if (const auto* g = bg.grads.find(id))
                    snap.grad.insert(snap.grad.end(), g->begin(), g->end());
                else
                    snap.grad.insert(snap.grad.end(), m.params[id].value.numel(), 0.0);
            }
            snap.norm = l2_norm(snap.grad);
            log.grad_snapshot_id = rec.snapshots.size();
            rec.snapshots.push_back(std::move(snap));
        }
        adamw_step(m.params, bg.grads, opt, cfg.adamw, log.lr, lr_scale);
        if (instruct && eval && cfg.eval_every && log.step % cfg.eval_every == 0 && log.step != steps)
            log.eval = evaluate(m, *eval);
        if (instruct && cfg.checkpoint_every && (log.step % cfg.checkpoint_every == 0 || log.step == steps))
            rec.checkpoints.push_back(encoder_checkpoint(m, log.step));
        rec.steps.push_back(std::move(log));
    }
}

}  // namespace

RunRecord train(Model& m, const TrainConfig& cfg, const Dataset& pretrain, const Dataset& instruct,
                const Dataset* eval) {
    RunRecord rec;
    rec.strategy = std::string(cfg.strategy.name());
    if (cfg.batch == 0) throw ConfigError("batch must be positive", "train.batch");
    try {
        run_stage(m, cfg, Stage::pretrain, pretrain, cfg.pretrain_steps, eval, rec);
        run_stage(m, cfg, Stage::instruct, instruct, cfg.instruct_steps, eval, rec);
        if (eval) rec.final_eval = evaluate(m, *eval);
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        rec.aborted = true;
        rec.error = e.what();
    }
    for (auto& p : m.params) p.trainable = false;
    return rec;
}

void write_run_jsonl(const RunRecord& rec, std::ostream& os) {
    for (const auto& s : rec.steps) {
        nlohmann::ordered_json j;
        j["step"] = s.step;
        j["stage"] = stage_name(s.stage);
        j["loss"] = s.loss;
        j["lr"] = s.lr;
        j["strategy"] = rec.strategy;
        if (s.eval) {
            nlohmann::ordered_json e;
            for (const auto& [kind, score] : s.eval->per_task) e[std::string(task_name(kind))] = score.accuracy();
            e["macro_mean"] = s.eval->macro_mean();
            j["eval"] = e;
        }
        if (!s.routing.empty()) j["routing"] = s.routing;
        if (s.grad_snapshot_id) j["grad_snapshot_id"] = *s.grad_snapshot_id;
        os << j.dump() << '\n';
    }
}

}  // namespace covft
