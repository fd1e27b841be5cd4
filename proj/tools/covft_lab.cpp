// covft-lab: train, bench, conflict, analyze and verify from the command line.

#include "covft/experiments.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <iomanip>
#include <iostream>
#include <optional>

using namespace covft;

namespace {

struct Overrides {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<double> data_fraction;
    std::optional<std::string> strategy, routing;
    std::optional<std::size_t> experts, comoe_start, comoe_end;
    std::optional<std::string> out;
    std::size_t jobs = 1;
    std::vector<std::string> sets;
};

void add_common(CLI::App* cmd, Overrides& o) {
    cmd->add_option("--config", o.config, "config file (key = value lines)");
    cmd->add_option("--seed", o.seed, "top-level seed");
    cmd->add_option("--data-fraction", o.data_fraction, "fraction of the instruct set to train on");
    cmd->add_option("--strategy", o.strategy, "freeze|full_ft|bitfit|lora|vpt|covft");
    cmd->add_option("--routing", o.routing, "dense|sparse_<k>|uniform|random_<k>");
    cmd->add_option("--experts", o.experts, "experts per CoMoE layer");
    cmd->add_option("--comoe-start", o.comoe_start, "first CoMoE block");
    cmd->add_option("--comoe-end", o.comoe_end, "last CoMoE block");
    cmd->add_option("--out", o.out, "output root (default $COVFT_LAB_OUT, then output.dir, then ./runs)");
    cmd->add_option("--jobs", o.jobs, "bench cells run at once")->check(CLI::PositiveNumber);
    cmd->add_option("--set", o.sets, "extra key=value override, repeatable");
}

ExperimentConfig resolve(const Overrides& o) {
    ExperimentConfig cfg = o.config.empty() ? config_from_key_values({}) : load_config(o.config);
    if (o.strategy) set_config_value(cfg, "train.strategy", *o.strategy);
    for (const auto& kv : o.sets) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw ConfigError("expected key=value, got '" + kv + "'", "--set");
        set_config_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (o.seed) cfg.seed = *o.seed;
    if (o.data_fraction) set_config_value(cfg, "data.fraction", std::to_string(*o.data_fraction));
    if (o.routing) set_config_value(cfg, "model.routing", *o.routing);
    if (o.experts) set_config_value(cfg, "model.experts", std::to_string(*o.experts));
    if (o.comoe_start) set_config_value(cfg, "model.comoe_start", std::to_string(*o.comoe_start));
    if (o.comoe_end) set_config_value(cfg, "model.comoe_end", std::to_string(*o.comoe_end));
    cfg.validate();
    return cfg;
}

fs::path output_root(const Overrides& o, const ExperimentConfig& cfg) {
    if (o.out) return *o.out;
    if (const char* env = std::getenv("COVFT_LAB_OUT"); env && *env) return env;
    if (!cfg.out_dir.empty()) return cfg.out_dir;
    return "runs";
}

void print_eval(const EvalReport& r) {
    for (const auto& [kind, score] : r.per_task)
        std::cout << "  " << std::left << std::setw(18) << task_name(kind) << score.accuracy() << '\n';
    std::cout << "  " << std::left << std::setw(18) << "macro_mean" << r.macro_mean() << '\n';
}

int cmd_train(const Overrides& o) {
    const ExperimentConfig cfg = resolve(o);
    const fs::path dir = output_root(o, cfg) / run_id(cfg);
    const RunResult r = run_training(cfg, dir);
    std::cout << "run: " << dir.string() << '\n';
    if (r.record.final_eval) print_eval(*r.record.final_eval);
    if (r.record.aborted) {
        std::cerr << "training aborted after " << r.record.steps.size() << " steps: " << r.record.error << '\n';
        return kExitAbort;
    }
    return kExitOk;
}

int cmd_bench(const Overrides& o) {
    const ExperimentConfig cfg = resolve(o);
    const fs::path dir = output_root(o, cfg) / ("bench_" + std::string(axis_name(cfg.bench.axis)));
    const BenchResult r = run_bench(cfg, dir, o.jobs);
    std::cout << "bench: " << (dir / "bench.csv").string() << '\n';
    for (const auto& c : r.cells) {
        std::cout << "  " << c.variant << " seed " << c.seed << ": ";
        if (c.ok && c.eval)
            std::cout << c.eval->macro_mean() << '\n';
        else
            std::cout << "FAILED " << c.error << '\n';
    }
    return r.all_ok() ? kExitOk : kExitPartial;
}

int cmd_conflict(const Overrides& o) {
    const ExperimentConfig cfg = resolve(o);
    const fs::path dir = output_root(o, cfg) / "conflict";
    const ConflictResult r = run_conflict(cfg, dir);
    std::cout << "conflict: " << (dir / "conflict.json").string() << '\n';
    for (const auto& s : r.seeds)
        std::cout << "  seed " << s.seed << ": spearman " << s.spearman << ", deep " << s.deep_mean << " vs shallow "
                  << s.shallow_mean << ", grad cosine full_ft " << s.full_ft.mean << " (" << s.full_ft.stddev
                  << ") covft " << s.covft.mean << " (" << s.covft.stddev << ")\n";
    return kExitOk;
}

int cmd_analyze(const Overrides& o, const std::string& run_dir) {
    const ExperimentConfig cfg = resolve(o);
    const AnalyzeResult r = run_analyze(run_dir, cfg.analysis, cfg.analysis_seed());
    std::cout << "analysis: " << (r.dir / "analysis.json").string() << '\n'
              << "  n " << r.n << ", k-means iterations " << r.kmeans.iterations << '\n'
              << "  visual lift " << r.visual.lift_pct << "%, text lift " << r.text.lift_pct << "%\n"
              << "  routing-context r " << r.routing_r << " (shuffled " << r.routing_r_null << ")\n";
    return kExitOk;
}

int cmd_verify(const Overrides& o) {
    const ExperimentConfig cfg = resolve(o);
    const VerifyResult r = run_verify(cfg, output_root(o, cfg) / "verify");
    for (const auto& c : r.checks)
        std::cout << (c.passed ? "PASS " : "FAIL ") << c.name << "  value " << c.value << " tol " << c.tolerance
                  << "  (" << std::fixed << std::setprecision(1) << c.seconds << std::defaultfloat
                  << std::setprecision(6) << " s) " << c.detail << '\n';
    return r.passed() ? kExitOk : kExitAbort;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"covft-lab: contextual vision fine-tuning experiments at toy scale"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(tool_version()));
    Overrides o;
    std::string run_dir;
    auto* train = app.add_subcommand("train", "train one configuration");
    auto* bench = app.add_subcommand("bench", "run a matrix of configurations");
    auto* conflict = app.add_subcommand("conflict", "twin-run divergence and gradient alignment");
    auto* analyze = app.add_subcommand("analyze", "cluster and correlate a run's context probes");
    auto* verify = app.add_subcommand("verify", "gradient and invariant checks");
    for (auto* c : {train, bench, conflict, analyze, verify}) add_common(c, o);
    analyze->add_option("run_dir", run_dir, "run directory holding probes.jsonl")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (*train) return cmd_train(o);
        if (*bench) return cmd_bench(o);
        if (*conflict) return cmd_conflict(o);
        if (*analyze) return cmd_analyze(o, run_dir);
        if (*verify) return cmd_verify(o);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const MissingArtifactError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "aborted: " << e.what() << '\n';
        return kExitAbort;
    }
    return kExitOk;
}
