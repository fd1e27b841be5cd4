#include "covft/experiments.hpp"

#include "covft/error.hpp"
#include "covft/gradcheck.hpp"
#include "covft/rng.hpp"

#include <json.hpp>
#include <omp.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>
#include <thread>

#ifndef COVFT_VERSION
#define COVFT_VERSION "0.0.0"
#endif

namespace covft {

using json = nlohmann::ordered_json;

namespace {

constexpr std::string_view kDominantNote =
    "dominant gradient direction = normalised mean of per-step unit gradients; "
    "encoder-trainable parameters only";

std::ofstream open_out(const fs::path& path, bool binary = false) {
    std::ofstream out(path, binary ? std::ios::binary : std::ios::out);
    if (!out) throw Error("cannot write " + path.string());
    out.precision(17);
    return out;
}

void write_text(const fs::path& path, const std::string& text) { open_out(path) << text; }

void write_json(const fs::path& path, const json& j) { open_out(path) << j.dump(2) << '\n'; }

std::string csv_safe(std::string s) {
    std::replace(s.begin(), s.end(), ',', ';');
    std::replace(s.begin(), s.end(), '\n', ' ');
    std::replace(s.begin(), s.end(), '"', '\'');
    return s;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

template <class T>
void put(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& is, const fs::path& path) {
    T v{};
    if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw InputError("truncated file " + path.string());
    return v;
}

constexpr char kSnapMagic[8] = {'C', 'V', 'G', 'S', 'N', 'A', 'P', '1'};

}  // namespace

std::string_view tool_version() { return COVFT_VERSION; }

std::string file_digest(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingArtifactError(path);
    std::uint64_t h = 0xcbf29ce484222325ULL;
    char buf[1 << 16];
    while (in) {
        in.read(buf, sizeof buf);
        for (std::streamsize i = 0; i < in.gcount(); ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 0x100000001b3ULL;
        }
    }
    char hex[17];
    std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(h));
    return hex;
}

// Layout: magic, u64 count, u64 dim, then per snapshot u64 step, f64 norm, dim x f64.
void write_grad_snapshots(const std::vector<GradSnapshot>& snaps, const fs::path& path) {
    auto out = open_out(path, true);
    out.write(kSnapMagic, sizeof kSnapMagic);
    const std::uint64_t dim = snaps.empty() ? 0 : snaps.front().grad.size();
    put<std::uint64_t>(out, snaps.size());
    put<std::uint64_t>(out, dim);
    for (const auto& s : snaps) {
        if (s.grad.size() != dim) throw ContractError("gradient snapshots differ in length");
        put<std::uint64_t>(out, s.step);
        put<double>(out, s.norm);
        out.write(reinterpret_cast<const char*>(s.grad.data()), static_cast<std::streamsize>(dim * sizeof(double)));
    }
}

std::vector<GradSnapshot> read_grad_snapshots(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingArtifactError(path);
    char magic[sizeof kSnapMagic];
    if (!in.read(magic, sizeof magic) || std::memcmp(magic, kSnapMagic, sizeof magic) != 0)
        throw InputError(path.string() + ": not a gradient snapshot file");
    const auto count = get<std::uint64_t>(in, path);
    const auto dim = get<std::uint64_t>(in, path);
    std::vector<GradSnapshot> snaps(count);
    for (auto& s : snaps) {
        s.step = get<std::uint64_t>(in, path);
        s.norm = get<double>(in, path);
        s.grad.resize(dim);
        if (!in.read(reinterpret_cast<char*>(s.grad.data()), static_cast<std::streamsize>(dim * sizeof(double))))
            throw InputError("truncated file " + path.string());
    }
    return snaps;
}

// ---- training ----------------------------------------------------------------

RunData build_run_data(const ExperimentConfig& cfg) {
    const std::uint64_t ds = cfg.data_seed();
    RunData d;
    d.pretrain = pretrain_pairs(cfg.data.n_pretrain, derive_seed(ds, "pretrain"));
    d.instruct = build_dataset(cfg.data.kinds, cfg.data.n_train, cfg.data.fraction, derive_seed(ds, "instruct"));
    d.eval = build_dataset(cfg.data.kinds, cfg.data.n_eval, 1.0, derive_seed(ds, "eval"));
    return d;
}

TrainConfig resolved_train(const ExperimentConfig& cfg) {
    TrainConfig t = cfg.train;
    t.seed = cfg.train_seed();
    t.snapshot_every = cfg.analysis.snapshot_every;
    return t;
}

std::string run_id(const ExperimentConfig& cfg) {
    return std::string(cfg.train.strategy.name()) + "_s" + std::to_string(cfg.seed);
}

namespace {

json probe_json(std::size_t id, const Sample& s, const ContextProbe& p) {
    json j;
    j["id"] = id;
    j["task_kind"] = task_name(s.task_kind);
    j["context"] = p.context;
    j["routing"] = p.routing;
    j["visual"] = p.visual;
    j["text"] = p.text;
    return j;
}

std::size_t write_probes(const ExperimentConfig& cfg, const Model& m, const fs::path& dir) {
    const Dataset probe_set =
        build_dataset(cfg.data.kinds, cfg.analysis.probe_samples, 1.0, derive_seed(cfg.data_seed(), "probe"));
    write_dataset_jsonl(probe_set, dir / "probe_set.jsonl");
    std::vector<ContextProbe> probes(probe_set.size());
    const std::uint64_t route_seed = derive_seed(cfg.analysis_seed(), "probe_routing");
    const auto n = static_cast<std::ptrdiff_t>(probe_set.size());
#pragma omp parallel for schedule(dynamic, 8)
    for (std::ptrdiff_t i = 0; i < n; ++i)
        probes[static_cast<std::size_t>(i)] =
            probe_context(m, probe_set[static_cast<std::size_t>(i)], derive_seed(route_seed, static_cast<std::uint64_t>(i)));
    auto out = open_out(dir / "probes.jsonl");
    for (std::size_t i = 0; i < probes.size(); ++i) out << probe_json(i, probe_set[i], probes[i]).dump() << '\n';
    return probes.size();
}

}  // namespace

RunResult run_training(const ExperimentConfig& cfg, const fs::path& dir) {
    cfg.validate();
    const ModelConfig mc = cfg.resolved_model();
    const TrainConfig tc = resolved_train(cfg);
    fs::create_directories(dir);
    write_text(dir / "config.cfg", config_to_text(cfg));

    RunResult res;
    res.dir = dir;
    const RunData data = build_run_data(cfg);
    write_dataset_jsonl(data.eval, dir / "eval_set.jsonl");
    Model m(mc);
    res.record = train(m, tc, data.pretrain, data.instruct, &data.eval);
    const RunRecord& rec = res.record;

    {
        auto out = open_out(dir / "run.jsonl");
        write_run_jsonl(rec, out);
    }
    std::vector<std::string> metric_files = {"run.jsonl"};
    if (rec.final_eval) {
        auto out = open_out(dir / "eval.csv");
        write_eval_csv(out, run_id(cfg), *rec.final_eval);
        metric_files.push_back("eval.csv");
    }
    save_checkpoint(m.params, dir / "model.bin");
    metric_files.push_back("model.bin");
    if (!rec.snapshots.empty()) {
        write_grad_snapshots(rec.snapshots, dir / "grads.bin");
        metric_files.push_back("grads.bin");
    }
    if (!rec.aborted && mc.encoder.comoe) {
        res.probes = write_probes(cfg, m, dir);
        metric_files.push_back("probes.jsonl");
    }

    json meta;
    meta["tool"] = "covft-lab";
    meta["version"] = tool_version();
    meta["run_id"] = run_id(cfg);
    meta["seed"] = cfg.seed;
    meta["status"] = rec.aborted ? "aborted" : "ok";
    if (rec.aborted) meta["error"] = rec.error;
    meta["steps_completed"] = rec.steps.size();
    meta["gradient_snapshots"] = rec.snapshots.size();
    meta["methodology"] = kDominantNote;
    json digests;
    for (const auto& f : metric_files) digests[f] = file_digest(dir / f);
    meta["digests"] = digests;
    write_json(dir / "meta.json", meta);
    return res;
}

// ---- bench -------------------------------------------------------------------

std::vector<std::string> default_axis_values(MatrixAxis axis) {
    switch (axis) {
    case MatrixAxis::strategy: return {"freeze", "full_ft", "bitfit", "lora", "vpt", "covft"};
    case MatrixAxis::routing: return {"dense", "sparse_2", "uniform", "random_2"};
    case MatrixAxis::context: return {"image_only", "text_only", "concat", "cve"};
    case MatrixAxis::experts: return {"2", "4", "8"};
    case MatrixAxis::placement: return {"6-7", "4-7", "0-7"};
    case MatrixAxis::diversity: return {"3", "6", "9", "12", "15"};
    }
    return {};
}

void apply_axis_value(ExperimentConfig& cfg, MatrixAxis axis, const std::string& value) {
    switch (axis) {
    case MatrixAxis::strategy: set_config_value(cfg, "train.strategy", value); break;
    case MatrixAxis::routing: set_config_value(cfg, "model.routing", value); break;
    case MatrixAxis::context: set_config_value(cfg, "model.context", value); break;
    case MatrixAxis::experts: set_config_value(cfg, "model.experts", value); break;
    case MatrixAxis::diversity: set_config_value(cfg, "data.diversity", value); break;
    case MatrixAxis::placement: {
        const auto dash = value.find('-');
        if (dash == std::string::npos) throw ConfigError("placement must be '<start>-<end>'", "bench.values");
        set_config_value(cfg, "model.comoe_start", value.substr(0, dash));
        set_config_value(cfg, "model.comoe_end", value.substr(dash + 1));
        break;
    }
    }
}

bool BenchResult::all_ok() const {
    return std::all_of(cells.begin(), cells.end(), [](const BenchCell& c) { return c.ok; });
}

namespace {

void write_bench_tables(const BenchResult& res, const std::vector<std::string>& variants) {
    const auto& kinds = all_task_kinds();
    {
        auto out = open_out(res.dir / "bench_cells.csv");
        out << "variant,seed,status,macro_mean,error\n";
        for (const auto& c : res.cells) {
            out << c.variant << ',' << c.seed << ',' << (c.ok ? "ok" : "failed") << ',';
            if (c.eval) out << c.eval->macro_mean();
            out << ',' << csv_safe(c.error) << '\n';
        }
    }
    auto out = open_out(res.dir / "bench.csv");
    out << "variant,n_ok,n_failed";
    for (TaskKind k : kinds) out << ',' << task_name(k);
    out << ",macro_mean,macro_std\n";
    for (const auto& v : variants) {
        std::vector<const BenchCell*> ok;
        std::size_t failed = 0;
        for (const auto& c : res.cells)
            if (c.variant == v) (c.ok && c.eval) ? ok.push_back(&c) : void(++failed);
        out << v << ',' << ok.size() << ',' << failed;
        for (TaskKind k : kinds) {
            double sum = 0.0;
            std::size_t n = 0;
            for (const auto* c : ok)
                if (auto it = c->eval->per_task.find(k); it != c->eval->per_task.end()) {
                    sum += it->second.accuracy();
                    ++n;
                }
            out << ',';
            if (n) out << sum / static_cast<double>(n);
        }
        std::vector<double> macros;
        for (const auto* c : ok) macros.push_back(c->eval->macro_mean());
        out << ',';
        if (!macros.empty()) {
            const double mean = std::accumulate(macros.begin(), macros.end(), 0.0) / static_cast<double>(macros.size());
            double ss = 0.0;
            for (double x : macros) ss += (x - mean) * (x - mean);
            const double sd = macros.size() > 1 ? std::sqrt(ss / static_cast<double>(macros.size() - 1)) : 0.0;
            out << mean << ',' << sd;
        } else {
            out << ',';
        }
        out << '\n';
    }
}

}  // namespace

BenchResult run_bench(const ExperimentConfig& cfg, const fs::path& dir, std::size_t jobs) {
    const std::vector<std::string> values =
        cfg.bench.values.empty() ? default_axis_values(cfg.bench.axis) : cfg.bench.values;
    if (cfg.bench.seeds.empty()) throw ConfigError("needs at least one seed", "bench.seeds");
    const bool needs_comoe = cfg.bench.axis == MatrixAxis::routing || cfg.bench.axis == MatrixAxis::context ||
                             cfg.bench.axis == MatrixAxis::experts || cfg.bench.axis == MatrixAxis::placement;

    // Every cell is validated before anything runs.
    std::vector<ExperimentConfig> cell_cfgs;
    BenchResult res;
    res.dir = dir;
    for (const auto& v : values)
        for (std::uint64_t seed : cfg.bench.seeds) {
            ExperimentConfig c = cfg;
            c.seed = seed;
            apply_axis_value(c, cfg.bench.axis, v);
            c.validate();
            if (needs_comoe && !c.resolved_model().encoder.comoe)
                throw ConfigError("the " + std::string(axis_name(cfg.bench.axis)) +
                                      " matrix needs CoMoE layers (train.strategy = covft or model.comoe = true)",
                                  "bench.matrix");
            if (jobs > 1) c.train.parallel = false;
            BenchCell cell;
            cell.variant = v;
            cell.seed = seed;
            cell.dir = dir / "cells" / (v + "_s" + std::to_string(seed));
            res.cells.push_back(cell);
            cell_cfgs.push_back(std::move(c));
        }
    fs::create_directories(dir);
    write_text(dir / "config.cfg", config_to_text(cfg));

    std::atomic<std::size_t> next{0};
    auto worker = [&](bool single_thread) {
        if (single_thread) omp_set_num_threads(1);
        for (std::size_t i = next++; i < res.cells.size(); i = next++) {
            BenchCell& cell = res.cells[i];
            try {
                RunResult r = run_training(cell_cfgs[i], cell.dir);
                cell.ok = !r.record.aborted;
                cell.error = r.record.error;
                cell.eval = r.record.final_eval;
            } catch (const std::exception& e) {
                cell.ok = false;
                cell.error = e.what();
            }
        }
    };
    jobs = std::clamp<std::size_t>(jobs, 1, res.cells.size());
    if (jobs == 1) {
        worker(false);
    } else {
        std::vector<std::thread> pool;
        for (std::size_t j = 0; j < jobs; ++j) pool.emplace_back(worker, true);
        for (auto& t : pool) t.join();
    }
    write_bench_tables(res, values);
    return res;
}

// ---- conflict ------------------------------------------------------------------

std::pair<Dataset, Dataset> twin_datasets(TaskKind a, TaskKind b, std::size_t n, std::uint64_t seed) {
    std::pair<Dataset, Dataset> out;
    Rng scene_rng = make_rng(derive_seed(seed, "scenes"));
    std::uint64_t scene_id = 0;
    std::size_t attempts = 0;
    while (out.first.size() < n) {
        if (++attempts > 100 * n + 100) throw InputError("twin_datasets: kinds rarely answerable on shared scenes");
        const Scene scene = random_scene(scene_rng);
        Rng ra = make_rng(derive_seed(seed, scene_id, 1));
        Rng rb = make_rng(derive_seed(seed, scene_id, 2));
        auto sa = make_sample_for_scene(a, scene, ra);
        auto sb = make_sample_for_scene(b, scene, rb);
        ++scene_id;
        if (!sa || !sb) continue;
        sa->scene_id = sb->scene_id = scene_id - 1;
        out.first.push_back(std::move(*sa));
        out.second.push_back(std::move(*sb));
    }
    return out;
}

namespace {

RunRecord checked_train(Model& m, const TrainConfig& t, const Dataset& pre, const Dataset& ins, const char* what) {
    RunRecord rec = train(m, t, pre, ins, nullptr);
    if (rec.aborted) throw Error(std::string(what) + " run aborted: " + rec.error);
    return rec;
}

CosineSeries cosine_run(const ExperimentConfig& base, std::string_view strategy, const Dataset& pretrain,
                        const Dataset& mixed) {
    ExperimentConfig c = base;
    set_config_value(c, "train.strategy", std::string(strategy));
    Model m(c.resolved_model());
    TrainConfig t = resolved_train(c);
    t.instruct_steps = base.conflict.steps;
    t.snapshot_every = 1;
    t.checkpoint_every = 0;
    RunRecord rec = checked_train(m, t, pretrain, mixed, "gradient-cosine");
    Matrix grads;
    grads.reserve(rec.snapshots.size());
    for (auto& s : rec.snapshots) grads.push_back(std::move(s.grad));
    return grad_cosine_series(grads);
}

json cosine_json(const CosineSeries& s) { return json{{"mean", s.mean}, {"std", s.stddev}}; }

}  // namespace

ConflictResult run_conflict(const ExperimentConfig& cfg, const fs::path& dir) {
    cfg.validate();
    if (cfg.conflict.seeds.empty()) throw ConfigError("needs at least one seed", "conflict.seeds");
    ConflictResult res;
    res.dir = dir;
    fs::create_directories(dir);
    write_text(dir / "config.cfg", config_to_text(cfg));
    json all = json::array();

    for (std::uint64_t seed : cfg.conflict.seeds) {
        ExperimentConfig c = cfg;
        c.seed = seed;
        set_config_value(c, "train.strategy", "full_ft");
        c.validate();
        ConflictSeedReport rep;
        rep.seed = seed;
        const std::uint64_t ds = c.data_seed();
        const Dataset pretrain = pretrain_pairs(c.data.n_pretrain, derive_seed(ds, "pretrain"));

        // Twin single-task runs from one pretrained model.
        Model base(c.resolved_model());
        TrainConfig tp = resolved_train(c);
        tp.instruct_steps = 0;
        checked_train(base, tp, pretrain, {}, "pretrain");
        const auto [grounding, captioning] =
            twin_datasets(TaskKind::grounding, TaskKind::captioning, c.conflict.n_train, derive_seed(ds, "twins"));
        TrainConfig ti = resolved_train(c);
        ti.pretrain_steps = 0;
        ti.instruct_steps = c.conflict.steps;
        ti.checkpoint_every = c.conflict.checkpoint_every;
        ti.snapshot_every = 0;
        Model ma = base, mb = base;
        const RunRecord ra = checked_train(ma, ti, {}, grounding, "grounding");
        const RunRecord rb = checked_train(mb, ti, {}, captioning, "captioning");
        if (ra.checkpoints.size() != rb.checkpoints.size()) throw ContractError("twin runs logged different checkpoints");
        std::vector<double> steps, totals;
        for (std::size_t i = 0; i < ra.checkpoints.size(); ++i) {
            rep.steps.push_back(ra.checkpoints[i].step);
            rep.distances.push_back(encoder_l2_distance(ra.checkpoints[i], rb.checkpoints[i]));
            steps.push_back(static_cast<double>(ra.checkpoints[i].step));
            totals.push_back(rep.distances.back().total);
        }
        rep.spearman = spearman(steps, totals);
        const BlockDistances& last = rep.distances.back();
        const std::size_t depth = c.model.encoder.depth;
        std::size_t n_shallow = 0, n_deep = 0;
        for (std::size_t g = 0; g < last.names.size(); ++g) {
            if (!last.names[g].starts_with("block")) continue;
            const std::size_t b = std::stoul(last.names[g].substr(5));
            if (b < depth / 2) {
                rep.shallow_mean += last.values[g];
                ++n_shallow;
            } else {
                rep.deep_mean += last.values[g];
                ++n_deep;
            }
        }
        rep.shallow_mean /= static_cast<double>(std::max<std::size_t>(n_shallow, 1));
        rep.deep_mean /= static_cast<double>(std::max<std::size_t>(n_deep, 1));

        // Gradient alignment on mixed data.
        const Dataset mixed = build_dataset(c.data.kinds, c.conflict.n_train, 1.0, derive_seed(ds, "instruct"));
        rep.full_ft = cosine_run(c, "full_ft", pretrain, mixed);
        rep.covft = cosine_run(c, "covft", pretrain, mixed);

        const fs::path sd = dir / ("seed" + std::to_string(seed));
        fs::create_directories(sd);
        {
            auto out = open_out(sd / "distances.csv");
            out << "step,group,distance\n";
            for (std::size_t i = 0; i < rep.distances.size(); ++i) {
                const auto& d = rep.distances[i];
                for (std::size_t g = 0; g < d.names.size(); ++g)
                    out << rep.steps[i] << ',' << d.names[g] << ',' << d.values[g] << '\n';
                out << rep.steps[i] << ",total," << d.total << '\n';
            }
        }
        {
            auto out = open_out(sd / "grad_cosine.csv");
            out << "strategy,index,cosine\n";
            for (std::size_t i = 0; i < rep.full_ft.series.size(); ++i)
                out << "full_ft," << i << ',' << rep.full_ft.series[i] << '\n';
            for (std::size_t i = 0; i < rep.covft.series.size(); ++i)
                out << "covft," << i << ',' << rep.covft.series[i] << '\n';
        }
        json j;
        j["seed"] = seed;
        j["twin_samples"] = grounding.size();
        j["step0_distance"] = rep.distances.front().total;
        j["final_distance"] = last.total;
        j["spearman_step_distance"] = rep.spearman;
        j["shallow_half_mean"] = rep.shallow_mean;
        j["deep_half_mean"] = rep.deep_mean;
        j["grad_cosine"] = {{"full_ft", cosine_json(rep.full_ft)}, {"covft", cosine_json(rep.covft)}};
        write_json(sd / "summary.json", j);
        all.push_back(j);
        res.seeds.push_back(std::move(rep));
    }
    json top;
    top["version"] = tool_version();
    top["methodology"] = kDominantNote;
    top["seeds"] = all;
    write_json(dir / "conflict.json", top);
    return res;
}

// ---- analyze -------------------------------------------------------------------

AnalyzeResult run_analyze(const fs::path& run_dir, const AnalysisConfig& opts, std::uint64_t seed) {
    const fs::path probes_path = run_dir / "probes.jsonl";
    std::ifstream in(probes_path);
    if (!in) throw MissingArtifactError(probes_path);
    Matrix contexts, routing, visual, text;
    std::vector<std::size_t> ids;
    std::vector<std::string> kinds;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            const auto j = json::parse(line);
            ids.push_back(j.at("id").get<std::size_t>());
            kinds.push_back(j.at("task_kind").get<std::string>());
            contexts.push_back(j.at("context").get<std::vector<double>>());
            routing.push_back(j.at("routing").get<std::vector<double>>());
            visual.push_back(j.at("visual").get<std::vector<double>>());
            text.push_back(j.at("text").get<std::vector<double>>());
        } catch (const json::exception& e) {
            throw InputError(probes_path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }

    AnalyzeResult res;
    res.dir = run_dir / "analysis";
    res.n = contexts.size();
    const std::uint64_t km_seed = derive_seed(seed, "kmeans");
    res.kmeans = kmeans(contexts, opts.k, km_seed);
    res.pca = pca_2d(contexts);
    res.visual = intra_inter_similarity(res.kmeans.assignments, visual);
    res.text = intra_inter_similarity(res.kmeans.assignments, text);
    const std::uint64_t pair_seed = derive_seed(seed, "pairs");
    try {
        res.routing_r = routing_context_correlation(contexts, routing, opts.pairs, pair_seed).r;
        res.routing_r_null = routing_context_correlation(contexts, routing, opts.pairs, pair_seed, true).r;
    } catch (const DegenerateInputError&) {
        // Constant routing (uniform): no correlation to report.
        res.routing_r = res.routing_r_null = std::nan("");
    }
    for (const auto& cluster : cluster_exemplars(contexts, res.kmeans, opts.exemplars)) {
        auto& ex = res.exemplars.emplace_back();
        for (std::size_t i : cluster) ex.push_back(ids[i]);
    }

    fs::create_directories(res.dir);
    json j;
    j["version"] = tool_version();
    j["n"] = res.n;
    j["k"] = opts.k;
    j["kmeans"] = {{"iterations", res.kmeans.iterations},
                   {"converged", res.kmeans.converged},
                   {"inertia", res.kmeans.inertia()}};
    j["pca_variance"] = {res.pca.variance[0], res.pca.variance[1]};
    auto lift = [](const SimilarityLift& l) {
        return json{{"intra", l.intra}, {"inter", l.inter}, {"lift_pct", l.lift_pct}};
    };
    j["visual"] = lift(res.visual);
    j["text"] = lift(res.text);
    j["routing_context_r"] = res.routing_r;
    j["routing_context_r_shuffled"] = res.routing_r_null;
    j["pairs"] = opts.pairs;
    j["exemplars"] = res.exemplars;
    write_json(res.dir / "analysis.json", j);
    {
        auto out = open_out(res.dir / "pca.csv");
        out << "sample_id,task_kind,cluster,pc1,pc2\n";
        for (std::size_t i = 0; i < res.n; ++i)
            out << ids[i] << ',' << kinds[i] << ',' << res.kmeans.assignments[i] << ',' << res.pca.coords[i][0] << ','
                << res.pca.coords[i][1] << '\n';
    }
    {
        auto out = open_out(res.dir / "inertia.csv");
        out << "iteration,inertia\n";
        for (std::size_t i = 0; i < res.kmeans.inertia_history.size(); ++i)
            out << i + 1 << ',' << res.kmeans.inertia_history[i] << '\n';
    }
    return res;
}

// ---- verify ----------------------------------------------------------------------

bool VerifyResult::passed() const {
    return std::all_of(checks.begin(), checks.end(), [](const CheckResult& c) { return c.passed; });
}

namespace {

Tensor random_tensor(Rng& rng, Shape shape, double std) {
    Tensor t(std::move(shape));
    for (double& x : t.data) x = normal(rng, 0.0, std);
    return t;
}

}  // namespace

CheckResult check_end_to_end_gradient(const ExperimentConfig& cfg) {
    const auto t0 = std::chrono::steady_clock::now();
    CheckResult r{"end_to_end_gradient", false, 0.0, 1e-4, {}, 0.0};
    ExperimentConfig c = cfg;
    set_config_value(c, "train.strategy", "covft");
    set_config_value(c, "model.routing", "dense");
    Model m(c.resolved_model());
    // Move every parameter off its initial value so zero-initialised tensors
    // (router, refiner outputs) carry gradient through the whole chain.
    Rng rng = make_rng(derive_seed(c.seed, "gradcheck"));
    std::vector<ParamId> ids;
    for (ParamId id = 0; id < m.params.size(); ++id) {
        if (m.params[id].name.starts_with("text.")) continue;
        for (double& x : m.params[id].value.data) x += normal(rng, 0.0, 0.05);
        ids.push_back(id);
    }
    Rng srng = make_rng(derive_seed(c.seed, "gradcheck_sample"));
    const Sample sample = make_sample(TaskKind::relation_left, srng);
    LossBuilder f = [&](ad::Graph& g) {
        nn::Scope s{g, m.params};
        return instruction_loss(s, m, sample).loss;
    };
    GradCheckOptions opts;
    opts.step = 1e-5;
    opts.coords_per_param = 4;
    opts.seed = derive_seed(c.seed, "gradcheck_coords");
    opts.denominator_floor = 1e-5;
    const GradCheckResult g = finite_diff_check(f, m.params, ids, opts);
    r.value = g.max_rel_err;
    r.passed = g.max_rel_err < r.tolerance;
    std::ostringstream os;
    os << g.coords_checked << " coordinates over " << ids.size() << " tensors; worst " << g.worst_param << "["
       << g.worst_index << "] analytic " << g.worst_analytic << " numeric " << g.worst_numeric;
    r.detail = os.str();
    r.seconds = seconds_since(t0);
    return r;
}

CheckResult check_modulation(std::uint64_t seed, std::size_t configs) {
    const auto t0 = std::chrono::steady_clock::now();
    CheckResult r{"gradient_modulation", true, 0.0, 1e-8, {}, 0.0};
    double worst_inactive = 0.0, worst_ratio = 0.0, worst_chain = 0.0;
    for (std::size_t i = 0; i < configs; ++i) {
        const std::uint64_t s = derive_seed(derive_seed(seed, "modulation"), i);
        Rng rng = make_rng(s);
        const std::size_t dim = 4 + 4 * uniform_index(rng, 2);
        const std::size_t hidden = 2 * dim;
        const std::size_t n = 2 + uniform_index(rng, 4);
        const std::size_t len = 2 + uniform_index(rng, 4);
        ParameterStore donor_store;
        const nn::FfnParams donor = nn::make_ffn(donor_store, "donor", dim, hidden, s, 0.3);
        ParameterStore store;
        ExpertSet set = init_experts_from_ffn(store, "moe", donor_store, donor, n, RoutingSpec{});
        // Distinct experts and a non-trivial router.
        for (auto& p : store) {
            for (double& x : p.value.data) x += normal(rng, 0.0, 0.2);
            p.trainable = true;
        }
        const Tensor z = random_tensor(rng, {len, dim}, 1.0);
        const Tensor c = random_tensor(rng, {dim}, 1.0);
        const Tensor target = random_tensor(rng, {len, dim}, 1.0);
        const ModulationReport rep = verify_gradient_modulation(store, set, z, c, target);
        worst_inactive = std::max(worst_inactive, rep.inactive_max_abs);
        worst_ratio = std::max(worst_ratio, rep.ratio_max_rel_err);
        worst_chain = std::max(worst_chain, rep.chain_max_rel_err);
        if (!rep.passed()) {
            r.passed = false;
            if (r.detail.empty())
                r.detail = "config " + std::to_string(i) + " failed (" + rep.inactive_worst + rep.ratio_worst +
                           rep.chain_worst + "); ";
        }
    }
    r.value = std::max({worst_ratio, worst_chain});
    std::ostringstream os;
    os << configs << " configurations: inactive max |grad| " << worst_inactive << ", identical-expert ratio rel err "
       << worst_ratio << " (tol 1e-10), chain rel err " << worst_chain << " (tol 1e-8)";
    r.detail += os.str();
    r.seconds = seconds_since(t0);
    return r;
}

CheckResult check_init_equivalence(std::uint64_t seed, std::size_t contexts) {
    const auto t0 = std::chrono::steady_clock::now();
    CheckResult r{"init_equivalence", false, 0.0, 1e-12, {}, 0.0};
    const std::size_t dim = 32, hidden = 128, len = 16;
    ParameterStore donor_store;
    const nn::FfnParams donor = nn::make_ffn(donor_store, "donor", dim, hidden, derive_seed(seed, "donor"), 0.1);
    std::size_t evaluated = 0;
    for (const char* spec : {"dense", "sparse_2", "uniform", "random_2"}) {
        ParameterStore store;
        const RoutingSpec rs = RoutingSpec::parse(spec);
        const ExpertSet set = init_experts_from_ffn(store, "moe", donor_store, donor, 4, rs);
        Rng rng = make_rng(derive_seed(seed, spec));
        // A trained-looking router: equivalence must not rest on uniform weights.
        for (double& x : store[set.router_w].value.data) x = normal(rng, 0.0, 1.0);
        for (double& x : store[set.router_b].value.data) x = normal(rng, 0.0, 1.0);
        for (std::size_t i = 0; i < contexts; ++i) {
            const Tensor z = random_tensor(rng, {len, dim}, 1.0);
            const Tensor c = random_tensor(rng, {dim}, 1.0);
            ad::Graph g(false);
            nn::Scope s{g, store};
            nn::Scope ds{g, donor_store};
            const ad::Var zv = g.constant(z);
            const RoutingWeights w = route(s, g.constant(c), set, derive_seed(seed, i));
            const Tensor moe = comoe_forward(s, zv, w, set).value();
            const Tensor ref = nn::ffn(ds, zv, donor).value();
            r.value = std::max(r.value, max_abs_diff(moe, ref));
            ++evaluated;
        }
    }
    r.passed = r.value < r.tolerance;
    r.detail = std::to_string(evaluated) + " (routing, context) cases";
    r.seconds = seconds_since(t0);
    return r;
}

CheckResult check_mask_soundness(const ExperimentConfig& cfg, std::size_t steps) {
    const auto t0 = std::chrono::steady_clock::now();
    CheckResult r{"mask_soundness", true, 0.0, 0.0, {}, 0.0};
    const Dataset data =
        build_dataset(diversity_kinds(kTaskKinds), 64, 1.0, derive_seed(cfg.data_seed(), "mask"));
    std::ostringstream os;
    for (const char* name : {"freeze", "bitfit", "lora", "vpt", "covft"}) {
        ExperimentConfig c = cfg;
        set_config_value(c, "train.strategy", name);
        Model m(c.resolved_model());
        const Model init = m;
        const auto mask = trainable_mask(m, c.train.strategy, Stage::instruct);
        TrainConfig t = resolved_train(c);
        t.pretrain_steps = 0;
        t.instruct_steps = steps;
        t.batch = 4;
        t.snapshot_every = 0;
        t.checkpoint_every = 0;
        t.eval_every = 0;
        const RunRecord rec = train(m, t, {}, data, nullptr);
        if (rec.aborted) {
            r.passed = false;
            os << name << ": aborted (" << rec.error << "); ";
            continue;
        }
        std::size_t changed_out = 0, changed_in = 0;
        for (ParamId id = 0; id < m.params.size(); ++id) {
            const bool same = m.params[id].value.data == init.params[id].value.data;
            if (mask.count(m.params[id].name))
                changed_in += !same;
            else if (!same) {
                ++changed_out;
                if (r.detail.empty()) r.detail = std::string(name) + " moved " + m.params[id].name + "; ";
            }
        }
        if (changed_out) r.passed = false;
        r.value = std::max(r.value, static_cast<double>(changed_out));
        os << name << ": " << changed_in << "/" << mask.size() << " in-mask tensors moved, " << changed_out
           << " out-of-mask; ";
    }
    r.detail += os.str();
    r.seconds = seconds_since(t0);
    return r;
}

VerifyResult run_verify(const ExperimentConfig& cfg, const fs::path& dir) {
    cfg.validate();
    VerifyResult res;
    res.dir = dir;
    res.checks.push_back(check_end_to_end_gradient(cfg));
    res.checks.push_back(check_modulation(cfg.seed));
    res.checks.push_back(check_init_equivalence(cfg.seed));
    res.checks.push_back(check_mask_soundness(cfg));
    fs::create_directories(dir);
    json j;
    j["version"] = tool_version();
    j["seed"] = cfg.seed;
    j["passed"] = res.passed();
    json checks = json::array();
    for (const auto& c : res.checks)
        checks.push_back({{"name", c.name},
                          {"passed", c.passed},
                          {"value", c.value},
                          {"tolerance", c.tolerance},
                          {"detail", c.detail}});
    j["checks"] = checks;
    write_json(dir / "verify.json", j);
    return res;
}

}  // namespace covft
