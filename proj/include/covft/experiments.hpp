#pragma once

// Experiment commands behind the covft-lab verbs. Each one validates its
// config, runs, and leaves a self-describing directory of artifacts.

#include "covft/analysis.hpp"
#include "covft/config.hpp"
#include "covft/error.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace covft {

namespace fs = std::filesystem;

/// A run directory lacks a file a command needs.
class MissingArtifactError : public InputError {
public:
    explicit MissingArtifactError(const fs::path& path)
        : InputError("missing artifact: " + path.string()), path_(path) {}
    const fs::path& path() const noexcept { return path_; }

private:
    fs::path path_;
};

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitAbort = 3;
inline constexpr int kExitPartial = 4;

std::string_view tool_version();

/// 64-bit FNV-1a over a file's bytes, as 16 hex digits.
std::string file_digest(const fs::path& path);

// ---- binary artifacts -------------------------------------------------------

void write_grad_snapshots(const std::vector<GradSnapshot>& snaps, const fs::path& path);
std::vector<GradSnapshot> read_grad_snapshots(const fs::path& path);

// ---- training ----------------------------------------------------------------

struct RunData {
    Dataset pretrain;
    Dataset instruct;
    Dataset eval;
};
RunData build_run_data(const ExperimentConfig& cfg);
TrainConfig resolved_train(const ExperimentConfig& cfg);
std::string run_id(const ExperimentConfig& cfg);

struct RunResult {
    fs::path dir;
    RunRecord record;
    /// Probes written for CoMoE models (empty otherwise).
    std::size_t probes = 0;
};

/// Trains `cfg` into `dir`: config.cfg, meta.json, run.jsonl, eval.csv,
/// eval_set.jsonl, model.bin, grads.bin (when snapshotting) and, for CoMoE
/// models, probe_set.jsonl + probes.jsonl. Artifacts of an aborted run are
/// still written; the record says why it stopped.
RunResult run_training(const ExperimentConfig& cfg, const fs::path& dir);

// ---- bench -------------------------------------------------------------------

/// Default sweep values per axis.
std::vector<std::string> default_axis_values(MatrixAxis axis);
/// Applies one matrix value to a config.
void apply_axis_value(ExperimentConfig& cfg, MatrixAxis axis, const std::string& value);

struct BenchCell {
    std::string variant;
    std::uint64_t seed = 0;
    fs::path dir;
    bool ok = false;
    std::string error;
    std::optional<EvalReport> eval;
};

struct BenchResult {
    fs::path dir;
    std::vector<BenchCell> cells;
    bool all_ok() const;
};

/// Runs every (value, seed) cell with up to `jobs` cells at once. Writes
/// bench_cells.csv (one row per cell) and bench.csv (one row per variant:
/// per-task mean accuracy, macro mean, macro std over seeds, failures).
BenchResult run_bench(const ExperimentConfig& cfg, const fs::path& dir, std::size_t jobs);

// ---- conflict ------------------------------------------------------------------

struct ConflictSeedReport {
    std::uint64_t seed = 0;
    std::vector<std::size_t> steps;
    std::vector<BlockDistances> distances;  // one per checkpoint
    double spearman = 0.0;                  // step vs. total distance
    double shallow_mean = 0.0;              // final distance, blocks in the first half
    double deep_mean = 0.0;                 // final distance, blocks in the second half
    CosineSeries full_ft;
    CosineSeries covft;
};

struct ConflictResult {
    fs::path dir;
    std::vector<ConflictSeedReport> seeds;
};

/// Per seed: twin full_ft runs (grounding vs. captioning over the same scenes)
/// from one pretrained init, then full_ft and covft on the mixed data with a
/// gradient snapshot every step.
ConflictResult run_conflict(const ExperimentConfig& cfg, const fs::path& dir);

/// Same scenes, relabelled once per kind; scenes unanswerable for either kind are skipped.
std::pair<Dataset, Dataset> twin_datasets(TaskKind a, TaskKind b, std::size_t n, std::uint64_t seed);

// ---- analyze -------------------------------------------------------------------

struct AnalyzeResult {
    fs::path dir;
    std::size_t n = 0;
    KMeansResult kmeans;
    PcaResult pca;
    SimilarityLift visual;
    SimilarityLift text;
    double routing_r = 0.0;
    double routing_r_null = 0.0;
    std::vector<std::vector<std::size_t>> exemplars;  // sample ids
};

/// Reads probes.jsonl from a run directory and writes analysis/{analysis.json,
/// pca.csv, inertia.csv}. Throws MissingArtifactError when the probes are absent.
AnalyzeResult run_analyze(const fs::path& run_dir, const AnalysisConfig& opts, std::uint64_t seed);

// ---- verify ----------------------------------------------------------------------

struct CheckResult {
    std::string name;
    bool passed = false;
    double value = 0.0;  // worst observed error
    double tolerance = 0.0;
    std::string detail;
    double seconds = 0.0;
};

struct VerifyResult {
    fs::path dir;
    std::vector<CheckResult> checks;
    bool passed() const;
};

/// Gradient, modulation, init-equivalence and mask-soundness checks; writes verify.json.
VerifyResult run_verify(const ExperimentConfig& cfg, const fs::path& dir);

CheckResult check_end_to_end_gradient(const ExperimentConfig& cfg);
CheckResult check_modulation(std::uint64_t seed, std::size_t configs = 10);
CheckResult check_init_equivalence(std::uint64_t seed, std::size_t contexts = 100);
CheckResult check_mask_soundness(const ExperimentConfig& cfg, std::size_t steps = 50);

}  // namespace covft
