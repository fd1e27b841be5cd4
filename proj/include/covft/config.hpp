#pragma once

// Experiment configuration: a flat "section.key = value" text file. Every
// field has a default; unknown keys and bad values raise ConfigError with the
// key as the field name.

#include "covft/model.hpp"
#include "covft/vft.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

namespace covft {

using KeyValues = std::map<std::string, std::string>;

/// Parses "key = value" lines; '#' starts a comment. Duplicate keys are an error.
KeyValues parse_key_values(std::istream& is);
KeyValues read_key_values(const std::filesystem::path& path);

struct DataConfig {
    std::vector<TaskKind> kinds;  // instruct-stage task kinds
    std::size_t n_train = 3000;
    std::size_t n_eval = 600;
    std::size_t n_pretrain = 2000;
    double fraction = 1.0;
};

struct AnalysisConfig {
    std::size_t k = 10;
    std::size_t pairs = 10000;
    std::size_t probe_samples = 1000;
    std::size_t exemplars = 4;
    std::size_t snapshot_every = 0;  // 0: no gradient snapshots
};

/// Which knob a bench matrix sweeps.
enum class MatrixAxis { strategy, routing, context, experts, placement, diversity };

struct BenchConfig {
    MatrixAxis axis = MatrixAxis::strategy;
    std::vector<std::string> values;
    std::vector<std::uint64_t> seeds{1, 2, 3};
};

struct ConflictConfig {
    std::vector<std::uint64_t> seeds{1, 2, 3};
    std::size_t steps = 300;
    std::size_t checkpoint_every = 25;
    std::size_t n_train = 1000;
};

struct ExperimentConfig {
    std::uint64_t seed = 1;
    /// "auto" enables CoMoE exactly for the covft strategy.
    std::string comoe = "auto";
    ModelConfig model;
    DataConfig data;
    TrainConfig train = default_train();
    AnalysisConfig analysis;
    BenchConfig bench;
    ConflictConfig conflict;
    std::string out_dir;

    /// Experiment defaults for the training loop.
    static TrainConfig default_train();

    /// Named sub-seeds of `seed`.
    std::uint64_t data_seed() const;
    std::uint64_t init_seed() const;
    std::uint64_t train_seed() const;
    std::uint64_t analysis_seed() const;

    /// Model config with CoMoE resolved and the strategy's additions applied.
    ModelConfig resolved_model() const;
    void validate() const;
};

/// Applies `kv` on top of the defaults.
ExperimentConfig config_from_key_values(const KeyValues& kv);
ExperimentConfig load_config(const std::filesystem::path& path);
/// Sets one key; the same parser as the file format.
void set_config_value(ExperimentConfig& cfg, const std::string& key, const std::string& value);
/// Every effective setting, one "key = value" per line, sorted by key.
std::string config_to_text(const ExperimentConfig& cfg);

std::string_view axis_name(MatrixAxis axis);

}  // namespace covft
