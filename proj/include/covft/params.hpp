#pragma once

#include "covft/tensor.hpp"

#include <cstddef>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

namespace covft {

using ParamId = std::size_t;

struct Parameter {
    std::string name;
    Tensor value;
    bool trainable = false;
};

/// Ordered, name-indexed collection of model parameters. Insertion order is the
/// canonical (checkpoint) order.
class ParameterStore {
public:
    ParamId add(std::string name, Tensor value);

    std::size_t size() const noexcept { return params_.size(); }
    Parameter& operator[](ParamId id) { return params_[id]; }
    const Parameter& operator[](ParamId id) const { return params_[id]; }

    bool contains(const std::string& name) const { return index_.count(name) != 0; }
    ParamId id(const std::string& name) const;
    Parameter& get(const std::string& name) { return params_[id(name)]; }
    const Parameter& get(const std::string& name) const { return params_[id(name)]; }

    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }

    void set_all_trainable(bool flag);
    std::vector<ParamId> trainable_ids() const;
    std::size_t numel(const std::function<bool(const Parameter&)>& pred = {}) const;

private:
    std::vector<Parameter> params_;
    std::map<std::string, ParamId> index_;
};

/// Per-parameter gradient accumulators, allocated lazily for the ids that receive gradient.
class GradBuffer {
public:
    GradBuffer() = default;
    explicit GradBuffer(std::size_t n_params) : grads_(n_params) {}

    void resize(std::size_t n_params) { grads_.resize(n_params); }
    std::size_t size() const noexcept { return grads_.size(); }

    /// Returns the accumulator for `id`, zero-initialised to `numel` entries on first use.
    std::vector<double>& at(ParamId id, std::size_t numel);
    const std::vector<double>* find(ParamId id) const;
    bool has(ParamId id) const { return id < grads_.size() && !grads_[id].empty(); }

    void add(const GradBuffer& other);
    void scale(double s);
    void clear();

private:
    std::vector<std::vector<double>> grads_;
};

// Checkpoint format: for each parameter in store order, one ASCII header line
// "<name> <rank> <d0> ... <dn-1>\n" followed immediately by numel little-endian
// IEEE-754 binary64 values.
void save_checkpoint(const ParameterStore& store, const std::filesystem::path& path);
void save_checkpoint(const ParameterStore& store, std::ostream& os);
/// Loads (name, tensor) pairs in file order.
std::vector<std::pair<std::string, Tensor>> read_checkpoint(const std::filesystem::path& path);
std::vector<std::pair<std::string, Tensor>> read_checkpoint(std::istream& is);
/// Overwrites store values from a checkpoint; every stored tensor must exist with the same shape.
void load_checkpoint(ParameterStore& store, const std::filesystem::path& path);

}  // namespace covft
