#include "covft/params.hpp"

#include "covft/error.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

namespace covft {

ParamId ParameterStore::add(std::string name, Tensor value) {
    if (index_.count(name)) throw ContractError("duplicate parameter name " + name);
    const ParamId id = params_.size();
    index_.emplace(name, id);
    params_.push_back(Parameter{std::move(name), std::move(value), false});
    return id;
}

ParamId ParameterStore::id(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw InputError("unknown parameter " + name);
    return it->second;
}

void ParameterStore::set_all_trainable(bool flag) {
    for (auto& p : params_) p.trainable = flag;
}

std::vector<ParamId> ParameterStore::trainable_ids() const {
    std::vector<ParamId> ids;
    for (ParamId i = 0; i < params_.size(); ++i)
        if (params_[i].trainable) ids.push_back(i);
    return ids;
}

std::size_t ParameterStore::numel(const std::function<bool(const Parameter&)>& pred) const {
    std::size_t n = 0;
    for (const auto& p : params_)
        if (!pred || pred(p)) n += p.value.numel();
    return n;
}

std::vector<double>& GradBuffer::at(ParamId id, std::size_t numel) {
    if (id >= grads_.size()) grads_.resize(id + 1);
    auto& g = grads_[id];
    if (g.empty()) g.assign(numel, 0.0);
    return g;
}

const std::vector<double>* GradBuffer::find(ParamId id) const {
    if (id >= grads_.size() || grads_[id].empty()) return nullptr;
    return &grads_[id];
}

void GradBuffer::add(const GradBuffer& other) {
    if (other.grads_.size() > grads_.size()) grads_.resize(other.grads_.size());
    for (std::size_t id = 0; id < other.grads_.size(); ++id) {
        const auto& src = other.grads_[id];
        if (src.empty()) continue;
        auto& dst = at(id, src.size());
        for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
    }
}

void GradBuffer::scale(double s) {
    for (auto& g : grads_)
        for (double& v : g) v *= s;
}

void GradBuffer::clear() {
    for (auto& g : grads_) g.clear();
}

namespace {

void write_le_doubles(std::ostream& os, const std::vector<double>& values) {
    static_assert(sizeof(double) == 8);
    if constexpr (std::endian::native == std::endian::little) {
        os.write(reinterpret_cast<const char*>(values.data()),
                 static_cast<std::streamsize>(values.size() * sizeof(double)));
    } else {
        for (double v : values) {
            auto bits = std::bit_cast<std::uint64_t>(v);
            char buf[8];
            for (int b = 0; b < 8; ++b) buf[b] = static_cast<char>((bits >> (8 * b)) & 0xff);
            os.write(buf, 8);
        }
    }
}

void read_le_doubles(std::istream& is, std::vector<double>& values) {
    if constexpr (std::endian::native == std::endian::little) {
        is.read(reinterpret_cast<char*>(values.data()),
                static_cast<std::streamsize>(values.size() * sizeof(double)));
    } else {
        for (double& v : values) {
            unsigned char buf[8];
            is.read(reinterpret_cast<char*>(buf), 8);
            std::uint64_t bits = 0;
            for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(buf[b]) << (8 * b);
            v = std::bit_cast<double>(bits);
        }
    }
    if (!is) throw InputError("checkpoint truncated");
}

}  // namespace

void save_checkpoint(const ParameterStore& store, std::ostream& os) {
    for (const auto& p : store) {
        os << p.name << ' ' << p.value.shape.size();
        for (auto d : p.value.shape) os << ' ' << d;
        os << '\n';
        write_le_doubles(os, p.value.data);
    }
}

void save_checkpoint(const ParameterStore& store, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw InputError("cannot write checkpoint " + path.string());
    save_checkpoint(store, os);
}

std::vector<std::pair<std::string, Tensor>> read_checkpoint(std::istream& is) {
    std::vector<std::pair<std::string, Tensor>> out;
    std::string header;
    while (std::getline(is, header)) {
        if (header.empty()) continue;
        std::istringstream hs(header);
        std::string name;
        std::size_t rank = 0;
        if (!(hs >> name >> rank)) throw InputError("bad checkpoint header: " + header);
        Shape shape(rank);
        for (auto& d : shape)
            if (!(hs >> d)) throw InputError("bad checkpoint shape: " + header);
        Tensor t(shape);
        read_le_doubles(is, t.data);
        out.emplace_back(std::move(name), std::move(t));
    }
    return out;
}

std::vector<std::pair<std::string, Tensor>> read_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw InputError("cannot read checkpoint " + path.string());
    return read_checkpoint(is);
}

void load_checkpoint(ParameterStore& store, const std::filesystem::path& path) {
    for (auto& [name, t] : read_checkpoint(path)) {
        auto& p = store.get(name);
        if (!p.value.same_shape(t))
            throw InputError("checkpoint shape mismatch for " + name + ": " + shape_str(t.shape) +
                             " vs " + shape_str(p.value.shape));
        p.value = std::move(t);
    }
}

}  // namespace covft
