#include "covft/tensor.hpp"

#include "covft/error.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

namespace covft {

std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
    std::string out = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(shape[i]);
    }
    return out + "]";
}

Tensor::Tensor(Shape s, double fill) : shape(std::move(s)), data(shape_numel(shape), fill) {}

Tensor::Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
    if (shape_numel(shape) != data.size())
        throw DimensionError("tensor data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
}

Tensor Tensor::from(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    Tensor t({r, c});
    std::size_t i = 0;
    for (const auto& row : rows) {
        if (row.size() != c) throw DimensionError("ragged initializer");
        for (double v : row) t.data[i++] = v;
    }
    return t;
}

Tensor Tensor::vector(std::vector<double> values) {
    const std::size_t n = values.size();
    return Tensor({n}, std::move(values));
}

double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double l2_norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

double cosine(std::span<const double> a, std::span<const double> b) {
    const double na = l2_norm(a);
    const double nb = l2_norm(b);
    if (na == 0.0 || nb == 0.0) return 0.0;
    return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b))
        throw DimensionError("max_abs_diff: " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    double m = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
    return m;
}

}  // namespace covft
