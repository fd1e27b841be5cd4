#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace covft {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major array of doubles. Plain value type: no graph linkage.
struct Tensor {
    Shape shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(Shape s, double fill = 0.0);
    Tensor(Shape s, std::vector<double> values);

    static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
    static Tensor from(std::initializer_list<std::initializer_list<double>> rows);
    static Tensor vector(std::vector<double> values);

    std::size_t numel() const noexcept { return data.size(); }
    std::size_t rank() const noexcept { return shape.size(); }
    /// Leading extent for 2-D tensors; 1 for vectors.
    std::size_t rows() const noexcept { return shape.size() >= 2 ? shape[0] : 1; }
    /// Trailing extent.
    std::size_t cols() const noexcept { return shape.empty() ? 1 : shape.back(); }

    double& operator()(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

    std::span<double> row(std::size_t r) { return {data.data() + r * cols(), cols()}; }
    std::span<const double> row(std::size_t r) const { return {data.data() + r * cols(), cols()}; }

    bool same_shape(const Tensor& other) const noexcept { return shape == other.shape; }
};

double dot(std::span<const double> a, std::span<const double> b);
double l2_norm(std::span<const double> a);
/// Cosine similarity; returns 0 when either vector is all zeros.
double cosine(std::span<const double> a, std::span<const double> b);
double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace covft
