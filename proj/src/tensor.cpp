#include "eduvqa/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "eduvqa/errors.hpp"

namespace eduvqa::numerics {

namespace {

void check_extents(const Shape& shape) {
    for (std::size_t e : shape) {
        if (e == 0) {
            throw ShapeError("tensor extents must be positive, got " + shape_to_string(shape));
        }
    }
}

void round_to(DType dtype, std::vector<double>& values) {
    if (dtype == DType::f32) {
        for (double& v : values) v = static_cast<double>(static_cast<float>(v));
    }
}

}  // namespace

std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_to_string(const Shape& shape) {
    std::string out = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(shape[i]);
    }
    return out + "]";
}

std::string dtype_name(DType dtype) { return dtype == DType::f32 ? "float32" : "float64"; }

DType parse_dtype(const std::string& name) {
    if (name == "float32" || name == "f32") return DType::f32;
    if (name == "float64" || name == "f64") return DType::f64;
    throw ConfigError("unknown dtype '" + name + "' (expected float32 or float64)");
}

Tensor::Tensor() : data_(1, 0.0) {}

Tensor::Tensor(Shape shape, DType dtype) : shape_(std::move(shape)), dtype_(dtype) {
    check_extents(shape_);
    data_.assign(shape_size(shape_), 0.0);
}

Tensor::Tensor(Shape shape, std::vector<double> values, DType dtype)
    : shape_(std::move(shape)), dtype_(dtype), data_(std::move(values)) {
    check_extents(shape_);
    if (data_.size() != shape_size(shape_)) {
        throw ShapeError("tensor of shape " + shape_to_string(shape_) + " needs " +
                         std::to_string(shape_size(shape_)) + " values, got " +
                         std::to_string(data_.size()));
    }
    round_to(dtype_, data_);
}

Tensor Tensor::scalar(double value, DType dtype) { return Tensor({}, {value}, dtype); }

Tensor Tensor::filled(Shape shape, double value, DType dtype) {
    std::vector<double> values(shape_size(shape), value);
    return Tensor(std::move(shape), std::move(values), dtype);
}

Tensor Tensor::vector(std::initializer_list<double> values) {
    return Tensor({values.size()}, std::vector<double>(values));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t cols = rows.size() ? rows.begin()->size() : 0;
    std::vector<double> values;
    for (const auto& row : rows) {
        if (row.size() != cols) throw ShapeError("ragged matrix literal");
        values.insert(values.end(), row.begin(), row.end());
    }
    return Tensor({rows.size(), cols}, std::move(values));
}

std::size_t Tensor::extent(std::size_t axis) const {
    if (axis >= shape_.size()) {
        throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " +
                         shape_to_string(shape_));
    }
    return shape_[axis];
}

double Tensor::item() const {
    if (data_.size() != 1) {
        throw ShapeError("item() on tensor of shape " + shape_to_string(shape_));
    }
    return data_[0];
}

Tensor Tensor::as_dtype(DType dtype) const { return Tensor(shape_, data_, dtype); }

Tensor Tensor::reshaped(Shape shape) const {
    if (shape_size(shape) != data_.size()) {
        throw ShapeError("cannot reshape " + shape_to_string(shape_) + " to " +
                         shape_to_string(shape));
    }
    return Tensor(std::move(shape), data_, dtype_);
}

bool Tensor::all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

bool bit_equal(const Tensor& a, const Tensor& b) noexcept {
    if (a.shape() != b.shape() || a.dtype() != b.dtype()) return false;
    return std::memcmp(a.values().data(), b.values().data(), a.size() * sizeof(double)) == 0;
}

double ordered_sum(std::span<const double> values) {
    if (values.size() <= 1) return values.empty() ? 0.0 : values[0];
    if (values.size() == 2) return values[0] + values[1];
    std::vector<double> sorted(values.begin(), values.end());
    std::sort(sorted.begin(), sorted.end());
    double total = 0.0;
    for (double v : sorted) total += v;
    return total;
}

}  // namespace eduvqa::numerics
