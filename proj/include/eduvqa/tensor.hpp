#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace eduvqa::numerics {

using Shape = std::vector<std::size_t>;

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

std::size_t shape_size(const Shape& shape);
std::string shape_to_string(const Shape& shape);
std::string dtype_name(DType dtype);
DType parse_dtype(const std::string& name);

/// Dense row-major array. Values are held as double in memory; an f32 tensor
/// only ever holds values that are exactly representable as float, so that
/// serialization round-trips bit-exactly.
class Tensor {
public:
    /// 0-d scalar holding 0.
    Tensor();
    explicit Tensor(Shape shape, DType dtype = DType::f64);
    Tensor(Shape shape, std::vector<double> values, DType dtype = DType::f64);

    static Tensor scalar(double value, DType dtype = DType::f64);
    static Tensor filled(Shape shape, double value, DType dtype = DType::f64);
    static Tensor vector(std::initializer_list<double> values);
    static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_.size(); }
    std::size_t extent(std::size_t axis) const;
    DType dtype() const noexcept { return dtype_; }

    std::span<const double> values() const noexcept { return data_; }
    std::span<double> values() noexcept { return data_; }
    const std::vector<double>& data() const noexcept { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    /// Value of a single-element tensor.
    double item() const;

    /// Copy converted to the requested dtype (rounding through float for f32).
    Tensor as_dtype(DType dtype) const;
    Tensor reshaped(Shape shape) const;

    bool all_finite() const noexcept;

private:
    Shape shape_;
    DType dtype_ = DType::f64;
    std::vector<double> data_;
};

/// Same shape, same dtype, and bit-identical payload.
bool bit_equal(const Tensor& a, const Tensor& b) noexcept;

/// Summation whose result does not depend on the order of the inputs.
double ordered_sum(std::span<const double> values);

}  // namespace eduvqa::numerics
