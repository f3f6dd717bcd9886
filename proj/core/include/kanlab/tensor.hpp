#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "kanlab/errors.hpp"

namespace kanlab {

// Dense row-major tensor of 64-bit floats. The substrate for all math in the
// library; autodiff bookkeeping lives in Tape, not here.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> shape)
        : shape_(std::move(shape)), data_(count(shape_), 0.0) {}

    Tensor(std::vector<std::size_t> shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (count(shape_) != data_.size())
            throw ShapeError("Tensor: shape/data size mismatch");
    }

    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape()); }

    static Tensor full(std::vector<std::size_t> shape, double v) {
        Tensor t(std::move(shape));
        for (auto& x : t.data_) x = v;
        return t;
    }

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    std::size_t dim(std::size_t i) const { return shape_[i]; }

    std::span<const double> data() const { return data_; }
    std::span<double> data() { return data_; }
    const double* raw() const { return data_.data(); }
    double* raw() { return data_.data(); }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    double& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
    double at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
    double& at(std::size_t i, std::size_t j, std::size_t k) {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }
    double at(std::size_t i, std::size_t j, std::size_t k) const {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }

    bool is_scalar() const { return data_.size() == 1; }
    double item() const {
        if (!is_scalar()) throw ShapeError("Tensor::item on non-scalar");
        return data_[0];
    }

    Tensor reshaped(std::vector<std::size_t> new_shape) const {
        if (count(new_shape) != data_.size())
            throw ShapeError("Tensor::reshaped: element count mismatch");
        return Tensor(std::move(new_shape), data_);
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    bool all_finite() const;
    void fill(double v) { for (auto& x : data_) x = v; }

    static std::size_t count(const std::vector<std::size_t>& shape) {
        std::size_t n = 1;
        for (auto d : shape) n *= d;
        return shape.empty() ? 0 : n;
    }

    static std::string shape_str(const std::vector<std::size_t>& shape);
    std::string shape_str() const { return shape_str(shape_); }

private:
    std::vector<std::size_t> shape_;
    std::vector<double> data_;
};

}  // namespace kanlab
