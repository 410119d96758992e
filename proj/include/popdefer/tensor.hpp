#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

#include "popdefer/error.hpp"
#include "popdefer/rng.hpp"

namespace popdefer {

// Dense row-major tensor of doubles. Everything in this project is rank 2
// (scalars are 1x1, row vectors 1xn), but the shape is kept general.
class Tensor {
public:
    Tensor() = default;

    Tensor(std::vector<std::size_t> shape, std::vector<double> values, bool requires_grad = false)
        : shape_(std::move(shape)), data_(std::move(values)), requires_grad_(requires_grad) {
        if (data_.size() != numel_from_shape(shape_))
            throw StructuralError("tensor value count " + std::to_string(data_.size()) +
                                  " does not match shape product " +
                                  std::to_string(numel_from_shape(shape_)));
    }

    static Tensor zeros(std::size_t rows, std::size_t cols) {
        return Tensor({rows, cols}, std::vector<double>(rows * cols, 0.0));
    }

    static Tensor full(std::size_t rows, std::size_t cols, double v) {
        return Tensor({rows, cols}, std::vector<double>(rows * cols, v));
    }

    static Tensor scalar(double v) { return Tensor({1, 1}, {v}); }

    static Tensor randn(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
        std::vector<double> v(rows * cols);
        for (double& x : v) x = rng.gauss(0.0, stddev);
        return Tensor({rows, cols}, std::move(v));
    }

    static Tensor row(const std::vector<double>& v) { return Tensor({1, v.size()}, v); }

    // Stacks equal-length feature vectors into an (n, f) matrix.
    static Tensor stack_rows(const std::vector<std::vector<double>>& rows) {
        if (rows.empty()) throw StructuralError("stack_rows: empty input");
        const std::size_t f = rows.front().size();
        std::vector<double> v;
        v.reserve(rows.size() * f);
        for (const auto& r : rows) {
            if (r.size() != f) throw StructuralError("stack_rows: ragged rows");
            v.insert(v.end(), r.begin(), r.end());
        }
        return Tensor({rows.size(), f}, std::move(v));
    }

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t numel() const { return data_.size(); }
    bool requires_grad() const { return requires_grad_; }
    void set_requires_grad(bool v) { requires_grad_ = v; }

    std::size_t rows() const {
        if (shape_.size() != 2) throw StructuralError("rows(): tensor is not rank 2");
        return shape_[0];
    }
    std::size_t cols() const {
        if (shape_.size() != 2) throw StructuralError("cols(): tensor is not rank 2");
        return shape_[1];
    }

    double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
    double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

    double scalar_value() const {
        if (numel() != 1) throw StructuralError("scalar_value(): tensor has more than one element");
        return data_[0];
    }

    double* raw() { return data_.data(); }
    const double* raw() const { return data_.data(); }
    std::vector<double>& data() { return data_; }
    const std::vector<double>& data() const { return data_; }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    void require_finite(const std::string& what) const {
        if (!all_finite()) throw NumericError(what + " contains a non-finite value");
    }

    std::string shape_str() const {
        std::string s = "(";
        for (std::size_t i = 0; i < shape_.size(); ++i)
            s += (i ? "," : "") + std::to_string(shape_[i]);
        return s + ")";
    }

    static std::size_t numel_from_shape(const std::vector<std::size_t>& shape) {
        std::size_t n = 1;
        for (std::size_t d : shape) {
            if (d == 0) throw StructuralError("tensor shape has a zero dimension");
            n *= d;
        }
        return n;
    }

private:
    std::vector<std::size_t> shape_{};
    std::vector<double> data_{};
    bool requires_grad_ = false;
};

}  // namespace popdefer
