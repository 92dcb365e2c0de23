#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "errors.hpp"

namespace hammer {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
    std::ostringstream out;
    out << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        out << (i ? "x" : "") << shape[i];
    }
    out << ']';
    return out.str();
}

// Dense row-major tensor of doubles. Rank-1 tensors behave as a single row
// wherever a matrix view is needed.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, double fill = 0.0)
        : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

    Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (shape_size(shape_) != data_.size()) {
            throw ShapeError("tensor shape " + shape_string(shape_) + " holds " +
                             std::to_string(shape_size(shape_)) + " values but " +
                             std::to_string(data_.size()) + " were supplied");
        }
    }

    static Tensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0) {
        return Tensor({rows, cols}, fill);
    }

    static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
        const std::size_t r = rows.size();
        const std::size_t c = r ? rows.begin()->size() : 0;
        std::vector<double> data;
        data.reserve(r * c);
        for (const auto& row : rows) {
            if (row.size() != c) {
                throw ShapeError("ragged matrix literal");
            }
            data.insert(data.end(), row.begin(), row.end());
        }
        return Tensor({r, c}, std::move(data));
    }

    static Tensor row_vector(std::vector<double> values) {
        const std::size_t n = values.size();
        return Tensor({1, n}, std::move(values));
    }

    static Tensor scalar(double value) { return Tensor({1, 1}, std::vector<double>{value}); }

    [[nodiscard]] const Shape& shape() const { return shape_; }
    [[nodiscard]] std::size_t rank() const { return shape_.size(); }
    [[nodiscard]] std::size_t size() const { return data_.size(); }
    [[nodiscard]] bool empty() const { return data_.empty(); }

    [[nodiscard]] std::size_t rows() const {
        if (shape_.size() <= 1) return 1;
        return shape_size(Shape(shape_.begin(), shape_.end() - 1));
    }
    [[nodiscard]] std::size_t cols() const { return shape_.empty() ? 1 : shape_.back(); }

    [[nodiscard]] std::span<double> data() { return data_; }
    [[nodiscard]] std::span<const double> data() const { return data_; }
    [[nodiscard]] std::vector<double>& storage() { return data_; }
    [[nodiscard]] const std::vector<double>& storage() const { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

    [[nodiscard]] std::span<double> row(std::size_t r) { return {data_.data() + r * cols(), cols()}; }
    [[nodiscard]] std::span<const double> row(std::size_t r) const {
        return {data_.data() + r * cols(), cols()};
    }

    [[nodiscard]] double item() const {
        if (data_.size() != 1) {
            throw ShapeError("item() on tensor of shape " + shape_string(shape_));
        }
        return data_[0];
    }

    void fill(double value) { std::fill(data_.begin(), data_.end(), value); }

    Tensor reshaped(Shape shape) const {
        if (shape_size(shape) != data_.size()) {
            throw ShapeError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
        }
        return Tensor(std::move(shape), data_);
    }

    bool operator==(const Tensor& other) const = default;

private:
    Shape shape_;
    std::vector<double> data_;
};

namespace kernels {

// C[m x n] += A[m x k] * B[k x n]
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        double* crow = c + i * n;
        const double* arow = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            const double* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
}

// C[m x n] += A[m x k] * B[n x k]^T
inline void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const double* brow = b + j * k;
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) {
                acc += arow[p] * brow[p];
            }
            crow[j] += acc;
        }
    }
}

// C[k x n] += A[m x k]^T * B[m x n]
inline void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        const double* brow = b + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            double* crow = c + p * n;
            for (std::size_t j = 0; j < n; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
}

} // namespace kernels

} // namespace hammer
